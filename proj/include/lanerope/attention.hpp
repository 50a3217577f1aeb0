#pragma once

// Cross-lane causal attention over interleaved token layouts.
//
// A group of N lanes shares one flat token order: step-major, lane-minor, so
// with rectangular lanes the token at (lane m, step i) sits at flat index
// i*N + m. Lanes may be ragged (a finished lane simply stops contributing
// steps); the flat order is always sorted by (step, lane).
//
// Default visibility: a query at (m, i) sees key (n, j) iff j < i, or n == m
// and j <= i. Same-step tokens of other lanes are invisible, which keeps the
// lanes exchangeable within a step. The interleaved-causal alternative
// (j*N + n <= i*N + m) can be switched on for compatibility experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "lanerope/common.hpp"
#include "lanerope/rope.hpp"

namespace lanerope::attention {

struct Coord {
    int lane = 0;
    int step = 0;
    bool operator==(const Coord&) const = default;
};

struct MaskRule {
    bool same_step_cross_lane_visible = false;
};

inline bool visible(Coord q, Coord k, const MaskRule& rule, int group_size) {
    if (rule.same_step_cross_lane_visible) {
        long long qi = static_cast<long long>(q.step) * group_size + q.lane;
        long long ki = static_cast<long long>(k.step) * group_size + k.lane;
        return ki <= qi;
    }
    if (k.step < q.step) return true;
    return k.lane == q.lane && k.step == q.step;
}

struct LaneLayout {
    int group_size = 1;
    int prompt_len = 0;
    std::vector<Coord> coords;      // sorted by (step, lane)
    std::vector<int> per_lane_len;  // steps held by each lane
    std::vector<int> per_lane_start;

    int size() const { return static_cast<int>(coords.size()); }
};

inline LaneLayout make_layout(const std::vector<int>& per_lane_len, int prompt_len = 0,
                              const std::vector<int>& per_lane_start = {}) {
    if (per_lane_len.empty()) throw invalid_parameter_error("make_layout: need at least one lane");
    LaneLayout out;
    out.group_size = static_cast<int>(per_lane_len.size());
    out.prompt_len = prompt_len;
    out.per_lane_len = per_lane_len;
    out.per_lane_start = per_lane_start.empty() ? std::vector<int>(per_lane_len.size(), 0) : per_lane_start;
    if (out.per_lane_start.size() != per_lane_len.size())
        throw invalid_parameter_error("make_layout: per_lane_start size mismatch");
    for (int m = 0; m < out.group_size; ++m)
        for (int i = 0; i < per_lane_len[m]; ++i)
            out.coords.push_back({m, out.per_lane_start[m] + i});
    std::sort(out.coords.begin(), out.coords.end(),
              [](const Coord& a, const Coord& b) { return a.step != b.step ? a.step < b.step : a.lane < b.lane; });
    return out;
}

// Step-major, lane-minor flattening. Round-trips with deinterleave for any
// ragged shape.
template <class T>
inline std::pair<std::vector<T>, LaneLayout> interleave(const std::vector<std::vector<T>>& lanes,
                                                        int prompt_len = 0) {
    std::vector<int> lens;
    lens.reserve(lanes.size());
    for (const auto& l : lanes) lens.push_back(static_cast<int>(l.size()));
    LaneLayout layout = make_layout(lens, prompt_len);
    std::vector<T> flat;
    flat.reserve(layout.coords.size());
    for (const Coord& c : layout.coords) flat.push_back(lanes[c.lane][c.step]);
    return {std::move(flat), std::move(layout)};
}

template <class T>
inline std::vector<std::vector<T>> deinterleave(const std::vector<T>& flat, const LaneLayout& layout) {
    if (static_cast<int>(flat.size()) != layout.size())
        throw invalid_parameter_error("deinterleave: flat length does not match layout");
    std::vector<std::vector<T>> lanes(layout.group_size);
    for (int m = 0; m < layout.group_size; ++m) lanes[m].resize(layout.per_lane_len[m]);
    for (int p = 0; p < layout.size(); ++p) {
        const Coord& c = layout.coords[p];
        lanes[c.lane][c.step - layout.per_lane_start[c.lane]] = flat[p];
    }
    return lanes;
}

struct AttnOptions {
    // When set, Q/K arrive un-rotated and the lane rotations (and the
    // lane-only rotation of the bias block) are applied here.
    bool apply_rotations = false;
    // Q/K carry only the d content dims; the Fourier bias is added to the
    // scores analytically instead of through augmented dims. Equivalent to
    // the augmented form as long as the augmentation rows are zero.
    bool analytic_bias = false;
    // Overrides the score divisor dimension (0 = d + F).
    int score_dim_override = 0;
};

namespace detail {

template <class S>
inline void rotate_qk_row(S* row, Coord c, const rope::LaneRopeParams& lp) {
    const auto& theta = lp.rope.theta;
    const auto& omega = lp.omega;
    for (size_t l = 0; l < theta.size(); ++l) {
        double a = theta[l] * static_cast<double>(c.step) + omega[l] * static_cast<double>(c.lane);
        rope::rotate_plane(row[2 * l], row[2 * l + 1], a);
    }
    // Bias planes turn with the lane only; position leaves them fixed.
    S* b = row + lp.rope.head_dim;
    for (int t = 0; t < lp.bias_dim / 2; ++t) {
        double a = rope::kTwoPi * lp.bias_freqs[static_cast<size_t>(t)] * static_cast<double>(c.lane);
        rope::rotate_plane(b[2 * t], b[2 * t + 1], a);
    }
}

inline double score_scale(const rope::LaneRopeParams& lp, const AttnOptions& opt) {
    int dim = opt.score_dim_override > 0 ? opt.score_dim_override : lp.rope.head_dim + lp.bias_dim;
    return 1.0 / std::sqrt(static_cast<double>(dim));
}

}  // namespace detail

// Production path: per query, visible keys form a contiguous prefix of the
// flat order (all strictly earlier steps) plus a short same-step tail, so the
// inner loops run over ranges instead of testing the mask per pair.
// Softmax subtracts the row max; score and value sums accumulate in double.
template <class S>
inline Mat<S> cross_lane_attention(const Mat<S>& Q, const Mat<S>& K, const Mat<S>& V,
                                   const LaneLayout& layout, const rope::LaneRopeParams& lp,
                                   const MaskRule& rule, const AttnOptions& opt = {},
                                   Mat<double>* probs_out = nullptr) {
    const int L = layout.size();
    const int qk_dim = opt.analytic_bias ? lp.rope.head_dim : lp.rope.head_dim + lp.bias_dim;
    if (Q.rows != L || K.rows != L || V.rows != L)
        throw invalid_parameter_error("cross_lane_attention: row count must match layout");
    if (Q.cols != qk_dim || K.cols != qk_dim)
        throw invalid_parameter_error("cross_lane_attention: unexpected Q/K width");

    Mat<S> Qr = Q, Kr = K;
    if (opt.apply_rotations) {
        if (opt.analytic_bias) {
            rope::LaneRopeParams noaug = lp;
            noaug.bias_dim = 0;
            noaug.bias_freqs.clear();
            noaug.bias_coeffs.clear();
            for (int p = 0; p < L; ++p) {
                detail::rotate_qk_row(Qr.row(p), layout.coords[p], noaug);
                detail::rotate_qk_row(Kr.row(p), layout.coords[p], noaug);
            }
        } else {
            for (int p = 0; p < L; ++p) {
                detail::rotate_qk_row(Qr.row(p), layout.coords[p], lp);
                detail::rotate_qk_row(Kr.row(p), layout.coords[p], lp);
            }
        }
    }

    const double scale = detail::score_scale(lp, opt);
    Mat<S> out(L, V.cols);
    if (probs_out) *probs_out = Mat<double>(L, L);

    std::vector<double> scores(static_cast<size_t>(L));
    std::vector<int> keys(static_cast<size_t>(L));
    for (int p = 0; p < L; ++p) {
        const Coord q = layout.coords[p];
        int n_keys = 0;
        // Earlier steps are a prefix of the flat order.
        int cut = p;
        while (cut > 0 && layout.coords[cut - 1].step >= q.step) --cut;
        for (int j = 0; j < cut; ++j) keys[n_keys++] = j;
        // Same-step tail: self, or lanes up to and including ours.
        for (int j = cut; j < L && layout.coords[j].step == q.step; ++j) {
            if (layout.coords[j].lane > q.lane) break;
            if (rule.same_step_cross_lane_visible || layout.coords[j].lane == q.lane) keys[n_keys++] = j;
        }
        if (n_keys == 0) throw contract_violation_error("cross_lane_attention: query with no visible keys");

        double mx = -1e300;
        for (int s = 0; s < n_keys; ++s) {
            const int j = keys[s];
            const S* qr = Qr.row(p);
            const S* kr = Kr.row(j);
            double dot = 0.0;
            for (int c = 0; c < qk_dim; ++c) dot += static_cast<double>(qr[c]) * static_cast<double>(kr[c]);
            if (opt.analytic_bias)
                dot += rope::fourier_bias_value(lp.bias_coeffs, lp.bias_freqs,
                                                static_cast<double>(q.lane - layout.coords[j].lane));
            scores[static_cast<size_t>(s)] = dot * scale;
            mx = std::max(mx, scores[static_cast<size_t>(s)]);
        }
        double denom = 0.0;
        for (int s = 0; s < n_keys; ++s) {
            scores[static_cast<size_t>(s)] = std::exp(scores[static_cast<size_t>(s)] - mx);
            denom += scores[static_cast<size_t>(s)];
        }
        for (int c = 0; c < V.cols; ++c) {
            double acc = 0.0;
            for (int s = 0; s < n_keys; ++s)
                acc += scores[static_cast<size_t>(s)] * static_cast<double>(V.at(keys[s], c));
            out.at(p, c) = static_cast<S>(acc / denom);
        }
        if (probs_out)
            for (int s = 0; s < n_keys; ++s) probs_out->at(p, keys[s]) = scores[static_cast<size_t>(s)] / denom;
    }
    return out;
}

// Reference implementation: materialize the full mask, two nested loops,
// nothing shared with the production path beyond the rotation helper.
template <class S>
inline Mat<S> dense_oracle_attention(const Mat<S>& Q, const Mat<S>& K, const Mat<S>& V,
                                     const LaneLayout& layout, const rope::LaneRopeParams& lp,
                                     const MaskRule& rule, const AttnOptions& opt = {},
                                     Mat<double>* probs_out = nullptr) {
    const int L = layout.size();
    const int qk_dim = opt.analytic_bias ? lp.rope.head_dim : lp.rope.head_dim + lp.bias_dim;
    if (Q.rows != L || K.rows != L || V.rows != L)
        throw invalid_parameter_error("dense_oracle_attention: row count must match layout");
    if (Q.cols != qk_dim || K.cols != qk_dim)
        throw invalid_parameter_error("dense_oracle_attention: unexpected Q/K width");

    Mat<S> Qr = Q, Kr = K;
    if (opt.apply_rotations) {
        rope::LaneRopeParams eff = lp;
        if (opt.analytic_bias) {
            eff.bias_dim = 0;
            eff.bias_freqs.clear();
            eff.bias_coeffs.clear();
        }
        for (int p = 0; p < L; ++p) {
            detail::rotate_qk_row(Qr.row(p), layout.coords[p], eff);
            detail::rotate_qk_row(Kr.row(p), layout.coords[p], eff);
        }
    }

    Mat<uint8_t> mask(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            mask.at(i, j) = visible(layout.coords[i], layout.coords[j], rule, layout.group_size) ? 1 : 0;

    const double scale = detail::score_scale(lp, opt);
    Mat<double> scores(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            double dot = 0.0;
            for (int c = 0; c < qk_dim; ++c)
                dot += static_cast<double>(Qr.at(i, c)) * static_cast<double>(Kr.at(j, c));
            if (opt.analytic_bias)
                dot += rope::fourier_bias_value(lp.bias_coeffs, lp.bias_freqs,
                                                static_cast<double>(layout.coords[i].lane - layout.coords[j].lane));
            scores.at(i, j) = dot * scale;
        }

    Mat<S> out(L, V.cols);
    if (probs_out) *probs_out = Mat<double>(L, L);
    for (int i = 0; i < L; ++i) {
        double mx = -1e300;
        int n_vis = 0;
        for (int j = 0; j < L; ++j)
            if (mask.at(i, j)) {
                mx = std::max(mx, scores.at(i, j));
                ++n_vis;
            }
        if (n_vis == 0) throw contract_violation_error("dense_oracle_attention: query with no visible keys");
        double denom = 0.0;
        std::vector<double> p(static_cast<size_t>(L), 0.0);
        for (int j = 0; j < L; ++j)
            if (mask.at(i, j)) {
                p[static_cast<size_t>(j)] = std::exp(scores.at(i, j) - mx);
                denom += p[static_cast<size_t>(j)];
            }
        for (int c = 0; c < V.cols; ++c) {
            double acc = 0.0;
            for (int j = 0; j < L; ++j) acc += p[static_cast<size_t>(j)] * static_cast<double>(V.at(j, c));
            out.at(i, c) = static_cast<S>(acc / denom);
        }
        if (probs_out)
            for (int j = 0; j < L; ++j) probs_out->at(i, j) = p[static_cast<size_t>(j)] / denom;
    }
    return out;
}

}  // namespace lanerope::attention
