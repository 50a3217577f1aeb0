#pragma once

// Toy decoder-only transformer wired for lane-aware attention.
//
// Pre-norm RMSNorm blocks, multi-head attention, two-matrix MLP with
// x*logistic(x). Query/key projections are n_heads*(d+F) wide: per head, the
// first d rows are content dims rotated by position and lane, the last F rows
// are the bias block rotated by lane only. Scores divide by sqrt(d+F).
//
// forward() keeps a full activation trace; backward() consumes it and
// produces exact gradients for every parameter, the lane frequencies omega
// included. Everything is templated on the scalar so the same code runs in
// float for speed and double for finite-difference checks. Dot products and
// reductions accumulate in double regardless of the storage scalar.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lanerope/attention.hpp"
#include "lanerope/common.hpp"
#include "lanerope/rope.hpp"

namespace lanerope::model {

struct ModelConfig {
    int vocab_size = 0;
    int model_dim = 0;
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;   // d, content dims per head
    int mlp_hidden = 0;
    int bias_dim = 0;   // F, augmented dims per head
    int max_steps = 0;  // positions the model may see
    bool tied_unembedding = false;
    double rms_eps = 1e-5;
    // Test hook: replaces the d+F score divisor dimension when positive, so a
    // plain model can be compared against an augmented one at equal softmax
    // temperature.
    int score_dim_override = 0;
    rope::LaneRopeParams lane;

    int qk_dim() const { return head_dim + bias_dim; }
    int qk_width() const { return n_heads * qk_dim(); }
    int v_width() const { return n_heads * head_dim; }

    void validate() const {
        if (vocab_size <= 0 || model_dim <= 0 || n_layers <= 0 || n_heads <= 0 || mlp_hidden <= 0 ||
            max_steps <= 0)
            throw invalid_parameter_error("ModelConfig: dimensions must be positive");
        if (model_dim != n_heads * head_dim)
            throw invalid_parameter_error("ModelConfig: model_dim must equal n_heads * head_dim");
        if (head_dim <= 0 || head_dim % 2 != 0)
            throw invalid_parameter_error("ModelConfig: head_dim must be positive and even");
        if (bias_dim < 0 || bias_dim % 2 != 0)
            throw invalid_parameter_error("ModelConfig: bias_dim must be even and non-negative");
        if (lane.rope.head_dim != head_dim)
            throw invalid_parameter_error("ModelConfig: lane params head_dim mismatch");
        if (lane.omega.size() != static_cast<size_t>(head_dim / 2))
            throw invalid_parameter_error("ModelConfig: lane omega size mismatch");
        if (lane.bias_dim != bias_dim || lane.bias_freqs.size() != static_cast<size_t>(bias_dim / 2))
            throw invalid_parameter_error("ModelConfig: lane bias dims mismatch");
    }
};

template <class S>
struct LayerParams {
    Mat<S> wq, wk;          // [n_heads*(d+F), model_dim]
    std::vector<S> bq, bk;  // [n_heads*(d+F)]
    Mat<S> wv;              // [n_heads*d, model_dim]
    Mat<S> wo;              // [model_dim, n_heads*d]
    std::vector<S> attn_gain, mlp_gain;  // [model_dim]
    Mat<S> w1;              // [mlp_hidden, model_dim]
    Mat<S> w2;              // [model_dim, mlp_hidden]
};

template <class S>
struct ModelParameters {
    Mat<S> embed;  // [vocab, model_dim]
    std::vector<LayerParams<S>> layers;
    std::vector<S> final_gain;
    Mat<S> unembed;        // [vocab, model_dim]; ignored when tied
    std::vector<S> omega;  // [head_dim/2] trainable lane frequencies
    bool tied = false;

    // Visits every trainable array in a fixed order. The name is stable and
    // doubles as the checkpoint key.
    template <class Fn>
    void for_each_array(Fn&& fn) {
        fn("embed", embed.v.data(), embed.v.size(), std::vector<int>{embed.rows, embed.cols});
        for (size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            std::string p = "layers." + std::to_string(i) + ".";
            fn(p + "wq", l.wq.v.data(), l.wq.v.size(), std::vector<int>{l.wq.rows, l.wq.cols});
            fn(p + "bq", l.bq.data(), l.bq.size(), std::vector<int>{static_cast<int>(l.bq.size())});
            fn(p + "wk", l.wk.v.data(), l.wk.v.size(), std::vector<int>{l.wk.rows, l.wk.cols});
            fn(p + "bk", l.bk.data(), l.bk.size(), std::vector<int>{static_cast<int>(l.bk.size())});
            fn(p + "wv", l.wv.v.data(), l.wv.v.size(), std::vector<int>{l.wv.rows, l.wv.cols});
            fn(p + "wo", l.wo.v.data(), l.wo.v.size(), std::vector<int>{l.wo.rows, l.wo.cols});
            fn(p + "attn_gain", l.attn_gain.data(), l.attn_gain.size(),
               std::vector<int>{static_cast<int>(l.attn_gain.size())});
            fn(p + "w1", l.w1.v.data(), l.w1.v.size(), std::vector<int>{l.w1.rows, l.w1.cols});
            fn(p + "w2", l.w2.v.data(), l.w2.v.size(), std::vector<int>{l.w2.rows, l.w2.cols});
            fn(p + "mlp_gain", l.mlp_gain.data(), l.mlp_gain.size(),
               std::vector<int>{static_cast<int>(l.mlp_gain.size())});
        }
        fn("final_gain", final_gain.data(), final_gain.size(),
           std::vector<int>{static_cast<int>(final_gain.size())});
        if (!tied)
            fn("unembed", unembed.v.data(), unembed.v.size(), std::vector<int>{unembed.rows, unembed.cols});
        fn("omega", omega.data(), omega.size(), std::vector<int>{static_cast<int>(omega.size())});
    }

    static ModelParameters shaped_like(const ModelConfig& cfg) {
        ModelParameters p;
        p.embed = Mat<S>(cfg.vocab_size, cfg.model_dim);
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& l : p.layers) {
            l.wq = Mat<S>(cfg.qk_width(), cfg.model_dim);
            l.wk = Mat<S>(cfg.qk_width(), cfg.model_dim);
            l.bq.assign(static_cast<size_t>(cfg.qk_width()), S(0));
            l.bk.assign(static_cast<size_t>(cfg.qk_width()), S(0));
            l.wv = Mat<S>(cfg.v_width(), cfg.model_dim);
            l.wo = Mat<S>(cfg.model_dim, cfg.v_width());
            l.attn_gain.assign(static_cast<size_t>(cfg.model_dim), S(0));
            l.mlp_gain.assign(static_cast<size_t>(cfg.model_dim), S(0));
            l.w1 = Mat<S>(cfg.mlp_hidden, cfg.model_dim);
            l.w2 = Mat<S>(cfg.model_dim, cfg.mlp_hidden);
        }
        p.final_gain.assign(static_cast<size_t>(cfg.model_dim), S(0));
        p.unembed = Mat<S>(cfg.vocab_size, cfg.model_dim);
        p.omega.assign(cfg.lane.omega.begin(), cfg.lane.omega.end());
        p.tied = cfg.tied_unembedding;
        return p;
    }

    static ModelParameters zeros_like(const ModelConfig& cfg) {
        ModelParameters p = shaped_like(cfg);
        std::fill(p.omega.begin(), p.omega.end(), S(0));
        return p;
    }

    static ModelParameters random_init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        ModelParameters p = shaped_like(cfg);
        rng::Stream rs(seed, 0x6d6f64656cull);
        auto fill = [&](Mat<S>& m, double std) {
            for (auto& x : m.v) x = static_cast<S>(rs.normal() * std);
        };
        const double base_std = 0.02;
        fill(p.embed, base_std);
        for (auto& l : p.layers) {
            fill(l.wq, base_std);
            fill(l.wk, base_std);
            fill(l.wv, base_std);
            fill(l.wo, base_std / std::sqrt(2.0 * cfg.n_layers));
            fill(l.w1, base_std);
            fill(l.w2, base_std / std::sqrt(2.0 * cfg.n_layers));
            std::fill(l.attn_gain.begin(), l.attn_gain.end(), S(1));
            std::fill(l.mlp_gain.begin(), l.mlp_gain.end(), S(1));
        }
        std::fill(p.final_gain.begin(), p.final_gain.end(), S(1));
        if (!cfg.tied_unembedding) fill(p.unembed, base_std);
        return p;
    }
};

// --- augmentation ------------------------------------------------------------

struct InitStrategy {
    rope::LaneInit kind = rope::LaneInit::ntk;
    long long sequence_gap = 8192;
    int n_max = 2;
    double bias_norm = 0.0;
    double ramp_alpha = 4.0;
    double ramp_beta = 32.0;
};

inline ModelConfig augment_config(const ModelConfig& base, const InitStrategy& strat) {
    if (base.bias_dim != 0)
        throw invalid_parameter_error("augment_config: base model is already augmented");
    ModelConfig cfg = base;
    cfg.lane = rope::LaneRopeParams::make(base.head_dim, base.lane.rope.base, strat.kind,
                                          strat.sequence_gap, static_cast<double>(base.max_steps),
                                          strat.n_max, strat.bias_norm, strat.ramp_alpha, strat.ramp_beta);
    cfg.bias_dim = cfg.lane.bias_dim;
    return cfg;
}

// Widens q/k by F dims per head: new weight rows are zero, new bias entries
// carry the Fourier coefficients (identical across heads). With those rows at
// zero the extra dims contribute exactly beta(lane offset) to every score and
// nothing else, so per-lane behaviour matches the base model.
template <class S>
inline ModelParameters<S> init_from_base(const ModelConfig& base_cfg, const ModelParameters<S>& base,
                                         const ModelConfig& aug_cfg) {
    aug_cfg.validate();
    const int d = base_cfg.head_dim, f = aug_cfg.bias_dim, nh = base_cfg.n_heads;
    ModelParameters<S> out = ModelParameters<S>::shaped_like(aug_cfg);
    out.embed = base.embed;
    out.final_gain = base.final_gain;
    out.unembed = base.unembed;
    out.tied = base.tied;
    for (int li = 0; li < base_cfg.n_layers; ++li) {
        const auto& bl = base.layers[static_cast<size_t>(li)];
        auto& ol = out.layers[static_cast<size_t>(li)];
        ol.wv = bl.wv;
        ol.wo = bl.wo;
        ol.w1 = bl.w1;
        ol.w2 = bl.w2;
        ol.attn_gain = bl.attn_gain;
        ol.mlp_gain = bl.mlp_gain;
        for (int h = 0; h < nh; ++h) {
            for (int r = 0; r < d; ++r) {
                for (int c = 0; c < base_cfg.model_dim; ++c) {
                    ol.wq.at(h * (d + f) + r, c) = bl.wq.at(h * d + r, c);
                    ol.wk.at(h * (d + f) + r, c) = bl.wk.at(h * d + r, c);
                }
                ol.bq[static_cast<size_t>(h * (d + f) + r)] = bl.bq[static_cast<size_t>(h * d + r)];
                ol.bk[static_cast<size_t>(h * (d + f) + r)] = bl.bk[static_cast<size_t>(h * d + r)];
            }
            for (int r = 0; r < f; ++r) {
                // weight rows stay zero
                S coeff = static_cast<S>(aug_cfg.lane.bias_coeffs[static_cast<size_t>(r)]);
                ol.bq[static_cast<size_t>(h * (d + f) + d + r)] = coeff;
                ol.bk[static_cast<size_t>(h * (d + f) + d + r)] = coeff;
            }
        }
    }
    out.omega.assign(aug_cfg.lane.omega.begin(), aug_cfg.lane.omega.end());
    return out;
}

// --- row-level primitives (shared with the generation engine) ----------------

namespace detail {

template <class S>
inline void rms_norm_row(const S* x, const S* gain, int n, double eps, S* out) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += static_cast<double>(x[i]) * static_cast<double>(x[i]);
    double inv = 1.0 / std::sqrt(s / n + eps);
    for (int i = 0; i < n; ++i) out[i] = static_cast<S>(static_cast<double>(gain[i]) * static_cast<double>(x[i]) * inv);
}

// out[o] = sum_i w[o,i] * x[i] + (b ? b[o] : 0)
template <class S>
inline void matvec_row(const Mat<S>& w, const S* x, const S* b, S* out) {
    for (int o = 0; o < w.rows; ++o) {
        const S* wr = w.row(o);
        double acc = b ? static_cast<double>(b[o]) : 0.0;
        for (int i = 0; i < w.cols; ++i) acc += static_cast<double>(wr[i]) * static_cast<double>(x[i]);
        out[o] = static_cast<S>(acc);
    }
}

// Rotates one token's q or k row (all heads) in place.
template <class S>
inline void rotate_heads_row(const ModelConfig& cfg, const std::vector<S>& omega, S* row,
                             attention::Coord c) {
    const int d = cfg.head_dim, f = cfg.bias_dim;
    for (int h = 0; h < cfg.n_heads; ++h) {
        S* hr = row + h * (d + f);
        for (int l = 0; l < d / 2; ++l) {
            double a = cfg.lane.rope.theta[static_cast<size_t>(l)] * static_cast<double>(c.step) +
                       static_cast<double>(omega[static_cast<size_t>(l)]) * static_cast<double>(c.lane);
            rope::rotate_plane(hr[2 * l], hr[2 * l + 1], a);
        }
        for (int t = 0; t < f / 2; ++t) {
            double a = rope::kTwoPi * cfg.lane.bias_freqs[static_cast<size_t>(t)] * static_cast<double>(c.lane);
            rope::rotate_plane(hr[d + 2 * t], hr[d + 2 * t + 1], a);
        }
    }
}

template <class S>
inline double silu(S x) {
    double v = static_cast<double>(x);
    return v / (1.0 + std::exp(-v));
}

inline double silu_grad(double v) {
    double sg = 1.0 / (1.0 + std::exp(-v));
    return sg * (1.0 + v * (1.0 - sg));
}

}  // namespace detail

// --- forward ------------------------------------------------------------------

template <class S>
struct LayerTrace {
    Mat<S> x_in, attn_normed;
    Mat<S> q_rot, k_rot;  // [L, n_heads*(d+F)], rotations applied
    Mat<S> v;             // [L, n_heads*d]
    std::vector<Mat<double>> probs;  // per head, [L, L], invisible entries zero
    Mat<S> attn_mix;      // [L, n_heads*d] attention-weighted values
    Mat<S> mlp_in, mlp_normed;
    Mat<S> mlp_pre;       // [L, hidden] pre-activation
};

template <class S>
struct ForwardTrace {
    std::vector<int> tokens;
    attention::LaneLayout layout;
    attention::MaskRule rule;
    std::vector<LayerTrace<S>> layers;
    Mat<S> final_in, final_normed;
    Mat<S> logits;
};

// Test hook: adds beta(lane offset) analytically to the scores of a plain
// model, mimicking an augmented model with zero augmentation rows. bias_dim
// enters the score divisor even though no dims are materialized.
struct AnalyticBias {
    int bias_dim = 0;
    std::vector<double> freqs;
    std::vector<double> coeffs;
};

// Full forward over an interleaved token group.
template <class S>
inline ForwardTrace<S> forward(const ModelConfig& cfg, const ModelParameters<S>& params,
                               const std::vector<int>& tokens, const attention::LaneLayout& layout,
                               const attention::MaskRule& rule, const AnalyticBias* analytic = nullptr) {
    cfg.validate();
    const int L = layout.size();
    if (static_cast<int>(tokens.size()) != L)
        throw invalid_parameter_error("forward: token count must match layout");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw invalid_parameter_error("forward: token id out of range");
    for (const auto& c : layout.coords)
        if (c.step >= cfg.max_steps) throw budget_error("forward: position exceeds max_steps");
    if (analytic && cfg.bias_dim != 0)
        throw invalid_parameter_error("forward: analytic bias requires an un-augmented model");

    const int dm = cfg.model_dim, d = cfg.head_dim, f = cfg.bias_dim;
    const int qkw = cfg.qk_width(), vw = cfg.v_width();

    ForwardTrace<S> tr;
    tr.tokens = tokens;
    tr.layout = layout;
    tr.rule = rule;
    tr.layers.resize(static_cast<size_t>(cfg.n_layers));

    Mat<S> x(L, dm);
    for (int p = 0; p < L; ++p) {
        const S* er = params.embed.row(tokens[static_cast<size_t>(p)]);
        for (int c = 0; c < dm; ++c) x.at(p, c) = er[c];
    }

    attention::AttnOptions aopt;
    aopt.score_dim_override = cfg.score_dim_override > 0 ? cfg.score_dim_override : 0;
    rope::LaneRopeParams score_lp = cfg.lane;  // carries d and F for the divisor
    if (analytic) {
        aopt.analytic_bias = true;
        score_lp.bias_dim = analytic->bias_dim;
        score_lp.bias_freqs = analytic->freqs;
        score_lp.bias_coeffs = analytic->coeffs;
    }

    for (int li = 0; li < cfg.n_layers; ++li) {
        auto& t = tr.layers[static_cast<size_t>(li)];
        const auto& lp = params.layers[static_cast<size_t>(li)];
        t.x_in = x;
        t.attn_normed = Mat<S>(L, dm);
        t.q_rot = Mat<S>(L, qkw);
        t.k_rot = Mat<S>(L, qkw);
        t.v = Mat<S>(L, vw);
        for (int p = 0; p < L; ++p) {
            detail::rms_norm_row(x.row(p), lp.attn_gain.data(), dm, cfg.rms_eps, t.attn_normed.row(p));
            detail::matvec_row(lp.wq, t.attn_normed.row(p), lp.bq.data(), t.q_rot.row(p));
            detail::matvec_row(lp.wk, t.attn_normed.row(p), lp.bk.data(), t.k_rot.row(p));
            detail::matvec_row(lp.wv, t.attn_normed.row(p), static_cast<const S*>(nullptr), t.v.row(p));
            detail::rotate_heads_row(cfg, params.omega, t.q_rot.row(p), layout.coords[static_cast<size_t>(p)]);
            detail::rotate_heads_row(cfg, params.omega, t.k_rot.row(p), layout.coords[static_cast<size_t>(p)]);
        }
        t.probs.resize(static_cast<size_t>(cfg.n_heads));
        t.attn_mix = Mat<S>(L, vw);
        for (int h = 0; h < cfg.n_heads; ++h) {
            Mat<S> qh(L, d + f), kh(L, d + f), vh(L, d);
            for (int p = 0; p < L; ++p) {
                const S* qr = t.q_rot.row(p) + h * (d + f);
                const S* kr = t.k_rot.row(p) + h * (d + f);
                const S* vr = t.v.row(p) + h * d;
                for (int c = 0; c < d + f; ++c) {
                    qh.at(p, c) = qr[c];
                    kh.at(p, c) = kr[c];
                }
                for (int c = 0; c < d; ++c) vh.at(p, c) = vr[c];
            }
            Mat<S> oh = attention::cross_lane_attention(qh, kh, vh, layout, score_lp, rule, aopt,
                                                        &t.probs[static_cast<size_t>(h)]);
            for (int p = 0; p < L; ++p)
                for (int c = 0; c < d; ++c) t.attn_mix.at(p, h * d + c) = oh.at(p, c);
        }
        t.mlp_in = Mat<S>(L, dm);
        for (int p = 0; p < L; ++p) {
            std::vector<S> proj(static_cast<size_t>(dm));
            detail::matvec_row(lp.wo, t.attn_mix.row(p), static_cast<const S*>(nullptr), proj.data());
            for (int c = 0; c < dm; ++c) t.mlp_in.at(p, c) = static_cast<S>(x.at(p, c) + proj[static_cast<size_t>(c)]);
        }
        t.mlp_normed = Mat<S>(L, dm);
        t.mlp_pre = Mat<S>(L, cfg.mlp_hidden);
        x = Mat<S>(L, dm);
        for (int p = 0; p < L; ++p) {
            detail::rms_norm_row(t.mlp_in.row(p), lp.mlp_gain.data(), dm, cfg.rms_eps, t.mlp_normed.row(p));
            detail::matvec_row(lp.w1, t.mlp_normed.row(p), static_cast<const S*>(nullptr), t.mlp_pre.row(p));
            std::vector<S> act(static_cast<size_t>(cfg.mlp_hidden));
            for (int hh = 0; hh < cfg.mlp_hidden; ++hh)
                act[static_cast<size_t>(hh)] = static_cast<S>(detail::silu(t.mlp_pre.at(p, hh)));
            std::vector<S> proj(static_cast<size_t>(dm));
            detail::matvec_row(lp.w2, act.data(), static_cast<const S*>(nullptr), proj.data());
            for (int c = 0; c < dm; ++c) x.at(p, c) = static_cast<S>(t.mlp_in.at(p, c) + proj[static_cast<size_t>(c)]);
        }
    }

    tr.final_in = x;
    tr.final_normed = Mat<S>(L, dm);
    tr.logits = Mat<S>(L, cfg.vocab_size);
    const Mat<S>& un = cfg.tied_unembedding ? params.embed : params.unembed;
    for (int p = 0; p < L; ++p) {
        detail::rms_norm_row(x.row(p), params.final_gain.data(), dm, cfg.rms_eps, tr.final_normed.row(p));
        detail::matvec_row(un, tr.final_normed.row(p), static_cast<const S*>(nullptr), tr.logits.row(p));
    }
    return tr;
}

// --- loss and backward ---------------------------------------------------------

// Mean cross-entropy over masked positions. mask[p] != 0 marks positions that
// contribute; targets at unmasked positions are ignored.
template <class S>
inline double masked_cross_entropy(const Mat<S>& logits, const std::vector<int>& targets,
                                   const std::vector<uint8_t>& mask) {
    if (static_cast<int>(targets.size()) != logits.rows || mask.size() != targets.size())
        throw invalid_parameter_error("masked_cross_entropy: size mismatch");
    long n = 0;
    double total = 0.0;
    for (int p = 0; p < logits.rows; ++p) {
        if (!mask[static_cast<size_t>(p)]) continue;
        const S* lr = logits.row(p);
        double mx = -1e300;
        for (int c = 0; c < logits.cols; ++c) mx = std::max(mx, static_cast<double>(lr[c]));
        double denom = 0.0;
        for (int c = 0; c < logits.cols; ++c) denom += std::exp(static_cast<double>(lr[c]) - mx);
        int tgt = targets[static_cast<size_t>(p)];
        if (tgt < 0 || tgt >= logits.cols) throw invalid_parameter_error("masked_cross_entropy: bad target id");
        total += -(static_cast<double>(lr[tgt]) - mx - std::log(denom));
        ++n;
    }
    if (n == 0) throw invalid_parameter_error("masked_cross_entropy: empty loss mask");
    return total / static_cast<double>(n);
}

namespace detail {

// dW[o,i] += sum_p dy[p,o] * x[p,i];  dx[p,i] += sum_o dy[p,o] * w[o,i]
template <class S>
inline void matvec_backward(const Mat<S>& w, const Mat<S>& x, const Mat<S>& dy, Mat<S>& dw, Mat<S>* dx) {
    for (int o = 0; o < w.rows; ++o)
        for (int i = 0; i < w.cols; ++i) {
            double acc = 0.0;
            for (int p = 0; p < x.rows; ++p)
                acc += static_cast<double>(dy.at(p, o)) * static_cast<double>(x.at(p, i));
            dw.at(o, i) = static_cast<S>(static_cast<double>(dw.at(o, i)) + acc);
        }
    if (dx)
        for (int p = 0; p < x.rows; ++p)
            for (int i = 0; i < w.cols; ++i) {
                double acc = 0.0;
                for (int o = 0; o < w.rows; ++o)
                    acc += static_cast<double>(dy.at(p, o)) * static_cast<double>(w.at(o, i));
                dx->at(p, i) = static_cast<S>(static_cast<double>(dx->at(p, i)) + acc);
            }
}

template <class S>
inline void rms_norm_backward(const Mat<S>& x, const std::vector<S>& gain, double eps, const Mat<S>& dy,
                              Mat<S>& dx, std::vector<S>& dgain) {
    const int n = x.cols;
    for (int p = 0; p < x.rows; ++p) {
        const S* xr = x.row(p);
        const S* dyr = dy.row(p);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += static_cast<double>(xr[i]) * static_cast<double>(xr[i]);
        double inv = 1.0 / std::sqrt(s / n + eps);
        double dot = 0.0;  // sum_i dy_i * g_i * x_i
        for (int i = 0; i < n; ++i)
            dot += static_cast<double>(dyr[i]) * static_cast<double>(gain[static_cast<size_t>(i)]) *
                   static_cast<double>(xr[i]);
        for (int i = 0; i < n; ++i) {
            double g = static_cast<double>(gain[static_cast<size_t>(i)]);
            double grad = inv * g * static_cast<double>(dyr[i]) -
                          inv * inv * inv / n * static_cast<double>(xr[i]) * dot;
            dx.at(p, i) = static_cast<S>(static_cast<double>(dx.at(p, i)) + grad);
            dgain[static_cast<size_t>(i)] = static_cast<S>(
                static_cast<double>(dgain[static_cast<size_t>(i)]) +
                static_cast<double>(dyr[i]) * static_cast<double>(xr[i]) * inv);
        }
    }
}

}  // namespace detail

// Reverse pass from arbitrary logit gradients. Returns gradients shaped like
// the parameters; grads.omega collects the lane-frequency gradient across all
// layers, heads and tokens.
template <class S>
inline ModelParameters<S> backward(const ModelConfig& cfg, const ModelParameters<S>& params,
                                   const ForwardTrace<S>& tr, const Mat<S>& dlogits) {
    const int L = tr.layout.size();
    const int dm = cfg.model_dim, d = cfg.head_dim, f = cfg.bias_dim;
    if (dlogits.rows != L || dlogits.cols != cfg.vocab_size)
        throw invalid_parameter_error("backward: dlogits shape mismatch");

    ModelParameters<S> g = ModelParameters<S>::zeros_like(cfg);
    g.tied = params.tied;

    const Mat<S>& un = cfg.tied_unembedding ? params.embed : params.unembed;
    Mat<S>& dun = cfg.tied_unembedding ? g.embed : g.unembed;

    Mat<S> dfinal_normed(L, dm);
    detail::matvec_backward(un, tr.final_normed, dlogits, dun, static_cast<Mat<S>*>(nullptr));
    for (int p = 0; p < L; ++p)
        for (int i = 0; i < dm; ++i) {
            double acc = 0.0;
            for (int o = 0; o < cfg.vocab_size; ++o)
                acc += static_cast<double>(dlogits.at(p, o)) * static_cast<double>(un.at(o, i));
            dfinal_normed.at(p, i) = static_cast<S>(acc);
        }

    Mat<S> dx(L, dm);
    detail::rms_norm_backward(tr.final_in, params.final_gain, cfg.rms_eps, dfinal_normed, dx, g.final_gain);

    const double scale =
        1.0 / std::sqrt(static_cast<double>(cfg.score_dim_override > 0 ? cfg.score_dim_override : d + f));

    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const auto& t = tr.layers[static_cast<size_t>(li)];
        const auto& lp = params.layers[static_cast<size_t>(li)];
        auto& lg = g.layers[static_cast<size_t>(li)];

        // MLP block backward: x_out = mlp_in + w2 * silu(w1 * normed(mlp_in))
        Mat<S> dact(L, cfg.mlp_hidden);
        for (int p = 0; p < L; ++p)
            for (int h = 0; h < cfg.mlp_hidden; ++h) {
                double acc = 0.0;
                for (int o = 0; o < dm; ++o)
                    acc += static_cast<double>(dx.at(p, o)) * static_cast<double>(lp.w2.at(o, h));
                dact.at(p, h) = static_cast<S>(acc);
            }
        Mat<S> act(L, cfg.mlp_hidden);
        for (int p = 0; p < L; ++p)
            for (int h = 0; h < cfg.mlp_hidden; ++h)
                act.at(p, h) = static_cast<S>(detail::silu(t.mlp_pre.at(p, h)));
        detail::matvec_backward(lp.w2, act, dx, lg.w2, static_cast<Mat<S>*>(nullptr));
        Mat<S> dpre(L, cfg.mlp_hidden);
        for (int p = 0; p < L; ++p)
            for (int h = 0; h < cfg.mlp_hidden; ++h)
                dpre.at(p, h) = static_cast<S>(static_cast<double>(dact.at(p, h)) *
                                               detail::silu_grad(static_cast<double>(t.mlp_pre.at(p, h))));
        Mat<S> dmlp_normed(L, dm);
        detail::matvec_backward(lp.w1, t.mlp_normed, dpre, lg.w1, &dmlp_normed);
        // residual: dx (from above) plus the norm path into mlp_in
        detail::rms_norm_backward(t.mlp_in, lp.mlp_gain, cfg.rms_eps, dmlp_normed, dx, lg.mlp_gain);

        // Attention block backward: mlp_in = x_in + wo * attn_mix
        Mat<S> dmix(L, cfg.v_width());
        for (int p = 0; p < L; ++p)
            for (int c = 0; c < cfg.v_width(); ++c) {
                double acc = 0.0;
                for (int o = 0; o < dm; ++o)
                    acc += static_cast<double>(dx.at(p, o)) * static_cast<double>(lp.wo.at(o, c));
                dmix.at(p, c) = static_cast<S>(acc);
            }
        detail::matvec_backward(lp.wo, t.attn_mix, dx, lg.wo, static_cast<Mat<S>*>(nullptr));

        Mat<S> dq_rot(L, cfg.qk_width()), dk_rot(L, cfg.qk_width()), dv(L, cfg.v_width());
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat<double>& P = t.probs[static_cast<size_t>(h)];
            // dV and dS
            for (int j = 0; j < L; ++j)
                for (int c = 0; c < d; ++c) {
                    double acc = 0.0;
                    for (int i = 0; i < L; ++i)
                        acc += P.at(i, j) * static_cast<double>(dmix.at(i, h * d + c));
                    dv.at(j, h * d + c) = static_cast<S>(acc);
                }
            std::vector<double> dp_row(static_cast<size_t>(L));
            for (int i = 0; i < L; ++i) {
                double rowdot = 0.0;
                for (int j = 0; j < L; ++j) {
                    if (P.at(i, j) == 0.0) {
                        dp_row[static_cast<size_t>(j)] = 0.0;
                        continue;
                    }
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c)
                        acc += static_cast<double>(dmix.at(i, h * d + c)) * static_cast<double>(t.v.at(j, h * d + c));
                    dp_row[static_cast<size_t>(j)] = acc;
                    rowdot += P.at(i, j) * acc;
                }
                for (int j = 0; j < L; ++j) {
                    double pij = P.at(i, j);
                    if (pij == 0.0) continue;
                    double ds = pij * (dp_row[static_cast<size_t>(j)] - rowdot) * scale;
                    const S* krj = t.k_rot.row(j) + h * (d + f);
                    const S* qri = t.q_rot.row(i) + h * (d + f);
                    S* dqi = dq_rot.row(i) + h * (d + f);
                    S* dkj = dk_rot.row(j) + h * (d + f);
                    for (int c = 0; c < d + f; ++c) {
                        dqi[c] = static_cast<S>(static_cast<double>(dqi[c]) + ds * static_cast<double>(krj[c]));
                        dkj[c] = static_cast<S>(static_cast<double>(dkj[c]) + ds * static_cast<double>(qri[c]));
                    }
                }
            }
        }

        // Rotation backward. d(rotated)/d(angle) = J * rotated with
        // J(x, y) = (y, -x), so the angle gradient needs only the rotated
        // values; un-rotating the upstream grads recovers dq_hat/dk_hat.
        Mat<S> dq_hat = dq_rot, dk_hat = dk_rot;
        for (int p = 0; p < L; ++p) {
            const attention::Coord c = tr.layout.coords[static_cast<size_t>(p)];
            for (int h = 0; h < cfg.n_heads; ++h) {
                const int off = h * (d + f);
                for (int l = 0; l < d / 2; ++l) {
                    double a = cfg.lane.rope.theta[static_cast<size_t>(l)] * static_cast<double>(c.step) +
                               static_cast<double>(params.omega[static_cast<size_t>(l)]) *
                                   static_cast<double>(c.lane);
                    double qx = static_cast<double>(t.q_rot.at(p, off + 2 * l));
                    double qy = static_cast<double>(t.q_rot.at(p, off + 2 * l + 1));
                    double kx = static_cast<double>(t.k_rot.at(p, off + 2 * l));
                    double ky = static_cast<double>(t.k_rot.at(p, off + 2 * l + 1));
                    double da_q = static_cast<double>(dq_rot.at(p, off + 2 * l)) * qy -
                                  static_cast<double>(dq_rot.at(p, off + 2 * l + 1)) * qx;
                    double da_k = static_cast<double>(dk_rot.at(p, off + 2 * l)) * ky -
                                  static_cast<double>(dk_rot.at(p, off + 2 * l + 1)) * kx;
                    g.omega[static_cast<size_t>(l)] = static_cast<S>(
                        static_cast<double>(g.omega[static_cast<size_t>(l)]) +
                        static_cast<double>(c.lane) * (da_q + da_k));
                    rope::rotate_plane(dq_hat.at(p, off + 2 * l), dq_hat.at(p, off + 2 * l + 1), -a);
                    rope::rotate_plane(dk_hat.at(p, off + 2 * l), dk_hat.at(p, off + 2 * l + 1), -a);
                }
                for (int tt = 0; tt < f / 2; ++tt) {
                    double a = rope::kTwoPi * cfg.lane.bias_freqs[static_cast<size_t>(tt)] *
                               static_cast<double>(c.lane);
                    rope::rotate_plane(dq_hat.at(p, off + d + 2 * tt), dq_hat.at(p, off + d + 2 * tt + 1), -a);
                    rope::rotate_plane(dk_hat.at(p, off + d + 2 * tt), dk_hat.at(p, off + d + 2 * tt + 1), -a);
                }
            }
        }

        // Projection backward into weights, biases and the normed input.
        Mat<S> dnormed(L, dm);
        detail::matvec_backward(lp.wq, t.attn_normed, dq_hat, lg.wq, &dnormed);
        detail::matvec_backward(lp.wk, t.attn_normed, dk_hat, lg.wk, &dnormed);
        detail::matvec_backward(lp.wv, t.attn_normed, dv, lg.wv, &dnormed);
        for (int p = 0; p < L; ++p)
            for (int o = 0; o < cfg.qk_width(); ++o) {
                lg.bq[static_cast<size_t>(o)] = static_cast<S>(static_cast<double>(lg.bq[static_cast<size_t>(o)]) +
                                                               static_cast<double>(dq_hat.at(p, o)));
                lg.bk[static_cast<size_t>(o)] = static_cast<S>(static_cast<double>(lg.bk[static_cast<size_t>(o)]) +
                                                               static_cast<double>(dk_hat.at(p, o)));
            }
        detail::rms_norm_backward(t.x_in, lp.attn_gain, cfg.rms_eps, dnormed, dx, lg.attn_gain);
    }

    for (int p = 0; p < L; ++p) {
        S* er = g.embed.row(tr.tokens[static_cast<size_t>(p)]);
        for (int c = 0; c < dm; ++c)
            er[c] = static_cast<S>(static_cast<double>(er[c]) + static_cast<double>(dx.at(p, c)));
    }
    return g;
}

// Convenience wrapper: masked-mean cross-entropy gradients.
template <class S>
inline ModelParameters<S> backward_cross_entropy(const ModelConfig& cfg, const ModelParameters<S>& params,
                                                 const ForwardTrace<S>& tr, const std::vector<int>& targets,
                                                 const std::vector<uint8_t>& mask, double* loss_out = nullptr) {
    const int L = tr.layout.size();
    long n = 0;
    for (uint8_t m : mask)
        if (m) ++n;
    if (n == 0) throw invalid_parameter_error("backward_cross_entropy: empty loss mask");
    if (loss_out) *loss_out = masked_cross_entropy(tr.logits, targets, mask);
    Mat<S> dlogits(L, cfg.vocab_size);
    for (int p = 0; p < L; ++p) {
        if (!mask[static_cast<size_t>(p)]) continue;
        const S* lr = tr.logits.row(p);
        double mx = -1e300;
        for (int c = 0; c < cfg.vocab_size; ++c) mx = std::max(mx, static_cast<double>(lr[c]));
        double denom = 0.0;
        for (int c = 0; c < cfg.vocab_size; ++c) denom += std::exp(static_cast<double>(lr[c]) - mx);
        for (int c = 0; c < cfg.vocab_size; ++c) {
            double sm = std::exp(static_cast<double>(lr[c]) - mx) / denom;
            double tgt = (c == targets[static_cast<size_t>(p)]) ? 1.0 : 0.0;
            dlogits.at(p, c) = static_cast<S>((sm - tgt) / static_cast<double>(n));
        }
    }
    return backward(cfg, params, tr, dlogits);
}

}  // namespace lanerope::model
