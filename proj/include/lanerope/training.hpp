#pragma once

// Supervised finetuning over multi-lane collaborative traces and a
// preference-optimization variant with an asymmetric value function and a
// frozen reference model, plus AdamW and a warmup+cosine schedule.
//
// Policy likelihoods are computed with cross-lane attention active (the N
// completions of a group share one interleaved layout); reference
// likelihoods run each completion alone. Two parameter families train at an
// elevated rate: the lane frequencies and the bias coefficients living in
// the augmented tail of the q/k bias vectors. Weight decay applies to
// everything except the lane frequencies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lanerope/attention.hpp"
#include "lanerope/common.hpp"
#include "lanerope/model.hpp"

namespace lanerope::training {

// Logistic for x >= 0, x + 1/2 below: continuous at 0, strictly increasing
// everywhere, saturates only as x -> +inf. Monotonicity is what gives the
// preference loss the right gradient sign on both sides of zero; the
// negative branch stays linear so mass pushed onto bad completions is
// penalized without bound.
inline double asymmetric_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    return x + 0.5;
}

// d/dx of asymmetric_sigmoid; the kink at 0 takes the logistic side.
inline double asymmetric_sigmoid_grad(double x) {
    if (x >= 0.0) {
        double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 - s);
    }
    return 1.0;
}

struct KtoConfig {
    double beta = 0.1;
    double lambda_d = 1.0;
    double lambda_u = 0.7;
    // Ablation: divide each completion's log-likelihood gap by its length.
    bool length_normalized = false;

    void validate() const {
        if (!(beta > 0.0)) throw invalid_parameter_error("KtoConfig: beta must be > 0");
        if (lambda_d < 0.0 || lambda_u < 0.0) throw invalid_parameter_error("KtoConfig: lambdas must be >= 0");
    }
};

// Per-sample loss term (lambda_label - v) and its derivative in delta.
inline double kto_sample_term(double delta, bool desirable, const KtoConfig& kc) {
    if (desirable) return kc.lambda_d - kc.lambda_d * asymmetric_sigmoid(kc.beta * delta);
    return kc.lambda_u - kc.lambda_u * asymmetric_sigmoid(-kc.beta * delta);
}

inline double kto_sample_grad(double delta, bool desirable, const KtoConfig& kc) {
    if (desirable) return -kc.lambda_d * kc.beta * asymmetric_sigmoid_grad(kc.beta * delta);
    return kc.lambda_u * kc.beta * asymmetric_sigmoid_grad(-kc.beta * delta);
}

// Scalar loss over scored groups: mean of the per-sample terms, pooled
// across groups. Every group must contain at least one desirable sample.
struct ScoredGroup {
    std::vector<double> delta;
    std::vector<uint8_t> desirable;
};

inline double kto_loss(const std::vector<ScoredGroup>& groups, const KtoConfig& kc) {
    kc.validate();
    double total = 0.0;
    long n = 0;
    for (const auto& g : groups) {
        if (g.delta.size() != g.desirable.size() || g.delta.empty())
            throw invalid_parameter_error("kto_loss: group shape mismatch");
        if (std::find(g.desirable.begin(), g.desirable.end(), uint8_t(1)) == g.desirable.end())
            throw invalid_parameter_error("kto_loss: group without a desirable sample");
        for (size_t i = 0; i < g.delta.size(); ++i) {
            total += kto_sample_term(g.delta[i], g.desirable[i] != 0, kc);
            ++n;
        }
    }
    if (n == 0) throw invalid_parameter_error("kto_loss: no samples");
    return total / static_cast<double>(n);
}

// --- likelihoods -----------------------------------------------------------------

// Flat position of (lane, step) in a layout.
inline std::vector<std::vector<int>> layout_index(const attention::LaneLayout& layout) {
    std::vector<std::vector<int>> idx(static_cast<size_t>(layout.group_size));
    for (int m = 0; m < layout.group_size; ++m)
        idx[static_cast<size_t>(m)].assign(static_cast<size_t>(layout.per_lane_len[static_cast<size_t>(m)]), -1);
    for (int p = 0; p < layout.size(); ++p) {
        const attention::Coord c = layout.coords[static_cast<size_t>(p)];
        idx[static_cast<size_t>(c.lane)][static_cast<size_t>(c.step - layout.per_lane_start[static_cast<size_t>(c.lane)])] = p;
    }
    return idx;
}

namespace detail {

inline double log_softmax_at(const float* row, int n, int tok) {
    double mx = -1e300;
    for (int c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double denom = 0.0;
    for (int c = 0; c < n; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
    return static_cast<double>(row[tok]) - mx - std::log(denom);
}

inline double log_softmax_at(const double* row, int n, int tok) {
    double mx = -1e300;
    for (int c = 0; c < n; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < n; ++c) denom += std::exp(row[c] - mx);
    return row[tok] - mx - std::log(denom);
}

}  // namespace detail

// Summed log-likelihood of each completion given the shared prompt.
// cross_lane: all completions share one interleaved layout (prompt
// replicated per lane); otherwise each completion runs alone as lane 0.
// The prompt itself never contributes.
template <class S>
inline std::vector<double> completion_logprobs(const model::ModelConfig& cfg,
                                               const model::ModelParameters<S>& params,
                                               const std::vector<int>& prompt,
                                               const std::vector<std::vector<int>>& completions,
                                               bool cross_lane) {
    if (prompt.empty()) throw invalid_parameter_error("completion_logprobs: empty prompt");
    const int P = static_cast<int>(prompt.size());
    const int N = static_cast<int>(completions.size());
    if (N == 0) throw invalid_parameter_error("completion_logprobs: no completions");
    for (const auto& c : completions)
        if (c.empty()) throw invalid_parameter_error("completion_logprobs: empty completion");
    attention::MaskRule rule;

    auto logprob_from_trace = [&](const model::ForwardTrace<S>& tr, const std::vector<std::vector<int>>& idx,
                                  int lane, const std::vector<int>& completion) {
        double lp = 0.0;
        for (size_t t = 0; t < completion.size(); ++t) {
            int from = idx[static_cast<size_t>(lane)][static_cast<size_t>(P) + t - 1];
            lp += detail::log_softmax_at(tr.logits.row(from), cfg.vocab_size, completion[t]);
        }
        return lp;
    };

    std::vector<double> out(static_cast<size_t>(N));
    if (cross_lane) {
        std::vector<std::vector<int>> lanes(static_cast<size_t>(N));
        for (int m = 0; m < N; ++m) {
            lanes[static_cast<size_t>(m)] = prompt;
            lanes[static_cast<size_t>(m)].insert(lanes[static_cast<size_t>(m)].end(),
                                                 completions[static_cast<size_t>(m)].begin(),
                                                 completions[static_cast<size_t>(m)].end());
        }
        auto [flat, layout] = attention::interleave(lanes, P);
        auto idx = layout_index(layout);
        auto tr = model::forward(cfg, params, flat, layout, rule);
        for (int m = 0; m < N; ++m) out[static_cast<size_t>(m)] = logprob_from_trace(tr, idx, m, completions[static_cast<size_t>(m)]);
    } else {
        for (int m = 0; m < N; ++m) {
            std::vector<std::vector<int>> one{prompt};
            one[0].insert(one[0].end(), completions[static_cast<size_t>(m)].begin(),
                          completions[static_cast<size_t>(m)].end());
            auto [flat, layout] = attention::interleave(one, P);
            auto idx = layout_index(layout);
            auto tr = model::forward(cfg, params, flat, layout, rule);
            out[static_cast<size_t>(m)] = logprob_from_trace(tr, idx, 0, completions[static_cast<size_t>(m)]);
        }
    }
    return out;
}

// --- datasets --------------------------------------------------------------------

// One teacher-forced group flattened to layout order. mask[p] marks logits
// positions that carry a loss; targets[p] is the next own-lane token there.
struct SftBatch {
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<uint8_t> mask;
    attention::LaneLayout layout;
};

// is_target[m][i] marks lane tokens the model must predict (from the
// position before them). Index 0 can never be a target.
inline SftBatch make_sft_batch(const std::vector<std::vector<int>>& lane_tokens,
                               const std::vector<std::vector<uint8_t>>& is_target, int prompt_len) {
    if (lane_tokens.empty() || lane_tokens.size() != is_target.size())
        throw invalid_parameter_error("make_sft_batch: lane shape mismatch");
    std::vector<int> lens;
    for (size_t m = 0; m < lane_tokens.size(); ++m) {
        if (lane_tokens[m].size() != is_target[m].size())
            throw invalid_parameter_error("make_sft_batch: mask shape mismatch");
        if (!is_target[m].empty() && is_target[m][0])
            throw invalid_parameter_error("make_sft_batch: first token cannot be a target");
        lens.push_back(static_cast<int>(lane_tokens[m].size()));
    }
    SftBatch b;
    b.layout = attention::make_layout(lens, prompt_len);
    const int L = b.layout.size();
    b.tokens.resize(static_cast<size_t>(L));
    b.targets.assign(static_cast<size_t>(L), 0);
    b.mask.assign(static_cast<size_t>(L), 0);
    auto idx = layout_index(b.layout);
    for (int p = 0; p < L; ++p) {
        const attention::Coord c = b.layout.coords[static_cast<size_t>(p)];
        b.tokens[static_cast<size_t>(p)] = lane_tokens[static_cast<size_t>(c.lane)][static_cast<size_t>(c.step)];
    }
    for (size_t m = 0; m < lane_tokens.size(); ++m)
        for (size_t i = 1; i < lane_tokens[m].size(); ++i)
            if (is_target[m][i]) {
                int from = idx[m][i - 1];
                b.mask[static_cast<size_t>(from)] = 1;
                b.targets[static_cast<size_t>(from)] = lane_tokens[m][i];
            }
    return b;
}

// Mean cross-entropy pooled over every masked position of every group.
template <class S>
inline double sft_loss(const model::ModelConfig& cfg, const model::ModelParameters<S>& params,
                       const std::vector<SftBatch>& batches) {
    attention::MaskRule rule;
    double total = 0.0;
    long n = 0;
    for (const auto& b : batches) {
        long nb = 0;
        for (uint8_t m : b.mask)
            if (m) ++nb;
        if (nb == 0) continue;
        auto tr = model::forward(cfg, params, b.tokens, b.layout, rule);
        total += model::masked_cross_entropy(tr.logits, b.targets, b.mask) * static_cast<double>(nb);
        n += nb;
    }
    if (n == 0) throw invalid_parameter_error("sft_loss: empty loss mask");
    return total / static_cast<double>(n);
}

// One preference group: N completions of one prompt, each labeled.
struct PreferenceGroup {
    int query_id = 0;
    std::vector<int> prompt;
    std::vector<std::vector<int>> completions;
    std::vector<uint8_t> desirable;

    void validate() const {
        const size_t n = completions.size();
        if (n < 2 || n > 4) throw invalid_parameter_error("PreferenceGroup: lane count must be 2..4");
        if (desirable.size() != n) throw invalid_parameter_error("PreferenceGroup: label shape mismatch");
        if (prompt.empty()) throw invalid_parameter_error("PreferenceGroup: empty prompt");
        for (const auto& c : completions)
            if (c.empty()) throw invalid_parameter_error("PreferenceGroup: empty completion");
        if (std::find(desirable.begin(), desirable.end(), uint8_t(1)) == desirable.end())
            throw invalid_parameter_error("PreferenceGroup: no desirable completion");
    }
};

// --- optimizer -------------------------------------------------------------------

struct OptimConfig {
    double lr = 3e-4;
    double fast_lr = 1e-2;  // lane frequencies and bias coefficients
    double warmup_ratio = 0.1;
    double weight_decay = 5e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int epochs = 1;
    int batch_size = 8;
    bool shuffle = true;
    uint64_t seed = 0;
    int checkpoint_interval = 0;  // steps; 0 disables

    void validate() const {
        if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
            throw invalid_parameter_error("OptimConfig: warmup_ratio must be in [0, 1)");
        if (lr < 0.0 || fast_lr < 0.0 || weight_decay < 0.0)
            throw invalid_parameter_error("OptimConfig: rates must be >= 0");
        if (epochs < 1 || batch_size < 1)
            throw invalid_parameter_error("OptimConfig: epochs and batch_size must be >= 1");
    }
};

// Linear warmup to the peak, cosine decay after; returns a multiplier.
inline double schedule_multiplier(int step, int total_steps, double warmup_ratio) {
    if (total_steps <= 0) throw invalid_parameter_error("schedule_multiplier: total_steps must be > 0");
    const int warmup = static_cast<int>(std::floor(warmup_ratio * total_steps));
    if (warmup > 0 && step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
    const int rest = std::max(1, total_steps - warmup);
    double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(rest));
    return 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// AdamW with decoupled decay. Decay skips the lane frequencies; the lane
// frequencies and the bias-coefficient tail of bq/bk (entry e of a head
// block with e mod (d+F) >= d) move at fast_lr.
template <class S>
class AdamW {
  public:
    AdamW(const model::ModelConfig& cfg, const OptimConfig& oc)
        : cfg_(cfg),
          oc_(oc),
          m_(model::ModelParameters<S>::zeros_like(cfg)),
          v_(model::ModelParameters<S>::zeros_like(cfg)) {
        oc.validate();
    }

    void step(model::ModelParameters<S>& params, model::ModelParameters<S>& grads, double mult) {
        ++t_;
        auto ps = slots(params);
        auto gs = slots(grads);
        auto ms = slots(m_);
        auto vs = slots(v_);
        const double c1 = 1.0 - std::pow(oc_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(oc_.beta2, static_cast<double>(t_));
        const int qk = cfg_.qk_dim();
        for (size_t a = 0; a < ps.size(); ++a) {
            const bool is_omega = ps[a].name == "omega";
            const bool is_qk_bias = ends_with(ps[a].name, ".bq") || ends_with(ps[a].name, ".bk");
            for (size_t i = 0; i < ps[a].n; ++i) {
                const bool fast =
                    is_omega || (is_qk_bias && cfg_.bias_dim > 0 &&
                                 static_cast<int>(i % static_cast<size_t>(qk)) >= cfg_.head_dim);
                const double lr = mult * (fast ? oc_.fast_lr : oc_.lr);
                const double wd = is_omega ? 0.0 : oc_.weight_decay;
                double g = static_cast<double>(gs[a].p[i]);
                double m = oc_.beta1 * static_cast<double>(ms[a].p[i]) + (1.0 - oc_.beta1) * g;
                double v = oc_.beta2 * static_cast<double>(vs[a].p[i]) + (1.0 - oc_.beta2) * g * g;
                ms[a].p[i] = static_cast<S>(m);
                vs[a].p[i] = static_cast<S>(v);
                double upd = (m / c1) / (std::sqrt(v / c2) + oc_.eps) + wd * static_cast<double>(ps[a].p[i]);
                ps[a].p[i] = static_cast<S>(static_cast<double>(ps[a].p[i]) - lr * upd);
            }
        }
    }

  private:
    struct Slot {
        std::string name;
        S* p;
        size_t n;
    };
    static bool ends_with(const std::string& s, const std::string& tail) {
        return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
    }
    static std::vector<Slot> slots(model::ModelParameters<S>& p) {
        std::vector<Slot> out;
        p.for_each_array([&](const std::string& name, S* data, size_t n, const std::vector<int>&) {
            out.push_back({name, data, n});
        });
        return out;
    }

    model::ModelConfig cfg_;
    OptimConfig oc_;
    model::ModelParameters<S> m_, v_;
    long t_ = 0;
};

// --- training loops ---------------------------------------------------------------

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    std::string mode;
};

template <class S>
using CheckpointFn = std::function<void(int step, const model::ModelParameters<S>&)>;

namespace detail {

template <class S>
inline double grad_norm(model::ModelParameters<S>& g) {
    double s = 0.0;
    g.for_each_array([&](const std::string&, S* data, size_t n, const std::vector<int>&) {
        for (size_t i = 0; i < n; ++i) s += static_cast<double>(data[i]) * static_cast<double>(data[i]);
    });
    return std::sqrt(s);
}

template <class S>
inline void accumulate(model::ModelParameters<S>& acc, model::ModelParameters<S>& inc) {
    std::vector<std::pair<S*, size_t>> a, b;
    acc.for_each_array([&](const std::string&, S* d, size_t n, const std::vector<int>&) { a.push_back({d, n}); });
    inc.for_each_array([&](const std::string&, S* d, size_t n, const std::vector<int>&) { b.push_back({d, n}); });
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < a[i].second; ++j)
            a[i].first[j] = static_cast<S>(static_cast<double>(a[i].first[j]) + static_cast<double>(b[i].first[j]));
}

inline std::vector<size_t> epoch_order(size_t n, bool shuffle, uint64_t seed, int epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    if (!shuffle) return order;
    rng::Stream rs(seed, 0x73687566ull, static_cast<uint64_t>(epoch));
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rs.uniform_int(0, static_cast<int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

}  // namespace detail

// One-epoch-by-default SFT loop; deterministic given the seed. The loss at
// each step is the pooled masked mean over the step's groups.
template <class S>
inline std::vector<StepMetrics> train_sft(const model::ModelConfig& cfg, model::ModelParameters<S>& params,
                                          const std::vector<SftBatch>& dataset, const OptimConfig& oc,
                                          const CheckpointFn<S>& on_checkpoint = {}) {
    cfg.validate();
    oc.validate();
    if (dataset.empty()) throw invalid_parameter_error("train_sft: empty dataset");
    attention::MaskRule rule;
    const int per_epoch = static_cast<int>((dataset.size() + static_cast<size_t>(oc.batch_size) - 1) /
                                           static_cast<size_t>(oc.batch_size));
    const int total_steps = per_epoch * oc.epochs;
    AdamW<S> opt(cfg, oc);
    std::vector<StepMetrics> log;
    int step = 0;
    for (int epoch = 0; epoch < oc.epochs; ++epoch) {
        auto order = detail::epoch_order(dataset.size(), oc.shuffle, oc.seed, epoch);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(oc.batch_size)) {
            const size_t hi = std::min(order.size(), at + static_cast<size_t>(oc.batch_size));
            long n_tot = 0;
            for (size_t b = at; b < hi; ++b)
                for (uint8_t m : dataset[order[b]].mask)
                    if (m) ++n_tot;
            if (n_tot == 0) throw invalid_parameter_error("train_sft: step with empty loss mask");
            model::ModelParameters<S> grads = model::ModelParameters<S>::zeros_like(cfg);
            double loss = 0.0;
            for (size_t b = at; b < hi; ++b) {
                const SftBatch& sb = dataset[order[b]];
                auto tr = model::forward(cfg, params, sb.tokens, sb.layout, rule);
                Mat<S> dlogits(tr.logits.rows, cfg.vocab_size);
                for (int p = 0; p < tr.logits.rows; ++p) {
                    if (!sb.mask[static_cast<size_t>(p)]) continue;
                    const S* lr = tr.logits.row(p);
                    double mx = -1e300;
                    for (int c = 0; c < cfg.vocab_size; ++c) mx = std::max(mx, static_cast<double>(lr[c]));
                    double denom = 0.0;
                    for (int c = 0; c < cfg.vocab_size; ++c) denom += std::exp(static_cast<double>(lr[c]) - mx);
                    const int tgt = sb.targets[static_cast<size_t>(p)];
                    loss += -(static_cast<double>(lr[tgt]) - mx - std::log(denom));
                    for (int c = 0; c < cfg.vocab_size; ++c) {
                        double sm = std::exp(static_cast<double>(lr[c]) - mx) / denom;
                        dlogits.at(p, c) = static_cast<S>((sm - (c == tgt ? 1.0 : 0.0)) /
                                                          static_cast<double>(n_tot));
                    }
                }
                auto g = model::backward(cfg, params, tr, dlogits);
                detail::accumulate(grads, g);
            }
            loss /= static_cast<double>(n_tot);
            if (!std::isfinite(loss))
                throw numeric_error("train_sft: non-finite loss at step " + std::to_string(step));
            const double mult = schedule_multiplier(step, total_steps, oc.warmup_ratio);
            const double gn = detail::grad_norm(grads);
            opt.step(params, grads, mult);
            log.push_back({step, loss, mult * oc.lr, gn, "sft"});
            ++step;
            if (on_checkpoint && oc.checkpoint_interval > 0 && step % oc.checkpoint_interval == 0)
                on_checkpoint(step, params);
        }
    }
    return log;
}

// Preference loop. Reference likelihoods come from the frozen ref model with
// the cross-lane mask closed and are computed once up front; policy
// likelihoods rerun every step with grouped attention.
template <class S>
inline std::vector<StepMetrics> train_kto(const model::ModelConfig& cfg, model::ModelParameters<S>& params,
                                          const model::ModelConfig& ref_cfg,
                                          const model::ModelParameters<S>& ref_params,
                                          const std::vector<PreferenceGroup>& dataset, const KtoConfig& kc,
                                          const OptimConfig& oc, const CheckpointFn<S>& on_checkpoint = {}) {
    cfg.validate();
    ref_cfg.validate();
    kc.validate();
    oc.validate();
    if (dataset.empty()) throw invalid_parameter_error("train_kto: empty dataset");
    for (const auto& g : dataset) g.validate();
    attention::MaskRule rule;

    std::vector<std::vector<double>> ref_lp(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i)
        ref_lp[i] = completion_logprobs(ref_cfg, ref_params, dataset[i].prompt, dataset[i].completions,
                                        /*cross_lane=*/false);

    const int per_epoch = static_cast<int>((dataset.size() + static_cast<size_t>(oc.batch_size) - 1) /
                                           static_cast<size_t>(oc.batch_size));
    const int total_steps = per_epoch * oc.epochs;
    AdamW<S> opt(cfg, oc);
    std::vector<StepMetrics> log;
    int step = 0;
    for (int epoch = 0; epoch < oc.epochs; ++epoch) {
        auto order = detail::epoch_order(dataset.size(), oc.shuffle, oc.seed, epoch);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(oc.batch_size)) {
            const size_t hi = std::min(order.size(), at + static_cast<size_t>(oc.batch_size));
            long n_samples = 0;
            for (size_t b = at; b < hi; ++b) n_samples += static_cast<long>(dataset[order[b]].completions.size());
            model::ModelParameters<S> grads = model::ModelParameters<S>::zeros_like(cfg);
            double loss = 0.0;
            for (size_t b = at; b < hi; ++b) {
                const PreferenceGroup& pg = dataset[order[b]];
                const int P = static_cast<int>(pg.prompt.size());
                const int N = static_cast<int>(pg.completions.size());
                std::vector<std::vector<int>> lanes(static_cast<size_t>(N));
                for (int m = 0; m < N; ++m) {
                    lanes[static_cast<size_t>(m)] = pg.prompt;
                    lanes[static_cast<size_t>(m)].insert(lanes[static_cast<size_t>(m)].end(),
                                                         pg.completions[static_cast<size_t>(m)].begin(),
                                                         pg.completions[static_cast<size_t>(m)].end());
                }
                auto [flat, layout] = attention::interleave(lanes, P);
                auto idx = layout_index(layout);
                auto tr = model::forward(cfg, params, flat, layout, rule);
                Mat<S> dlogits(tr.logits.rows, cfg.vocab_size);
                for (int m = 0; m < N; ++m) {
                    const auto& comp = pg.completions[static_cast<size_t>(m)];
                    double lp = 0.0;
                    for (size_t t = 0; t < comp.size(); ++t) {
                        int from = idx[static_cast<size_t>(m)][static_cast<size_t>(P) + t - 1];
                        lp += detail::log_softmax_at(tr.logits.row(from), cfg.vocab_size, comp[t]);
                    }
                    const double len = static_cast<double>(comp.size());
                    double delta = lp - ref_lp[order[b]][static_cast<size_t>(m)];
                    if (kc.length_normalized) delta /= len;
                    const bool des = pg.desirable[static_cast<size_t>(m)] != 0;
                    loss += kto_sample_term(delta, des, kc);
                    // d(loss)/d(logprob), chain through the sample mean.
                    double gi = kto_sample_grad(delta, des, kc) / static_cast<double>(n_samples);
                    if (kc.length_normalized) gi /= len;
                    for (size_t t = 0; t < comp.size(); ++t) {
                        int from = idx[static_cast<size_t>(m)][static_cast<size_t>(P) + t - 1];
                        const S* lr = tr.logits.row(from);
                        double mx = -1e300;
                        for (int c = 0; c < cfg.vocab_size; ++c) mx = std::max(mx, static_cast<double>(lr[c]));
                        double denom = 0.0;
                        for (int c = 0; c < cfg.vocab_size; ++c)
                            denom += std::exp(static_cast<double>(lr[c]) - mx);
                        for (int c = 0; c < cfg.vocab_size; ++c) {
                            double sm = std::exp(static_cast<double>(lr[c]) - mx) / denom;
                            double d = gi * ((c == comp[t] ? 1.0 : 0.0) - sm);
                            dlogits.at(from, c) = static_cast<S>(static_cast<double>(dlogits.at(from, c)) + d);
                        }
                    }
                }
                auto g = model::backward(cfg, params, tr, dlogits);
                detail::accumulate(grads, g);
            }
            loss /= static_cast<double>(n_samples);
            if (!std::isfinite(loss))
                throw numeric_error("train_kto: non-finite loss at step " + std::to_string(step));
            const double mult = schedule_multiplier(step, total_steps, oc.warmup_ratio);
            const double gn = detail::grad_norm(grads);
            opt.step(params, grads, mult);
            log.push_back({step, loss, mult * oc.lr, gn, "kto"});
            ++step;
            if (on_checkpoint && oc.checkpoint_interval > 0 && step % oc.checkpoint_interval == 0)
                on_checkpoint(step, params);
        }
    }
    return log;
}

}  // namespace lanerope::training
