#pragma once

// Multi-lane autoregressive generation.
//
// A group of N lanes decodes in lockstep: every unfinished lane samples its
// step-s token from logits conditioned on all lanes' tokens through step s-1,
// then the new tokens are fed and their rotated keys/values appended. Keys
// are cached post-rotation, so decode attention is a dot product over the
// strictly-earlier prefix of the cache plus the fresh token itself; this
// reproduces the full forward pass exactly under the default mask rule.
//
// The prompt is replicated into every lane by default (each lane sees it as
// ordinary within-lane context); shared_prompt stores it once at lane 0,
// visible cross-lane, with completions starting at step prompt_len.
//
// Sampling draws one uniform per token from a counter-based generator keyed
// (seed, query, group, lane, step), so any token's draw is reproducible in
// isolation and groups never interact. run_batch farms groups out to threads
// with results written to preassigned slots; outputs are identical for any
// thread count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "lanerope/attention.hpp"
#include "lanerope/common.hpp"
#include "lanerope/model.hpp"

namespace lanerope::engine {

struct GenerationRequest {
    std::vector<int> prompt;
    // When non-empty, overrides prompt with one prompt per lane (all the same
    // length, so lanes stay in lockstep). Incompatible with shared_prompt.
    std::vector<std::vector<int>> lane_prompts;
    int lanes = 1;
    int max_new_tokens = 4096;
    double temperature = 0.6;
    double top_p = 0.95;
    uint64_t seed = 0;
    int eos_id = -1;     // -1: lanes only ever finish by budget
    int marker_id = -1;  // answer marker; -1 disables extraction
    bool shared_prompt = false;

    void validate() const {
        if (lanes < 1) throw invalid_parameter_error("GenerationRequest: lanes must be >= 1");
        if (max_new_tokens < 0) throw invalid_parameter_error("GenerationRequest: max_new_tokens must be >= 0");
        if (!(top_p > 0.0 && top_p <= 1.0))
            throw invalid_parameter_error("GenerationRequest: top_p must be in (0, 1]");
        if (temperature < 0.0) throw invalid_parameter_error("GenerationRequest: temperature must be >= 0");
        if (!lane_prompts.empty()) {
            if (shared_prompt)
                throw invalid_parameter_error("GenerationRequest: per-lane prompts cannot be shared");
            if (static_cast<int>(lane_prompts.size()) != lanes)
                throw invalid_parameter_error("GenerationRequest: need one prompt per lane");
            for (const auto& p : lane_prompts)
                if (p.empty() || p.size() != lane_prompts[0].size())
                    throw invalid_parameter_error("GenerationRequest: lane prompts must be non-empty and equal length");
        }
    }
};

enum class FinishReason { eos, budget };

inline const char* to_string(FinishReason r) { return r == FinishReason::eos ? "eos" : "budget"; }

// --- sampling ------------------------------------------------------------------

// Nucleus sampling, deterministic in the supplied unit uniform. Temperature 0
// short-circuits to argmax; exact ties go to the lower token id, as do ties
// in the probability sort. -inf logits are legal and carry zero mass.
template <class S>
inline int sample_token(std::span<const S> logits, double temperature, double top_p, double unit) {
    const int n = static_cast<int>(logits.size());
    if (n == 0) throw invalid_parameter_error("sample_token: empty logits");
    int best = -1;
    double bestv = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        double v = static_cast<double>(logits[static_cast<size_t>(i)]);
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
            throw numeric_error("sample_token: non-finite logit");
        if (v > bestv) {
            bestv = v;
            best = i;
        }
    }
    if (best < 0) throw contract_violation_error("sample_token: no finite logit");
    if (temperature == 0.0) return best;

    std::vector<double> p(static_cast<size_t>(n), 0.0);
    double denom = 0.0;
    for (int i = 0; i < n; ++i) {
        double v = static_cast<double>(logits[static_cast<size_t>(i)]);
        if (v == -std::numeric_limits<double>::infinity()) continue;
        p[static_cast<size_t>(i)] = std::exp((v - bestv) / temperature);
        denom += p[static_cast<size_t>(i)];
    }
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)]; });

    // Smallest prefix of the sorted tokens with cumulative mass >= top_p.
    int cut = n;
    double cum = 0.0;
    for (int r = 0; r < n; ++r) {
        cum += p[static_cast<size_t>(order[static_cast<size_t>(r)])] / denom;
        if (cum >= top_p) {
            cut = r + 1;
            break;
        }
    }
    while (cut > 1 && p[static_cast<size_t>(order[static_cast<size_t>(cut - 1)])] == 0.0) --cut;

    double mass = 0.0;
    for (int r = 0; r < cut; ++r) mass += p[static_cast<size_t>(order[static_cast<size_t>(r)])] / denom;
    double target = unit * mass;
    double acc = 0.0;
    for (int r = 0; r < cut; ++r) {
        acc += p[static_cast<size_t>(order[static_cast<size_t>(r)])] / denom;
        if (target < acc) return order[static_cast<size_t>(r)];
    }
    return order[static_cast<size_t>(cut - 1)];
}

// Sampler contract: given (lane, step, logits) return the chosen token id.
// Tests inject scripted samplers; production uses make_nucleus_sampler.
template <class S>
using Sampler = std::function<int(int lane, int step, std::span<const S> logits)>;

template <class S>
inline Sampler<S> make_nucleus_sampler(const GenerationRequest& req, uint64_t query_id, uint64_t group_id) {
    double temperature = req.temperature, top_p = req.top_p;
    uint64_t seed = req.seed;
    return [=](int lane, int step, std::span<const S> logits) {
        rng::Key key{seed, query_id, group_id, static_cast<uint64_t>(lane)};
        double u = rng::uniform_at(key, static_cast<uint64_t>(step));
        return sample_token(logits, temperature, top_p, u);
    };
}

// --- cache and incremental forward ----------------------------------------------

// Holds everything a running group owns: rotated keys/values per layer, the
// growing layout, per-lane scheduling state, and the logits waiting to be
// sampled. One group, one cache; groups share nothing but the parameters.
template <class S>
struct KVCache {
    model::ModelConfig cfg;
    attention::LaneLayout layout;      // coords of cached tokens, sorted by (step, lane)
    std::vector<int> flat_tokens;      // token id per cached position
    std::vector<std::vector<S>> k;     // per layer, rows of qk_width()
    std::vector<std::vector<S>> v;     // per layer, rows of v_width()
    std::vector<int> lane_step;        // next step each lane will occupy
    std::vector<uint8_t> finished;
    std::vector<FinishReason> finish;
    std::vector<std::vector<int>> streams;  // generated tokens per lane, prompt excluded
    Mat<S> pending;                    // [lanes, vocab] logits awaiting sampling
    int eos_id = -1;
    int max_new_tokens = 0;
    int feed_step = -1;                // step currently being fed
    int boundary = 0;                  // cache size before feed_step began
    bool record_logits = false;
    std::vector<S> logit_rows;         // trace: logits per cached position

    int size() const { return static_cast<int>(flat_tokens.size()); }
};

namespace detail {

// Runs one token through all layers against the cache, appends its rotated
// key/value rows, and writes the next-token logits. Visible keys are the
// cache positions at strictly earlier steps (a prefix, because the cache is
// step-sorted and boundary is pinned when a step begins) plus the token
// itself; same-step entries of other lanes are behind boundary and ignored.
template <class S>
inline void feed_token(KVCache<S>& c, const model::ModelParameters<S>& params, int lane, int step,
                       int token, S* logits) {
    const model::ModelConfig& cfg = c.cfg;
    if (step >= cfg.max_steps) throw budget_error("feed_token: position exceeds max_steps");
    if (token < 0 || token >= cfg.vocab_size) throw invalid_parameter_error("feed_token: token id out of range");
    if (lane < 0 || lane >= c.layout.group_size) throw invalid_parameter_error("feed_token: lane out of range");
    if (step != c.feed_step) {
        if (step < c.feed_step) throw contract_violation_error("feed_token: steps must not decrease");
        c.feed_step = step;
        c.boundary = c.size();
    }

    const int dm = cfg.model_dim, d = cfg.head_dim, f = cfg.bias_dim;
    const int qkw = cfg.qk_width(), vw = cfg.v_width();
    const attention::Coord coord{lane, step};
    const double scale =
        1.0 / std::sqrt(static_cast<double>(cfg.score_dim_override > 0 ? cfg.score_dim_override : d + f));

    std::vector<S> x(static_cast<size_t>(dm));
    const S* er = params.embed.row(token);
    for (int i = 0; i < dm; ++i) x[static_cast<size_t>(i)] = er[i];

    std::vector<S> normed(static_cast<size_t>(dm)), q(static_cast<size_t>(qkw)), kk(static_cast<size_t>(qkw)),
        vv(static_cast<size_t>(vw)), mix(static_cast<size_t>(vw)), proj(static_cast<size_t>(dm));
    std::vector<S> pre(static_cast<size_t>(cfg.mlp_hidden)), act(static_cast<size_t>(cfg.mlp_hidden));
    std::vector<double> scores;

    const int nb = c.boundary;
    for (int li = 0; li < cfg.n_layers; ++li) {
        const auto& lp = params.layers[static_cast<size_t>(li)];
        model::detail::rms_norm_row(x.data(), lp.attn_gain.data(), dm, cfg.rms_eps, normed.data());
        model::detail::matvec_row(lp.wq, normed.data(), lp.bq.data(), q.data());
        model::detail::matvec_row(lp.wk, normed.data(), lp.bk.data(), kk.data());
        model::detail::matvec_row(lp.wv, normed.data(), static_cast<const S*>(nullptr), vv.data());
        model::detail::rotate_heads_row(cfg, params.omega, q.data(), coord);
        model::detail::rotate_heads_row(cfg, params.omega, kk.data(), coord);

        const S* kc = c.k[static_cast<size_t>(li)].data();
        const S* vc = c.v[static_cast<size_t>(li)].data();
        scores.resize(static_cast<size_t>(nb) + 1);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int off = h * (d + f);
            const S* qh = q.data() + off;
            double mx = -1e300;
            for (int j = 0; j < nb; ++j) {
                const S* kr = kc + static_cast<size_t>(j) * qkw + off;
                double dot = 0.0;
                for (int cdim = 0; cdim < d + f; ++cdim)
                    dot += static_cast<double>(qh[cdim]) * static_cast<double>(kr[cdim]);
                scores[static_cast<size_t>(j)] = dot * scale;
                mx = std::max(mx, scores[static_cast<size_t>(j)]);
            }
            double self_dot = 0.0;
            for (int cdim = 0; cdim < d + f; ++cdim)
                self_dot += static_cast<double>(qh[cdim]) * static_cast<double>(kk[static_cast<size_t>(off + cdim)]);
            scores[static_cast<size_t>(nb)] = self_dot * scale;
            mx = std::max(mx, scores[static_cast<size_t>(nb)]);
            double denom = 0.0;
            for (int j = 0; j <= nb; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += scores[static_cast<size_t>(j)];
            }
            for (int cdim = 0; cdim < d; ++cdim) {
                double acc = 0.0;
                for (int j = 0; j < nb; ++j)
                    acc += scores[static_cast<size_t>(j)] *
                           static_cast<double>(vc[static_cast<size_t>(j) * vw + h * d + cdim]);
                acc += scores[static_cast<size_t>(nb)] * static_cast<double>(vv[static_cast<size_t>(h * d + cdim)]);
                mix[static_cast<size_t>(h * d + cdim)] = static_cast<S>(acc / denom);
            }
        }

        model::detail::matvec_row(lp.wo, mix.data(), static_cast<const S*>(nullptr), proj.data());
        for (int i = 0; i < dm; ++i)
            x[static_cast<size_t>(i)] = static_cast<S>(static_cast<double>(x[static_cast<size_t>(i)]) +
                                                       static_cast<double>(proj[static_cast<size_t>(i)]));

        model::detail::rms_norm_row(x.data(), lp.mlp_gain.data(), dm, cfg.rms_eps, normed.data());
        model::detail::matvec_row(lp.w1, normed.data(), static_cast<const S*>(nullptr), pre.data());
        for (int hh = 0; hh < cfg.mlp_hidden; ++hh)
            act[static_cast<size_t>(hh)] = static_cast<S>(model::detail::silu(pre[static_cast<size_t>(hh)]));
        model::detail::matvec_row(lp.w2, act.data(), static_cast<const S*>(nullptr), proj.data());
        for (int i = 0; i < dm; ++i)
            x[static_cast<size_t>(i)] = static_cast<S>(static_cast<double>(x[static_cast<size_t>(i)]) +
                                                       static_cast<double>(proj[static_cast<size_t>(i)]));

        c.k[static_cast<size_t>(li)].insert(c.k[static_cast<size_t>(li)].end(), kk.begin(), kk.end());
        c.v[static_cast<size_t>(li)].insert(c.v[static_cast<size_t>(li)].end(), vv.begin(), vv.end());
    }

    model::detail::rms_norm_row(x.data(), params.final_gain.data(), dm, cfg.rms_eps, normed.data());
    const Mat<S>& un = cfg.tied_unembedding ? params.embed : params.unembed;
    model::detail::matvec_row(un, normed.data(), static_cast<const S*>(nullptr), logits);

    c.layout.coords.push_back(coord);
    c.layout.per_lane_len[static_cast<size_t>(lane)] += 1;
    c.flat_tokens.push_back(token);
    if (c.record_logits) c.logit_rows.insert(c.logit_rows.end(), logits, logits + cfg.vocab_size);
}

}  // namespace detail

// Builds the cache and feeds the prompt. Returns per-lane logits for the
// first completion step; in shared-prompt mode every lane starts from the
// prompt-final logits. max_new_tokens == 0 marks all lanes finished at once.
template <class S>
inline std::pair<KVCache<S>, Mat<S>> prefill(const model::ModelConfig& cfg,
                                             const model::ModelParameters<S>& params,
                                             const GenerationRequest& req, bool record_logits = false) {
    cfg.validate();
    req.validate();
    const bool per_lane = !req.lane_prompts.empty();
    if (!per_lane && req.prompt.empty()) throw invalid_parameter_error("prefill: empty prompt");
    const int P = static_cast<int>(per_lane ? req.lane_prompts[0].size() : req.prompt.size());
    const int N = req.lanes;
    if (P > cfg.max_steps) throw budget_error("prefill: prompt exceeds max_steps");

    KVCache<S> c;
    c.cfg = cfg;
    c.layout.group_size = N;
    c.layout.prompt_len = P;
    c.layout.per_lane_len.assign(static_cast<size_t>(N), 0);
    c.layout.per_lane_start.assign(static_cast<size_t>(N), 0);
    if (req.shared_prompt)
        for (int m = 1; m < N; ++m) c.layout.per_lane_start[static_cast<size_t>(m)] = P;
    c.k.resize(static_cast<size_t>(cfg.n_layers));
    c.v.resize(static_cast<size_t>(cfg.n_layers));
    c.lane_step.assign(static_cast<size_t>(N), P);
    c.finished.assign(static_cast<size_t>(N), 0);
    c.finish.assign(static_cast<size_t>(N), FinishReason::budget);
    c.streams.resize(static_cast<size_t>(N));
    c.pending = Mat<S>(N, cfg.vocab_size);
    c.eos_id = req.eos_id;
    c.max_new_tokens = req.max_new_tokens;
    c.record_logits = record_logits;
    // A zero budget finishes every lane before the first decode.
    if (req.max_new_tokens == 0) std::fill(c.finished.begin(), c.finished.end(), uint8_t(1));

    std::vector<S> lg(static_cast<size_t>(cfg.vocab_size));
    if (req.shared_prompt) {
        for (int i = 0; i < P; ++i)
            detail::feed_token(c, params, 0, i, req.prompt[static_cast<size_t>(i)], lg.data());
        for (int m = 0; m < N; ++m)
            for (int o = 0; o < cfg.vocab_size; ++o) c.pending.at(m, o) = lg[static_cast<size_t>(o)];
    } else {
        for (int i = 0; i < P; ++i)
            for (int m = 0; m < N; ++m) {
                const int tok = per_lane ? req.lane_prompts[static_cast<size_t>(m)][static_cast<size_t>(i)]
                                         : req.prompt[static_cast<size_t>(i)];
                detail::feed_token(c, params, m, i, tok, lg.data());
                if (i == P - 1)
                    for (int o = 0; o < cfg.vocab_size; ++o) c.pending.at(m, o) = lg[static_cast<size_t>(o)];
            }
    }
    if (req.max_new_tokens == 0) std::fill(c.finished.begin(), c.finished.end(), uint8_t(1));

    Mat<S> first = c.pending;
    return {std::move(c), std::move(first)};
}

// One lockstep decode round: unfinished lanes sample from the pending logits
// (all conditioned on steps < s), then feed their tokens in lane order.
// Returns one token per lane, empty for lanes that were already finished.
// A lane finishes on eos or when its stream reaches max_new_tokens; its
// cached keys stay visible either way.
template <class S>
inline std::vector<std::optional<int>> decode_step(KVCache<S>& c, const model::ModelParameters<S>& params,
                                                   const Sampler<S>& sampler) {
    const int N = c.layout.group_size;
    int s = -1;
    for (int m = 0; m < N; ++m)
        if (!c.finished[static_cast<size_t>(m)]) {
            if (s >= 0 && c.lane_step[static_cast<size_t>(m)] != s)
                throw contract_violation_error("decode_step: active lanes out of lockstep");
            s = c.lane_step[static_cast<size_t>(m)];
        }
    if (s < 0) throw contract_violation_error("decode_step: all lanes finished");
    if (s >= c.cfg.max_steps) throw budget_error("decode_step: cache capacity exceeded");

    std::vector<std::optional<int>> out(static_cast<size_t>(N));
    for (int m = 0; m < N; ++m) {
        if (c.finished[static_cast<size_t>(m)]) continue;
        std::span<const S> row(c.pending.row(m), static_cast<size_t>(c.cfg.vocab_size));
        out[static_cast<size_t>(m)] = sampler(m, s, row);
    }
    std::vector<S> lg(static_cast<size_t>(c.cfg.vocab_size));
    for (int m = 0; m < N; ++m) {
        if (!out[static_cast<size_t>(m)]) continue;
        const int tok = *out[static_cast<size_t>(m)];
        detail::feed_token(c, params, m, s, tok, lg.data());
        c.streams[static_cast<size_t>(m)].push_back(tok);
        c.lane_step[static_cast<size_t>(m)] = s + 1;
        if (tok == c.eos_id) {
            c.finished[static_cast<size_t>(m)] = 1;
            c.finish[static_cast<size_t>(m)] = FinishReason::eos;
        } else if (static_cast<int>(c.streams[static_cast<size_t>(m)].size()) >= c.max_new_tokens) {
            c.finished[static_cast<size_t>(m)] = 1;
            c.finish[static_cast<size_t>(m)] = FinishReason::budget;
        } else {
            for (int o = 0; o < c.cfg.vocab_size; ++o) c.pending.at(m, o) = lg[static_cast<size_t>(o)];
        }
    }
    return out;
}

struct LaneResult {
    std::vector<int> tokens;
    std::optional<int> answer;
    FinishReason finish = FinishReason::budget;
};

struct GenerationResult {
    std::vector<LaneResult> lanes;
};

// Answer extraction: the payload is the single token after the last marker
// occurrence; a trailing marker with nothing after it yields none.
inline std::optional<int> extract_answer(std::span<const int> tokens, int marker_id) {
    if (marker_id < 0) return std::nullopt;
    for (int p = static_cast<int>(tokens.size()) - 1; p >= 0; --p)
        if (tokens[static_cast<size_t>(p)] == marker_id) {
            if (p + 1 < static_cast<int>(tokens.size())) return tokens[static_cast<size_t>(p) + 1];
            return std::nullopt;
        }
    return std::nullopt;
}

// Everything the prefill/decode consistency oracle needs: the final layout,
// the tokens in cache order, and the logits recorded as each token was fed.
template <class S>
struct GroupTrace {
    attention::LaneLayout layout;
    std::vector<int> flat_tokens;
    Mat<S> logits;
};

template <class S>
inline GenerationResult generate_group(const model::ModelConfig& cfg, const model::ModelParameters<S>& params,
                                       const GenerationRequest& req, const Sampler<S>& sampler,
                                       GroupTrace<S>* trace = nullptr) {
    auto [cache, first] = prefill(cfg, params, req, trace != nullptr);
    (void)first;
    auto any_active = [&]() {
        for (uint8_t fi : cache.finished)
            if (!fi) return true;
        return false;
    };
    while (any_active()) {
        int s = -1;
        for (int m = 0; m < req.lanes; ++m)
            if (!cache.finished[static_cast<size_t>(m)]) s = cache.lane_step[static_cast<size_t>(m)];
        if (s >= cfg.max_steps) {
            // Position capacity exhausted before the per-lane token budget.
            for (int m = 0; m < req.lanes; ++m)
                if (!cache.finished[static_cast<size_t>(m)]) {
                    cache.finished[static_cast<size_t>(m)] = 1;
                    cache.finish[static_cast<size_t>(m)] = FinishReason::budget;
                }
            break;
        }
        decode_step(cache, params, sampler);
    }

    GenerationResult res;
    res.lanes.resize(static_cast<size_t>(req.lanes));
    for (int m = 0; m < req.lanes; ++m) {
        auto& lr = res.lanes[static_cast<size_t>(m)];
        lr.tokens = cache.streams[static_cast<size_t>(m)];
        lr.answer = extract_answer(lr.tokens, req.marker_id);
        lr.finish = cache.finish[static_cast<size_t>(m)];
    }
    if (trace) {
        trace->layout = cache.layout;
        trace->flat_tokens = cache.flat_tokens;
        trace->logits = Mat<S>(cache.size(), cfg.vocab_size);
        trace->logits.v = cache.logit_rows;
    }
    return res;
}

// Drops absent entries, returns the modal answer; ties go to the answer
// whose first occurrence comes earliest. all-absent -> none.
template <class T>
inline std::optional<T> majority_vote(const std::vector<std::optional<T>>& answers) {
    std::vector<T> seen;
    std::vector<int> counts;
    for (const auto& a : answers) {
        if (!a) continue;
        auto it = std::find(seen.begin(), seen.end(), *a);
        if (it == seen.end()) {
            seen.push_back(*a);
            counts.push_back(1);
        } else {
            counts[static_cast<size_t>(it - seen.begin())] += 1;
        }
    }
    if (seen.empty()) return std::nullopt;
    size_t best = 0;
    for (size_t i = 1; i < seen.size(); ++i)
        if (counts[i] > counts[best]) best = i;
    return seen[best];
}

// --- batch scheduling ------------------------------------------------------------

struct CompletionRecord {
    int query_id = 0;
    int group_id = 0;
    int lane_id = 0;
    std::vector<int> tokens;
    std::optional<int> answer;
    FinishReason finish = FinishReason::budget;
};

// samples_per_query completions per query as samples_per_query / lanes
// independent groups. Record order is (query, group, lane); slots are
// preassigned so the result is identical for any thread count.
template <class S>
inline std::vector<CompletionRecord> run_batch(const model::ModelConfig& cfg,
                                               const model::ModelParameters<S>& params,
                                               const std::vector<std::vector<int>>& queries,
                                               int samples_per_query, const GenerationRequest& base,
                                               int n_threads = 1) {
    base.validate();
    if (!base.lane_prompts.empty())
        throw invalid_parameter_error("run_batch: queries supply the prompts");
    if (samples_per_query < 1) throw invalid_parameter_error("run_batch: samples_per_query must be >= 1");
    if (samples_per_query % base.lanes != 0)
        throw invalid_parameter_error("run_batch: lanes must divide samples_per_query");
    const int groups = samples_per_query / base.lanes;
    const size_t n_jobs = queries.size() * static_cast<size_t>(groups);
    std::vector<CompletionRecord> records(queries.size() * static_cast<size_t>(samples_per_query));

    auto run_job = [&](size_t job) {
        const int qi = static_cast<int>(job / static_cast<size_t>(groups));
        const int gi = static_cast<int>(job % static_cast<size_t>(groups));
        GenerationRequest req = base;
        req.prompt = queries[static_cast<size_t>(qi)];
        auto sampler = make_nucleus_sampler<S>(req, static_cast<uint64_t>(qi), static_cast<uint64_t>(gi));
        GenerationResult res = generate_group(cfg, params, req, sampler);
        for (int m = 0; m < base.lanes; ++m) {
            size_t slot = (static_cast<size_t>(qi) * static_cast<size_t>(groups) + static_cast<size_t>(gi)) *
                              static_cast<size_t>(base.lanes) +
                          static_cast<size_t>(m);
            auto& r = records[slot];
            r.query_id = qi;
            r.group_id = gi;
            r.lane_id = m;
            r.tokens = res.lanes[static_cast<size_t>(m)].tokens;
            r.answer = res.lanes[static_cast<size_t>(m)].answer;
            r.finish = res.lanes[static_cast<size_t>(m)].finish;
        }
    };

    if (n_threads <= 1 || n_jobs <= 1) {
        for (size_t j = 0; j < n_jobs; ++j) run_job(j);
        return records;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto worker = [&]() {
        for (;;) {
            size_t j = next.fetch_add(1);
            if (j >= n_jobs) return;
            try {
                run_job(j);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    const size_t nt = std::min<size_t>(static_cast<size_t>(n_threads), n_jobs);
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (size_t t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
    return records;
}

}  // namespace lanerope::engine
