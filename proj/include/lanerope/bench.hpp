#pragma once

// Generation-latency benchmark: wall time from the first decode step to fixed
// cumulative-token checkpoints, swept over lane counts at constant total
// batch. Groups advance round-robin so every variant produces `batch` tokens
// per round and checkpoint times are comparable across lane counts. Prefill
// is timed separately and reported as checkpoint 0.
//
// The baseline variant decodes the same number of independent sequences
// through a plain single-sequence KV loop, bypassing the lane layout
// machinery entirely; its gap to the lanerope N=1 rows is the layout
// overhead.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#if __has_include(<sys/utsname.h>)
#include <sys/utsname.h>
#endif

#include <json.hpp>

#include "lanerope/common.hpp"
#include "lanerope/engine.hpp"
#include "lanerope/model.hpp"

namespace lanerope::bench {

struct BenchConfig {
    int batch = 8;
    std::vector<int> lane_counts = {1, 2, 4};
    int prompt_len = 256;
    std::vector<long> checkpoints = {2048, 4096, 6144, 8192};  // cumulative tokens over the batch
    int repeats = 5;
    int warmup = 1;
    uint64_t seed = 0;
    bool include_baseline = true;
    std::string profile = "paper";

    void validate() const {
        if (batch < 1 || prompt_len < 1 || repeats < 1 || warmup < 0)
            throw invalid_parameter_error("BenchConfig: batch/prompt/repeats must be positive");
        if (lane_counts.empty()) throw invalid_parameter_error("BenchConfig: no lane counts");
        for (int n : lane_counts)
            if (n < 1 || batch % n != 0)
                throw invalid_parameter_error("BenchConfig: every lane count must divide the batch");
        if (checkpoints.empty()) throw invalid_parameter_error("BenchConfig: no checkpoints");
        long prev = 0;
        for (long c : checkpoints) {
            if (c <= prev) throw invalid_parameter_error("BenchConfig: checkpoints must be ascending");
            prev = c;
        }
    }

    long rounds() const { return (checkpoints.back() + batch - 1) / batch; }
};

inline BenchConfig paper_profile() { return {}; }

inline BenchConfig desk_profile() {
    BenchConfig c;
    c.prompt_len = 16;
    c.checkpoints = {128, 256, 384, 512};
    c.profile = "desk";
    return c;
}

inline BenchConfig profile_from_env() {
    const char* p = std::getenv("LANEROPE_PROFILE");
    if (p && std::string(p) == "paper") return paper_profile();
    return desk_profile();
}

// A model small enough that the sweep finishes on a desktop yet large enough
// that per-token matmuls dominate the attention share; bias dims are off so
// the baseline does identical arithmetic per token.
inline model::ModelConfig bench_model_config(const BenchConfig& bc) {
    model::ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.model_dim = 256;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.head_dim = 64;
    cfg.mlp_hidden = 1024;
    cfg.bias_dim = 0;
    cfg.max_steps = bc.prompt_len + static_cast<int>(bc.rounds());
    cfg.lane = rope::LaneRopeParams::make(cfg.head_dim, 10000.0, rope::LaneInit::groupthink, 8192, 0.0,
                                          /*n_max=*/1, /*bias_norm=*/0.0);
    return cfg;
}

struct BenchRow {
    std::string variant;
    int lanes = 0;
    long checkpoint = 0;  // 0 holds the prefill time
    double mean_s = 0.0;
    double std_s = 0.0;
};

struct BenchResult {
    std::vector<BenchRow> rows;  // sorted by (variant, lanes, checkpoint)
    std::map<std::string, uint64_t> token_digests;
};

namespace detail {

using clock = std::chrono::steady_clock;

inline double seconds_since(clock::time_point t0) {
    return std::chrono::duration<double>(clock::now() - t0).count();
}

inline uint64_t fold_token(uint64_t digest, int token) {
    return rng::splitmix64(digest ^ (static_cast<uint64_t>(token) + 0x9e3779b97f4a7c15ull));
}

inline std::vector<int> bench_prompt(const BenchConfig& bc, int vocab) {
    rng::Stream rs(bc.seed, 0x70726f6dull, 0);
    std::vector<int> p(static_cast<size_t>(bc.prompt_len));
    for (auto& t : p) t = static_cast<int>(rs.uniform_int(0, vocab - 1));
    return p;
}

struct RunSample {
    double prefill_s = 0.0;
    std::vector<double> at_checkpoint_s;
    uint64_t digest = 0;
};

template <class S>
inline RunSample run_lanerope_once(const model::ModelConfig& cfg, const model::ModelParameters<S>& params,
                                   const BenchConfig& bc, int lanes) {
    const int groups = bc.batch / lanes;
    const long rounds = bc.rounds();
    engine::GenerationRequest req;
    req.prompt = bench_prompt(bc, cfg.vocab_size);
    req.lanes = lanes;
    req.max_new_tokens = static_cast<int>(rounds);
    req.seed = bc.seed;
    req.eos_id = -1;  // lanes run to budget; checkpoints need every round full

    RunSample out;
    std::vector<engine::KVCache<S>> caches;
    std::vector<engine::Sampler<S>> samplers;
    caches.reserve(static_cast<size_t>(groups));
    auto t_pre = clock::now();
    for (int g = 0; g < groups; ++g) {
        caches.push_back(engine::prefill(cfg, params, req).first);
        samplers.push_back(engine::make_nucleus_sampler<S>(req, 0, static_cast<uint64_t>(g)));
    }
    out.prefill_s = seconds_since(t_pre);

    size_t next_cp = 0;
    long total = 0;
    auto t0 = clock::now();
    for (long r = 0; r < rounds && next_cp < bc.checkpoints.size(); ++r) {
        for (int g = 0; g < groups; ++g) {
            auto sampled = engine::decode_step(caches[static_cast<size_t>(g)], params,
                                               samplers[static_cast<size_t>(g)]);
            for (auto& t : sampled)
                if (t) out.digest = fold_token(out.digest, *t);
        }
        total += bc.batch;
        while (next_cp < bc.checkpoints.size() && total >= bc.checkpoints[next_cp]) {
            out.at_checkpoint_s.push_back(seconds_since(t0));
            ++next_cp;
        }
    }
    return out;
}

// Plain single-sequence decode: per-layer append-only K/V with full causal
// attention, no layout, no lane bookkeeping. Shares the row primitives so the
// per-token arithmetic matches the engine exactly.
template <class S>
struct PlainCache {
    std::vector<std::vector<S>> k, v;  // [layer], rows appended per step
    std::vector<int> last;             // token fed at each step
};

template <class S>
inline void plain_step(const model::ModelConfig& cfg, const model::ModelParameters<S>& params, int token,
                       int step, PlainCache<S>& cache, std::vector<S>& logits) {
    const int dm = cfg.model_dim, H = cfg.n_heads, dq = cfg.qk_dim(), dv = cfg.head_dim;
    const double scale =
        1.0 / std::sqrt(static_cast<double>(cfg.score_dim_override > 0 ? cfg.score_dim_override : dq));
    const attention::Coord coord{0, step};
    const S* er = params.embed.row(token);
    std::vector<S> x(er, er + dm);
    std::vector<S> normed(static_cast<size_t>(dm)), q(static_cast<size_t>(cfg.qk_width()));
    std::vector<S> krow(static_cast<size_t>(cfg.qk_width())), vrow(static_cast<size_t>(cfg.v_width()));
    std::vector<S> mixed(static_cast<size_t>(cfg.v_width()));
    std::vector<S> proj(static_cast<size_t>(dm)), pre(static_cast<size_t>(cfg.mlp_hidden));
    std::vector<double> scores;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = params.layers[static_cast<size_t>(l)];
        model::detail::rms_norm_row(x.data(), lp.attn_gain.data(), dm, cfg.rms_eps, normed.data());
        model::detail::matvec_row(lp.wq, normed.data(), lp.bq.data(), q.data());
        model::detail::matvec_row(lp.wk, normed.data(), lp.bk.data(), krow.data());
        model::detail::matvec_row(lp.wv, normed.data(), static_cast<const S*>(nullptr), vrow.data());
        model::detail::rotate_heads_row(cfg, params.omega, q.data(), coord);
        model::detail::rotate_heads_row(cfg, params.omega, krow.data(), coord);
        auto& lk = cache.k[static_cast<size_t>(l)];
        auto& lv = cache.v[static_cast<size_t>(l)];
        lk.insert(lk.end(), krow.begin(), krow.end());
        lv.insert(lv.end(), vrow.begin(), vrow.end());
        const int keys = step + 1;
        scores.resize(static_cast<size_t>(keys));
        for (int h = 0; h < H; ++h) {
            const S* qh = q.data() + h * dq;
            double mx = -1e300;
            for (int j = 0; j < keys; ++j) {
                const S* kh = lk.data() + static_cast<size_t>(j) * cfg.qk_width() + h * dq;
                double s = 0.0;
                for (int c = 0; c < dq; ++c) s += static_cast<double>(qh[c]) * static_cast<double>(kh[c]);
                scores[static_cast<size_t>(j)] = s * scale;
                mx = std::max(mx, scores[static_cast<size_t>(j)]);
            }
            double denom = 0.0;
            for (int j = 0; j < keys; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += scores[static_cast<size_t>(j)];
            }
            S* mh = mixed.data() + h * dv;
            for (int c = 0; c < dv; ++c) {
                double acc = 0.0;
                for (int j = 0; j < keys; ++j)
                    acc += scores[static_cast<size_t>(j)] *
                           static_cast<double>(lv[static_cast<size_t>(j) * cfg.v_width() + h * dv + c]);
                mh[c] = static_cast<S>(acc / denom);
            }
        }
        model::detail::matvec_row(lp.wo, mixed.data(), static_cast<const S*>(nullptr), proj.data());
        for (int c = 0; c < dm; ++c)
            x[static_cast<size_t>(c)] = static_cast<S>(static_cast<double>(x[static_cast<size_t>(c)]) +
                                                       static_cast<double>(proj[static_cast<size_t>(c)]));
        model::detail::rms_norm_row(x.data(), lp.mlp_gain.data(), dm, cfg.rms_eps, normed.data());
        model::detail::matvec_row(lp.w1, normed.data(), static_cast<const S*>(nullptr), pre.data());
        for (auto& u : pre) u = static_cast<S>(model::detail::silu(u));
        model::detail::matvec_row(lp.w2, pre.data(), static_cast<const S*>(nullptr), proj.data());
        for (int c = 0; c < dm; ++c)
            x[static_cast<size_t>(c)] = static_cast<S>(static_cast<double>(x[static_cast<size_t>(c)]) +
                                                       static_cast<double>(proj[static_cast<size_t>(c)]));
    }
    model::detail::rms_norm_row(x.data(), params.final_gain.data(), dm, cfg.rms_eps, normed.data());
    logits.resize(static_cast<size_t>(cfg.vocab_size));
    const Mat<S>& un = cfg.tied_unembedding ? params.embed : params.unembed;
    model::detail::matvec_row(un, normed.data(), static_cast<const S*>(nullptr), logits.data());
}

template <class S>
inline RunSample run_baseline_once(const model::ModelConfig& cfg, const model::ModelParameters<S>& params,
                                   const BenchConfig& bc) {
    const long rounds = bc.rounds();
    engine::GenerationRequest req;
    req.prompt = bench_prompt(bc, cfg.vocab_size);
    req.lanes = 1;
    req.max_new_tokens = static_cast<int>(rounds);
    req.seed = bc.seed;
    req.eos_id = -1;

    RunSample out;
    std::vector<PlainCache<S>> caches(static_cast<size_t>(bc.batch));
    std::vector<engine::Sampler<S>> samplers;
    std::vector<int> pending(static_cast<size_t>(bc.batch));
    std::vector<S> logits;
    auto t_pre = clock::now();
    for (int b = 0; b < bc.batch; ++b) {
        auto& c = caches[static_cast<size_t>(b)];
        c.k.resize(static_cast<size_t>(cfg.n_layers));
        c.v.resize(static_cast<size_t>(cfg.n_layers));
        samplers.push_back(engine::make_nucleus_sampler<S>(req, static_cast<uint64_t>(b), 0));
        for (int i = 0; i < bc.prompt_len; ++i)
            plain_step(cfg, params, req.prompt[static_cast<size_t>(i)], i, c, logits);
        pending[static_cast<size_t>(b)] =
            samplers.back()(0, bc.prompt_len - 1, std::span<const S>(logits.data(), logits.size()));
        out.digest = fold_token(out.digest, pending[static_cast<size_t>(b)]);
    }
    out.prefill_s = seconds_since(t_pre);

    size_t next_cp = 0;
    long total = 0;
    auto t0 = clock::now();
    for (long r = 0; r < rounds && next_cp < bc.checkpoints.size(); ++r) {
        for (int b = 0; b < bc.batch; ++b) {
            const int step = bc.prompt_len + static_cast<int>(r);
            plain_step(cfg, params, pending[static_cast<size_t>(b)], step, caches[static_cast<size_t>(b)],
                       logits);
            pending[static_cast<size_t>(b)] = samplers[static_cast<size_t>(b)](
                0, step, std::span<const S>(logits.data(), logits.size()));
            out.digest = fold_token(out.digest, pending[static_cast<size_t>(b)]);
        }
        total += bc.batch;
        while (next_cp < bc.checkpoints.size() && total >= bc.checkpoints[next_cp]) {
            out.at_checkpoint_s.push_back(seconds_since(t0));
            ++next_cp;
        }
    }
    return out;
}

inline void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    sd = 0.0;
    if (xs.size() > 1) {
        for (double x : xs) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
    }
}

inline void collect(const std::string& variant, int lanes, const BenchConfig& bc,
                    const std::vector<RunSample>& samples, BenchResult& result) {
    // Fixed tokens must give fixed outputs; only the clock may vary.
    for (const auto& s : samples)
        if (s.digest != samples.front().digest)
            throw contract_violation_error("bench: tokens differ across repeats of " + variant);
    result.token_digests[variant + "/" + std::to_string(lanes)] = samples.front().digest;

    std::vector<double> pre;
    for (const auto& s : samples) pre.push_back(s.prefill_s);
    BenchRow row{variant, lanes, 0, 0.0, 0.0};
    mean_std(pre, row.mean_s, row.std_s);
    result.rows.push_back(row);
    for (size_t c = 0; c < bc.checkpoints.size(); ++c) {
        std::vector<double> xs;
        for (const auto& s : samples) xs.push_back(s.at_checkpoint_s[c]);
        BenchRow r{variant, lanes, bc.checkpoints[c], 0.0, 0.0};
        mean_std(xs, r.mean_s, r.std_s);
        result.rows.push_back(r);
    }
}

}  // namespace detail

template <class S>
inline BenchResult run_generation_bench(const model::ModelConfig& cfg,
                                        const model::ModelParameters<S>& params, const BenchConfig& bc) {
    bc.validate();
    cfg.validate();
    if (cfg.max_steps < bc.prompt_len + static_cast<int>(bc.rounds()))
        throw budget_error("bench: model max_steps below prompt plus final checkpoint");
    BenchResult result;
    for (int lanes : bc.lane_counts) {
        std::vector<detail::RunSample> samples;
        for (int r = 0; r < bc.warmup + bc.repeats; ++r) {
            auto s = detail::run_lanerope_once(cfg, params, bc, lanes);
            if (r >= bc.warmup) samples.push_back(std::move(s));
        }
        detail::collect("lanerope", lanes, bc, samples, result);
    }
    if (bc.include_baseline) {
        std::vector<detail::RunSample> samples;
        for (int r = 0; r < bc.warmup + bc.repeats; ++r) {
            auto s = detail::run_baseline_once(cfg, params, bc);
            if (r >= bc.warmup) samples.push_back(std::move(s));
        }
        detail::collect("baseline", 1, bc, samples, result);
    }
    std::sort(result.rows.begin(), result.rows.end(), [](const BenchRow& a, const BenchRow& b) {
        return std::tie(a.variant, a.lanes, a.checkpoint) < std::tie(b.variant, b.lanes, b.checkpoint);
    });
    return result;
}

// --- reporting -----------------------------------------------------------------------

inline std::string to_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "variant,lanes,checkpoint,mean_s,std_s\n";
    os << std::setprecision(9);
    for (const auto& r : rows)
        os << r.variant << "," << r.lanes << "," << r.checkpoint << "," << r.mean_s << "," << r.std_s
           << "\n";
    return os.str();
}

inline std::vector<BenchRow> rows_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "variant,lanes,checkpoint,mean_s,std_s")
        throw data_error("bench csv: bad header");
    std::vector<BenchRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        BenchRow r;
        std::string field;
        if (!std::getline(ls, r.variant, ',')) throw data_error("bench csv: bad row");
        auto next = [&](const char* what) {
            if (!std::getline(ls, field, ',')) throw data_error(std::string("bench csv: missing ") + what);
            return field;
        };
        try {
            r.lanes = std::stoi(next("lanes"));
            r.checkpoint = std::stol(next("checkpoint"));
            r.mean_s = std::stod(next("mean_s"));
            r.std_s = std::stod(next("std_s"));
        } catch (const std::exception&) {
            throw data_error("bench csv: unparseable row: " + line);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

// One line per (variant, lanes); checkpoints across, prefill first.
inline std::string to_text_table(const std::vector<BenchRow>& rows) {
    std::vector<long> cps;
    std::map<std::pair<std::string, int>, std::map<long, const BenchRow*>> grid;
    for (const auto& r : rows) {
        grid[{r.variant, r.lanes}][r.checkpoint] = &r;
        if (std::find(cps.begin(), cps.end(), r.checkpoint) == cps.end()) cps.push_back(r.checkpoint);
    }
    std::sort(cps.begin(), cps.end());
    std::ostringstream os;
    os << std::left << std::setw(12) << "variant" << std::setw(7) << "lanes";
    for (long c : cps) os << std::setw(22) << (c == 0 ? std::string("prefill") : "@" + std::to_string(c));
    os << "\n";
    for (const auto& [key, cells] : grid) {
        os << std::left << std::setw(12) << key.first << std::setw(7) << key.second;
        for (long c : cps) {
            auto it = cells.find(c);
            if (it == cells.end()) {
                os << std::setw(22) << "-";
                continue;
            }
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(4) << it->second->mean_s << " +/- "
                 << it->second->std_s;
            os << std::setw(22) << cell.str();
        }
        os << "\n";
    }
    return os.str();
}

inline nlohmann::json host_metadata() {
    nlohmann::json j;
    j["hardware_threads"] = std::thread::hardware_concurrency();
#ifdef __VERSION__
    j["compiler"] = __VERSION__;
#endif
#if __has_include(<sys/utsname.h>)
    utsname u{};
    if (uname(&u) == 0) {
        j["os"] = std::string(u.sysname) + " " + u.release;
        j["machine"] = u.machine;
    }
#endif
    return j;
}

inline nlohmann::json summary_json(const BenchConfig& bc, const model::ModelConfig& cfg,
                                   const std::vector<BenchRow>& rows) {
    nlohmann::json j;
    j["host"] = host_metadata();
    j["config"] = {{"profile", bc.profile},
                   {"batch", bc.batch},
                   {"lane_counts", bc.lane_counts},
                   {"prompt_len", bc.prompt_len},
                   {"checkpoints", bc.checkpoints},
                   {"repeats", bc.repeats},
                   {"warmup", bc.warmup},
                   {"seed", bc.seed}};
    j["model"] = {{"vocab_size", cfg.vocab_size},   {"model_dim", cfg.model_dim},
                  {"n_layers", cfg.n_layers},       {"n_heads", cfg.n_heads},
                  {"head_dim", cfg.head_dim},       {"mlp_hidden", cfg.mlp_hidden},
                  {"bias_dim", cfg.bias_dim},       {"max_steps", cfg.max_steps}};
    nlohmann::json rws = nlohmann::json::array();
    for (const auto& r : rows)
        rws.push_back({{"variant", r.variant},
                       {"lanes", r.lanes},
                       {"checkpoint", r.checkpoint},
                       {"mean_s", r.mean_s},
                       {"std_s", r.std_s}});
    j["rows"] = rws;

    // Informational ratios: lane-count overhead at the final checkpoint and
    // the layout cost visible at N=1 against the plain path.
    auto final_mean = [&](const std::string& variant, int lanes) -> double {
        double best = -1.0;
        long best_cp = -1;
        for (const auto& r : rows)
            if (r.variant == variant && r.lanes == lanes && r.checkpoint > best_cp) {
                best_cp = r.checkpoint;
                best = r.mean_s;
            }
        return best_cp > 0 ? best : -1.0;
    };
    const double n1 = final_mean("lanerope", 1);
    const double base = final_mean("baseline", 1);
    double max_lane = -1.0;
    int max_n = 0;
    for (const auto& r : rows)
        if (r.variant == "lanerope" && r.lanes > max_n) max_n = r.lanes;
    if (max_n > 1) max_lane = final_mean("lanerope", max_n);
    if (n1 > 0 && max_lane > 0) j["overhead_ratio_maxN_vs_1"] = max_lane / n1;
    if (n1 > 0 && base > 0) j["n1_vs_baseline_rel"] = (n1 - base) / base;
    return j;
}

}  // namespace lanerope::bench
