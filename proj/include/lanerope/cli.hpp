#pragma once

// Command surface: train, generate, eval, bench, data {gen-collab, gen-kto,
// curate}, selftest. One command per process. Every JSONL artifact starts
// with a {"type":"config", ...} line holding the resolved configuration;
// readers skip any object carrying a "type" key, so artifacts feed back into
// other commands unchanged.
//
// Errors print one line "ERR: <message>" and exit with: 2 usage (flags,
// malformed config, invalid parameters), 3 data (missing files, bad records,
// bad checkpoints), 4 numeric (non-finite loss, internal consistency), 5
// selftest failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lanerope/bench.hpp"
#include "lanerope/checkpoint.hpp"
#include "lanerope/common.hpp"
#include "lanerope/data.hpp"
#include "lanerope/engine.hpp"
#include "lanerope/model.hpp"
#include "lanerope/training.hpp"

namespace lanerope::cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitSelftest = 5;

namespace detail {

inline nlohmann::json read_json_file(const std::string& path, const char* what) {
    std::ifstream f(path);
    if (!f) throw data_error(std::string(what) + ": cannot open " + path);
    try {
        nlohmann::json j;
        f >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw invalid_parameter_error(std::string(what) + ": malformed JSON in " + path + ": " + e.what());
    }
}

// JSONL loader that skips header/metadata objects (anything with a "type"
// key), so config echoes embedded in artifacts are transparent to readers.
template <class T>
inline std::vector<T> load_records(const std::string& path, const char* what) {
    std::ifstream f(path);
    if (!f) throw data_error(std::string(what) + ": cannot open " + path);
    std::vector<T> rows;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error(std::string(what) + ": line " + std::to_string(line_no) + ": " + e.what());
        }
        if (j.is_object() && j.contains("type")) continue;
        try {
            rows.push_back(j.get<T>());
        } catch (const nlohmann::json::exception& e) {
            throw data_error(std::string(what) + ": line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

inline std::ofstream open_out(const std::string& path, const char* what) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw data_error(std::string(what) + ": cannot write " + path);
    return f;
}

inline void require_file(const std::string& path, const char* what) {
    if (!std::filesystem::exists(path)) throw data_error(std::string(what) + ": no such file: " + path);
}

}  // namespace detail

// --- run configuration ------------------------------------------------------------

// Compact model schema: explicit dimensions plus lane-setup knobs; a full
// "lane" object (as written by checkpoints) is accepted verbatim instead.
inline model::ModelConfig model_config_from_user(const nlohmann::json& j) {
    if (j.contains("lane")) return checkpoint::model_config_from_json(j);
    model::ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.model_dim = j.at("model_dim").get<int>();
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.head_dim = j.at("head_dim").get<int>();
        cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
        cfg.max_steps = j.at("max_steps").get<int>();
        cfg.tied_unembedding = j.value("tied_unembedding", false);
        cfg.rms_eps = j.value("rms_eps", 1e-5);
        cfg.score_dim_override = j.value("score_dim_override", 0);
        const std::string init = j.value("lane_init", "groupthink");
        if (init != "groupthink" && init != "ntk")
            throw invalid_parameter_error("model config: lane_init must be groupthink or ntk");
        cfg.lane = rope::LaneRopeParams::make(
            cfg.head_dim, j.value("rope_base", 10000.0),
            init == "ntk" ? rope::LaneInit::ntk : rope::LaneInit::groupthink,
            j.value("sequence_gap", static_cast<long long>(8192)), j.value("pretrain_context", 0.0),
            j.value("n_max", 1), j.value("bias_norm", 0.0), j.value("ramp_alpha", 4.0),
            j.value("ramp_beta", 32.0));
        cfg.bias_dim = cfg.lane.bias_dim;
    } catch (const nlohmann::json::exception& e) {
        throw invalid_parameter_error(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

struct RunConfig {
    std::optional<model::ModelConfig> model;
    std::string checkpoint_in, checkpoint_out, dataset, metrics_out, results_out, mode;
    uint64_t seed = 0;
    bool has_seed = false;
    engine::GenerationRequest eng;  // prompt left empty; defaults only
    int samples_per_query = 1;
    training::OptimConfig optim;
    training::KtoConfig kto;
};

inline RunConfig load_run_config(const std::string& path) {
    detail::require_file(path, "config");
    nlohmann::json j = detail::read_json_file(path, "config");
    RunConfig rc;
    try {
        if (j.contains("seed")) {
            rc.seed = j.at("seed").get<uint64_t>();
            rc.has_seed = true;
        }
        if (j.contains("model")) {
            rc.model = model_config_from_user(j.at("model"));
        } else if (j.contains("model_config")) {
            const std::string mpath = j.at("model_config").get<std::string>();
            detail::require_file(mpath, "model config");
            rc.model = model_config_from_user(detail::read_json_file(mpath, "model config"));
        }
        rc.checkpoint_in = j.value("checkpoint_in", "");
        rc.checkpoint_out = j.value("checkpoint_out", "");
        rc.dataset = j.value("dataset", "");
        rc.metrics_out = j.value("metrics_out", "");
        rc.results_out = j.value("results_out", "");
        rc.mode = j.value("mode", "");
        if (j.contains("engine")) {
            const auto& e = j.at("engine");
            rc.eng.lanes = e.value("lanes", rc.eng.lanes);
            rc.eng.temperature = e.value("temperature", rc.eng.temperature);
            rc.eng.top_p = e.value("top_p", rc.eng.top_p);
            rc.eng.max_new_tokens = e.value("max_new_tokens", rc.eng.max_new_tokens);
            rc.eng.eos_id = e.value("eos_id", rc.eng.eos_id);
            rc.eng.marker_id = e.value("marker_id", rc.eng.marker_id);
            rc.eng.shared_prompt = e.value("shared_prompt", rc.eng.shared_prompt);
            rc.samples_per_query = e.value("samples_per_query", rc.samples_per_query);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            rc.mode = t.value("mode", rc.mode);
            rc.optim.lr = t.value("lr", rc.optim.lr);
            rc.optim.fast_lr = t.value("fast_lr", rc.optim.fast_lr);
            rc.optim.warmup_ratio = t.value("warmup_ratio", rc.optim.warmup_ratio);
            rc.optim.weight_decay = t.value("weight_decay", rc.optim.weight_decay);
            rc.optim.epochs = t.value("epochs", rc.optim.epochs);
            rc.optim.batch_size = t.value("batch_size", rc.optim.batch_size);
            rc.optim.shuffle = t.value("shuffle", rc.optim.shuffle);
            rc.optim.checkpoint_interval = t.value("checkpoint_interval", rc.optim.checkpoint_interval);
        }
        if (j.contains("kto")) {
            const auto& k = j.at("kto");
            rc.kto.beta = k.value("beta", rc.kto.beta);
            rc.kto.lambda_d = k.value("lambda_d", rc.kto.lambda_d);
            rc.kto.lambda_u = k.value("lambda_u", rc.kto.lambda_u);
            rc.kto.length_normalized = k.value("length_normalized", rc.kto.length_normalized);
        }
    } catch (const nlohmann::json::exception& e) {
        throw invalid_parameter_error(std::string("config: ") + e.what());
    }
    rc.optim.seed = rc.seed;
    rc.eng.seed = rc.seed;
    return rc;
}

// Resolved-config echo written into artifacts.
inline nlohmann::json effective_config(const RunConfig& rc) {
    nlohmann::json j;
    j["seed"] = rc.seed;
    j["model"] = rc.model ? checkpoint::model_config_to_json(*rc.model) : nlohmann::json();
    j["checkpoint_in"] = rc.checkpoint_in;
    j["checkpoint_out"] = rc.checkpoint_out;
    j["dataset"] = rc.dataset;
    j["mode"] = rc.mode;
    j["engine"] = {{"lanes", rc.eng.lanes},
                   {"temperature", rc.eng.temperature},
                   {"top_p", rc.eng.top_p},
                   {"max_new_tokens", rc.eng.max_new_tokens},
                   {"eos_id", rc.eng.eos_id},
                   {"marker_id", rc.eng.marker_id},
                   {"shared_prompt", rc.eng.shared_prompt},
                   {"samples_per_query", rc.samples_per_query}};
    j["train"] = {{"lr", rc.optim.lr},
                  {"fast_lr", rc.optim.fast_lr},
                  {"warmup_ratio", rc.optim.warmup_ratio},
                  {"weight_decay", rc.optim.weight_decay},
                  {"epochs", rc.optim.epochs},
                  {"batch_size", rc.optim.batch_size},
                  {"shuffle", rc.optim.shuffle},
                  {"checkpoint_interval", rc.optim.checkpoint_interval}};
    j["kto"] = {{"beta", rc.kto.beta},
                {"lambda_d", rc.kto.lambda_d},
                {"lambda_u", rc.kto.lambda_u},
                {"length_normalized", rc.kto.length_normalized}};
    return j;
}

namespace detail {

template <class S>
inline std::pair<model::ModelConfig, model::ModelParameters<S>> resolve_model(const RunConfig& rc,
                                                                              bool allow_random) {
    if (!rc.checkpoint_in.empty()) {
        require_file(rc.checkpoint_in + "/manifest.json", "checkpoint");
        model::ModelParameters<S> params;
        model::ModelConfig cfg = checkpoint::load(rc.checkpoint_in, params);
        return {cfg, std::move(params)};
    }
    if (!rc.model) throw invalid_parameter_error("config: need model or checkpoint_in");
    if (!allow_random) throw invalid_parameter_error("config: this command needs checkpoint_in");
    if (!rc.has_seed) throw invalid_parameter_error("config: seed required to initialize a model");
    return {*rc.model, model::ModelParameters<S>::random_init(*rc.model, rc.seed)};
}

template <class S>
inline training::CheckpointFn<S> interval_saver(const RunConfig& rc, const model::ModelConfig& cfg) {
    if (rc.checkpoint_out.empty() || rc.optim.checkpoint_interval <= 0) return {};
    std::string base = rc.checkpoint_out;
    model::ModelConfig c = cfg;
    return [base, c](int step, const model::ModelParameters<S>& p) {
        model::ModelParameters<S> copy = p;
        checkpoint::save(base + ".step" + std::to_string(step), c, copy);
    };
}

inline void write_metrics(const std::string& path, const nlohmann::json& echo,
                          const std::vector<training::StepMetrics>& metrics) {
    auto f = open_out(path, "metrics");
    f << nlohmann::json{{"type", "config"}, {"run", echo}}.dump() << "\n";
    for (const auto& m : metrics)
        f << nlohmann::json{{"type", "step"}, {"step", m.step},           {"loss", m.loss},
                            {"lr", m.lr},     {"grad_norm", m.grad_norm}, {"mode", m.mode}}
                 .dump()
          << "\n";
}

}  // namespace detail

// --- subcommands ------------------------------------------------------------------

inline int cmd_train(const std::string& config_path, const std::string& mode_flag, std::ostream& out) {
    RunConfig rc = load_run_config(config_path);
    if (!mode_flag.empty()) rc.mode = mode_flag;
    if (rc.mode != "sft" && rc.mode != "kto")
        throw invalid_parameter_error("train: mode must be sft or kto");
    if (!rc.has_seed) throw invalid_parameter_error("train: seed required");
    if (rc.dataset.empty()) throw invalid_parameter_error("train: dataset required");
    if (rc.checkpoint_out.empty()) throw invalid_parameter_error("train: checkpoint_out required");
    detail::require_file(rc.dataset, "dataset");

    auto [cfg, params] = detail::resolve_model<float>(rc, /*allow_random=*/true);
    std::vector<training::StepMetrics> metrics;
    if (rc.mode == "sft") {
        auto episodes = detail::load_records<data::CollabEpisode>(rc.dataset, "dataset");
        if (episodes.empty()) throw data_error("train: dataset has no episodes");
        std::vector<training::SftBatch> batches;
        batches.reserve(episodes.size());
        for (const auto& e : episodes) batches.push_back(data::episode_to_batch(e));
        metrics = training::train_sft(cfg, params, batches, rc.optim, detail::interval_saver<float>(rc, cfg));
    } else {
        auto groups = detail::load_records<training::PreferenceGroup>(rc.dataset, "dataset");
        if (groups.empty()) throw data_error("train: dataset has no preference groups");
        model::ModelParameters<float> ref = params;  // frozen starting point
        metrics = training::train_kto(cfg, params, cfg, ref, groups, rc.kto, rc.optim,
                                      detail::interval_saver<float>(rc, cfg));
    }
    checkpoint::save(rc.checkpoint_out, cfg, params);
    const std::string mpath =
        rc.metrics_out.empty() ? rc.checkpoint_out + "/metrics.jsonl" : rc.metrics_out;
    detail::write_metrics(mpath, effective_config(rc), metrics);
    out << nlohmann::json{{"type", "final"},
                          {"mode", rc.mode},
                          {"steps", metrics.size()},
                          {"loss", metrics.empty() ? 0.0 : metrics.back().loss},
                          {"checkpoint", rc.checkpoint_out},
                          {"metrics", mpath}}
               .dump()
        << "\n";
    return kExitOk;
}

struct QueryRow {
    std::vector<int> prompt;
};

inline void from_json(const nlohmann::json& j, QueryRow& q) { j.at("prompt").get_to(q.prompt); }

inline int cmd_generate(const std::string& config_path, const std::string& queries_path,
                        const std::string& out_path, int threads, std::ostream& out) {
    RunConfig rc = load_run_config(config_path);
    if (!rc.has_seed) throw invalid_parameter_error("generate: seed required");
    const std::string qpath = queries_path.empty() ? rc.dataset : queries_path;
    if (qpath.empty()) throw invalid_parameter_error("generate: queries file required");
    detail::require_file(qpath, "queries");
    auto [cfg, params] = detail::resolve_model<float>(rc, /*allow_random=*/true);

    auto rows = detail::load_records<QueryRow>(qpath, "queries");
    if (rows.empty()) throw data_error("generate: no queries");
    std::vector<std::vector<int>> prompts;
    prompts.reserve(rows.size());
    for (auto& r : rows) prompts.push_back(std::move(r.prompt));

    auto records = engine::run_batch(cfg, params, prompts, rc.samples_per_query, rc.eng, threads);

    std::ofstream file;
    std::ostream* sink = &out;
    const std::string rpath = out_path.empty() ? rc.results_out : out_path;
    if (!rpath.empty()) {
        file = detail::open_out(rpath, "results");
        sink = &file;
    }
    *sink << nlohmann::json{{"type", "config"}, {"run", effective_config(rc)}}.dump() << "\n";
    for (const auto& r : records) {
        nlohmann::json j{{"type", "completion"}, {"query_id", r.query_id}, {"group_id", r.group_id},
                         {"lane_id", r.lane_id}, {"tokens", r.tokens},     {"finish", to_string(r.finish)}};
        j["answer"] = r.answer ? nlohmann::json(*r.answer) : nlohmann::json();
        *sink << j.dump() << "\n";
    }
    if (!rpath.empty())
        out << nlohmann::json{{"type", "final"}, {"completions", records.size()}, {"results", rpath}}.dump()
            << "\n";
    return kExitOk;
}

// Majority vote over consecutive chunks of k answers per query; samples with
// no extractable answer are dropped inside the vote, a fully absent chunk
// yields no vote and scores as incorrect when truth is present.
inline int cmd_eval(const std::string& results_path, int k, const std::string& truth_path,
                    const std::string& out_path, std::ostream& out) {
    if (k < 1) throw invalid_parameter_error("eval: k must be positive");
    detail::require_file(results_path, "results");
    std::ifstream f(results_path);
    std::map<int, std::vector<std::optional<int>>> answers;  // query -> answers in file order
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("results: line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object() || j.value("type", "completion") != "completion") continue;
        if (!j.contains("query_id") || !j.contains("answer"))
            throw data_error("results: line " + std::to_string(line_no) + ": not a completion row");
        std::optional<int> ans;
        if (!j.at("answer").is_null()) ans = j.at("answer").get<int>();
        answers[j.at("query_id").get<int>()].push_back(ans);
    }
    if (answers.empty()) throw data_error("eval: no completion rows in " + results_path);

    std::map<int, nlohmann::json> truth;
    if (!truth_path.empty()) {
        detail::require_file(truth_path, "truth");
        nlohmann::json tj = detail::read_json_file(truth_path, "truth");
        if (tj.is_array()) {
            for (size_t i = 0; i < tj.size(); ++i) truth[static_cast<int>(i)] = tj[i];
        } else if (tj.is_object()) {
            for (auto it = tj.begin(); it != tj.end(); ++it) truth[std::stoi(it.key())] = it.value();
        } else {
            throw data_error("truth: expected array or object");
        }
    }

    long chunks = 0, voted = 0, correct = 0;
    nlohmann::json per_query = nlohmann::json::array();
    for (const auto& [qid, ans] : answers) {
        nlohmann::json votes = nlohmann::json::array();
        for (size_t at = 0; at + static_cast<size_t>(k) <= ans.size(); at += static_cast<size_t>(k)) {
            std::vector<std::optional<int>> chunk(ans.begin() + static_cast<long>(at),
                                                  ans.begin() + static_cast<long>(at) + k);
            auto vote = engine::majority_vote(chunk);
            ++chunks;
            if (vote) ++voted;
            votes.push_back(vote ? nlohmann::json(*vote) : nlohmann::json());
            auto it = truth.find(qid);
            if (it != truth.end() && vote && it->second.is_number_integer() &&
                it->second.get<int>() == *vote)
                ++correct;
        }
        per_query.push_back({{"query_id", qid}, {"votes", votes}});
    }

    nlohmann::json summary{{"metric", "maj@" + std::to_string(k)},
                           {"k", k},
                           {"queries", answers.size()},
                           {"chunks", chunks},
                           {"voted", voted},
                           {"per_query", per_query},
                           {"config", {{"results", results_path}, {"truth", truth_path}, {"k", k}}}};
    if (!truth.empty()) {
        summary["correct"] = correct;
        summary["accuracy"] = chunks > 0 ? static_cast<double>(correct) / static_cast<double>(chunks) : 0.0;
    }
    if (!out_path.empty()) {
        auto of = detail::open_out(out_path, "eval output");
        of << summary.dump(2) << "\n";
    }
    out << summary.dump() << "\n";
    return kExitOk;
}

inline int cmd_bench(const std::string& config_path, const std::string& csv_path,
                     const std::string& summary_path, std::ostream& out) {
    bench::BenchConfig bc = bench::profile_from_env();
    std::optional<model::ModelConfig> user_model;
    if (!config_path.empty()) {
        detail::require_file(config_path, "config");
        nlohmann::json j = detail::read_json_file(config_path, "config");
        try {
            bc.batch = j.value("batch", bc.batch);
            bc.lane_counts = j.value("lane_counts", bc.lane_counts);
            bc.prompt_len = j.value("prompt_len", bc.prompt_len);
            bc.checkpoints = j.value("checkpoints", bc.checkpoints);
            bc.repeats = j.value("repeats", bc.repeats);
            bc.warmup = j.value("warmup", bc.warmup);
            bc.seed = j.value("seed", bc.seed);
            bc.include_baseline = j.value("include_baseline", bc.include_baseline);
            if (j.contains("model")) user_model = model_config_from_user(j.at("model"));
        } catch (const nlohmann::json::exception& e) {
            throw invalid_parameter_error(std::string("bench config: ") + e.what());
        }
    }
    bc.validate();
    model::ModelConfig cfg = user_model ? *user_model : bench::bench_model_config(bc);
    auto params = model::ModelParameters<float>::random_init(cfg, bc.seed);
    auto result = bench::run_generation_bench(cfg, params, bc);
    const std::string csv = bench::to_csv(result.rows);
    if (!csv_path.empty()) {
        auto f = detail::open_out(csv_path, "csv");
        f << csv;
        out << bench::to_text_table(result.rows);
    } else {
        out << csv;
    }
    nlohmann::json summary = bench::summary_json(bc, cfg, result.rows);
    if (!summary_path.empty()) {
        auto f = detail::open_out(summary_path, "summary");
        f << summary.dump(2) << "\n";
    }
    return kExitOk;
}

inline int cmd_gen_collab(const std::string& out_path, int episodes, int lanes, int n_keys, uint64_t seed,
                          std::ostream& out) {
    data::ToyVocab vocab;
    vocab.n_keys = n_keys;
    auto ds = data::gen_collab_dataset(vocab, seed, episodes, lanes);
    auto f = detail::open_out(out_path, "output");
    nlohmann::json echo{{"command", "data gen-collab"},
                        {"episodes", episodes},
                        {"lanes", lanes},
                        {"n_keys", n_keys},
                        {"seed", seed}};
    f << nlohmann::json{{"type", "config"}, {"run", echo}}.dump() << "\n";
    f << nlohmann::json{{"type", "vocab"}, {"vocab", data::vocab_to_json(vocab)}}.dump() << "\n";
    data::write_jsonl(f, ds);
    out << nlohmann::json{{"type", "final"}, {"episodes", ds.size()}, {"out", out_path}}.dump() << "\n";
    return kExitOk;
}

inline int cmd_gen_kto(const std::string& out_path, int queries, int facts, double correct_rate,
                       uint64_t seed, std::ostream& out) {
    data::ToyVocab vocab;
    data::KtoGenConfig gc;
    gc.n_queries = queries;
    gc.facts_per_query = facts;
    gc.correct_rate = correct_rate;
    auto groups = data::gen_kto_dataset(vocab, seed, gc);
    auto f = detail::open_out(out_path, "output");
    nlohmann::json echo{{"command", "data gen-kto"},
                        {"queries", queries},
                        {"facts", facts},
                        {"correct_rate", correct_rate},
                        {"seed", seed}};
    f << nlohmann::json{{"type", "config"}, {"run", echo}}.dump() << "\n";
    f << nlohmann::json{{"type", "vocab"}, {"vocab", data::vocab_to_json(vocab)}}.dump() << "\n";
    data::write_jsonl(f, groups);
    out << nlohmann::json{{"type", "final"}, {"groups", groups.size()}, {"out", out_path}}.dump() << "\n";
    return kExitOk;
}

inline int cmd_curate(const std::string& in_path, const std::string& out_path,
                      const data::CurationConfig& cc, std::ostream& out) {
    cc.validate();
    detail::require_file(in_path, "input");
    std::ifstream in(in_path);
    std::ofstream of;
    const bool write_kept = !out_path.empty();
    nlohmann::json echo{{"command", "data curate"},
                        {"in", in_path},
                        {"min_messages", cc.min_messages},
                        {"max_messages", cc.max_messages},
                        {"interaction_threshold_factor", cc.interaction_threshold_factor},
                        {"key_phrases", cc.key_phrases},
                        {"names", cc.names}};
    if (write_kept) {
        of = detail::open_out(out_path, "output");
        of << nlohmann::json{{"type", "config"}, {"run", echo}}.dump() << "\n";
    }
    data::CurationReport report;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::string verdict;
        data::ConversationRecord rec;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            if (j.is_object() && j.contains("type")) continue;  // header from a previous pass
            rec = j.get<data::ConversationRecord>();
            verdict = data::curation_verdict(rec, cc);
        } catch (const nlohmann::json::exception&) {
            verdict = "parse";
        }
        if (verdict == "kept") {
            ++report.kept;
            if (write_kept) {
                nlohmann::json j = rec;
                of << j.dump() << "\n";
            }
        } else {
            ++report.rejected_by_reason[verdict];
        }
    }
    nlohmann::json rj = data::report_to_json(report);
    rj["type"] = "report";
    rj["config"] = echo;
    out << rj.dump() << "\n";
    return kExitOk;
}

// --- selftest -----------------------------------------------------------------------

namespace selftest {

struct Check {
    std::string name;
    bool ok = false;
    std::string note;
    explicit Check(std::string n) : name(std::move(n)) {}
};

inline void run_rope_checks(std::vector<Check>& cs) {
    {
        Check c{"rotation-orientation"};
        float x = 1.0f, y = 0.0f;
        rope::rotate_plane(x, y, rope::kTwoPi / 4.0);
        c.ok = std::abs(x) < 1e-6f && std::abs(y + 1.0f) < 1e-6f;
        cs.push_back(c);
    }
    {
        Check c{"within-lane-invariance"};
        rng::Stream rs(1, 1, 1);
        auto rp = rope::RopeParams::make(8);
        auto lp = rope::LaneRopeParams::make(8, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, 4, 1.0);
        c.ok = true;
        for (int t = 0; t < 200 && c.ok; ++t) {
            std::vector<double> q(8), k(8);
            for (auto& v : q) v = rs.normal();
            for (auto& v : k) v = rs.normal();
            int i = static_cast<int>(rs.uniform_int(0, 500)), j = static_cast<int>(rs.uniform_int(0, 500));
            int m = static_cast<int>(rs.uniform_int(0, 3));
            auto qr = rope::lane_rotate<double>(q, i, m, rp.theta, lp.omega);
            auto kr = rope::lane_rotate<double>(k, j, m, rp.theta, lp.omega);
            auto q0 = rope::rotate<double>(q, i, rp.theta);
            auto k0 = rope::rotate<double>(k, j, rp.theta);
            double a = 0, b = 0;
            for (int d = 0; d < 8; ++d) {
                a += qr[static_cast<size_t>(d)] * kr[static_cast<size_t>(d)];
                b += q0[static_cast<size_t>(d)] * k0[static_cast<size_t>(d)];
            }
            if (std::abs(a - b) > 1e-4 * std::max(1.0, std::abs(b))) c.ok = false;
        }
        cs.push_back(c);
    }
    {
        Check c{"virtual-position-equivalence"};
        rng::Stream rs(2, 2, 2);
        auto rp = rope::RopeParams::make(8);
        auto omega = rope::groupthink_lane_frequencies(rp.theta, 8192);
        c.ok = true;
        for (int t = 0; t < 50 && c.ok; ++t) {
            std::vector<double> q(8), k(8);
            for (auto& v : q) v = rs.normal();
            for (auto& v : k) v = rs.normal();
            int i = static_cast<int>(rs.uniform_int(0, 63)), j = static_cast<int>(rs.uniform_int(0, 63));
            int m = static_cast<int>(rs.uniform_int(0, 3)), n = static_cast<int>(rs.uniform_int(0, 3));
            auto qr = rope::lane_rotate<double>(q, i, m, rp.theta, omega);
            auto kr = rope::lane_rotate<double>(k, j, n, rp.theta, omega);
            auto qv = rope::rotate<double>(q, 8192LL * m + i, rp.theta);
            auto kv = rope::rotate<double>(k, 8192LL * n + j, rp.theta);
            double a = 0, b = 0;
            for (int d = 0; d < 8; ++d) {
                a += qr[static_cast<size_t>(d)] * kr[static_cast<size_t>(d)];
                b += qv[static_cast<size_t>(d)] * kv[static_cast<size_t>(d)];
            }
            if (std::abs(a - b) > 1e-4 * std::max(1.0, std::abs(b))) c.ok = false;
        }
        cs.push_back(c);
    }
    {
        Check c{"ntk-ramp-anchors"};
        const double eps = 1e-9;
        c.ok = rope::ntk_ramp_from_ratio(4.0 - eps, 4.0, 32.0) == 0.0 &&
               rope::ntk_ramp_from_ratio(32.0 + eps, 4.0, 32.0) == 1.0 &&
               std::abs(rope::ntk_ramp_from_ratio(18.0, 4.0, 32.0) - 0.5) < 1e-12;
        cs.push_back(c);
    }
}

inline void run_attention_checks(std::vector<Check>& cs) {
    {
        Check c{"mask-rule"};
        attention::MaskRule r;
        c.ok = attention::visible({1, 3}, {0, 2}, r, 2) && !attention::visible({1, 3}, {0, 3}, r, 2) &&
               attention::visible({1, 3}, {1, 3}, r, 2) && attention::visible({0, 3}, {0, 2}, r, 2);
        attention::MaskRule inter;
        inter.same_step_cross_lane_visible = true;
        c.ok = c.ok && attention::visible({1, 3}, {0, 3}, inter, 2) &&
               !attention::visible({0, 3}, {1, 3}, inter, 2);
        cs.push_back(c);
    }
    {
        Check c{"attention-oracle"};
        rng::Stream rs(3, 3, 3);
        c.ok = true;
        for (int t = 0; t < 5 && c.ok; ++t) {
            const int N = 2 + static_cast<int>(rs.uniform_int(0, 2));
            const int L = 4 + static_cast<int>(rs.uniform_int(0, 8));
            auto lp = rope::LaneRopeParams::make(8, 10000.0, rope::LaneInit::ntk, 8192, 1024.0, 4, 0.7);
            auto layout = attention::make_layout(std::vector<int>(static_cast<size_t>(N), L));
            const int P = layout.size();
            Mat<float> Q(P, 8 + lp.bias_dim), K(P, 8 + lp.bias_dim), V(P, 8);
            for (auto& v : Q.v) v = static_cast<float>(rs.normal());
            for (auto& v : K.v) v = static_cast<float>(rs.normal());
            for (auto& v : V.v) v = static_cast<float>(rs.normal());
            attention::MaskRule rule;
            attention::AttnOptions opt;
            auto fast = attention::cross_lane_attention(Q, K, V, layout, lp, rule, opt);
            auto slow = attention::dense_oracle_attention(Q, K, V, layout, lp, rule, opt);
            for (size_t i = 0; i < fast.v.size(); ++i)
                if (std::abs(fast.v[i] - slow.v[i]) > 1e-5f) c.ok = false;
        }
        cs.push_back(c);
    }
}

template <class S>
inline model::ModelConfig tiny_model_config(int n_max, double bias_norm) {
    model::ModelConfig cfg;
    cfg.vocab_size = 31;
    cfg.model_dim = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.mlp_hidden = 24;
    cfg.max_steps = 64;
    cfg.lane =
        rope::LaneRopeParams::make(8, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, n_max, bias_norm);
    cfg.bias_dim = cfg.lane.bias_dim;
    return cfg;
}

inline void run_model_checks(std::vector<Check>& cs) {
    {
        Check c{"prefill-decode-consistency"};
        auto cfg = tiny_model_config<float>(2, 0.5);
        auto params = model::ModelParameters<float>::random_init(cfg, 9);
        engine::GenerationRequest req;
        req.prompt = {1, 2, 3};
        req.lanes = 2;
        req.max_new_tokens = 6;
        req.seed = 4;
        engine::GroupTrace<float> trace;
        auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
        auto res = engine::generate_group(cfg, params, req, sampler, &trace);
        (void)res;
        auto ft = model::forward(cfg, params, trace.flat_tokens, trace.layout, attention::MaskRule{});
        double mx = 0.0;
        for (size_t i = 0; i < ft.logits.v.size(); ++i)
            mx = std::max(mx, static_cast<double>(std::abs(ft.logits.v[i] - trace.logits.v[i])));
        c.ok = mx < 1e-4;
        c.note = "max|diff|=" + std::to_string(mx);
        cs.push_back(c);
    }
    {
        Check c{"gradient-check"};
        auto cfg = tiny_model_config<double>(2, 0.5);
        auto params = model::ModelParameters<double>::random_init(cfg, 11);
        auto layout = attention::make_layout({4, 4});
        std::vector<int> tokens(static_cast<size_t>(layout.size()));
        rng::Stream rs(5, 5, 5);
        for (auto& t : tokens) t = static_cast<int>(rs.uniform_int(0, cfg.vocab_size - 1));
        std::vector<int> targets(tokens.size(), 0);
        std::vector<uint8_t> mask(tokens.size(), 0);
        for (size_t p = 0; p + 1 < tokens.size(); ++p) {
            targets[p] = tokens[p + 1];
            mask[p] = 1;
        }
        attention::MaskRule rule;
        auto loss_of = [&]() {
            auto t = model::forward(cfg, params, tokens, layout, rule);
            return model::masked_cross_entropy(t.logits, targets, mask);
        };
        auto ft = model::forward(cfg, params, tokens, layout, rule);
        auto grads = model::backward_cross_entropy(cfg, params, ft, targets, mask);
        c.ok = true;
        double worst = 0.0;
        // a few coordinates from distinct families, omega included
        struct Probe {
            double* p;
            double* g;
        };
        std::vector<Probe> probes = {
            {&params.layers[0].wq.v[3], &grads.layers[0].wq.v[3]},
            {&params.layers[1].w2.v[7], &grads.layers[1].w2.v[7]},
            {&params.embed.v[5], &grads.embed.v[5]},
            {&params.omega[1], &grads.omega[1]},
            {&params.layers[0].bk[cfg.head_dim + 1], &grads.layers[0].bk[cfg.head_dim + 1]},
        };
        for (auto& pr : probes) {
            const double h = 1e-5, save = *pr.p;
            *pr.p = save + h;
            double up = loss_of();
            *pr.p = save - h;
            double dn = loss_of();
            *pr.p = save;
            const double fd = (up - dn) / (2 * h);
            const double rel = std::abs(fd - *pr.g) / std::max({1e-8, std::abs(fd), std::abs(*pr.g)});
            worst = std::max(worst, rel);
            if (rel > 1e-3) c.ok = false;
        }
        c.note = "worst rel=" + std::to_string(worst);
        cs.push_back(c);
    }
}

inline void run_engine_checks(std::vector<Check>& cs) {
    {
        Check c{"sampler-rules"};
        engine::GenerationRequest req;
        req.temperature = 0.0;
        std::vector<float> logits = {1.0f, 3.0f, 3.0f, 0.0f};
        c.ok = engine::sample_token<float>(logits, 0.0, 1.0, 0.3) == 1;  // argmax tie -> lowest id
        // top_p cut: probs 0.6/0.3/0.1 at T=1; top_p=0.5 keeps only id 0
        std::vector<float> l2 = {std::log(0.6f), std::log(0.3f), std::log(0.1f)};
        bool always0 = true;
        for (double u = 0.05; u < 1.0; u += 0.1)
            if (engine::sample_token<float>(l2, 1.0, 0.5, u) != 0) always0 = false;
        c.ok = c.ok && always0;
        cs.push_back(c);
    }
    {
        Check c{"extract-and-vote"};
        const int M = 7;
        using engine::extract_answer;
        std::vector<int> a = {1, M, 5};
        std::vector<int> b = {1, M, 5, M, 9};
        std::vector<int> trail = {1, M};
        c.ok = extract_answer(a, M) == std::optional<int>(5) &&
               extract_answer(b, M) == std::optional<int>(9) && !extract_answer(trail, M).has_value() &&
               !extract_answer(std::vector<int>{1, 2}, M).has_value();
        std::vector<std::optional<int>> votes = {5, std::nullopt, 9, 5};
        std::vector<std::optional<int>> tie = {9, 5, 5, 9};
        std::vector<std::optional<int>> none = {std::nullopt, std::nullopt};
        c.ok = c.ok && engine::majority_vote(votes) == std::optional<int>(5) &&
               engine::majority_vote(tie) == std::optional<int>(9) && !engine::majority_vote(none);
        cs.push_back(c);
    }
}

inline void run_training_checks(std::vector<Check>& cs) {
    {
        Check c{"kto-value-function"};
        using training::asymmetric_sigmoid;
        c.ok = std::abs(asymmetric_sigmoid(0.0) - 0.5) < 1e-12 &&
               std::abs(asymmetric_sigmoid(2.0) - 0.8807970779778823) < 1e-6 &&
               std::abs(asymmetric_sigmoid(40.0) - 1.0) < 1e-12 &&
               asymmetric_sigmoid(-40.0) == -39.5;  // linear branch, saturation only above
        double prev = asymmetric_sigmoid(-5.0);
        for (double x = -4.9; x < 5.0; x += 0.1) {
            double v = asymmetric_sigmoid(x);
            if (v <= prev) c.ok = false;
            prev = v;
        }
        cs.push_back(c);
    }
    {
        Check c{"kto-gradient-signs"};
        rng::Stream rs(6, 6, 6);
        c.ok = true;
        training::KtoConfig kc;
        for (int t = 0; t < 200; ++t) {
            double delta = rs.normal() * 3.0;
            // larger policy-vs-ref gap always helps desirable, hurts undesirable
            double gd = training::kto_sample_grad(delta, true, kc);
            double gu = training::kto_sample_grad(delta, false, kc);
            if (!(gd < 0.0) || !(gu > 0.0)) c.ok = false;
        }
        cs.push_back(c);
    }
}

inline void run_data_checks(std::vector<Check>& cs) {
    {
        Check c{"curation-boundary"};
        data::ConversationRecord rec;
        rec.question = "q";
        rec.ground_truth = "g";
        rec.assistants = {"Alice", "Bob"};
        rec.final_answers = {"g", "g"};
        rec.correct = {1, 1};
        data::CurationConfig cc;
        cc.min_messages = 1;
        cc.max_messages = 9;
        rec.messages = {{"Bob Bob Bob Bob"}, {"hi"}};
        bool at = data::curation_verdict(rec, cc) == "interaction";
        rec.messages = {{"Bob Bob Bob Bob Bob"}, {"hi"}};
        bool above = data::curation_verdict(rec, cc) == "kept";
        c.ok = at && above;
        cs.push_back(c);
    }
    {
        Check c{"checkpoint-roundtrip"};
        auto cfg = tiny_model_config<float>(2, 0.25);
        auto params = model::ModelParameters<float>::random_init(cfg, 21);
        auto dir = std::filesystem::temp_directory_path() / "lanerope-selftest-ckpt";
        checkpoint::save(dir, cfg, params);
        model::ModelParameters<float> back;
        auto cfg2 = checkpoint::load(dir, back);
        c.ok = cfg2.model_dim == cfg.model_dim && cfg2.bias_dim == cfg.bias_dim;
        params.for_each_array([&](const std::string& name, float* d, size_t n, const std::vector<int>&) {
            back.for_each_array([&](const std::string& name2, float* d2, size_t n2, const std::vector<int>&) {
                if (name != name2) return;
                if (n != n2) {
                    c.ok = false;
                    return;
                }
                for (size_t i = 0; i < n; ++i)
                    if (d[i] != d2[i]) c.ok = false;
            });
        });
        std::filesystem::remove_all(dir);
        cs.push_back(c);
    }
}

}  // namespace selftest

inline int cmd_selftest(std::ostream& out) {
    std::vector<selftest::Check> cs;
    selftest::run_rope_checks(cs);
    selftest::run_attention_checks(cs);
    selftest::run_model_checks(cs);
    selftest::run_engine_checks(cs);
    selftest::run_training_checks(cs);
    selftest::run_data_checks(cs);
    int failures = 0;
    for (const auto& c : cs) {
        out << (c.ok ? "ok   " : "FAIL ") << c.name;
        if (!c.note.empty()) out << " (" << c.note << ")";
        out << "\n";
        if (!c.ok) ++failures;
    }
    out << cs.size() - static_cast<size_t>(failures) << "/" << cs.size() << " checks passed\n";
    return failures == 0 ? kExitOk : kExitSelftest;
}

// --- entry point --------------------------------------------------------------------

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"lane-parallel transformer toolkit"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);

    auto* train = app.add_subcommand("train", "run sft or kto training from a JSON config");
    std::string train_config, train_mode;
    train->add_option("--config", train_config, "run config JSON")->required();
    train->add_option("--mode", train_mode, "sft or kto (overrides config)");

    auto* gen = app.add_subcommand("generate", "sample lane groups for a batch of queries");
    std::string gen_config, gen_queries, gen_out;
    gen->add_option("--config", gen_config, "run config JSON")->required();
    gen->add_option("--queries", gen_queries, "queries JSONL ({\"prompt\":[...]} per line)");
    gen->add_option("--out", gen_out, "results JSONL path (default stdout)");

    auto* ev = app.add_subcommand("eval", "majority vote over generated answers");
    std::string ev_results, ev_truth, ev_out;
    int ev_k = 4;
    ev->add_option("--results", ev_results, "results JSONL from generate")->required();
    ev->add_option("--k", ev_k, "votes per chunk");
    ev->add_option("--truth", ev_truth, "ground truth JSON (array or {query_id: answer})");
    ev->add_option("--out", ev_out, "summary JSON path");

    auto* bn = app.add_subcommand("bench", "generation latency sweep over lane counts");
    std::string bn_config, bn_csv, bn_summary;
    bn->add_option("--config", bn_config, "bench config JSON (overrides profile)");
    bn->add_option("--csv", bn_csv, "CSV output path (default stdout)");
    bn->add_option("--summary", bn_summary, "JSON summary path");

    auto* dt = app.add_subcommand("data", "dataset generators and curation");
    dt->require_subcommand(1);
    auto* gc = dt->add_subcommand("gen-collab", "split-fact collaborative episodes");
    std::string gc_out;
    int gc_eps = 256, gc_lanes = 2, gc_keys = 10;
    uint64_t gc_seed = 1;
    gc->add_option("--out", gc_out, "output JSONL")->required();
    gc->add_option("--episodes", gc_eps, "episode count");
    gc->add_option("--lanes", gc_lanes, "lanes per episode");
    gc->add_option("--n-keys", gc_keys, "fact key vocabulary size");
    gc->add_option("--seed", gc_seed, "generator seed");
    auto* gk = dt->add_subcommand("gen-kto", "preference groups from a scripted noisy solver");
    std::string gk_out;
    int gk_queries = 64, gk_facts = 2;
    double gk_rate = 0.35;
    uint64_t gk_seed = 1;
    gk->add_option("--out", gk_out, "output JSONL")->required();
    gk->add_option("--queries", gk_queries, "query count");
    gk->add_option("--facts", gk_facts, "facts per query");
    gk->add_option("--correct-rate", gk_rate, "solver per-completion accuracy");
    gk->add_option("--seed", gk_seed, "generator seed");
    auto* cu = dt->add_subcommand("curate", "filter conversation records");
    std::string cu_in, cu_out;
    data::CurationConfig cu_cfg;
    cu->add_option("--in", cu_in, "input JSONL")->required();
    cu->add_option("--out", cu_out, "kept records JSONL");
    cu->add_option("--min-messages", cu_cfg.min_messages, "per-assistant minimum");
    cu->add_option("--max-messages", cu_cfg.max_messages, "per-assistant maximum");
    cu->add_option("--threshold-factor", cu_cfg.interaction_threshold_factor,
                   "kept when score > factor * assistants");
    cu->add_option("--phrase", cu_cfg.key_phrases, "key phrase (repeatable)");
    cu->add_option("--name", cu_cfg.names, "assistant name override (repeatable)");

    auto* st = app.add_subcommand("selftest", "fast invariant suite; exit 5 on failure");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(train_config, train_mode, out);
        if (*gen) return cmd_generate(gen_config, gen_queries, gen_out, threads, out);
        if (*ev) return cmd_eval(ev_results, ev_k, ev_truth, ev_out, out);
        if (*bn) return cmd_bench(bn_config, bn_csv, bn_summary, out);
        if (*gc) return cmd_gen_collab(gc_out, gc_eps, gc_lanes, gc_keys, gc_seed, out);
        if (*gk) return cmd_gen_kto(gk_out, gk_queries, gk_facts, gk_rate, gk_seed, out);
        if (*cu) return cmd_curate(cu_in, cu_out, cu_cfg, out);
        if (*st) return cmd_selftest(out);
    } catch (const data_error& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitData;
    } catch (const numeric_error& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const contract_violation_error& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const invalid_parameter_error& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitUsage;
    } catch (const budget_error& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitUsage;
    } catch (const nlohmann::json::exception& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "ERR: " << e.what() << "\n";
        return kExitUsage;
    }
    err << "ERR: no subcommand\n";
    return kExitUsage;
}

}  // namespace lanerope::cli
