#pragma once

// Deterministic toy-task generators and the conversation curation pipeline.
//
// The toy vocabulary is integers 0..99 plus reserved control tokens and one
// token per fact key. A collaborative episode gives every lane one private
// fact and a query whose answer is the sum of all lanes' facts mod 10, so no
// lane can answer alone; the target trace restates the lane's own fact and
// then emits marker + answer, which is how the fact becomes visible to the
// other lanes mid-generation.
//
// Curation filters conversation records in a fixed order (correctness,
// length, interaction) and reports the first failing filter per record.
// The interaction score sums, over assistants, occurrences of other
// assistants' names and of configured key phrases in that assistant's
// messages; a record is kept only when the score exceeds 2N.

#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanerope/common.hpp"
#include "lanerope/training.hpp"

namespace lanerope::data {

// --- toy vocabulary ---------------------------------------------------------------

struct ToyVocab {
    static constexpr int value_space = 100;  // tokens 0..99 are literal values
    static constexpr int answer_space = 10;  // answers live in 0..9
    static constexpr int query = 100;
    static constexpr int marker = 101;
    static constexpr int eos = 102;
    static constexpr int sep = 103;
    static constexpr int key0 = 104;
    int n_keys = 10;

    int key_token(int k) const {
        if (k < 0 || k >= n_keys) throw invalid_parameter_error("ToyVocab: key index out of range");
        return key0 + k;
    }
    int size() const { return key0 + n_keys; }
};

// One fact per lane; the query names every key, the answer is the mod-10 sum
// of all values. Any single lane's facts leave the answer uniform over the
// missing values, which is the property the collaboration test leans on.
struct ToyCollabTask {
    std::vector<int> keys;    // per lane, index into the vocab key table
    std::vector<int> values;  // per lane, 0..9
    int answer = 0;
};

inline ToyCollabTask make_collab_task(const ToyVocab& vocab, int lanes, rng::Stream& rs) {
    if (lanes < 2) throw invalid_parameter_error("make_collab_task: need at least two lanes");
    if (lanes > vocab.n_keys) throw invalid_parameter_error("make_collab_task: more lanes than keys");
    ToyCollabTask t;
    std::vector<int> pool(static_cast<size_t>(vocab.n_keys));
    for (int i = 0; i < vocab.n_keys; ++i) pool[static_cast<size_t>(i)] = i;
    for (int m = 0; m < lanes; ++m) {
        int j = static_cast<int>(rs.uniform_int(m, vocab.n_keys - 1));
        std::swap(pool[static_cast<size_t>(m)], pool[static_cast<size_t>(j)]);
        t.keys.push_back(pool[static_cast<size_t>(m)]);
        t.values.push_back(static_cast<int>(rs.uniform_int(0, ToyVocab::answer_space - 1)));
    }
    t.answer = 0;
    for (int v : t.values) t.answer = (t.answer + v) % ToyVocab::answer_space;
    return t;
}

// --- collaborative SFT episodes -----------------------------------------------------

struct CollabEpisode {
    std::vector<std::vector<int>> lane_prompts;  // [key, value, QUERY, all keys...]
    std::vector<std::vector<int>> lane_tokens;   // prompt + target
    std::vector<std::vector<uint8_t>> is_target;
    int prompt_len = 0;
    int answer = 0;  // answer token == answer value
};

inline CollabEpisode gen_collab_episode(const ToyVocab& vocab, uint64_t seed, uint64_t index, int lanes) {
    rng::Stream rs(seed, 0x636f6c6cull, index);
    ToyCollabTask task = make_collab_task(vocab, lanes, rs);
    CollabEpisode ep;
    ep.answer = task.answer;
    ep.prompt_len = 3 + lanes;
    for (int m = 0; m < lanes; ++m) {
        std::vector<int> prompt = {vocab.key_token(task.keys[static_cast<size_t>(m)]),
                                   task.values[static_cast<size_t>(m)], ToyVocab::query};
        for (int n = 0; n < lanes; ++n) prompt.push_back(vocab.key_token(task.keys[static_cast<size_t>(n)]));
        std::vector<int> target = {vocab.key_token(task.keys[static_cast<size_t>(m)]),
                                   task.values[static_cast<size_t>(m)], ToyVocab::marker, task.answer,
                                   ToyVocab::eos};
        std::vector<int> full = prompt;
        full.insert(full.end(), target.begin(), target.end());
        std::vector<uint8_t> mask(full.size(), 0);
        for (size_t i = prompt.size(); i < full.size(); ++i) mask[i] = 1;
        ep.lane_prompts.push_back(std::move(prompt));
        ep.lane_tokens.push_back(std::move(full));
        ep.is_target.push_back(std::move(mask));
    }
    return ep;
}

inline std::vector<CollabEpisode> gen_collab_dataset(const ToyVocab& vocab, uint64_t seed, int episodes,
                                                     int lanes) {
    if (episodes < 1) throw invalid_parameter_error("gen_collab_dataset: need at least one episode");
    std::vector<CollabEpisode> out;
    out.reserve(static_cast<size_t>(episodes));
    for (int e = 0; e < episodes; ++e)
        out.push_back(gen_collab_episode(vocab, seed, static_cast<uint64_t>(e), lanes));
    return out;
}

inline training::SftBatch episode_to_batch(const CollabEpisode& ep) {
    return training::make_sft_batch(ep.lane_tokens, ep.is_target, ep.prompt_len);
}

// --- preference data -----------------------------------------------------------------

struct KtoGenConfig {
    int n_queries = 64;
    int completions_per_query = 8;
    int facts_per_query = 2;
    double correct_rate = 0.35;  // scripted solver per-completion accuracy

    void validate() const {
        if (n_queries < 1 || completions_per_query < 2)
            throw invalid_parameter_error("KtoGenConfig: need queries and >= 2 completions");
        if (facts_per_query < 2) throw invalid_parameter_error("KtoGenConfig: need >= 2 facts");
        if (!(correct_rate >= 0.0 && correct_rate <= 1.0))
            throw invalid_parameter_error("KtoGenConfig: correct_rate must be in [0, 1]");
    }
};

// Scripted noisy solver: the prompt holds all facts plus the query; each
// completion restates one fact and answers, correct with correct_rate.
// Queries with more than half the completions correct are dropped; the rest
// are grouped into lanes of 2..4 with at least one correct per group. Each
// completion is used at most once; completions that cannot be covered while
// keeping the one-correct rule are left out.
inline std::vector<training::PreferenceGroup> gen_kto_dataset(const ToyVocab& vocab, uint64_t seed,
                                                              const KtoGenConfig& gc) {
    gc.validate();
    std::vector<training::PreferenceGroup> out;
    for (int q = 0; q < gc.n_queries; ++q) {
        rng::Stream rs(seed, 0x6b746f00ull, static_cast<uint64_t>(q));
        ToyCollabTask task = make_collab_task(vocab, gc.facts_per_query, rs);
        std::vector<int> prompt;
        for (int m = 0; m < gc.facts_per_query; ++m) {
            prompt.push_back(vocab.key_token(task.keys[static_cast<size_t>(m)]));
            prompt.push_back(task.values[static_cast<size_t>(m)]);
        }
        prompt.push_back(ToyVocab::query);
        for (int m = 0; m < gc.facts_per_query; ++m)
            prompt.push_back(vocab.key_token(task.keys[static_cast<size_t>(m)]));

        std::vector<std::vector<int>> completions;
        std::vector<uint8_t> correct;
        for (int s = 0; s < gc.completions_per_query; ++s) {
            bool ok = rs.uniform() < gc.correct_rate;
            int ans = task.answer;
            if (!ok) {
                int off = static_cast<int>(rs.uniform_int(1, ToyVocab::answer_space - 1));
                ans = (task.answer + off) % ToyVocab::answer_space;
            }
            int r = static_cast<int>(rs.uniform_int(0, gc.facts_per_query - 1));
            completions.push_back({vocab.key_token(task.keys[static_cast<size_t>(r)]),
                                   task.values[static_cast<size_t>(r)], ToyVocab::marker, ans, ToyVocab::eos});
            correct.push_back(ok ? 1 : 0);
        }
        int n_correct = 0;
        for (uint8_t c : correct) n_correct += c;
        if (n_correct == 0 || 2 * n_correct > gc.completions_per_query) continue;

        std::vector<int> correct_ids, wrong_ids;
        for (int s = 0; s < gc.completions_per_query; ++s)
            (correct[static_cast<size_t>(s)] ? correct_ids : wrong_ids).push_back(s);
        auto shuffle = [&](std::vector<int>& v) {
            for (size_t i = v.size(); i > 1; --i)
                std::swap(v[i - 1], v[static_cast<size_t>(rs.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        };
        shuffle(correct_ids);
        shuffle(wrong_ids);

        // Group sizes in 2..4, never leaving a remainder of one, at most one
        // group per available correct completion.
        std::vector<int> sizes;
        int remaining = gc.completions_per_query;
        while (remaining >= 2 && static_cast<int>(sizes.size()) < n_correct) {
            int want = static_cast<int>(rs.uniform_int(2, 4));
            want = std::min(want, remaining);
            if (remaining - want == 1) want = want < 4 ? want + 1 : want - 1;
            if (want < 2) break;
            sizes.push_back(want);
            remaining -= want;
        }
        size_t ci = 0, wi = 0;
        for (size_t gi = 0; gi < sizes.size(); ++gi) {
            training::PreferenceGroup pg;
            pg.query_id = q;
            pg.prompt = prompt;
            std::vector<int> members = {correct_ids[ci++]};
            for (int fill = 1; fill < sizes[gi]; ++fill) {
                if (wi < wrong_ids.size())
                    members.push_back(wrong_ids[wi++]);
                else if (ci < correct_ids.size())
                    members.push_back(correct_ids[ci++]);
            }
            for (int s : members) {
                pg.completions.push_back(completions[static_cast<size_t>(s)]);
                pg.desirable.push_back(correct[static_cast<size_t>(s)]);
            }
            if (static_cast<int>(pg.completions.size()) >= 2) out.push_back(std::move(pg));
        }
    }
    return out;
}

// --- conversation curation ------------------------------------------------------------

struct ConversationRecord {
    std::string question;
    std::string ground_truth;
    std::vector<std::string> assistants;
    std::vector<std::vector<std::string>> messages;  // per assistant, ordered
    std::vector<std::string> final_answers;
    std::vector<uint8_t> correct;
};

struct CurationConfig {
    int min_messages = 10;
    int max_messages = 30;
    int interaction_threshold_factor = 2;  // kept iff score > factor * N
    std::vector<std::string> key_phrases;
    std::vector<std::string> names;  // overrides the record's assistant names when non-empty

    void validate() const {
        if (min_messages > max_messages)
            throw invalid_parameter_error("CurationConfig: min_messages must be <= max_messages");
        if (interaction_threshold_factor < 0)
            throw invalid_parameter_error("CurationConfig: threshold factor must be >= 0");
    }
};

// Non-overlapping occurrence count, case-sensitive.
inline int count_occurrences(const std::string& text, const std::string& needle) {
    if (needle.empty()) return 0;
    int n = 0;
    size_t at = 0;
    while ((at = text.find(needle, at)) != std::string::npos) {
        ++n;
        at += needle.size();
    }
    return n;
}

inline int interaction_score(const ConversationRecord& rec, const CurationConfig& cfg) {
    const std::vector<std::string>& names = cfg.names.empty() ? rec.assistants : cfg.names;
    int total = 0;
    for (size_t a = 0; a < rec.messages.size(); ++a) {
        for (const std::string& msg : rec.messages[a]) {
            for (size_t n = 0; n < names.size(); ++n) {
                if (a < rec.assistants.size() && names[n] == rec.assistants[a]) continue;
                total += count_occurrences(msg, names[n]);
            }
            for (const std::string& phrase : cfg.key_phrases) total += count_occurrences(msg, phrase);
        }
    }
    return total;
}

inline bool record_well_formed(const ConversationRecord& rec) {
    const size_t n = rec.assistants.size();
    if (n == 0) return false;
    if (rec.messages.size() != n || rec.final_answers.size() != n || rec.correct.size() != n) return false;
    for (const auto& m : rec.messages)
        if (m.empty()) return false;
    return true;
}

// Reason for the first failing filter, or "kept".
inline std::string curation_verdict(const ConversationRecord& rec, const CurationConfig& cfg) {
    cfg.validate();
    if (!record_well_formed(rec)) return "parse";
    for (uint8_t c : rec.correct)
        if (!c) return "correctness";
    for (const auto& msgs : rec.messages) {
        const int n = static_cast<int>(msgs.size());
        if (n < cfg.min_messages || n > cfg.max_messages) return "length";
    }
    const int n_assistants = static_cast<int>(rec.assistants.size());
    if (interaction_score(rec, cfg) <= cfg.interaction_threshold_factor * n_assistants) return "interaction";
    return "kept";
}

struct CurationReport {
    long kept = 0;
    std::map<std::string, long> rejected_by_reason;
};

inline std::pair<std::vector<ConversationRecord>, CurationReport> curate(
    const std::vector<ConversationRecord>& records, const CurationConfig& cfg) {
    std::vector<ConversationRecord> kept;
    CurationReport report;
    for (const auto& rec : records) {
        std::string verdict = curation_verdict(rec, cfg);
        if (verdict == "kept") {
            kept.push_back(rec);
            ++report.kept;
        } else {
            ++report.rejected_by_reason[verdict];
        }
    }
    return {std::move(kept), report};
}

// --- JSONL -----------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ConversationRecord& r) {
    std::vector<bool> correct(r.correct.begin(), r.correct.end());
    j = nlohmann::json{{"question", r.question},
                       {"ground_truth", r.ground_truth},
                       {"assistants", r.assistants},
                       {"messages", r.messages},
                       {"final_answers", r.final_answers},
                       {"correct", correct}};
}

inline void from_json(const nlohmann::json& j, ConversationRecord& r) {
    j.at("question").get_to(r.question);
    j.at("ground_truth").get_to(r.ground_truth);
    j.at("assistants").get_to(r.assistants);
    j.at("messages").get_to(r.messages);
    j.at("final_answers").get_to(r.final_answers);
    r.correct.clear();
    for (const auto& c : j.at("correct"))
        r.correct.push_back((c.is_boolean() ? c.get<bool>() : c.get<int>() != 0) ? 1 : 0);
}

// Line-oriented curation: malformed lines count as "parse" rejections and
// the pipeline continues. Kept records are echoed to out verbatim as JSONL.
inline CurationReport curate_stream(std::istream& in, std::ostream& out, const CurationConfig& cfg) {
    cfg.validate();
    CurationReport report;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ConversationRecord rec;
        std::string verdict;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            rec = j.get<ConversationRecord>();
            verdict = curation_verdict(rec, cfg);
        } catch (const nlohmann::json::exception&) {
            verdict = "parse";
        }
        if (verdict == "kept") {
            nlohmann::json j = rec;
            out << j.dump() << "\n";
            ++report.kept;
        } else {
            ++report.rejected_by_reason[verdict];
        }
    }
    return report;
}

inline nlohmann::json report_to_json(const CurationReport& r) {
    nlohmann::json rej = nlohmann::json::object();
    for (const auto& [k, v] : r.rejected_by_reason) rej[k] = v;
    return nlohmann::json{{"kept", r.kept}, {"rejected_by_reason", rej}};
}

// Token-level dataset IO: collaborative episodes and preference groups as
// JSON lines, plus a vocab manifest so a reader can interpret the ids.

inline nlohmann::json vocab_to_json(const ToyVocab& v) {
    return nlohmann::json{{"value_space", ToyVocab::value_space}, {"answer_space", ToyVocab::answer_space},
                          {"query", ToyVocab::query},             {"marker", ToyVocab::marker},
                          {"eos", ToyVocab::eos},                 {"sep", ToyVocab::sep},
                          {"key0", ToyVocab::key0},               {"n_keys", v.n_keys},
                          {"size", v.size()}};
}

inline ToyVocab vocab_from_json(const nlohmann::json& j) {
    ToyVocab v;
    v.n_keys = j.at("n_keys").get<int>();
    if (v.n_keys < 1) throw data_error("vocab manifest: n_keys must be positive");
    return v;
}

inline void to_json(nlohmann::json& j, const CollabEpisode& e) {
    j = nlohmann::json{{"lane_prompts", e.lane_prompts},
                       {"lane_tokens", e.lane_tokens},
                       {"is_target", e.is_target},
                       {"prompt_len", e.prompt_len},
                       {"answer", e.answer}};
}

inline void from_json(const nlohmann::json& j, CollabEpisode& e) {
    j.at("lane_prompts").get_to(e.lane_prompts);
    j.at("lane_tokens").get_to(e.lane_tokens);
    j.at("prompt_len").get_to(e.prompt_len);
    j.at("answer").get_to(e.answer);
    e.is_target.clear();
    for (const auto& lane : j.at("is_target")) {
        std::vector<uint8_t> m;
        for (const auto& x : lane) m.push_back(x.get<int>() ? 1 : 0);
        e.is_target.push_back(std::move(m));
    }
}

template <class T>
inline void write_jsonl(std::ostream& out, const std::vector<T>& rows) {
    for (const auto& r : rows) {
        nlohmann::json j = r;
        out << j.dump() << "\n";
    }
}

template <class T>
inline std::vector<T> read_jsonl(std::istream& in) {
    std::vector<T> rows;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            rows.push_back(nlohmann::json::parse(line).get<T>());
        } catch (const nlohmann::json::exception& e) {
            throw data_error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

}  // namespace lanerope::data

// Adapters live beside the type's namespace so argument-dependent lookup
// finds them from the json machinery.
namespace lanerope::training {

inline void to_json(nlohmann::json& j, const PreferenceGroup& g) {
    std::vector<bool> des(g.desirable.begin(), g.desirable.end());
    j = nlohmann::json{
        {"query_id", g.query_id}, {"prompt", g.prompt}, {"completions", g.completions}, {"desirable", des}};
}

inline void from_json(const nlohmann::json& j, PreferenceGroup& g) {
    j.at("query_id").get_to(g.query_id);
    j.at("prompt").get_to(g.prompt);
    j.at("completions").get_to(g.completions);
    g.desirable.clear();
    for (const auto& d : j.at("desirable"))
        g.desirable.push_back((d.is_boolean() ? d.get<bool>() : d.get<int>() != 0) ? 1 : 0);
}

}  // namespace lanerope::training
