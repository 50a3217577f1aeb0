#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include <lanerope/engine.hpp>

using namespace lanerope;
using Catch::Approx;

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

model::ModelConfig engine_cfg(int n_max = 2, double bias_norm = 0.5) {
    model::ModelConfig cfg;
    cfg.vocab_size = 31;
    cfg.model_dim = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.mlp_hidden = 24;
    cfg.max_steps = 96;
    cfg.lane = rope::LaneRopeParams::make(cfg.head_dim, 10000.0, rope::LaneInit::groupthink, 8192,
                                          static_cast<double>(cfg.max_steps), n_max, bias_norm);
    cfg.bias_dim = cfg.lane.bias_dim;
    return cfg;
}

}  // namespace

TEST_CASE("temperature zero is argmax with low-id ties") {
    std::vector<float> tie{1.0f, 3.0f, 3.0f, 0.0f};
    CHECK(engine::sample_token<float>(tie, 0.0, 0.95, 0.99) == 1);
    std::vector<float> plain{ -2.0f, 7.5f, 0.0f};
    CHECK(engine::sample_token<float>(plain, 0.0, 0.95, 0.0) == 1);
}

TEST_CASE("nucleus cut keeps the smallest prefix reaching top_p") {
    // Probabilities 0.5 / 0.3 / 0.2 by construction.
    std::vector<float> logits{std::log(0.5f), std::log(0.3f), std::log(0.2f)};
    // top_p = 0.7 keeps {0, 1} with renormalized masses 0.625 / 0.375.
    CHECK(engine::sample_token<float>(logits, 1.0, 0.7, 0.30) == 0);
    CHECK(engine::sample_token<float>(logits, 1.0, 0.7, 0.62) == 0);
    CHECK(engine::sample_token<float>(logits, 1.0, 0.7, 0.63) == 1);
    CHECK(engine::sample_token<float>(logits, 1.0, 0.7, 0.99) == 1);
    for (double u : {0.0, 0.2, 0.5, 0.9, 0.999})
        CHECK(engine::sample_token<float>(logits, 1.0, 0.7, u) != 2);
    // A tiny top_p keeps only the mode.
    CHECK(engine::sample_token<float>(logits, 1.0, 0.01, 0.97) == 0);
    // Full nucleus: the walk crosses 0.5 then 0.8.
    CHECK(engine::sample_token<float>(logits, 1.0, 1.0, 0.49) == 0);
    CHECK(engine::sample_token<float>(logits, 1.0, 1.0, 0.51) == 1);
    CHECK(engine::sample_token<float>(logits, 1.0, 1.0, 0.81) == 2);
}

TEST_CASE("minus-infinity logits never get sampled") {
    std::vector<float> logits{0.0f, kNegInf, 0.0f};
    for (double u : {0.0, 0.3, 0.6, 0.99}) {
        int tok = engine::sample_token<float>(logits, 1.0, 1.0, u);
        CHECK(tok != 1);
    }
    CHECK(engine::sample_token<float>(logits, 1.0, 1.0, 0.99) == 2);
    CHECK(engine::sample_token<float>(logits, 1.0, 1.0, 0.01) == 0);

    std::vector<float> nan_logits{0.0f, std::numeric_limits<float>::quiet_NaN()};
    CHECK_THROWS_AS(engine::sample_token<float>(nan_logits, 1.0, 1.0, 0.5), numeric_error);
    std::vector<float> all_inf{kNegInf, kNegInf};
    CHECK_THROWS_AS(engine::sample_token<float>(all_inf, 1.0, 1.0, 0.5), contract_violation_error);
    CHECK_THROWS_AS(engine::sample_token<float>(std::vector<float>{}, 1.0, 1.0, 0.5),
                    invalid_parameter_error);
}

TEST_CASE("nucleus sampler is a pure function of its counter key") {
    engine::GenerationRequest req;
    req.seed = 99;
    req.temperature = 0.8;
    req.top_p = 0.9;
    auto s1 = engine::make_nucleus_sampler<float>(req, 3, 1);
    auto s2 = engine::make_nucleus_sampler<float>(req, 3, 1);
    std::mt19937 g(1);
    std::normal_distribution<float> d(0.0f, 2.0f);
    std::vector<float> logits(23);
    bool lane_differs = false;
    for (int step = 0; step < 40; ++step) {
        for (auto& x : logits) x = d(g);
        CHECK(s1(0, step, logits) == s2(0, step, logits));
        CHECK(s1(1, step, logits) == s2(1, step, logits));
        if (s1(0, step, logits) != s1(1, step, logits)) lane_differs = true;
    }
    // Different lanes draw from different streams.
    CHECK(lane_differs);

    auto other_group = engine::make_nucleus_sampler<float>(req, 3, 2);
    bool group_differs = false;
    for (int step = 0; step < 40; ++step) {
        for (auto& x : logits) x = d(g);
        if (s1(0, step, logits) != other_group(0, step, logits)) group_differs = true;
    }
    CHECK(group_differs);
}

TEST_CASE("request validation rejects malformed groups") {
    engine::GenerationRequest req;
    req.prompt = {1, 2};
    CHECK_NOTHROW(req.validate());
    auto bad = req;
    bad.lanes = 0;
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad = req;
    bad.top_p = 0.0;
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad = req;
    bad.top_p = 1.5;
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad = req;
    bad.temperature = -0.1;
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad = req;
    bad.max_new_tokens = -1;
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad = req;
    bad.lanes = 2;
    bad.lane_prompts = {{1, 2}, {3}};
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad.lane_prompts = {{1, 2}};
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
    bad.lane_prompts = {{1, 2}, {3, 4}};
    CHECK_NOTHROW(bad.validate());
    bad.shared_prompt = true;
    CHECK_THROWS_AS(bad.validate(), invalid_parameter_error);
}

TEST_CASE("incremental decode reproduces the whole-group forward pass") {
    auto cfg = engine_cfg();
    auto params = model::ModelParameters<float>::random_init(cfg, 7);
    for (int lanes : {1, 2, 4}) {
        for (bool shared : {false, true}) {
            engine::GenerationRequest req;
            req.prompt = {1, 4, 2, 9, 5};
            req.lanes = lanes;
            req.shared_prompt = shared;
            req.max_new_tokens = 12;
            req.temperature = 0.7;
            req.seed = 17;
            auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
            engine::GroupTrace<float> trace;
            auto res = engine::generate_group(cfg, params, req, sampler, &trace);
            REQUIRE(static_cast<int>(res.lanes.size()) == lanes);
            for (const auto& lr : res.lanes) CHECK(lr.tokens.size() == 12);

            auto tr = model::forward(cfg, params, trace.flat_tokens, trace.layout, attention::MaskRule{});
            REQUIRE(tr.logits.rows == trace.logits.rows);
            double worst = 0.0;
            for (size_t i = 0; i < tr.logits.v.size(); ++i)
                worst = std::max(worst,
                                 std::abs(static_cast<double>(tr.logits.v[i]) -
                                          static_cast<double>(trace.logits.v[i])));
            INFO("lanes=" << lanes << " shared=" << shared);
            CHECK(worst < 1e-4);

            // Shared prompts store the prompt once, at lane 0.
            if (shared && lanes > 1) {
                CHECK(trace.layout.per_lane_start[0] == 0);
                CHECK(trace.layout.per_lane_start[1] == 5);
                CHECK(trace.layout.size() == 5 + lanes * 12);
            }
            if (!shared) CHECK(trace.layout.size() == lanes * (5 + 12));
        }
    }
}

TEST_CASE("per-lane prompts run in lockstep from distinct contexts") {
    auto cfg = engine_cfg();
    auto params = model::ModelParameters<float>::random_init(cfg, 9);
    engine::GenerationRequest req;
    req.lanes = 2;
    req.lane_prompts = {{1, 2, 3}, {4, 5, 6}};
    req.max_new_tokens = 6;
    req.temperature = 0.0;
    engine::GroupTrace<float> trace;
    auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
    auto res = engine::generate_group(cfg, params, req, sampler, &trace);
    CHECK(res.lanes[0].tokens.size() == 6);
    CHECK(res.lanes[1].tokens.size() == 6);
    // The prompt tokens land interleaved in the flat order.
    CHECK(trace.flat_tokens[0] == 1);
    CHECK(trace.flat_tokens[1] == 4);
    CHECK(trace.flat_tokens[2] == 2);
    auto tr = model::forward(cfg, params, trace.flat_tokens, trace.layout, attention::MaskRule{});
    for (size_t i = 0; i < tr.logits.v.size(); ++i)
        CHECK(static_cast<double>(tr.logits.v[i]) ==
              Approx(static_cast<double>(trace.logits.v[i])).margin(1e-4));
}

TEST_CASE("an eos token is fed to the cache and then stops its lane") {
    auto cfg = engine_cfg();
    auto params = model::ModelParameters<float>::random_init(cfg, 13);
    const int eos = 3;
    engine::GenerationRequest req;
    req.prompt = {1, 2};
    req.lanes = 2;
    req.max_new_tokens = 10;
    req.eos_id = eos;
    // Lane 0 emits eos on its third decode; lane 1 never does.
    engine::Sampler<float> scripted = [&](int lane, int step, std::span<const float>) {
        if (lane == 0 && step == 4) return eos;
        return 7;
    };
    engine::GroupTrace<float> trace;
    auto res = engine::generate_group(cfg, params, req, scripted, &trace);
    REQUIRE(res.lanes[0].tokens.size() == 3);
    CHECK(res.lanes[0].tokens.back() == eos);
    CHECK(res.lanes[0].finish == engine::FinishReason::eos);
    CHECK(res.lanes[1].tokens.size() == 10);
    CHECK(res.lanes[1].finish == engine::FinishReason::budget);
    // The eos itself is part of the cache: lane 0 holds 2+3, lane 1 holds 2+10.
    CHECK(trace.layout.size() == 17);
}

TEST_CASE("zero token budget produces empty lanes") {
    auto cfg = engine_cfg();
    auto params = model::ModelParameters<float>::random_init(cfg, 15);
    engine::GenerationRequest req;
    req.prompt = {1, 2, 3};
    req.lanes = 2;
    req.max_new_tokens = 0;
    auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
    auto res = engine::generate_group(cfg, params, req, sampler);
    CHECK(res.lanes[0].tokens.empty());
    CHECK(res.lanes[1].tokens.empty());
    CHECK(res.lanes[0].finish == engine::FinishReason::budget);
}

TEST_CASE("position capacity finishes lanes as a budget stop") {
    auto cfg = engine_cfg();
    cfg.max_steps = 8;
    auto params = model::ModelParameters<float>::random_init(cfg, 17);
    engine::GenerationRequest req;
    req.prompt = {1, 2, 3, 4};
    req.lanes = 2;
    req.max_new_tokens = 100;  // far beyond the cache capacity
    auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
    auto res = engine::generate_group(cfg, params, req, sampler);
    CHECK(res.lanes[0].tokens.size() == 4);
    CHECK(res.lanes[0].finish == engine::FinishReason::budget);
    CHECK(res.lanes[1].tokens.size() == 4);

    // A prompt that alone exceeds capacity is a budget error.
    engine::GenerationRequest huge;
    huge.prompt.assign(9, 1);
    CHECK_THROWS_AS(engine::prefill(cfg, params, huge), budget_error);
}

TEST_CASE("answers are the token after the last marker") {
    const int M = 101;
    auto ans = [&](std::vector<int> t) { return engine::extract_answer(t, M); };
    CHECK(ans({1, 2, M, 7}) == 7);
    CHECK(ans({M, 5, 9}) == 5);
    CHECK(ans({1, M, 5, M, 9}) == 9);
    CHECK_FALSE(ans({1, 2, 3}).has_value());
    CHECK_FALSE(ans({1, 2, M}).has_value());
    CHECK_FALSE(ans({}).has_value());
    CHECK_FALSE(engine::extract_answer(std::vector<int>{M, 4}, -1).has_value());
}

TEST_CASE("majority vote drops absent answers and breaks ties by first seen") {
    using opt = std::optional<int>;
    CHECK(engine::majority_vote<int>({opt{5}, opt{5}, opt{9}}) == 5);
    CHECK(engine::majority_vote<int>({opt{9}, opt{5}, opt{5}, opt{9}}) == 9);
    CHECK(engine::majority_vote<int>({opt{}, opt{4}, opt{}}) == 4);
    CHECK_FALSE(engine::majority_vote<int>({opt{}, opt{}}).has_value());
    CHECK_FALSE(engine::majority_vote<int>({}).has_value());
    CHECK(engine::majority_vote<int>({opt{2}}) == 2);
    CHECK(engine::majority_vote<int>({opt{3}, opt{}, opt{3}, opt{1}}) == 3);
}

TEST_CASE("batched generation is deterministic and thread-invariant") {
    auto cfg = engine_cfg();
    auto params = model::ModelParameters<float>::random_init(cfg, 19);
    std::vector<std::vector<int>> queries{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
    engine::GenerationRequest base;
    base.lanes = 2;
    base.max_new_tokens = 6;
    base.temperature = 0.9;
    base.seed = 5;
    base.marker_id = 11;

    auto r1 = engine::run_batch(cfg, params, queries, 4, base, 1);
    auto r2 = engine::run_batch(cfg, params, queries, 4, base, 3);
    REQUIRE(r1.size() == 12);
    REQUIRE(r2.size() == 12);
    for (size_t i = 0; i < r1.size(); ++i) {
        CHECK(r1[i].tokens == r2[i].tokens);
        CHECK(r1[i].query_id == r2[i].query_id);
        CHECK(r1[i].group_id == r2[i].group_id);
        CHECK(r1[i].lane_id == r2[i].lane_id);
        CHECK(r1[i].answer == r2[i].answer);
    }
    // Slot order is (query, group, lane).
    CHECK(r1[0].query_id == 0);
    CHECK(r1[0].group_id == 0);
    CHECK(r1[0].lane_id == 0);
    CHECK(r1[1].lane_id == 1);
    CHECK(r1[2].group_id == 1);
    CHECK(r1[4].query_id == 1);

    // Groups of one query differ from each other (independent rng streams).
    CHECK(r1[0].tokens != r1[2].tokens);

    // A different seed changes the batch.
    auto reseeded = base;
    reseeded.seed = 6;
    auto r3 = engine::run_batch(cfg, params, queries, 4, reseeded, 1);
    bool any_diff = false;
    for (size_t i = 0; i < r1.size(); ++i) any_diff = any_diff || r1[i].tokens != r3[i].tokens;
    CHECK(any_diff);

    CHECK_THROWS_AS(engine::run_batch(cfg, params, queries, 3, base, 1), invalid_parameter_error);
    auto with_lane_prompts = base;
    with_lane_prompts.lane_prompts = {{1}, {2}};
    CHECK_THROWS_AS(engine::run_batch(cfg, params, queries, 4, with_lane_prompts, 1),
                    invalid_parameter_error);
}

TEST_CASE("greedy decoding is reproducible across runs") {
    auto cfg = engine_cfg();
    auto params = model::ModelParameters<float>::random_init(cfg, 23);
    engine::GenerationRequest req;
    req.prompt = {3, 1, 4, 1, 5};
    req.lanes = 4;
    req.max_new_tokens = 16;
    req.temperature = 0.0;
    req.shared_prompt = true;
    auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
    auto a = engine::generate_group(cfg, params, req, sampler);
    auto b = engine::generate_group(cfg, params, req, sampler);
    for (int m = 0; m < 4; ++m) CHECK(a.lanes[m].tokens == b.lanes[m].tokens);
}
