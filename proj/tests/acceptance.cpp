// Acceptance suite: one self-contained check per shipped behavior, each
// printing a single PASS or FAIL line with its measured margin and the pinned
// tolerance. The exit code counts failed required checks; the bench overhead
// check is informational and never affects the exit code.

#include <lanerope/attention.hpp>
#include <lanerope/bench.hpp>
#include <lanerope/data.hpp>
#include <lanerope/engine.hpp>
#include <lanerope/model.hpp>
#include <lanerope/rope.hpp>
#include <lanerope/training.hpp>

#include "ref_transformer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

using namespace lanerope;

namespace {

int g_failures = 0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

void report(int id, const char* name, const Outcome& o, bool required = true) {
    std::printf("C%02d %s %s%s | %s\n", id, o.pass ? "PASS" : "FAIL", name,
                required ? "" : " (informational)", o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass && required) ++g_failures;
}

template <class Fn>
void run(int id, const char* name, bool required, Fn&& fn) {
    Outcome o;
    try {
        o = fn();
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("exception: ") + e.what();
    }
    report(id, name, o, required);
}

std::string fmt(double x) {
    std::ostringstream ss;
    ss.precision(4);
    ss << std::scientific << x;
    return ss.str();
}

std::vector<int> random_tokens(rng::Stream& rs, int n, int vocab) {
    std::vector<int> t(static_cast<size_t>(n));
    for (auto& x : t) x = static_cast<int>(rs.uniform_int(0, vocab - 1));
    return t;
}

// --- 1: single-lane forward reduces to a plain rotary decoder ---------------------

Outcome check_single_lane_reduction() {
    model::ModelConfig cfg;
    cfg.vocab_size = 128;
    cfg.model_dim = 128;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.head_dim = 32;
    cfg.mlp_hidden = 256;
    cfg.max_steps = 96;
    cfg.lane = rope::LaneRopeParams::make(32, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, 1, 0.0);
    cfg.bias_dim = cfg.lane.bias_dim;
    cfg.validate();
    auto params = model::ModelParameters<float>::random_init(cfg, 42);

    rng::Stream rs(7, 1);
    auto prompt = random_tokens(rs, 8, cfg.vocab_size);

    auto layout = attention::make_layout({static_cast<int>(prompt.size())});
    auto tr = model::forward(cfg, params, prompt, layout, attention::MaskRule{});
    auto ref = reftf::forward(cfg, params, prompt);
    double worst = 0.0;
    for (int r = 0; r < tr.logits.rows; ++r)
        for (int c = 0; c < tr.logits.cols; ++c)
            worst = std::max(worst, std::abs(static_cast<double>(tr.logits.at(r, c)) -
                                             ref[static_cast<size_t>(r)][static_cast<size_t>(c)]));

    engine::GenerationRequest req;
    req.prompt = prompt;
    req.lanes = 1;
    req.max_new_tokens = 64;
    req.temperature = 0.0;
    auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
    auto res = engine::generate_group(cfg, params, req, sampler);
    auto ref_tokens = reftf::greedy(cfg, params, prompt, 64);
    int mismatches = 0;
    for (size_t i = 0; i < ref_tokens.size(); ++i)
        if (res.lanes[0].tokens[i] != ref_tokens[i]) ++mismatches;

    Outcome o;
    o.pass = worst < 1e-5 && mismatches == 0;
    o.detail = "max |dlogit| " + fmt(worst) + " (tol 1e-05), greedy mismatches " +
               std::to_string(mismatches) + "/64";
    return o;
}

// --- 2: within-lane scores depend only on relative position -----------------------

Outcome check_within_lane_invariance() {
    const int d = 64;
    auto rp = rope::RopeParams::make(d);
    auto omega = rope::groupthink_lane_frequencies(rp.theta, 8192);
    rng::Stream rs(11, 2);
    double worst_rel = 0.0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> q(d), k(d);
        for (auto& v : q) v = rs.normal();
        for (auto& v : k) v = rs.normal();
        long long i = rs.uniform_int(0, 4095), j = rs.uniform_int(0, 4095);
        long long m = rs.uniform_int(0, 7);
        auto qr = rope::lane_rotate<double>(q, i, m, rp.theta, omega);
        auto kr = rope::lane_rotate<double>(k, j, m, rp.theta, omega);
        auto q0 = rope::rotate<double>(q, i, rp.theta);
        auto k0 = rope::rotate<double>(k, j, rp.theta);
        double a = 0.0, b = 0.0;
        for (int c = 0; c < d; ++c) {
            a += qr[static_cast<size_t>(c)] * kr[static_cast<size_t>(c)];
            b += q0[static_cast<size_t>(c)] * k0[static_cast<size_t>(c)];
        }
        worst_rel = std::max(worst_rel, std::abs(a - b) / std::max(1.0, std::abs(b)));
    }
    Outcome o;
    o.pass = worst_rel < 1e-4;
    o.detail = "1000 trials, max rel score drift " + fmt(worst_rel) + " (tol 1e-04)";
    return o;
}

// --- 3: lane rotations equal one stream at gap-spaced virtual positions -----------

Outcome check_virtual_positions() {
    const int d = 8;
    const long long gap = 8192;
    auto rp = rope::RopeParams::make(d);
    auto omega = rope::groupthink_lane_frequencies(rp.theta, gap);
    rng::Stream rs(13, 3);
    double worst_rel = 0.0;
    for (int t = 0; t < 300; ++t) {
        std::vector<double> q(d), k(d);
        for (auto& v : q) v = rs.normal();
        for (auto& v : k) v = rs.normal();
        long long i = rs.uniform_int(0, 63), j = rs.uniform_int(0, 63);
        long long m = rs.uniform_int(0, 3), n = rs.uniform_int(0, 3);
        auto qr = rope::lane_rotate<double>(q, i, m, rp.theta, omega);
        auto kr = rope::lane_rotate<double>(k, j, n, rp.theta, omega);
        auto qv = rope::rotate<double>(q, gap * m + i, rp.theta);
        auto kv = rope::rotate<double>(k, gap * n + j, rp.theta);
        double a = 0.0, b = 0.0;
        for (int c = 0; c < d; ++c) {
            a += qr[static_cast<size_t>(c)] * kr[static_cast<size_t>(c)];
            b += qv[static_cast<size_t>(c)] * kv[static_cast<size_t>(c)];
        }
        worst_rel = std::max(worst_rel, std::abs(a - b) / std::max(1.0, std::abs(b)));
    }
    Outcome o;
    o.pass = worst_rel < 1e-4;
    o.detail = "300 trials, lanes 0..3, steps 0..63, max rel drift " + fmt(worst_rel) +
               " (tol 1e-04)";
    return o;
}

// --- 4: bias-augmented lanes decode independently at init -------------------------

Outcome check_independence_at_init() {
    model::ModelConfig base;
    base.vocab_size = 64;
    base.model_dim = 32;
    base.n_layers = 2;
    base.n_heads = 2;
    base.head_dim = 16;
    base.mlp_hidden = 64;
    base.max_steps = 160;
    base.lane = rope::LaneRopeParams::make(16, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, 1, 0.0);
    base.bias_dim = 0;
    base.validate();
    auto base_params = model::ModelParameters<float>::random_init(base, 21);

    int mismatched_runs = 0, total_runs = 0;
    double min_gap_sigma = 1e300;
    for (int n_max : {2, 4}) {
        model::InitStrategy strat;
        strat.kind = rope::LaneInit::groupthink;
        strat.sequence_gap = 8192;
        strat.n_max = n_max;
        strat.bias_norm = 16.0;
        auto cfg = model::augment_config(base, strat);
        auto params = model::init_from_base(base, base_params, cfg);

        // Dominance margin of the in-lane bias over the best cross-lane offset,
        // in units of the score divisor.
        double self = rope::fourier_bias_value(cfg.lane.bias_coeffs, cfg.lane.bias_freqs, 0.0);
        double cross = -1e300;
        for (int x = 1; x < n_max; ++x)
            cross = std::max(cross,
                             rope::fourier_bias_value(cfg.lane.bias_coeffs, cfg.lane.bias_freqs,
                                                      static_cast<double>(x)));
        double denom = std::sqrt(static_cast<double>(
            cfg.score_dim_override > 0 ? cfg.score_dim_override : cfg.head_dim + cfg.bias_dim));
        min_gap_sigma = std::min(min_gap_sigma, (self - cross) / denom);

        for (int s = 0; s < 20; ++s) {
            rng::Stream rs(100 + static_cast<uint64_t>(s), static_cast<uint64_t>(n_max));
            auto prompt = random_tokens(rs, 8 + static_cast<int>(rs.uniform_int(0, 8)), base.vocab_size);

            engine::GenerationRequest single;
            single.prompt = prompt;
            single.lanes = 1;
            single.max_new_tokens = 128;
            single.temperature = 0.0;
            auto s1 = engine::make_nucleus_sampler<float>(single, 0, 0);
            auto ref = engine::generate_group(cfg, params, single, s1);

            engine::GenerationRequest multi = single;
            multi.lanes = n_max;
            auto s2 = engine::make_nucleus_sampler<float>(multi, 0, 0);
            auto res = engine::generate_group(cfg, params, multi, s2);

            ++total_runs;
            bool same = true;
            for (const auto& lane : res.lanes) same = same && lane.tokens == ref.lanes[0].tokens;
            if (!same) ++mismatched_runs;
        }
    }
    Outcome o;
    o.pass = mismatched_runs == 0 && min_gap_sigma >= 50.0;
    o.detail = std::to_string(total_runs) + " greedy runs x 128 steps, mismatched runs " +
               std::to_string(mismatched_runs) + "; min bias gap " + fmt(min_gap_sigma) +
               " score units (need >= 50)";
    return o;
}

// --- 5: fused attention matches the dense visibility oracle -----------------------

Outcome check_oracle_equivalence() {
    rng::Stream rs(17, 5);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const int N = static_cast<int>(rs.uniform_int(1, 4));
        std::vector<int> lens(static_cast<size_t>(N));
        for (auto& l : lens) l = static_cast<int>(rs.uniform_int(1, 24));
        auto layout = attention::make_layout(lens);
        const int d = 8;
        const int n_max = static_cast<int>(rs.uniform_int(1, 4));
        auto lp = rope::LaneRopeParams::make(
            d, 10000.0, inst % 2 ? rope::LaneInit::groupthink : rope::LaneInit::ntk, 8192, 512.0,
            n_max, 1.0);
        for (auto& c : lp.bias_coeffs) c = rs.normal();
        const int width = d + lp.bias_dim;

        Mat<float> Q(layout.size(), width), K(layout.size(), width), V(layout.size(), d);
        for (auto& x : Q.v) x = static_cast<float>(rs.normal());
        for (auto& x : K.v) x = static_cast<float>(rs.normal());
        for (auto& x : V.v) x = static_cast<float>(rs.normal());

        attention::MaskRule rule;
        rule.same_step_cross_lane_visible = inst % 3 == 0;
        attention::AttnOptions opt;
        opt.apply_rotations = true;

        auto out = attention::cross_lane_attention(Q, K, V, layout, lp, rule, opt);
        auto ref = attention::dense_oracle_attention(Q, K, V, layout, lp, rule, opt);
        for (size_t i = 0; i < out.v.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(out.v[i]) -
                                             static_cast<double>(ref.v[i])));
    }
    Outcome o;
    o.pass = worst < 1e-5;
    o.detail = "100 random instances, max |dout| " + fmt(worst) + " (tol 1e-05)";
    return o;
}

// --- 6: incremental decode matches whole-group recompute --------------------------

Outcome check_prefill_decode() {
    model::ModelConfig cfg;
    cfg.vocab_size = 61;
    cfg.model_dim = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.mlp_hidden = 24;
    cfg.max_steps = 96;
    cfg.lane = rope::LaneRopeParams::make(8, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, 2, 0.5);
    cfg.bias_dim = cfg.lane.bias_dim;
    cfg.validate();
    auto params = model::ModelParameters<float>::random_init(cfg, 7);

    double worst = 0.0;
    for (int lanes : {1, 2, 4}) {
        engine::GenerationRequest req;
        req.prompt = {1, 4, 2, 9, 5};
        req.lanes = lanes;
        req.max_new_tokens = 32;
        req.temperature = 0.7;
        req.seed = 17;
        auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
        engine::GroupTrace<float> trace;
        engine::generate_group(cfg, params, req, sampler, &trace);
        auto tr = model::forward(cfg, params, trace.flat_tokens, trace.layout, attention::MaskRule{});
        for (size_t i = 0; i < tr.logits.v.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(tr.logits.v[i]) -
                                             static_cast<double>(trace.logits.v[i])));
    }
    Outcome o;
    o.pass = worst < 1e-4;
    o.detail = "32 decode steps, lanes {1,2,4}, max |dlogit| " + fmt(worst) + " (tol 1e-04)";
    return o;
}

// --- 7: analytic gradients match finite differences -------------------------------

Outcome check_gradients() {
    model::ModelConfig cfg;
    cfg.vocab_size = 29;
    cfg.model_dim = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.mlp_hidden = 24;
    cfg.max_steps = 64;
    cfg.lane = rope::LaneRopeParams::make(8, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, 2, 0.5);
    cfg.bias_dim = cfg.lane.bias_dim;
    cfg.validate();
    auto params = model::ModelParameters<double>::random_init(cfg, 3);

    rng::Stream rs(29, 7);
    std::vector<std::vector<int>> lanes{random_tokens(rs, 6, cfg.vocab_size),
                                        random_tokens(rs, 6, cfg.vocab_size)};
    auto [flat, layout] = attention::interleave(lanes);
    auto targets = random_tokens(rs, layout.size(), cfg.vocab_size);
    std::vector<uint8_t> mask(static_cast<size_t>(layout.size()), 1);
    attention::MaskRule rule;

    auto loss_of = [&](model::ModelParameters<double>& p) {
        auto tr = model::forward(cfg, p, flat, layout, rule);
        return model::masked_cross_entropy(tr.logits, targets, mask);
    };
    auto tr = model::forward(cfg, params, flat, layout, rule);
    auto grads = model::backward_cross_entropy(cfg, params, tr, targets, mask);

    struct Slot {
        double* param;
        double* grad;
    };
    std::vector<Slot> probes;
    const int width = cfg.head_dim + cfg.bias_dim;
    std::vector<std::pair<std::string, std::pair<double*, size_t>>> param_arrays, grad_arrays;
    params.for_each_array([&](const std::string& name, double* p, size_t n, const std::vector<int>&) {
        param_arrays.push_back({name, {p, n}});
    });
    grads.for_each_array([&](const std::string& name, double* p, size_t n, const std::vector<int>&) {
        grad_arrays.push_back({name, {p, n}});
    });
    int n_weight = 0, n_bias_tail = 0, n_omega = 0;
    for (size_t a = 0; a < param_arrays.size(); ++a) {
        const auto& name = param_arrays[a].first;
        double* pv = param_arrays[a].second.first;
        double* gv = grad_arrays[a].second.first;
        size_t n = param_arrays[a].second.second;
        if (name == "omega") {
            for (size_t i = 0; i < n; ++i) probes.push_back({pv + i, gv + i}), ++n_omega;
        } else if (name.size() >= 2 && (name.substr(name.size() - 2) == "bq" ||
                                        name.substr(name.size() - 2) == "bk")) {
            for (size_t i = 0; i < n; ++i) {
                probes.push_back({pv + i, gv + i});
                (static_cast<int>(i) % width >= cfg.head_dim) ? ++n_bias_tail : ++n_weight;
            }
        } else {
            for (size_t i : {size_t(0), n / 2, n - 1}) probes.push_back({pv + i, gv + i}), ++n_weight;
        }
    }

    double worst = 0.0;
    for (const auto& s : probes) {
        const double orig = *s.param;
        const double h = 1e-6 * std::max(1.0, std::abs(orig));
        *s.param = orig + h;
        double lp = loss_of(params);
        *s.param = orig - h;
        double lm = loss_of(params);
        *s.param = orig;
        double fd = (lp - lm) / (2.0 * h);
        double err = std::abs(*s.grad - fd) / std::max(1e-6, std::abs(*s.grad) + std::abs(fd));
        worst = std::max(worst, err);
    }
    Outcome o;
    o.pass = worst < 1e-3;
    o.detail = std::to_string(probes.size()) + " coords (" + std::to_string(n_weight) +
               " weight, " + std::to_string(n_bias_tail) + " bias-coef, " + std::to_string(n_omega) +
               " frequency), max rel err " + fmt(worst) + " (tol 1e-03)";
    return o;
}

// --- 8: interpolation ramp anchors -------------------------------------------------

Outcome check_ramp_anchors() {
    bool ok = rope::ntk_ramp_from_ratio(4.0, 4.0, 32.0) == 0.0 &&
              rope::ntk_ramp_from_ratio(18.0, 4.0, 32.0) == 0.5 &&
              rope::ntk_ramp_from_ratio(32.0, 4.0, 32.0) == 1.0 &&
              rope::ntk_ramp_from_ratio(11.0, 4.0, 32.0) == 0.25 &&
              rope::ntk_ramp_from_ratio(25.0, 4.0, 32.0) == 0.75 &&
              rope::ntk_ramp_from_ratio(1.0, 4.0, 32.0) == 0.0 &&
              rope::ntk_ramp_from_ratio(100.0, 4.0, 32.0) == 1.0;

    auto theta = rope::RopeParams::make(8).theta;
    double gamma = rope::ntk_ramp(0.1, 1024.0, 4.0, 32.0);
    ok = ok && std::abs(gamma - 0.4391952204503601) < 1e-12;
    auto omega = rope::ntk_lane_frequencies(theta, 8192, 1024.0, 4.0, 32.0);
    ok = ok && std::abs(omega[0] - 8192.0) < 1e-9;
    ok = ok && std::abs(omega[1] - gamma * 8192.0 * 0.1) < 1e-12;
    ok = ok && omega[2] == 0.0 && omega[3] == 0.0;

    Outcome o;
    o.pass = ok;
    o.detail = "anchors 4->0, 18->0.5, 32->1 exact; mid-band value " + fmt(gamma) +
               " (pinned to 1e-12)";
    return o;
}

// --- 9: asymmetric sigmoid anchors and preference gradient signs -------------------

Outcome check_sigmoid_anchors() {
    const double at0 = training::asymmetric_sigmoid(0.0);
    const double at2 = training::asymmetric_sigmoid(2.0);
    const double atm2 = training::asymmetric_sigmoid(-2.0);
    bool a0 = at0 == 0.5;
    bool a2 = std::abs(at2 - 0.8807970779778823) < 1e-12;
    bool am2 = atm2 == 2.5;  // implementation keeps the negative branch monotone: x + 1/2

    training::KtoConfig kc;
    rng::Stream rs(31, 9);
    int bad_signs = 0;
    for (int t = 0; t < 1000; ++t) {
        double delta = (rs.uniform() - 0.5) * 12.0;
        if (delta == 0.0) delta = 0.25;
        if (!(training::kto_sample_grad(delta, true, kc) < 0.0)) ++bad_signs;
        if (!(training::kto_sample_grad(delta, false, kc) > 0.0)) ++bad_signs;
    }
    Outcome o;
    o.pass = a0 && a2 && am2 && bad_signs == 0;
    std::ostringstream d;
    d << "s(0)=" << at0 << " s(2)=" << at2 << " ok; anchor s(-2): expected 2.5, got " << atm2
      << " (negative branch is kept monotone at x+1/2 so the " << (2000 - bad_signs)
      << "/2000 gradient sign checks hold; the 2.5 anchor would flip them)";
    o.detail = d.str();
    return o;
}

// --- 10: two lanes trained together solve the split-fact task ----------------------

Outcome check_collaboration() {
    data::ToyVocab vocab;
    const int lanes = 2;
    auto episodes = data::gen_collab_dataset(vocab, 12, 4000, lanes);
    std::vector<training::SftBatch> batches;
    batches.reserve(episodes.size());
    for (const auto& e : episodes) batches.push_back(data::episode_to_batch(e));

    model::ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.model_dim = 64;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.head_dim = 16;
    cfg.mlp_hidden = 128;
    cfg.max_steps = 16;
    cfg.lane = rope::LaneRopeParams::make(16, 10000.0, rope::LaneInit::groupthink, 8192, 0.0, 2, 1.0);
    cfg.bias_dim = cfg.lane.bias_dim;
    cfg.validate();
    auto params = model::ModelParameters<float>::random_init(cfg, 5);

    training::OptimConfig oc;
    oc.lr = 2e-3;
    oc.fast_lr = 1e-2;
    oc.warmup_ratio = 0.1;
    oc.weight_decay = 0.05;
    oc.epochs = 8;
    oc.batch_size = 16;
    oc.shuffle = true;
    oc.seed = 5;
    auto metrics = training::train_sft(cfg, params, batches, oc);

    const int n_eval = 200;
    int open_hits = 0, open_total = 0, closed_hits = 0, closed_total = 0;
    for (int e = 0; e < n_eval; ++e) {
        auto ep = data::gen_collab_episode(vocab, 12, 1000000 + static_cast<uint64_t>(e), lanes);

        engine::GenerationRequest req;
        req.lane_prompts = ep.lane_prompts;
        req.lanes = lanes;
        req.max_new_tokens = 5;
        req.temperature = 0.0;
        req.eos_id = data::ToyVocab::eos;
        req.marker_id = data::ToyVocab::marker;
        auto sampler = engine::make_nucleus_sampler<float>(req, 0, 0);
        auto res = engine::generate_group(cfg, params, req, sampler);
        for (const auto& lane : res.lanes) {
            ++open_total;
            if (lane.answer && *lane.answer == ep.answer) ++open_hits;
        }

        for (int m = 0; m < lanes; ++m) {
            engine::GenerationRequest solo;
            solo.prompt = ep.lane_prompts[static_cast<size_t>(m)];
            solo.lanes = 1;
            solo.max_new_tokens = 5;
            solo.temperature = 0.0;
            solo.eos_id = data::ToyVocab::eos;
            solo.marker_id = data::ToyVocab::marker;
            auto s2 = engine::make_nucleus_sampler<float>(solo, 0, 0);
            auto r2 = engine::generate_group(cfg, params, solo, s2);
            ++closed_total;
            if (r2.lanes[0].answer && *r2.lanes[0].answer == ep.answer) ++closed_hits;
        }
    }
    double open_acc = static_cast<double>(open_hits) / open_total;
    double closed_acc = static_cast<double>(closed_hits) / closed_total;
    Outcome o;
    o.pass = open_acc >= 0.90 && closed_acc <= 0.20;
    std::ostringstream d;
    d << episodes.size() << " episodes, " << metrics.size() << " steps, final loss "
      << (metrics.empty() ? 0.0 : metrics.back().loss) << "; open-mask acc " << open_acc
      << " (need >= 0.90), single-lane acc " << closed_acc << " (chance 0.10, allow <= 0.20)";
    o.detail = d.str();
    return o;
}

// --- 11: majority vote and answer extraction fixtures ------------------------------

Outcome check_majority_vote() {
    using engine::majority_vote;
    using OV = std::vector<std::optional<int>>;
    const std::optional<int> none;
    bool ok = true;
    ok = ok && majority_vote(OV{3, 3, 5, none}) == std::optional<int>(3);
    ok = ok && majority_vote(OV{none, none}) == none;
    ok = ok && majority_vote(OV{}) == none;
    ok = ok && majority_vote(OV{7}) == std::optional<int>(7);
    ok = ok && majority_vote(OV{2, 2, 9, 9, 9}) == std::optional<int>(9);
    ok = ok && majority_vote(OV{4, 6, 4, 6}) == std::optional<int>(4);  // first seen wins ties
    ok = ok && majority_vote(OV{none, 8, none, 8, 1}) == std::optional<int>(8);

    std::vector<int> t1{5, 101, 7, 102}, t2{101}, t3{5, 101, 7, 101, 9}, t4{1, 2, 3};
    ok = ok && engine::extract_answer(t1, 101) == std::optional<int>(7);
    ok = ok && engine::extract_answer(t2, 101) == none;
    ok = ok && engine::extract_answer(t3, 101) == std::optional<int>(9);  // last marker wins
    ok = ok && engine::extract_answer(t4, 101) == none;
    ok = ok && engine::extract_answer(t1, -1) == none;

    Outcome o;
    o.pass = ok;
    o.detail = "12 fixtures: absent answers dropped, first-seen tie break, last-marker payload";
    return o;
}

// --- 12 (informational): decode overhead of 4 lanes vs 1 ---------------------------

Outcome check_bench_overhead() {
    auto bc = bench::desk_profile();
    auto cfg = bench::bench_model_config(bc);
    auto params = model::ModelParameters<float>::random_init(cfg, bc.seed);
    auto result = bench::run_generation_bench(cfg, params, bc);

    std::ofstream csv("acceptance_bench.csv", std::ios::trunc);
    csv << bench::to_csv(result.rows);

    int max_lanes = 0;
    long final_cp = 0;
    for (const auto& r : result.rows)
        if (r.variant == "lanerope") {
            max_lanes = std::max(max_lanes, r.lanes);
            final_cp = std::max(final_cp, r.checkpoint);
        }
    double t1 = 0.0, tn = 0.0;
    for (const auto& r : result.rows) {
        if (r.variant != "lanerope" || r.checkpoint != final_cp) continue;
        if (r.lanes == 1) t1 = r.mean_s;
        if (r.lanes == max_lanes) tn = r.mean_s;
    }
    double ratio = tn / t1;
    Outcome o;
    o.pass = t1 > 0.0 && ratio <= 1.15;
    std::ostringstream d;
    d << max_lanes << " lanes vs 1 at " << final_cp << " batch tokens: " << tn << "s / " << t1
      << "s = " << ratio << " (bound 1.15); rows in acceptance_bench.csv";
    o.detail = d.str();
    return o;
}

// --- 13: curation partitions fixtures by reason -------------------------------------

data::ConversationRecord conv_fixture(int n_messages, int mentions, bool all_correct) {
    data::ConversationRecord r;
    r.question = "q";
    r.ground_truth = "42";
    r.assistants = {"Alice", "Bob"};
    r.messages = {{}, {}};
    for (int i = 0; i < n_messages; ++i) {
        r.messages[0].push_back(i < mentions ? "I agree with Bob here." : "thinking.");
        r.messages[1].push_back("step " + std::to_string(i));
    }
    r.final_answers = {"42", all_correct ? "42" : "7"};
    r.correct = {1, static_cast<uint8_t>(all_correct ? 1 : 0)};
    return r;
}

Outcome check_curation() {
    data::CurationConfig cfg;  // messages in [10, 30], score must exceed 2 * assistants

    std::vector<data::ConversationRecord> records;
    std::vector<std::string> expect;
    auto add = [&](data::ConversationRecord r, const char* verdict) {
        records.push_back(std::move(r));
        expect.push_back(verdict);
    };
    add(conv_fixture(12, 5, true), "kept");
    add(conv_fixture(10, 5, true), "kept");  // length boundaries are inclusive
    add(conv_fixture(30, 5, true), "kept");
    add(conv_fixture(9, 5, true), "length");
    add(conv_fixture(31, 5, true), "length");
    add(conv_fixture(12, 4, true), "interaction");  // score 4 is not > 2 * 2
    add(conv_fixture(12, 5, false), "correctness");
    auto broken1 = conv_fixture(12, 5, true);
    broken1.correct.pop_back();
    add(broken1, "parse");
    auto broken2 = conv_fixture(12, 5, true);
    broken2.messages[1].clear();
    add(broken2, "parse");
    auto broken3 = conv_fixture(12, 5, true);
    broken3.assistants.clear();
    broken3.messages.clear();
    add(broken3, "parse");
    auto broken4 = conv_fixture(12, 5, true);
    broken4.final_answers.pop_back();
    add(broken4, "parse");

    int wrong = 0;
    for (size_t i = 0; i < records.size(); ++i)
        if (data::curation_verdict(records[i], cfg) != expect[i]) ++wrong;

    // Phrase occurrences rescue a record that has no name mentions.
    auto quiet = conv_fixture(12, 0, true);
    data::CurationConfig with_phrases = cfg;
    with_phrases.key_phrases = {"step"};
    bool phrase_ok = data::curation_verdict(quiet, cfg) == "interaction" &&
                     data::curation_verdict(quiet, with_phrases) == "kept";

    auto [kept_records, report] = data::curate(records, cfg);
    bool partition_ok = report.kept == 3 && kept_records.size() == 3 &&
                        report.rejected_by_reason.at("length") == 2 &&
                        report.rejected_by_reason.at("interaction") == 1 &&
                        report.rejected_by_reason.at("correctness") == 1 &&
                        report.rejected_by_reason.at("parse") == 4;

    Outcome o;
    o.pass = wrong == 0 && phrase_ok && partition_ok;
    o.detail = "12 fixtures, " + std::to_string(wrong) +
               " verdict mismatches; partition 3 kept / 2 length / 1 interaction / 1 correctness / "
               "4 parse" +
               (partition_ok ? "" : " NOT reproduced") +
               (phrase_ok ? "; phrase scoring verified" : "; phrase scoring BROKEN");
    return o;
}

}  // namespace

int main() {
    std::printf("acceptance: lane-parallel decoding library\n");
    run(1, "single-lane forward matches a plain rotary reference decoder", true,
        check_single_lane_reduction);
    run(2, "within-lane attention is relative-position invariant", true, check_within_lane_invariance);
    run(3, "lane rotations equal one stream at gap-spaced positions", true, check_virtual_positions);
    run(4, "bias-initialized lanes decode independently at init", true, check_independence_at_init);
    run(5, "fused attention matches the dense visibility oracle", true, check_oracle_equivalence);
    run(6, "incremental decode matches whole-group recompute", true, check_prefill_decode);
    run(7, "analytic gradients match finite differences", true, check_gradients);
    run(8, "interpolation ramp anchors", true, check_ramp_anchors);
    run(9, "asymmetric sigmoid anchors and preference gradient signs", true, check_sigmoid_anchors);
    run(10, "two lanes trained together solve the split-fact task", true, check_collaboration);
    run(11, "majority vote and answer extraction fixtures", true, check_majority_vote);
    run(12, "multi-lane decode overhead within 15% of single-lane", false, check_bench_overhead);
    run(13, "curation partitions fixtures by reason", true, check_curation);

    std::printf("%d of 12 required criteria failed\n", g_failures);
    return g_failures;
}
