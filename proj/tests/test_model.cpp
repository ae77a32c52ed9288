#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracle_helpers.hpp"
#include "shield/model.hpp"
#include "shield/rng.hpp"

using namespace shield;

namespace {

ModelConfig tiny_cfg(int L = 2, int d = 4, int d_m = 6, int heads = 2, uint64_t seed = 11) {
    ModelConfig c;
    c.L = L;
    c.d = d;
    c.d_m = d_m;
    c.vocab = 16;
    c.heads = heads;
    c.max_seq = 24;
    c.seed = seed;
    return c;
}

Sample tiny_sample(Rng& rng, const ModelConfig& cfg, int n_vis, int n_tok, int n_ans = 0) {
    Sample s;
    s.id = "t";
    s.lang = "aa";
    s.modality = "benign";
    s.risk = "benign";
    for (int i = 0; i < n_tok; ++i) s.prompt_ids.push_back(3 + int(rng.below(cfg.vocab - 3)));
    for (int i = 0; i < n_ans; ++i) s.answer_ids.push_back(3 + int(rng.below(cfg.vocab - 3)));
    for (int i = 0; i < n_vis; ++i) {
        std::vector<double> v(cfg.d);
        for (auto& e : v) e = rng.uniform_sym(0.7);
        s.vis.push_back(std::move(v));
    }
    return s;
}

}  // namespace

TEST_CASE("init_model is seed-deterministic") {
    const auto cfg = tiny_cfg();
    CHECK(init_model(cfg).checksum() == init_model(cfg).checksum());
    auto cfg2 = cfg;
    cfg2.seed = cfg.seed + 1;
    CHECK(init_model(cfg).checksum() != init_model(cfg2).checksum());
}

TEST_CASE("init_model validates dimensions") {
    auto cfg = tiny_cfg();
    cfg.heads = 3;  // d=4 not divisible
    CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
    cfg = tiny_cfg();
    cfg.d_m = 2;  // < d
    CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
    cfg = tiny_cfg();
    cfg.vocab = 2;
    CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
}

TEST_CASE("parameter count matches allocated scalars") {
    for (auto cfg : {tiny_cfg(), tiny_cfg(3, 8, 12, 4), ModelConfig{}}) {
        const TinyVlm m = init_model(cfg);
        long counted = 0;
        m.for_each_weight(
            [&](const std::string&, const Mat& w) { counted += long(w.data.size()); });
        CHECK(counted == cfg.param_count());
    }
}

TEST_CASE("ffn_forward constant-gate case") {
    // With a constant gate pre-activation c, h = silu(c) * (W_up x + b_up)
    // elementwise; c = 0 collapses the whole block to zero.
    auto cfg = tiny_cfg(1, 3, 4, 1);
    TinyVlm m = init_model(cfg);
    m.layers[0].w_gate.fill(0.0);
    m.layers[0].b_gate.fill(0.0);
    const std::vector<double> x{0.3, -1.2, 0.7};
    auto out = ffn_forward(m, x, 0, nullptr);
    for (int i = 0; i < cfg.d_m; ++i) CHECK(out.h[i] == 0.0);
    for (int j = 0; j < cfg.d; ++j) CHECK(out.y[j] == 0.0);

    m.layers[0].b_gate.fill(1.5);
    out = ffn_forward(m, x, 0, nullptr);
    for (int i = 0; i < cfg.d_m; ++i) {
        double up = m.layers[0].b_up.data[i];
        for (int j = 0; j < cfg.d; ++j) up += m.layers[0].w_up.at(i, j) * x[j];
        CHECK(std::abs(out.h[i] - silu(1.5) * up) < 1e-12);
    }
}

TEST_CASE("ffn_forward full mask ablates the block output") {
    auto cfg = tiny_cfg(1, 3, 4, 1);
    const TinyVlm m = init_model(cfg);
    SafetyNeuronSet all;
    all.init(cfg.L, cfg.d_m, 1.0);
    for (auto& l : all.layers)
        for (int i = 0; i < cfg.d_m; ++i) l.push_back(i);
    Intervention iv;
    iv.mode = Intervention::Mode::kMask;
    iv.target = all;
    const auto out = ffn_forward(m, {0.5, 0.1, -0.4}, 0, &iv);
    for (double v : out.h) CHECK(v == 0.0);
    for (double v : out.y) CHECK(v == 0.0);
}

TEST_CASE("ffn_forward matches brute-force evaluation") {
    Rng rng(21);
    auto cfg = tiny_cfg(1, 3, 4, 1, 5);
    const TinyVlm m = init_model(cfg);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> x(cfg.d);
        for (auto& v : x) v = rng.uniform_sym(2.0);
        const auto got = ffn_forward(m, x, 0, nullptr);
        std::vector<double> h, y;
        oracle::ffn_brute(m.layers[0].w_gate, m.layers[0].w_up, m.layers[0].b_gate,
                          m.layers[0].b_up, m.layers[0].w_down, x, h, y);
        for (int i = 0; i < cfg.d_m; ++i) CHECK(std::abs(got.h[i] - h[i]) < 1e-12);
        for (int j = 0; j < cfg.d; ++j) CHECK(std::abs(got.y[j] - y[j]) < 1e-12);
    }
}

TEST_CASE("forward matches the independent reimplementation") {
    Rng rng(31);
    // Single token, one layer first, then a larger case with visual prefix.
    for (auto [L, d, d_m, heads, n_vis, n_tok] :
         {std::tuple{1, 4, 6, 1, 0, 1}, std::tuple{2, 4, 8, 2, 3, 5}}) {
        const auto cfg = tiny_cfg(L, d, d_m, heads, 13);
        const TinyVlm m = init_model(cfg);
        const Sample s = tiny_sample(rng, cfg, n_vis, n_tok);
        const Forward fwd = run_forward(m, s, {});
        const auto brute = oracle::brute_forward(m, s);
        const Mat& logits = fwd.tape.value(fwd.logits);
        REQUIRE(logits.rows == int(brute.logits.size()));
        for (int t = 0; t < logits.rows; ++t)
            for (int c = 0; c < logits.cols; ++c)
                CHECK(std::abs(logits.at(t, c) - brute.logits[t][c]) < 1e-10);
        for (int l = 0; l < cfg.L; ++l) {
            const Mat& h = fwd.tape.value(fwd.ffn_h[l]);
            for (int t = 0; t < h.rows; ++t)
                for (int c = 0; c < h.cols; ++c)
                    CHECK(std::abs(h.at(t, c) - brute.ffn_h[l][t][c]) < 1e-10);
        }
    }
}

TEST_CASE("fresh adapters leave the forward bit-identical") {
    Rng rng(41);
    const auto cfg = tiny_cfg(2, 4, 6, 2);
    const TinyVlm m = init_model(cfg);
    const Sample s = tiny_sample(rng, cfg, 2, 4);

    AdapterSet adapters;
    for (int l = 0; l < cfg.L; ++l)
        for (auto tgt : {MaskedLoraAdapter::Target::kUp, MaskedLoraAdapter::Target::kGate}) {
            MaskedLoraAdapter ad;
            ad.layer = l;
            ad.target = tgt;
            ad.r = 2;
            ad.A = Mat(2, cfg.d);
            for (auto& v : ad.A.data) v = rng.uniform_sym(1.0);
            ad.B = Mat(cfg.d_m, 2);  // zero
            ad.mask_rows = {0, 3};
            adapters.push_back(std::move(ad));
        }

    const Forward plain = run_forward(m, s, {});
    ForwardOptions opt;
    opt.adapters = &adapters;
    const Forward with = run_forward(m, s, opt);
    const Mat& a = plain.tape.value(plain.logits);
    const Mat& b = with.tape.value(with.logits);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);

    // Nonzero B but empty mask is also an exact no-op.
    for (auto& ad : adapters) {
        for (auto& v : ad.B.data) v = rng.uniform_sym(1.0);
        ad.mask_rows.clear();
    }
    const Forward masked_out = run_forward(m, s, opt);
    const Mat& c = masked_out.tape.value(masked_out.logits);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == c.data[i]);
}

TEST_CASE("record flag does not change logits, trace means recompute") {
    Rng rng(51);
    const auto cfg = tiny_cfg(2, 4, 6, 2);
    const TinyVlm m = init_model(cfg);
    const Sample s = tiny_sample(rng, cfg, 2, 5);
    ForwardOptions rec;
    rec.record = true;
    const Forward f1 = run_forward(m, s, {});
    const Forward f2 = run_forward(m, s, rec);
    const Mat& a = f1.tape.value(f1.logits);
    const Mat& b = f2.tape.value(f2.logits);
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);

    const ActivationTrace tr = f2.trace(cfg);
    CHECK(tr.counted == f2.seq_len);
    for (int l = 0; l < cfg.L; ++l) {
        for (int c = 0; c < cfg.d_m; ++c) {
            double mean = 0.0;
            for (int t = 0; t < tr.h[l].rows; ++t) mean += tr.h[l].at(t, c);
            mean /= tr.h[l].rows;
            CHECK(std::abs(mean - tr.mean[l][c]) < 1e-12);
        }
    }
}

TEST_CASE("masking every neuron of every layer zeroes all FFN outputs") {
    Rng rng(61);
    const auto cfg = tiny_cfg(2, 4, 6, 2);
    const TinyVlm m = init_model(cfg);
    const Sample s = tiny_sample(rng, cfg, 2, 4);
    SafetyNeuronSet all;
    all.init(cfg.L, cfg.d_m, 1.0);
    for (auto& l : all.layers)
        for (int i = 0; i < cfg.d_m; ++i) l.push_back(i);
    Intervention iv;
    iv.mode = Intervention::Mode::kMask;
    iv.target = all;
    ForwardOptions opt;
    opt.intervention = &iv;
    const Forward fwd = run_forward(m, s, opt);
    for (int l = 0; l < cfg.L; ++l)
        for (double v : fwd.tape.value(fwd.ffn_h[l]).data) CHECK(v == 0.0);
    // Residual stream still carries attention: logits stay finite and
    // generally nonzero.
    CHECK(fwd.tape.value(fwd.logits).all_finite());
}

TEST_CASE("loss_answer_tokens uniform and composition cases") {
    Rng rng(71);
    auto cfg = tiny_cfg(1, 4, 6, 1);
    cfg.vocab = 128;
    TinyVlm m = init_model(cfg);
    m.lm_head.fill(0.0);  // uniform output distribution
    Sample s = tiny_sample(rng, cfg, 0, 3, 3);
    const auto loss = loss_answer_tokens(m, s, nullptr);
    CHECK(loss.tokens == 3);
    CHECK(std::abs(loss.sum - 14.5560907917588514977618745506) < 1e-9);
    CHECK(std::abs(loss.mean - loss.sum / 3.0) < 1e-15);

    // Composition: summed loss equals per-row cross entropy of the
    // teacher-forced logits.
    const TinyVlm m2 = init_model(cfg);
    ForwardOptions opt;
    opt.with_answer = true;
    const Forward fwd = run_forward(m2, s, opt);
    const Mat& logits = fwd.tape.value(fwd.logits);
    double expect = 0.0;
    const int base = int(s.vis.size()) + int(s.prompt_ids.size());
    for (size_t k = 0; k < s.answer_ids.size(); ++k) {
        std::vector<double> row(logits.row(base - 1 + int(k)),
                                logits.row(base - 1 + int(k)) + cfg.vocab);
        expect += cross_entropy(row, s.answer_ids[k]);
    }
    CHECK(std::abs(loss_answer_tokens(m2, s, nullptr).sum - expect) < 1e-12);

    s.answer_ids.clear();
    CHECK_THROWS_AS(loss_answer_tokens(m2, s, nullptr), std::invalid_argument);
}

TEST_CASE("greedy generation emits the dominant token and breaks ties low") {
    auto cfg = tiny_cfg(1, 4, 6, 1);
    TinyVlm m = init_model(cfg);
    // Quiet model: zero attention and FFN, positive constant embeddings.
    m.layers[0].w_gate.fill(0.0);
    m.layers[0].b_gate.fill(0.0);
    m.layers[0].w_up.fill(0.0);
    m.layers[0].b_up.fill(0.0);
    for (auto& w : m.layers[0].wv) w.fill(0.0);
    for (auto& w : m.layers[0].wo) w.fill(0.0);
    m.tok_emb.fill(0.5);
    m.pos_emb.fill(0.1);

    Sample s;
    s.prompt_ids = {4, 5};

    // All-zero head: every logit ties at zero, lowest id (PAD) wins.
    m.lm_head.fill(0.0);
    auto out = generate_greedy(m, s, nullptr, nullptr, 4);
    CHECK(out == std::vector<int>{kPad, kPad, kPad, kPad});

    // REFUSE row strictly dominant at every step.
    for (int c = 0; c < cfg.d; ++c) m.lm_head.at(kRefuse, c) = 1.0;
    out = generate_greedy(m, s, nullptr, nullptr, 4);
    CHECK(out == std::vector<int>{kRefuse, kRefuse, kRefuse, kRefuse});

    // Exact two-way tie between ids 5 and 6: the lower id is emitted.
    m.lm_head.fill(0.0);
    for (int c = 0; c < cfg.d; ++c) {
        m.lm_head.at(5, c) = 1.0;
        m.lm_head.at(6, c) = 1.0;
    }
    out = generate_greedy(m, s, nullptr, nullptr, 1);
    CHECK(out == std::vector<int>{5});

    // EOS stops generation.
    m.lm_head.fill(0.0);
    for (int c = 0; c < cfg.d; ++c) m.lm_head.at(kEos, c) = 1.0;
    out = generate_greedy(m, s, nullptr, nullptr, 8);
    CHECK(out == std::vector<int>{kEos});

    // Prompt must fit within max_seq - max_new.
    Sample longp;
    longp.prompt_ids.assign(size_t(cfg.max_seq), 4);
    CHECK_THROWS_AS(generate_greedy(m, longp, nullptr, nullptr, 4), std::invalid_argument);
}

TEST_CASE("generation is reproducible across calls") {
    Rng rng(81);
    const auto cfg = tiny_cfg(2, 4, 6, 2);
    const TinyVlm m = init_model(cfg);
    const Sample s = tiny_sample(rng, cfg, 2, 4);
    const auto a = generate_greedy(m, s, nullptr, nullptr, 8);
    const auto b = generate_greedy(m, s, nullptr, nullptr, 8);
    CHECK(a == b);
}

TEST_CASE("forward rejects malformed inputs") {
    Rng rng(91);
    const auto cfg = tiny_cfg();
    const TinyVlm m = init_model(cfg);
    Sample s = tiny_sample(rng, cfg, 1, 4);
    s.prompt_ids.assign(size_t(cfg.max_seq + 1), 3);
    CHECK_THROWS_AS(run_forward(m, s, {}), std::invalid_argument);

    s = tiny_sample(rng, cfg, 1, 4);
    s.prompt_ids[0] = cfg.vocab;
    CHECK_THROWS_AS(run_forward(m, s, {}), std::invalid_argument);

    s = tiny_sample(rng, cfg, 1, 4);
    s.vis[0].pop_back();
    CHECK_THROWS_AS(run_forward(m, s, {}), std::invalid_argument);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    const auto cfg = tiny_cfg(2, 4, 6, 2, 123);
    const TinyVlm m = init_model(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "shield_model_test";
    std::filesystem::create_directories(dir);
    const std::string p1 = (dir / "a.tvlm").string();
    const std::string p2 = (dir / "b.tvlm").string();
    save_model(m, p1);
    const TinyVlm loaded = load_model(p1);
    CHECK(loaded.checksum() == m.checksum());
    CHECK(loaded.cfg.seed == cfg.seed);
    save_model(loaded, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    // Corrupt magic.
    std::ofstream bad(p2, std::ios::binary);
    bad << "NOPE";
    bad.close();
    CHECK_THROWS_AS(load_model(p2), std::runtime_error);
    std::filesystem::remove_all(dir);
}
