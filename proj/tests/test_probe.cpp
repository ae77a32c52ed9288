#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracle_helpers.hpp"
#include "shield/probe.hpp"
#include "shield/rng.hpp"

using namespace shield;

namespace {

ModelConfig probe_cfg(int L = 1, int d = 3, int d_m = 4, uint64_t seed = 5) {
    ModelConfig c;
    c.L = L;
    c.d = d;
    c.d_m = d_m;
    c.vocab = 16;
    c.heads = 1;
    c.max_seq = 16;
    c.seed = seed;
    return c;
}

Sample probe_sample(Rng& rng, const ModelConfig& cfg, int n_vis, int n_tok, bool refusal) {
    Sample s;
    s.id = "p" + std::to_string(rng.next_u64() % 1000);
    s.lang = "aa";
    s.modality = refusal ? "text-dominant" : "benign";
    s.risk = refusal ? "harmful" : "benign";
    for (int i = 0; i < n_tok; ++i) s.prompt_ids.push_back(3 + int(rng.below(cfg.vocab - 3)));
    s.answer_ids = refusal ? std::vector<int>{kRefuse, kEos} : std::vector<int>{4, kEos};
    for (int i = 0; i < n_vis; ++i) {
        std::vector<double> v(cfg.d);
        for (auto& e : v) e = rng.uniform_sym(0.6);
        s.vis.push_back(std::move(v));
    }
    return s;
}

}  // namespace

TEST_CASE("mean_activations basic cases") {
    const auto cfg = probe_cfg();
    const TinyVlm m = init_model(cfg);
    Rng rng(1);

    // One sample, one position: the mean is that position's h.
    Corpus one;
    one.tag = "one";
    one.samples.push_back(probe_sample(rng, cfg, 0, 1, false));
    const auto mean1 = mean_activations(m, one);
    ForwardOptions opt;
    opt.record = true;
    const auto tr = run_forward(m, one.samples[0], opt).trace(cfg);
    for (int c = 0; c < cfg.d_m; ++c) CHECK(std::abs(mean1[0][c] - tr.h[0].at(0, c)) < 1e-15);

    // Two samples with equal position counts: mean of the two traces.
    Corpus two;
    two.tag = "two";
    two.samples.push_back(probe_sample(rng, cfg, 1, 2, false));
    two.samples.push_back(probe_sample(rng, cfg, 1, 2, false));
    const auto mean2 = mean_activations(m, two);
    const auto ta = run_forward(m, two.samples[0], opt).trace(cfg);
    const auto tb = run_forward(m, two.samples[1], opt).trace(cfg);
    for (int c = 0; c < cfg.d_m; ++c)
        CHECK(std::abs(mean2[0][c] - 0.5 * (ta.mean[0][c] + tb.mean[0][c])) < 1e-12);

    CHECK_THROWS_AS(mean_activations(m, Corpus{}), std::invalid_argument);
}

TEST_CASE("mean_activations matches concatenate-then-average brute force") {
    const auto cfg = probe_cfg(2, 4, 6, 9);
    const TinyVlm m = init_model(cfg);
    Rng rng(2);
    Corpus c;
    c.tag = "random";
    for (int i = 0; i < 10; ++i)
        c.samples.push_back(probe_sample(rng, cfg, 1 + int(rng.below(2)), 1 + int(rng.below(4)),
                                         false));
    const auto got = mean_activations(m, c);

    for (int l = 0; l < cfg.L; ++l) {
        std::vector<std::vector<std::vector<double>>> acts;
        for (const auto& s : c.samples) {
            const auto bf = oracle::brute_forward(m, s);
            acts.push_back(bf.ffn_h[l]);
        }
        const auto expect = oracle::brute_mean(acts);
        for (int i = 0; i < cfg.d_m; ++i) CHECK(std::abs(got[l][i] - expect[i]) < 1e-12);
    }
}

TEST_CASE("importance arithmetic") {
    auto cfg = probe_cfg(1, 2, 2);
    TinyVlm m = init_model(cfg);
    // Column 0 of W_down = (3,4); column 1 = (1,0).
    m.layers[0].w_down.at(0, 0) = 3.0;
    m.layers[0].w_down.at(1, 0) = 4.0;
    m.layers[0].w_down.at(0, 1) = 1.0;
    m.layers[0].w_down.at(1, 1) = 0.0;

    auto imp = importance({{2.0, 0.0}}, m);
    CHECK(imp[0][0] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(imp[0][1] == 0.0);
    imp = importance({{-2.0, 5.0}}, m);
    CHECK(imp[0][0] == doctest::Approx(10.0).epsilon(1e-12));

    CHECK_THROWS_AS(importance({{1.0, 2.0, 3.0}}, m), std::invalid_argument);
    CHECK_THROWS_AS(importance({{1.0, 2.0}, {1.0, 2.0}}, m), std::invalid_argument);
}

TEST_CASE("normalize saliency") {
    auto sal = normalize({{1.0, 3.0}});
    CHECK(std::abs(sal[0][0] - 0.25) < 1e-9);
    CHECK(std::abs(sal[0][1] - 0.75) < 1e-9);

    sal = normalize({{0.0, 0.0, 0.0}});
    for (double v : sal[0]) CHECK(v == 0.0);

    Rng rng(3);
    std::vector<double> imp(8);
    for (auto& v : imp) v = rng.uniform() * 4.0;
    double total = 0.0;
    for (double v : imp) total += v;
    sal = normalize({imp});
    double sum = 0.0;
    for (double v : sal[0]) sum += v;
    CHECK(std::abs(sum - total / (total + 1e-12)) < 1e-12);
    CHECK(sum <= 1.0);
}

TEST_CASE("topk selection and tie rules") {
    CHECK(topk({0.1, 0.5, 0.2, 0.2}, 0.25) == std::vector<int>{1});
    CHECK(topk({0.25, 0.25, 0.25, 0.25}, 0.5) == std::vector<int>{0, 1});
    CHECK(topk({0.1, 0.5, 0.2, 0.2}, 0.0).empty());
    CHECK(topk({0.1, 0.5, 0.2, 0.2}, 1.0) == std::vector<int>{0, 1, 2, 3});
    CHECK_THROWS_AS(topk({0.1}, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(topk({0.1}, 1.1), std::invalid_argument);

    // |topk| = floor(p * d_m) exactly; elements sorted and distinct; scale
    // equivariance under c > 0.
    Rng rng(4);
    for (int it = 0; it < 50; ++it) {
        const int d_m = 4 + int(rng.below(12));
        std::vector<double> s(d_m);
        for (auto& v : s) v = rng.uniform();
        const double p = rng.uniform();
        const auto sel = topk(s, p);
        CHECK(int(sel.size()) == int(std::floor(p * d_m + 1e-9)));
        for (size_t i = 1; i < sel.size(); ++i) CHECK(sel[i] > sel[i - 1]);
        auto scaled = s;
        const double c = 0.1 + rng.uniform() * 5.0;
        for (auto& v : scaled) v *= c;
        CHECK(topk(scaled, p) == sel);
    }
}

TEST_CASE("isolate_safety set difference") {
    auto mk = [](std::vector<std::vector<int>> layers, double p = 0.5, int d_m = 4) {
        SafetyNeuronSet s;
        s.init(int(layers.size()), d_m, p);
        s.layers = std::move(layers);
        return s;
    };
    CHECK(isolate_safety(mk({{1, 2}}), mk({{2, 3}})).layers[0] == std::vector<int>{1});
    CHECK(isolate_safety(mk({{1, 2}}), mk({{1, 2}})).layers[0].empty());
    CHECK(isolate_safety(mk({{1, 2}}), mk({{0, 3}})).layers[0] == std::vector<int>{1, 2});
    CHECK_THROWS_AS(isolate_safety(mk({{1}}, 0.5), mk({{1}}, 0.25)), std::invalid_argument);
    CHECK_THROWS_AS(isolate_safety(mk({{1}}, 0.5, 4), mk({{1}}, 0.5, 8)), std::invalid_argument);
}

TEST_CASE("probe_pipeline equals the independent brute-force pipeline") {
    const auto cfg = probe_cfg(1, 3, 4, 17);
    const TinyVlm m = init_model(cfg);
    Rng rng(5);
    Corpus safe, benign;
    safe.tag = "safe";
    benign.tag = "benign";
    for (int i = 0; i < 2; ++i) safe.samples.push_back(probe_sample(rng, cfg, 1, 3, true));
    for (int i = 0; i < 2; ++i) benign.samples.push_back(probe_sample(rng, cfg, 1, 3, false));

    const double p = 0.5;  // k = 2 of 4
    const auto got = probe_pipeline(m, safe, benign, p);

    // Brute force: traces -> flat means -> importance -> saliency -> top-k
    // -> set difference, all recomputed from scratch.
    auto brute_candidates = [&](const Corpus& c) {
        std::vector<std::vector<std::vector<double>>> acts;
        for (const auto& s : c.samples) acts.push_back(oracle::brute_forward(m, s).ffn_h[0]);
        const auto mean = oracle::brute_mean(acts);
        std::vector<double> imp(mean.size());
        for (size_t i = 0; i < mean.size(); ++i) {
            double sq = 0.0;
            for (int r = 0; r < cfg.d; ++r)
                sq += m.layers[0].w_down.at(r, int(i)) * m.layers[0].w_down.at(r, int(i));
            imp[i] = std::abs(mean[i]) * std::sqrt(sq);
        }
        double total = 0.0;
        for (double v : imp) total += v;
        std::vector<double> sal(imp.size());
        for (size_t i = 0; i < imp.size(); ++i) sal[i] = imp[i] / (total + 1e-12);
        return oracle::brute_topk(sal, int(std::floor(p * double(cfg.d_m) + 1e-9)));
    };
    const auto expect =
        oracle::brute_setdiff(brute_candidates(safe), brute_candidates(benign));
    CHECK(got.layers[0] == expect);

    // Identical corpora leave nothing.
    const auto empty_set = probe_pipeline(m, safe, safe, p);
    CHECK(empty_set.total() == 0);

    // Determinism and provenance.
    const auto again = probe_pipeline(m, safe, benign, p);
    CHECK(again.layers == got.layers);
    CHECK(got.provenance.safe_corpus == "safe");
    CHECK(got.provenance.benign_corpus == "benign");
    CHECK(got.provenance.model_checksum == m.checksum());

    // Refusal precondition on the safety corpus.
    Corpus bad = safe;
    bad.samples[0].answer_ids = {4, kEos};
    CHECK_THROWS_AS(probe_pipeline(m, bad, benign, p), std::invalid_argument);
    CHECK_THROWS_AS(probe_pipeline(m, Corpus{}, benign, p), std::invalid_argument);
}

TEST_CASE("neuron set files round trip and validate") {
    SafetyNeuronSet s;
    s.init(3, 8, 0.25);
    s.layers[0] = {1, 5};
    s.layers[2] = {0, 3, 7};
    s.provenance = {"safe", "mm", "abc123"};
    const auto dir = std::filesystem::temp_directory_path() / "shield_probe_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "set.json").string();
    save_neuron_set(s, path);
    const auto loaded = load_neuron_set(path);
    CHECK(loaded.layers == s.layers);
    CHECK(loaded.p == s.p);
    CHECK(loaded.d_m == s.d_m);
    CHECK(loaded.layer_count == 3);
    CHECK(loaded.provenance.model_checksum == "abc123");

    // Two saves are byte-identical.
    const std::string path2 = (dir / "set2.json").string();
    save_neuron_set(s, path2);
    std::ifstream f1(path), f2(path2);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    s.layers[0] = {5, 1};  // unsorted
    CHECK_THROWS_AS(save_neuron_set(s, path), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("saliency sheet export") {
    const auto cfg = probe_cfg(2, 3, 4, 23);
    const TinyVlm m = init_model(cfg);
    Rng rng(6);
    Corpus c;
    c.tag = "sheet-src";
    for (int i = 0; i < 3; ++i) c.samples.push_back(probe_sample(rng, cfg, 1, 3, false));
    const auto sheet = saliency_sheet(m, c);
    CHECK(sheet.source == "sheet-src");
    for (int l = 0; l < cfg.L; ++l) {
        double sum = 0.0;
        for (double v : sheet.saliency[l]) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(sum <= 1.0 + 1e-12);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));  // importance >> epsilon here
    }
    const auto dir = std::filesystem::temp_directory_path() / "shield_sheet_test";
    std::filesystem::create_directories(dir);
    save_saliency_sheet(sheet, (dir / "sheet.json").string());
    CHECK(std::filesystem::file_size(dir / "sheet.json") > 100);
    std::filesystem::remove_all(dir);
}
