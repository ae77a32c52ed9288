#include "shield/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "shield/parallel.hpp"

namespace shield {

namespace {

struct SampleSums {
    std::vector<std::vector<double>> sum;  // per layer, d_m
    long positions = 0;
};

}  // namespace

std::vector<std::vector<double>> mean_activations(const TinyVlm& model, const Corpus& corpus) {
    if (corpus.empty()) throw std::invalid_argument("mean_activations: empty corpus");
    const int L = model.cfg.L;
    const int d_m = model.cfg.d_m;

    auto sums = parallel_map<SampleSums>(corpus.size(), [&](size_t i) {
        ForwardOptions opt;
        opt.record = true;
        const Forward fwd = run_forward(model, corpus.samples[i], opt);
        SampleSums s;
        s.sum.assign(L, std::vector<double>(d_m, 0.0));
        for (int l = 0; l < L; ++l) {
            const Mat& h = fwd.tape.value(fwd.ffn_h[l]);
            for (int t = 0; t < h.rows; ++t) {
                const double* row = h.row(t);
                for (int c = 0; c < d_m; ++c) s.sum[l][c] += row[c];
            }
        }
        s.positions = fwd.seq_len;
        return s;
    });

    std::vector<std::vector<double>> mean(L, std::vector<double>(d_m, 0.0));
    long total = 0;
    for (const auto& s : sums) {
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < d_m; ++c) mean[l][c] += s.sum[l][c];
        total += s.positions;
    }
    for (auto& layer : mean)
        for (double& v : layer) v /= double(total);
    return mean;
}

std::vector<std::vector<double>> importance(const std::vector<std::vector<double>>& a_bar,
                                            const TinyVlm& model) {
    if (static_cast<int>(a_bar.size()) != model.cfg.L)
        throw std::invalid_argument("importance: layer count mismatch");
    std::vector<std::vector<double>> imp(a_bar.size());
    for (size_t l = 0; l < a_bar.size(); ++l) {
        if (static_cast<int>(a_bar[l].size()) != model.cfg.d_m)
            throw std::invalid_argument("importance: d_m mismatch");
        const Mat& w_down = model.layers[l].w_down;
        imp[l].resize(a_bar[l].size());
        for (int i = 0; i < model.cfg.d_m; ++i) {
            double sq = 0.0;
            for (int j = 0; j < model.cfg.d; ++j) sq += w_down.at(j, i) * w_down.at(j, i);
            imp[l][i] = std::abs(a_bar[l][i]) * std::sqrt(sq);
        }
    }
    return imp;
}

std::vector<std::vector<double>> normalize(const std::vector<std::vector<double>>& imp,
                                           double epsilon) {
    std::vector<std::vector<double>> sal(imp.size());
    for (size_t l = 0; l < imp.size(); ++l) {
        double total = 0.0;
        for (double v : imp[l]) total += v;
        sal[l].resize(imp[l].size());
        for (size_t i = 0; i < imp[l].size(); ++i) sal[l][i] = imp[l][i] / (total + epsilon);
    }
    return sal;
}

std::vector<int> topk(const std::vector<double>& saliency, double p) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("topk: p must be in [0,1]");
    const int d_m = static_cast<int>(saliency.size());
    // Small tolerance so exact multiples of 1/d_m floor as written.
    const int k = static_cast<int>(std::floor(p * d_m + 1e-9));
    std::vector<int> idx(saliency.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return saliency[a] > saliency[b]; });
    idx.resize(static_cast<size_t>(std::min(k, d_m)));
    std::sort(idx.begin(), idx.end());
    return idx;
}

SafetyNeuronSet isolate_safety(const SafetyNeuronSet& t_safe, const SafetyNeuronSet& t_mm) {
    if (t_safe.p != t_mm.p || t_safe.d_m != t_mm.d_m || t_safe.layer_count != t_mm.layer_count)
        throw std::invalid_argument("isolate_safety: p/d_m/layer mismatch");
    SafetyNeuronSet out;
    out.init(t_safe.layer_count, t_safe.d_m, t_safe.p);
    for (int l = 0; l < t_safe.layer_count; ++l)
        std::set_difference(t_safe.layers[l].begin(), t_safe.layers[l].end(),
                            t_mm.layers[l].begin(), t_mm.layers[l].end(),
                            std::back_inserter(out.layers[l]));
    out.validate();
    return out;
}

SafetyNeuronSet topk_set(const TinyVlm& model, const Corpus& corpus, double p) {
    const auto sal = normalize(importance(mean_activations(model, corpus), model));
    SafetyNeuronSet set;
    set.init(model.cfg.L, model.cfg.d_m, p);
    for (int l = 0; l < model.cfg.L; ++l) set.layers[l] = topk(sal[l], p);
    set.validate();
    return set;
}

SaliencySheet saliency_sheet(const TinyVlm& model, const Corpus& corpus, double epsilon) {
    SaliencySheet sheet;
    sheet.epsilon = epsilon;
    sheet.source = corpus.tag;
    sheet.importance = importance(mean_activations(model, corpus), model);
    sheet.saliency = normalize(sheet.importance, epsilon);
    return sheet;
}

SafetyNeuronSet probe_pipeline(const TinyVlm& model, const Corpus& d_safe, const Corpus& d_mm,
                               double p) {
    if (d_safe.empty() || d_mm.empty())
        throw std::invalid_argument("probe_pipeline: empty corpus");
    for (const auto& s : d_safe.samples)
        if (s.answer_ids.empty() || s.answer_ids[0] != kRefuse)
            throw std::invalid_argument(
                "probe_pipeline: safety corpus sample without refusal answer: " + s.id);

    const SafetyNeuronSet t_safe = topk_set(model, d_safe, p);
    const SafetyNeuronSet t_mm = topk_set(model, d_mm, p);
    SafetyNeuronSet out = isolate_safety(t_safe, t_mm);
    out.provenance = {d_safe.tag, d_mm.tag, model.checksum()};

    // Set-algebra guarantees, checked on every run.
    for (int l = 0; l < out.layer_count; ++l) {
        for (int i : out.layers[l]) {
            if (!std::binary_search(t_safe.layers[l].begin(), t_safe.layers[l].end(), i))
                throw std::runtime_error("probe_pipeline: result not a subset of T_safe");
            if (std::binary_search(t_mm.layers[l].begin(), t_mm.layers[l].end(), i))
                throw std::runtime_error("probe_pipeline: result intersects T_mm");
        }
    }
    return out;
}

void save_saliency_sheet(const SaliencySheet& sheet, const std::string& path) {
    nlohmann::json j;
    j["epsilon"] = sheet.epsilon;
    j["source"] = sheet.source;
    nlohmann::json layers = nlohmann::json::object();
    for (size_t l = 0; l < sheet.importance.size(); ++l)
        layers[std::to_string(l)] = {{"importance", sheet.importance[l]},
                                     {"saliency", sheet.saliency[l]}};
    j["layers"] = layers;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_saliency_sheet: cannot open " + path);
    out << j.dump(2) << "\n";
}

}  // namespace shield
