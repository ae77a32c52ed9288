#pragma once

#include <string>
#include <vector>

#include "shield/corpus.hpp"
#include "shield/model.hpp"
#include "shield/neuron_set.hpp"

namespace shield {

// Per-layer importance and normalized saliency, exported for audit.
struct SaliencySheet {
    double epsilon = 1e-12;
    std::string source;
    std::vector<std::vector<double>> importance;  // per layer, d_m entries
    std::vector<std::vector<double>> saliency;
};

// Mean FFN activation per (layer, neuron) over every recorded position of
// every sample, accumulated in corpus order. Forward passes may fan out
// across workers; the reduction stays single-collector in fixed order.
std::vector<std::vector<double>> mean_activations(const TinyVlm& model, const Corpus& corpus);

// I_i = |a_bar_i| * ||column i of W_down||_2 per layer.
std::vector<std::vector<double>> importance(const std::vector<std::vector<double>>& a_bar,
                                            const TinyVlm& model);

// S_i = I_i / (sum_k I_k + epsilon) per layer.
std::vector<std::vector<double>> normalize(const std::vector<std::vector<double>>& imp,
                                           double epsilon = 1e-12);

// Indices of the k = floor(p * d_m) largest saliencies, ties to the lower
// index, returned sorted ascending.
std::vector<int> topk(const std::vector<double>& saliency, double p);

// Per-layer set difference T_safe \ T_mm. Both sides must share p and d_m.
SafetyNeuronSet isolate_safety(const SafetyNeuronSet& t_safe, const SafetyNeuronSet& t_mm);

// Builds the top-k candidate set for one corpus.
SafetyNeuronSet topk_set(const TinyVlm& model, const Corpus& corpus, double p);

SaliencySheet saliency_sheet(const TinyVlm& model, const Corpus& corpus,
                             double epsilon = 1e-12);

// Full probing stage: candidates on the safety corpus minus candidates on
// the benign corpus, with provenance recorded.
SafetyNeuronSet probe_pipeline(const TinyVlm& model, const Corpus& d_safe, const Corpus& d_mm,
                               double p);

void save_saliency_sheet(const SaliencySheet& sheet, const std::string& path);

}  // namespace shield
