#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "shield/corpus.hpp"
#include "shield/eval.hpp"
#include "shield/model.hpp"
#include "shield/neuron_set.hpp"
#include "shield/tune.hpp"

namespace shield {

// Training-free interventions consumed by the forward pass.
Intervention apply_mask(const SafetyNeuronSet& set);
Intervention apply_amplify(const SafetyNeuronSet& set, double alpha);

// Equal-size random control set, sampled per layer from the complement of
// the source set.
SafetyNeuronSet random_set_like(const SafetyNeuronSet& set, uint64_t seed);

// Jaccard and Szymkiewicz-Simpson overlap over the union of all
// (layer, index) pairs; both 0 when either set is empty.
std::pair<double, double> overlap(const SafetyNeuronSet& a, const SafetyNeuronSet& b);

struct OverlapReport {
    std::vector<std::string> labels;
    std::vector<size_t> sizes;
    Mat jaccard;
    Mat simpson;
};

OverlapReport overlap_matrix(const std::vector<std::pair<std::string, SafetyNeuronSet>>& sets);

struct LayerDistribution {
    std::vector<double> hrl;    // mean count per layer over HRL members
    std::vector<double> nhrl;
    std::vector<double> delta;  // hrl - nhrl
    double cv = 0.0;            // 100 * population std(delta) / |mean(delta)|
    bool cv_defined = false;
};

LayerDistribution layer_distribution(
    const std::vector<std::pair<std::string, SafetyNeuronSet>>& by_language,
    const std::set<std::string>& hrl_tags);

struct CorrelationReport {
    double r = 0.0;
    double p = 1.0;
    long permutations = 0;
    bool exhaustive = false;
};

// Pearson r in closed form plus a seeded two-sided permutation test on the
// pairing; enumerates all n! pairings when that is cheaper than sampling.
CorrelationReport correlate(const std::vector<double>& counts, const std::vector<double>& asrs,
                            long permutations = 10000, uint64_t seed = 1);

struct TransferResult {
    double before = 0.0;
    double after = 0.0;
    double relative_reduction = 0.0;  // (before - after) / before
    bool defined = false;             // false when before == 0
};

// Zero-transfer evaluation: a set probed elsewhere is applied to the
// target corpus, either training-free (amplify) or by re-tuning adapters
// on the source training corpus.
TransferResult transfer_eval(const TinyVlm& model, const SafetyNeuronSet& set_from,
                             const Corpus& target_eval, const std::string& mode, double alpha,
                             const Corpus* source_train = nullptr,
                             const TrainConfig* tune_cfg = nullptr);

}  // namespace shield
