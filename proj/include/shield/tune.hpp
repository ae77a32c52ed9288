#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shield/adapter.hpp"
#include "shield/corpus.hpp"
#include "shield/model.hpp"
#include "shield/neuron_set.hpp"

namespace shield {

struct TrainConfig {
    double lr = 1e-2;
    int epochs = 5;
    int batch_size = 8;
    double grad_clip = 1.0;
    int r = 4;
    uint64_t seed = 1;
    // Optional benign replay mixed into the safety batches; off by default
    // and excluded from the acceptance experiments.
    bool benign_replay = false;
    double replay_fraction = 0.25;
};

// d_m x r binary mask whose row i is all ones iff i is a safety index of
// the layer.
Mat build_mask(const SafetyNeuronSet& set, int layer, int d_m, int r);

// Two adapters (up, gate) per layer with a nonempty safety set. A is drawn
// from the seeded generator at scale 1/sqrt(r); B starts at zero so a fresh
// adapter set is an exact no-op.
AdapterSet attach_adapters(const TinyVlm& model, const SafetyNeuronSet& set, int r,
                           uint64_t seed);

// One gradient-descent step on the summed answer-token loss of a batch.
// B gradients arrive row-masked off the tape; the global-norm clip and the
// update preserve their exact zeros. Returns mean per-sample summed loss.
double train_step(const TinyVlm& model, AdapterSet& adapters,
                  const std::vector<const Sample*>& batch, const TrainConfig& cfg,
                  const Corpus* replay = nullptr, Rng* replay_rng = nullptr);

struct TuneResult {
    AdapterSet adapters;
    std::vector<double> losses;  // one entry per step
};

// Stage-2 loop: seeded shuffle each epoch, train_step per batch.
TuneResult tune(const TinyVlm& model, const Corpus& d_safe_train, const SafetyNeuronSet& set,
                const TrainConfig& cfg, const Corpus* replay = nullptr);

// W' = W0 + (M .* B) A folded into a copy of the model; the base model is
// untouched.
TinyVlm merge(const TinyVlm& model, const AdapterSet& adapters);

struct BudgetReport {
    long total_params = 0;
    long raw_trainable = 0;   // A entries + unmasked B entries
    long effective_delta = 0; // delta-W support: masked rows x d
    double raw_fraction = 0.0;
    double effective_fraction = 0.0;
    std::vector<int> rows_per_layer;
};

BudgetReport budget(const TinyVlm& model, const AdapterSet& adapters,
                    const SafetyNeuronSet& set);

// JSON checkpoint: [{layer, matrix, r, mask_rows, A, B}, ...]. The loader
// rejects files whose B carries nonzero rows outside the mask.
void save_adapters(const AdapterSet& adapters, const std::string& path);
AdapterSet load_adapters(const std::string& path);

}  // namespace shield
