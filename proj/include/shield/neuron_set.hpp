#pragma once

#include <map>
#include <string>
#include <vector>

namespace shield {

// (layer, neuron index) coordinate into the FFN intermediate space.
struct NeuronId {
    int layer = 0;
    int index = 0;
    friend bool operator<(const NeuronId& a, const NeuronId& b) {
        return a.layer != b.layer ? a.layer < b.layer : a.index < b.index;
    }
    friend bool operator==(const NeuronId& a, const NeuronId& b) {
        return a.layer == b.layer && a.index == b.index;
    }
};

// Per-layer sets of safety-critical neuron indices, with the probing
// provenance that produced them. Indices are kept sorted and duplicate-free.
struct SafetyNeuronSet {
    double p = 0.0;  // intervention ratio used for top-k selection
    int d_m = 0;
    int layer_count = 0;
    std::vector<std::vector<int>> layers;  // layers[l] = sorted ascending indices
    struct Provenance {
        std::string safe_corpus;
        std::string benign_corpus;
        std::string model_checksum;
    } provenance;

    void init(int L, int dm, double ratio) {
        layer_count = L;
        d_m = dm;
        p = ratio;
        layers.assign(static_cast<size_t>(L), {});
    }

    size_t total() const {
        size_t n = 0;
        for (const auto& l : layers) n += l.size();
        return n;
    }

    bool empty() const { return total() == 0; }

    std::vector<NeuronId> flatten() const {
        std::vector<NeuronId> out;
        for (int l = 0; l < layer_count; ++l)
            for (int i : layers[l]) out.push_back({l, i});
        return out;
    }

    // Throws if indices are out of range, unsorted or duplicated.
    void validate() const;
};

void save_neuron_set(const SafetyNeuronSet& s, const std::string& path);
SafetyNeuronSet load_neuron_set(const std::string& path);

}  // namespace shield
