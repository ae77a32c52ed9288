#include "shield/neuron_set.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace shield {

void SafetyNeuronSet::validate() const {
    if (static_cast<int>(layers.size()) != layer_count)
        throw std::runtime_error("SafetyNeuronSet: layer list size != layer_count");
    for (const auto& l : layers) {
        for (size_t i = 0; i < l.size(); ++i) {
            if (l[i] < 0 || l[i] >= d_m)
                throw std::runtime_error("SafetyNeuronSet: index out of range");
            if (i > 0 && l[i] <= l[i - 1])
                throw std::runtime_error("SafetyNeuronSet: indices must be sorted and unique");
        }
    }
}

void save_neuron_set(const SafetyNeuronSet& s, const std::string& path) {
    s.validate();
    nlohmann::json j;
    j["p"] = s.p;
    j["d_m"] = s.d_m;
    j["provenance"] = {{"safe_corpus", s.provenance.safe_corpus},
                       {"benign_corpus", s.provenance.benign_corpus},
                       {"model_checksum", s.provenance.model_checksum}};
    nlohmann::json layers = nlohmann::json::object();
    for (int l = 0; l < s.layer_count; ++l) layers[std::to_string(l)] = s.layers[l];
    j["layers"] = layers;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_neuron_set: cannot open " + path);
    out << j.dump(2) << "\n";
}

SafetyNeuronSet load_neuron_set(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_neuron_set: cannot open " + path);
    nlohmann::json j;
    in >> j;
    SafetyNeuronSet s;
    s.p = j.at("p").get<double>();
    s.d_m = j.at("d_m").get<int>();
    const auto& layers = j.at("layers");
    int max_layer = -1;
    for (auto it = layers.begin(); it != layers.end(); ++it)
        max_layer = std::max(max_layer, std::stoi(it.key()));
    s.layer_count = max_layer + 1;
    s.layers.assign(static_cast<size_t>(s.layer_count), {});
    for (auto it = layers.begin(); it != layers.end(); ++it)
        s.layers[std::stoi(it.key())] = it.value().get<std::vector<int>>();
    if (j.contains("provenance")) {
        const auto& p = j.at("provenance");
        s.provenance.safe_corpus = p.value("safe_corpus", "");
        s.provenance.benign_corpus = p.value("benign_corpus", "");
        s.provenance.model_checksum = p.value("model_checksum", "");
    }
    s.validate();
    return s;
}

}  // namespace shield
