#include "shield/tune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "shield/parallel.hpp"

namespace shield {

Mat build_mask(const SafetyNeuronSet& set, int layer, int d_m, int r) {
    if (layer < 0 || layer >= set.layer_count)
        throw std::invalid_argument("build_mask: layer out of range");
    Mat m(d_m, r);
    for (int i : set.layers[layer]) {
        if (i < 0 || i >= d_m) throw std::invalid_argument("build_mask: index >= d_m");
        for (int c = 0; c < r; ++c) m.at(i, c) = 1.0;
    }
    return m;
}

AdapterSet attach_adapters(const TinyVlm& model, const SafetyNeuronSet& set, int r,
                           uint64_t seed) {
    if (set.d_m != model.cfg.d_m || set.layer_count != model.cfg.L)
        throw std::invalid_argument("attach_adapters: set does not match model dims");
    if (set.empty()) throw std::invalid_argument("nothing to tune");

    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(double(r));
    AdapterSet adapters;
    for (int l = 0; l < model.cfg.L; ++l) {
        if (set.layers[l].empty()) continue;
        for (auto tgt : {MaskedLoraAdapter::Target::kUp, MaskedLoraAdapter::Target::kGate}) {
            MaskedLoraAdapter ad;
            ad.layer = l;
            ad.target = tgt;
            ad.r = r;
            ad.A = Mat(r, model.cfg.d);
            for (double& v : ad.A.data) v = rng.uniform_sym(scale);
            ad.B = Mat(model.cfg.d_m, r);  // zero: fresh adapters are a no-op
            ad.mask_rows = set.layers[l];
            adapters.push_back(std::move(ad));
        }
    }
    return adapters;
}

namespace {

struct SampleGrads {
    double loss = 0.0;
    std::vector<Mat> a_grads, b_grads;  // parallel to the adapter set
};

SampleGrads sample_backward(const TinyVlm& model, const AdapterSet& adapters,
                            const Sample& sample) {
    ForwardOptions opt;
    opt.adapters = &adapters;
    opt.with_answer = true;
    Forward fwd = run_forward(model, sample, opt);
    const auto loss = answer_loss_node(fwd, sample);
    fwd.tape.backward(loss);

    SampleGrads out;
    out.loss = fwd.tape.value(loss).data[0];
    out.a_grads.resize(adapters.size());
    out.b_grads.resize(adapters.size());
    for (const auto& an : fwd.adapter_nodes) {
        out.a_grads[an.index] = fwd.tape.grad(an.a);
        out.b_grads[an.index] = fwd.tape.grad(an.b);
    }
    return out;
}

}  // namespace

double train_step(const TinyVlm& model, AdapterSet& adapters,
                  const std::vector<const Sample*>& batch, const TrainConfig& cfg,
                  const Corpus* replay, Rng* replay_rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");

    std::vector<const Sample*> samples = batch;
    if (cfg.benign_replay && replay && !replay->empty() && replay_rng) {
        const int extra = std::max(1, int(std::lround(batch.size() * cfg.replay_fraction)));
        for (int i = 0; i < extra; ++i)
            samples.push_back(&replay->samples[replay_rng->below(replay->size())]);
    }

    auto grads = parallel_map<SampleGrads>(
        samples.size(), [&](size_t i) { return sample_backward(model, adapters, *samples[i]); });

    // Ordered reduction keeps the step bit-reproducible under any fan-out.
    double loss_sum = 0.0;
    std::vector<Mat> ga(adapters.size()), gb(adapters.size());
    for (size_t k = 0; k < adapters.size(); ++k) {
        ga[k] = Mat(adapters[k].A.rows, adapters[k].A.cols);
        gb[k] = Mat(adapters[k].B.rows, adapters[k].B.cols);
    }
    for (const auto& g : grads) {
        loss_sum += g.loss;
        for (size_t k = 0; k < adapters.size(); ++k) {
            for (size_t i = 0; i < ga[k].data.size(); ++i) ga[k].data[i] += g.a_grads[k].data[i];
            for (size_t i = 0; i < gb[k].data.size(); ++i) gb[k].data[i] += g.b_grads[k].data[i];
        }
    }
    if (!std::isfinite(loss_sum)) throw std::runtime_error("diverged");

    double sq = 0.0;
    for (size_t k = 0; k < adapters.size(); ++k) {
        for (double v : ga[k].data) sq += v * v;
        for (double v : gb[k].data) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    const double scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    for (size_t k = 0; k < adapters.size(); ++k) {
        for (size_t i = 0; i < ga[k].data.size(); ++i)
            adapters[k].A.data[i] -= cfg.lr * scale * ga[k].data[i];
        for (size_t i = 0; i < gb[k].data.size(); ++i)
            adapters[k].B.data[i] -= cfg.lr * scale * gb[k].data[i];
    }
    return loss_sum / double(samples.size());
}

TuneResult tune(const TinyVlm& model, const Corpus& d_safe_train, const SafetyNeuronSet& set,
                const TrainConfig& cfg, const Corpus* replay) {
    if (d_safe_train.empty()) throw std::invalid_argument("tune: empty training corpus");
    TuneResult result;
    result.adapters = attach_adapters(model, set, cfg.r, cfg.seed);

    Rng rng(cfg.seed ^ 0x5eedf00dULL);
    Rng replay_rng = rng.fork(1);
    std::vector<size_t> order(d_safe_train.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
            std::vector<const Sample*> batch;
            for (size_t i = start; i < std::min(order.size(), start + size_t(cfg.batch_size)); ++i)
                batch.push_back(&d_safe_train.samples[order[i]]);
            result.losses.push_back(
                train_step(model, result.adapters, batch, cfg, replay, &replay_rng));
        }
    }
    return result;
}

TinyVlm merge(const TinyVlm& model, const AdapterSet& adapters) {
    TinyVlm merged = model;
    for (const auto& ad : adapters) {
        if (ad.layer < 0 || ad.layer >= merged.cfg.L)
            throw std::invalid_argument("merge: adapter layer out of range");
        Mat& w = ad.target == MaskedLoraAdapter::Target::kUp ? merged.layers[ad.layer].w_up
                                                             : merged.layers[ad.layer].w_gate;
        const Mat delta = ad.delta();
        if (!delta.same_shape(w)) throw std::invalid_argument("merge: shape mismatch");
        for (size_t i = 0; i < w.data.size(); ++i) w.data[i] += delta.data[i];
    }
    return merged;
}

BudgetReport budget(const TinyVlm& model, const AdapterSet& adapters,
                    const SafetyNeuronSet& set) {
    BudgetReport rep;
    rep.total_params = model.cfg.param_count();
    for (const auto& ad : adapters) {
        rep.raw_trainable += long(ad.A.data.size()) + long(ad.mask_rows.size()) * ad.r;
        rep.effective_delta += long(ad.mask_rows.size()) * model.cfg.d;
    }
    rep.raw_fraction = double(rep.raw_trainable) / double(rep.total_params);
    rep.effective_fraction = double(rep.effective_delta) / double(rep.total_params);
    rep.rows_per_layer.assign(size_t(set.layer_count), 0);
    for (int l = 0; l < set.layer_count; ++l)
        rep.rows_per_layer[l] = int(set.layers[l].size());
    return rep;
}

void save_adapters(const AdapterSet& adapters, const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& ad : adapters) {
        nlohmann::json j;
        j["layer"] = ad.layer;
        j["matrix"] = ad.target_name();
        j["r"] = ad.r;
        j["mask_rows"] = ad.mask_rows;
        nlohmann::json a_rows = nlohmann::json::array();
        for (int r = 0; r < ad.A.rows; ++r)
            a_rows.push_back(std::vector<double>(ad.A.row(r), ad.A.row(r) + ad.A.cols));
        nlohmann::json b_rows = nlohmann::json::array();
        for (int r = 0; r < ad.B.rows; ++r)
            b_rows.push_back(std::vector<double>(ad.B.row(r), ad.B.row(r) + ad.B.cols));
        j["A"] = a_rows;
        j["B"] = b_rows;
        arr.push_back(std::move(j));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_adapters: cannot open " + path);
    out << arr.dump(2) << "\n";
}

AdapterSet load_adapters(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_adapters: cannot open " + path);
    nlohmann::json arr;
    in >> arr;
    AdapterSet adapters;
    for (const auto& j : arr) {
        MaskedLoraAdapter ad;
        ad.layer = j.at("layer").get<int>();
        const std::string matrix = j.at("matrix").get<std::string>();
        if (matrix == "up")
            ad.target = MaskedLoraAdapter::Target::kUp;
        else if (matrix == "gate")
            ad.target = MaskedLoraAdapter::Target::kGate;
        else
            throw std::runtime_error("load_adapters: bad matrix tag " + matrix);
        ad.r = j.at("r").get<int>();
        ad.mask_rows = j.at("mask_rows").get<std::vector<int>>();
        const auto a_rows = j.at("A").get<std::vector<std::vector<double>>>();
        const auto b_rows = j.at("B").get<std::vector<std::vector<double>>>();
        ad.A = Mat(int(a_rows.size()), int(a_rows.empty() ? 0 : a_rows[0].size()));
        for (int r = 0; r < ad.A.rows; ++r)
            std::copy(a_rows[r].begin(), a_rows[r].end(), ad.A.row(r));
        ad.B = Mat(int(b_rows.size()), int(b_rows.empty() ? 0 : b_rows[0].size()));
        for (int r = 0; r < ad.B.rows; ++r)
            std::copy(b_rows[r].begin(), b_rows[r].end(), ad.B.row(r));

        // Row-support invariant: no mass outside the masked rows.
        for (int r = 0; r < ad.B.rows; ++r) {
            if (std::binary_search(ad.mask_rows.begin(), ad.mask_rows.end(), r)) continue;
            for (int c = 0; c < ad.B.cols; ++c)
                if (ad.B.at(r, c) != 0.0)
                    throw std::runtime_error(
                        "load_adapters: nonzero B row outside mask in " + path);
        }
        adapters.push_back(std::move(ad));
    }
    return adapters;
}

}  // namespace shield
