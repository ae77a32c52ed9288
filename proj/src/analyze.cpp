#include "shield/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "shield/rng.hpp"

namespace shield {

Intervention apply_mask(const SafetyNeuronSet& set) {
    set.validate();
    Intervention iv;
    iv.mode = Intervention::Mode::kMask;
    iv.target = set;
    return iv;
}

Intervention apply_amplify(const SafetyNeuronSet& set, double alpha) {
    if (alpha <= 0.0) throw std::invalid_argument("apply_amplify: alpha must be positive");
    set.validate();
    Intervention iv;
    iv.mode = Intervention::Mode::kAmplify;
    iv.target = set;
    iv.alpha = alpha;
    return iv;
}

SafetyNeuronSet random_set_like(const SafetyNeuronSet& set, uint64_t seed) {
    Rng rng(seed);
    SafetyNeuronSet out;
    out.init(set.layer_count, set.d_m, set.p);
    out.provenance = {"random-like:" + set.provenance.safe_corpus, set.provenance.benign_corpus,
                      set.provenance.model_checksum};
    for (int l = 0; l < set.layer_count; ++l) {
        const auto& src = set.layers[l];
        std::vector<int> complement;
        for (int i = 0; i < set.d_m; ++i)
            if (!std::binary_search(src.begin(), src.end(), i)) complement.push_back(i);
        if (complement.size() < src.size())
            throw std::invalid_argument("random_set_like: complement smaller than source layer");
        // Partial Fisher-Yates draw of |src| distinct indices.
        for (size_t k = 0; k < src.size(); ++k) {
            const size_t j = k + size_t(rng.below(complement.size() - k));
            std::swap(complement[k], complement[j]);
        }
        out.layers[l].assign(complement.begin(), complement.begin() + long(src.size()));
        std::sort(out.layers[l].begin(), out.layers[l].end());
    }
    out.validate();
    return out;
}

std::pair<double, double> overlap(const SafetyNeuronSet& a, const SafetyNeuronSet& b) {
    if (a.d_m != b.d_m || a.layer_count != b.layer_count)
        throw std::invalid_argument("overlap: dimension mismatch");
    const auto fa = a.flatten();
    const auto fb = b.flatten();
    if (fa.empty() || fb.empty()) return {0.0, 0.0};
    size_t inter = 0;
    for (const auto& id : fa)
        if (std::binary_search(fb.begin(), fb.end(), id)) ++inter;
    const size_t uni = fa.size() + fb.size() - inter;
    return {double(inter) / double(uni), double(inter) / double(std::min(fa.size(), fb.size()))};
}

OverlapReport overlap_matrix(const std::vector<std::pair<std::string, SafetyNeuronSet>>& sets) {
    OverlapReport rep;
    const int n = static_cast<int>(sets.size());
    rep.jaccard = Mat(n, n);
    rep.simpson = Mat(n, n);
    for (const auto& [label, s] : sets) {
        rep.labels.push_back(label);
        rep.sizes.push_back(s.total());
    }
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            const auto [jac, simp] = overlap(sets[i].second, sets[j].second);
            rep.jaccard.at(i, j) = rep.jaccard.at(j, i) = jac;
            rep.simpson.at(i, j) = rep.simpson.at(j, i) = simp;
        }
    return rep;
}

LayerDistribution layer_distribution(
    const std::vector<std::pair<std::string, SafetyNeuronSet>>& by_language,
    const std::set<std::string>& hrl_tags) {
    int n_hrl = 0, n_nhrl = 0, layers = 0;
    for (const auto& [tag, s] : by_language) {
        (hrl_tags.count(tag) ? n_hrl : n_nhrl) += 1;
        layers = std::max(layers, s.layer_count);
    }
    if (n_hrl == 0 || n_nhrl == 0)
        throw std::invalid_argument("layer_distribution: need at least one HRL and one NHRL");

    LayerDistribution out;
    out.hrl.assign(size_t(layers), 0.0);
    out.nhrl.assign(size_t(layers), 0.0);
    for (const auto& [tag, s] : by_language) {
        auto& acc = hrl_tags.count(tag) ? out.hrl : out.nhrl;
        for (int l = 0; l < s.layer_count; ++l) acc[l] += double(s.layers[l].size());
    }
    for (auto& v : out.hrl) v /= n_hrl;
    for (auto& v : out.nhrl) v /= n_nhrl;

    out.delta.resize(size_t(layers));
    double mean = 0.0;
    for (int l = 0; l < layers; ++l) {
        out.delta[l] = out.hrl[l] - out.nhrl[l];
        mean += out.delta[l];
    }
    mean /= layers;
    double var = 0.0;
    for (double d : out.delta) var += (d - mean) * (d - mean);
    var /= layers;  // population variance
    if (mean != 0.0) {
        out.cv = 100.0 * std::sqrt(var) / std::abs(mean);
        out.cv_defined = true;
    }
    return out;
}

namespace {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = double(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

long factorial_capped(size_t n, long cap) {
    long f = 1;
    for (size_t i = 2; i <= n; ++i) {
        f *= long(i);
        if (f > cap) return cap + 1;
    }
    return f;
}

}  // namespace

CorrelationReport correlate(const std::vector<double>& counts, const std::vector<double>& asrs,
                            long permutations, uint64_t seed) {
    if (counts.size() != asrs.size() || counts.size() < 3)
        throw std::invalid_argument("correlate: need >= 3 pairs");
    auto variance_zero = [](const std::vector<double>& v) {
        for (double x : v)
            if (x != v[0]) return false;
        return true;
    };
    if (variance_zero(counts) || variance_zero(asrs))
        throw std::invalid_argument("degenerate correlation");

    CorrelationReport rep;
    rep.r = pearson(counts, asrs);
    const double r_abs = std::abs(rep.r);

    const long n_fact = factorial_capped(counts.size(), permutations);
    if (n_fact <= permutations) {
        // Exhaustive two-sided count over all pairings.
        std::vector<double> y = asrs;
        std::sort(y.begin(), y.end());
        long hits = 0, total = 0;
        do {
            ++total;
            if (std::abs(pearson(counts, y)) >= r_abs - 1e-12) ++hits;
        } while (std::next_permutation(y.begin(), y.end()));
        rep.p = double(hits) / double(total);
        rep.permutations = total;
        rep.exhaustive = true;
    } else {
        Rng rng(seed);
        std::vector<double> y = asrs;
        long hits = 0;
        for (long it = 0; it < permutations; ++it) {
            rng.shuffle(y);
            if (std::abs(pearson(counts, y)) >= r_abs - 1e-12) ++hits;
        }
        rep.p = double(hits + 1) / double(permutations + 1);
        rep.permutations = permutations;
        rep.exhaustive = false;
    }
    return rep;
}

TransferResult transfer_eval(const TinyVlm& model, const SafetyNeuronSet& set_from,
                             const Corpus& target_eval, const std::string& mode, double alpha,
                             const Corpus* source_train, const TrainConfig* tune_cfg) {
    TransferResult out;
    const EvalReport before = asr_eval(model, nullptr, nullptr, target_eval);
    out.before = before.overall;

    if (mode == "amplify") {
        if (set_from.empty()) {
            out.after = out.before;
        } else {
            const Intervention iv = apply_amplify(set_from, alpha);
            out.after = asr_eval(model, nullptr, &iv, target_eval).overall;
        }
    } else if (mode == "tune") {
        if (!source_train || !tune_cfg)
            throw std::invalid_argument("transfer_eval: tune mode needs source data and config");
        if (set_from.empty()) {
            out.after = out.before;
        } else {
            const TuneResult tr = tune(model, *source_train, set_from, *tune_cfg);
            out.after = asr_eval(model, &tr.adapters, nullptr, target_eval).overall;
        }
    } else {
        throw std::invalid_argument("transfer_eval: unknown mode " + mode);
    }

    if (out.before > 0.0) {
        out.relative_reduction = (out.before - out.after) / out.before;
        out.defined = true;
    }
    return out;
}

}  // namespace shield
