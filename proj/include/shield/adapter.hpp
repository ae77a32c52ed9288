#pragma once

#include <string>
#include <vector>

#include "shield/mat.hpp"

namespace shield {

// Low-rank update on one FFN projection, row-masked to the layer's safety
// neurons: delta W = (M .* B) A. Rows of B outside mask_rows are zero at
// init and receive exactly-zero gradients, so they stay bitwise zero.
struct MaskedLoraAdapter {
    enum class Target { kUp, kGate };

    int layer = 0;
    Target target = Target::kUp;
    int r = 0;
    Mat A;                       // r x d
    Mat B;                       // d_m x r
    std::vector<int> mask_rows;  // sorted safety indices for this layer
    double scaling = 1.0;

    // Materialized d_m x r row mask.
    Mat mask_mat() const {
        Mat m(B.rows, B.cols);
        for (int i : mask_rows)
            for (int c = 0; c < m.cols; ++c) m.at(i, c) = 1.0;
        return m;
    }

    // (M .* B) A, scaled.
    Mat delta() const {
        Mat bm = B;
        const Mat m = mask_mat();
        for (size_t k = 0; k < bm.data.size(); ++k) bm.data[k] *= m.data[k];
        Mat d = matmul(bm, A);
        if (scaling != 1.0)
            for (double& v : d.data) v *= scaling;
        return d;
    }

    std::string target_name() const { return target == Target::kUp ? "up" : "gate"; }
};

using AdapterSet = std::vector<MaskedLoraAdapter>;

inline const MaskedLoraAdapter* find_adapter(const AdapterSet& set, int layer,
                                             MaskedLoraAdapter::Target t) {
    for (const auto& a : set)
        if (a.layer == layer && a.target == t) return &a;
    return nullptr;
}

}  // namespace shield
