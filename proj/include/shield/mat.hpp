#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace shield {

// Dense row-major matrix of 64-bit floats. Row vectors are 1xN, column
// vectors Nx1. All kernels below are plain loops with a fixed
// left-to-right reduction order, so results are bit-reproducible.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Mat(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(r) * c)
            throw std::invalid_argument("Mat: data length != rows*cols");
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const;
    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

// c = a * b
Mat matmul(const Mat& a, const Mat& b);
// c = a * b^T
Mat matmul_nt(const Mat& a, const Mat& b);
// c = a^T * b
Mat matmul_tn(const Mat& a, const Mat& b);
// in-place: acc += a * b, etc. (acc must be pre-shaped)
void addmul(Mat& acc, const Mat& a, const Mat& b);
void addmul_nt(Mat& acc, const Mat& a, const Mat& b);
void addmul_tn(Mat& acc, const Mat& a, const Mat& b);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// x * sigmoid(x); smooth gate, finite for all finite x.
inline double silu(double x) { return x * sigmoid(x); }

// d/dx silu(x) = s(x) * (1 + x * (1 - s(x)))
inline double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

// Max-subtracted softmax. Throws on empty input.
std::vector<double> softmax_stable(const std::vector<double>& v);

// -log softmax(logits)[target]. Throws if target is out of range.
double cross_entropy(const std::vector<double>& logits, int target);

}  // namespace shield
