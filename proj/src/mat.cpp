#include "shield/mat.hpp"

#include <algorithm>
#include <cmath>

namespace shield {

bool Mat::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

static void check_mul(int ak, int bk, const char* what) {
    if (ak != bk) throw std::invalid_argument(std::string(what) + ": inner dims differ");
}

Mat matmul(const Mat& a, const Mat& b) {
    check_mul(a.cols, b.rows, "matmul");
    Mat c(a.rows, b.cols);
    addmul(c, a, b);
    return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    check_mul(a.cols, b.cols, "matmul_nt");
    Mat c(a.rows, b.rows);
    addmul_nt(c, a, b);
    return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
    check_mul(a.rows, b.rows, "matmul_tn");
    Mat c(a.cols, b.cols);
    addmul_tn(c, a, b);
    return c;
}

void addmul(Mat& acc, const Mat& a, const Mat& b) {
    // i-k-j order: streams b rows, accumulates in order per output row.
    const int n = b.cols;
    for (int i = 0; i < a.rows; ++i) {
        double* out = acc.row(i);
        const double* ar = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double av = ar[k];
            if (av == 0.0) continue;
            const double* br = b.row(k);
            for (int j = 0; j < n; ++j) out[j] += av * br[j];
        }
    }
}

void addmul_nt(Mat& acc, const Mat& a, const Mat& b) {
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* out = acc.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            out[j] += s;
        }
    }
}

void addmul_tn(Mat& acc, const Mat& a, const Mat& b) {
    const int n = b.cols;
    for (int k = 0; k < a.rows; ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* out = acc.row(i);
            for (int j = 0; j < n; ++j) out[j] += av * br[j];
        }
    }
}

std::vector<double> softmax_stable(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("empty logits");
    const double m = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double z = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        z += out[i];
    }
    for (double& x : out) x /= z;
    return out;
}

double cross_entropy(const std::vector<double>& logits, int target) {
    if (target < 0 || static_cast<size_t>(target) >= logits.size())
        throw std::invalid_argument("cross_entropy: target out of range");
    // log-sum-exp form avoids computing the full softmax vector.
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    return std::log(z) - (logits[target] - m);
}

}  // namespace shield
