#include "shield/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace shield {

Tape::NodeId Tape::leaf(const Mat* value) {
    Node n;
    n.op = Op::kLeaf;
    n.external = value;
    return push(std::move(n));
}

Tape::NodeId Tape::leaf_owned(Mat value) {
    Node n;
    n.op = Op::kLeaf;
    n.owned = std::move(value);
    return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::kMatMul;
    n.a = a;
    n.b = b;
    n.owned = shield::matmul(value(a), value(b));
    return push(std::move(n));
}

Tape::NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    Node n;
    n.op = Op::kMatMulNT;
    n.a = a;
    n.b = b;
    n.owned = shield::matmul_nt(value(a), value(b));
    return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    const Mat& va = value(a);
    const Mat& vb = value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("Tape::add: shape mismatch");
    Node n;
    n.op = Op::kAdd;
    n.a = a;
    n.b = b;
    n.owned = va;
    for (size_t i = 0; i < n.owned.data.size(); ++i) n.owned.data[i] += vb.data[i];
    return push(std::move(n));
}

Tape::NodeId Tape::concat_rows(NodeId a, NodeId b) {
    const Mat& va = value(a);
    const Mat& vb = value(b);
    if (va.cols != vb.cols) throw std::invalid_argument("Tape::concat_rows: col mismatch");
    Node n;
    n.op = Op::kConcatRows;
    n.a = a;
    n.b = b;
    n.owned = Mat(va.rows + vb.rows, va.cols);
    std::copy(va.data.begin(), va.data.end(), n.owned.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), n.owned.data.begin() + va.data.size());
    return push(std::move(n));
}

Tape::NodeId Tape::add_row(NodeId a, NodeId row) {
    const Mat& va = value(a);
    const Mat& vr = value(row);
    if (vr.rows != 1 || vr.cols != va.cols)
        throw std::invalid_argument("Tape::add_row: row must be 1 x cols(a)");
    Node n;
    n.op = Op::kAddRow;
    n.a = a;
    n.b = row;
    n.owned = va;
    for (int r = 0; r < va.rows; ++r) {
        double* out = n.owned.row(r);
        for (int c = 0; c < va.cols; ++c) out[c] += vr.data[c];
    }
    return push(std::move(n));
}

Tape::NodeId Tape::mul_row(NodeId a, NodeId row) {
    const Mat& va = value(a);
    const Mat& vr = value(row);
    if (vr.rows != 1 || vr.cols != va.cols)
        throw std::invalid_argument("Tape::mul_row: row must be 1 x cols(a)");
    Node n;
    n.op = Op::kMulRow;
    n.a = a;
    n.b = row;
    n.owned = va;
    for (int r = 0; r < va.rows; ++r) {
        double* out = n.owned.row(r);
        for (int c = 0; c < va.cols; ++c) out[c] *= vr.data[c];
    }
    return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double c) {
    Node n;
    n.op = Op::kScale;
    n.a = a;
    n.c = c;
    n.owned = value(a);
    for (double& v : n.owned.data) v *= c;
    return push(std::move(n));
}

Tape::NodeId Tape::silu(NodeId a) {
    Node n;
    n.op = Op::kSilu;
    n.a = a;
    n.owned = value(a);
    for (double& v : n.owned.data) v = shield::silu(v);
    return push(std::move(n));
}

Tape::NodeId Tape::hadamard(NodeId a, NodeId b) {
    const Mat& va = value(a);
    const Mat& vb = value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("Tape::hadamard: shape mismatch");
    Node n;
    n.op = Op::kHadamard;
    n.a = a;
    n.b = b;
    n.owned = va;
    for (size_t i = 0; i < n.owned.data.size(); ++i) n.owned.data[i] *= vb.data[i];
    return push(std::move(n));
}

Tape::NodeId Tape::softmax_rows(NodeId a) {
    const Mat& va = value(a);
    if (va.cols == 0) throw std::invalid_argument("empty logits");
    Node n;
    n.op = Op::kSoftmaxRows;
    n.a = a;
    n.owned = Mat(va.rows, va.cols);
    for (int r = 0; r < va.rows; ++r) {
        const double* in = va.row(r);
        double m = in[0];
        for (int c = 1; c < va.cols; ++c) m = std::max(m, in[c]);
        double z = 0.0;
        double* out = n.owned.row(r);
        for (int c = 0; c < va.cols; ++c) {
            out[c] = std::exp(in[c] - m);
            z += out[c];
        }
        for (int c = 0; c < va.cols; ++c) out[c] /= z;
    }
    return push(std::move(n));
}

Tape::NodeId Tape::rmsnorm_rows(NodeId a, NodeId gain, double eps) {
    const Mat& va = value(a);
    const Mat& vg = value(gain);
    if (vg.rows != 1 || vg.cols != va.cols)
        throw std::invalid_argument("Tape::rmsnorm_rows: gain must be 1 x cols(a)");
    Node n;
    n.op = Op::kRmsNormRows;
    n.a = a;
    n.b = gain;
    n.c = eps;
    n.owned = Mat(va.rows, va.cols);
    for (int r = 0; r < va.rows; ++r) {
        const double* in = va.row(r);
        double ms = 0.0;
        for (int c = 0; c < va.cols; ++c) ms += in[c] * in[c];
        ms = ms / va.cols + eps;
        const double inv = 1.0 / std::sqrt(ms);
        double* out = n.owned.row(r);
        for (int c = 0; c < va.cols; ++c) out[c] = vg.data[c] * in[c] * inv;
    }
    return push(std::move(n));
}

Tape::NodeId Tape::gather_rows(NodeId table, std::vector<int> ids) {
    const Mat& tab = value(table);
    Node n;
    n.op = Op::kGatherRows;
    n.a = table;
    n.owned = Mat(static_cast<int>(ids.size()), tab.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tab.rows)
            throw std::invalid_argument("Tape::gather_rows: id out of range");
        std::copy(tab.row(ids[i]), tab.row(ids[i]) + tab.cols, n.owned.row(static_cast<int>(i)));
    }
    n.ids = std::move(ids);
    return push(std::move(n));
}

Tape::NodeId Tape::ce_sum(NodeId logits, std::vector<int> rows, std::vector<int> targets) {
    if (rows.size() != targets.size())
        throw std::invalid_argument("Tape::ce_sum: rows/targets length mismatch");
    if (rows.empty()) throw std::invalid_argument("Tape::ce_sum: empty answer span");
    const Mat& lg = value(logits);
    double loss = 0.0;
    for (size_t k = 0; k < rows.size(); ++k) {
        if (rows[k] < 0 || rows[k] >= lg.rows)
            throw std::invalid_argument("Tape::ce_sum: row out of range");
        if (targets[k] < 0 || targets[k] >= lg.cols)
            throw std::invalid_argument("Tape::ce_sum: target out of range");
        const double* in = lg.row(rows[k]);
        double m = in[0];
        for (int c = 1; c < lg.cols; ++c) m = std::max(m, in[c]);
        double z = 0.0;
        for (int c = 0; c < lg.cols; ++c) z += std::exp(in[c] - m);
        loss += std::log(z) - (in[targets[k]] - m);
    }
    Node n;
    n.op = Op::kCeSum;
    n.a = logits;
    n.ids = std::move(rows);
    n.targets = std::move(targets);
    n.owned = Mat(1, 1);
    n.owned.data[0] = loss;
    return push(std::move(n));
}

void Tape::backward(NodeId loss) {
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size()))
        throw std::invalid_argument("Tape::backward: bad node id");
    const Mat& lv = value(loss);
    if (lv.rows != 1 || lv.cols != 1)
        throw std::invalid_argument("Tape::backward: loss node must be scalar");

    for (auto& n : nodes_) {
        const Mat& v = n.external ? *n.external : n.owned;
        n.grad = Mat(v.rows, v.cols);
    }
    nodes_[loss].grad.data[0] = 1.0;

    for (NodeId i = loss; i >= 0; --i) {
        Node& n = nodes_[i];
        const Mat& g = n.grad;
        bool touched = false;
        for (double v : g.data)
            if (v != 0.0) { touched = true; break; }
        if (!touched) continue;

        switch (n.op) {
            case Op::kLeaf:
                break;
            case Op::kMatMul:
                addmul_nt(nodes_[n.a].grad, g, value(n.b));   // dA += G B^T
                addmul_tn(nodes_[n.b].grad, value(n.a), g);   // dB += A^T G
                break;
            case Op::kMatMulNT:
                addmul(nodes_[n.a].grad, g, value(n.b));      // dA += G B
                addmul_tn(nodes_[n.b].grad, g, value(n.a));   // dB += G^T A
                break;
            case Op::kAdd:
                for (size_t k = 0; k < g.data.size(); ++k) {
                    nodes_[n.a].grad.data[k] += g.data[k];
                    nodes_[n.b].grad.data[k] += g.data[k];
                }
                break;
            case Op::kConcatRows: {
                Mat& ga = nodes_[n.a].grad;
                Mat& gb = nodes_[n.b].grad;
                for (size_t k = 0; k < ga.data.size(); ++k) ga.data[k] += g.data[k];
                for (size_t k = 0; k < gb.data.size(); ++k)
                    gb.data[k] += g.data[ga.data.size() + k];
                break;
            }
            case Op::kAddRow: {
                Mat& ga = nodes_[n.a].grad;
                Mat& gr = nodes_[n.b].grad;
                for (int r = 0; r < g.rows; ++r) {
                    const double* gz = g.row(r);
                    double* out = ga.row(r);
                    for (int c = 0; c < g.cols; ++c) {
                        out[c] += gz[c];
                        gr.data[c] += gz[c];
                    }
                }
                break;
            }
            case Op::kMulRow: {
                Mat& ga = nodes_[n.a].grad;
                Mat& gr = nodes_[n.b].grad;
                const Mat& va = value(n.a);
                const Mat& vr = value(n.b);
                for (int r = 0; r < g.rows; ++r) {
                    const double* gz = g.row(r);
                    const double* av = va.row(r);
                    double* out = ga.row(r);
                    for (int c = 0; c < g.cols; ++c) {
                        out[c] += gz[c] * vr.data[c];
                        gr.data[c] += gz[c] * av[c];
                    }
                }
                break;
            }
            case Op::kScale:
                for (size_t k = 0; k < g.data.size(); ++k)
                    nodes_[n.a].grad.data[k] += n.c * g.data[k];
                break;
            case Op::kSilu: {
                const Mat& va = value(n.a);
                Mat& ga = nodes_[n.a].grad;
                for (size_t k = 0; k < g.data.size(); ++k)
                    ga.data[k] += g.data[k] * silu_grad(va.data[k]);
                break;
            }
            case Op::kHadamard: {
                const Mat& va = value(n.a);
                const Mat& vb = value(n.b);
                Mat& ga = nodes_[n.a].grad;
                Mat& gb = nodes_[n.b].grad;
                for (size_t k = 0; k < g.data.size(); ++k) {
                    ga.data[k] += g.data[k] * vb.data[k];
                    gb.data[k] += g.data[k] * va.data[k];
                }
                break;
            }
            case Op::kSoftmaxRows: {
                const Mat& y = n.owned;
                Mat& ga = nodes_[n.a].grad;
                for (int r = 0; r < y.rows; ++r) {
                    const double* yr = y.row(r);
                    const double* gr = g.row(r);
                    double dot = 0.0;
                    for (int c = 0; c < y.cols; ++c) dot += gr[c] * yr[c];
                    double* out = ga.row(r);
                    for (int c = 0; c < y.cols; ++c) out[c] += yr[c] * (gr[c] - dot);
                }
                break;
            }
            case Op::kRmsNormRows: {
                const Mat& va = value(n.a);
                const Mat& vg = value(n.b);
                Mat& ga = nodes_[n.a].grad;
                Mat& gg = nodes_[n.b].grad;
                const int cols = va.cols;
                for (int r = 0; r < va.rows; ++r) {
                    const double* x = va.row(r);
                    const double* gz = g.row(r);
                    double ms = 0.0;
                    for (int c = 0; c < cols; ++c) ms += x[c] * x[c];
                    ms = ms / cols + n.c;
                    const double inv = 1.0 / std::sqrt(ms);
                    double s = 0.0;
                    for (int c = 0; c < cols; ++c) s += gz[c] * vg.data[c] * x[c];
                    const double k3 = s * inv * inv * inv / cols;
                    double* out = ga.row(r);
                    for (int c = 0; c < cols; ++c) {
                        out[c] += vg.data[c] * gz[c] * inv - x[c] * k3;
                        gg.data[c] += gz[c] * x[c] * inv;
                    }
                }
                break;
            }
            case Op::kGatherRows: {
                Mat& gt = nodes_[n.a].grad;
                for (size_t k = 0; k < n.ids.size(); ++k) {
                    const double* gz = g.row(static_cast<int>(k));
                    double* out = gt.row(n.ids[k]);
                    for (int c = 0; c < g.cols; ++c) out[c] += gz[c];
                }
                break;
            }
            case Op::kCeSum: {
                const Mat& lg = value(n.a);
                Mat& gl = nodes_[n.a].grad;
                const double gd = g.data[0];
                for (size_t k = 0; k < n.ids.size(); ++k) {
                    const int r = n.ids[k];
                    const double* in = lg.row(r);
                    double m = in[0];
                    for (int c = 1; c < lg.cols; ++c) m = std::max(m, in[c]);
                    double z = 0.0;
                    for (int c = 0; c < lg.cols; ++c) z += std::exp(in[c] - m);
                    double* out = gl.row(r);
                    for (int c = 0; c < lg.cols; ++c)
                        out[c] += gd * std::exp(in[c] - m) / z;
                    out[n.targets[k]] -= gd;
                }
                break;
            }
        }
    }
}

}  // namespace shield
