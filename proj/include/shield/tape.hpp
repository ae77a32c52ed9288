#pragma once

#include <vector>

#include "shield/mat.hpp"

namespace shield {

// Reverse-mode gradient tape over a fixed op set (matmul variants, adds,
// SiLU, Hadamard, row softmax, RMS norm, gather, summed cross-entropy).
// Nodes are appended in forward order; backward() walks them once in
// reverse. External leaves reference matrices owned elsewhere, so the
// owners must outlive the tape.
class Tape {
  public:
    using NodeId = int;

    // Leaf over an external matrix (weights, inputs, constants).
    NodeId leaf(const Mat* value);
    // Leaf that owns its value (constants built on the fly).
    NodeId leaf_owned(Mat value);

    NodeId matmul(NodeId a, NodeId b);     // A * B
    NodeId matmul_nt(NodeId a, NodeId b);  // A * B^T
    NodeId add(NodeId a, NodeId b);        // same shape
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId add_row(NodeId a, NodeId row);  // broadcast 1xN row add
    NodeId mul_row(NodeId a, NodeId row);  // broadcast 1xN row Hadamard
    NodeId scale(NodeId a, double c);
    NodeId silu(NodeId a);
    NodeId hadamard(NodeId a, NodeId b);
    NodeId softmax_rows(NodeId a);
    // Per-row RMS normalization with learnable gain (1xN).
    NodeId rmsnorm_rows(NodeId a, NodeId gain, double eps = 1e-6);
    // Rows of a table selected by index (embedding lookup).
    NodeId gather_rows(NodeId table, std::vector<int> ids);
    // Sum over k of -log softmax(logits[row_k])[target_k]; returns a 1x1 node.
    NodeId ce_sum(NodeId logits, std::vector<int> rows, std::vector<int> targets);

    const Mat& value(NodeId n) const {
        const Node& nd = nodes_[n];
        return nd.external ? *nd.external : nd.owned;
    }
    // Zero until backward() has run.
    const Mat& grad(NodeId n) const { return nodes_[n].grad; }

    // Seeds d(loss)/d(loss)=1 and accumulates gradients for every node on a
    // path to the loss. Throws unless the loss node is 1x1.
    void backward(NodeId loss);

    size_t node_count() const { return nodes_.size(); }

  private:
    enum class Op {
        kLeaf, kMatMul, kMatMulNT, kAdd, kConcatRows, kAddRow, kMulRow, kScale,
        kSilu, kHadamard, kSoftmaxRows, kRmsNormRows, kGatherRows, kCeSum,
    };

    struct Node {
        Op op;
        int a = -1, b = -1;
        const Mat* external = nullptr;  // set only for external leaves
        Mat owned;
        Mat grad;
        double c = 0.0;            // scale factor / rmsnorm eps
        std::vector<int> ids;      // gather ids or ce rows
        std::vector<int> targets;  // ce targets
    };

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

}  // namespace shield
