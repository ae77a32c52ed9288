#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shield/adapter.hpp"
#include "shield/corpus.hpp"
#include "shield/mat.hpp"
#include "shield/neuron_set.hpp"
#include "shield/tape.hpp"

namespace shield {

struct ModelConfig {
    int L = 6;
    int d = 32;
    int d_m = 64;
    int vocab = 128;
    int heads = 2;
    int max_seq = 48;
    uint64_t seed = 7;

    void validate() const;
    long param_count() const;
};

// One pre-norm decoder block: causal attention (per-head projections) and
// a gated FFN. Attention exists so gradients flow end to end; only the
// FFN intermediate is ever probed or adapted.
struct LayerWeights {
    Mat norm1;  // 1 x d gain
    std::vector<Mat> wq, wk, wv;  // per head, dh x d
    std::vector<Mat> wo;          // per head, dh x d
    Mat norm2;                    // 1 x d gain
    Mat w_gate, w_up;             // d_m x d
    Mat b_gate, b_up;             // 1 x d_m
    Mat w_down;                   // d x d_m
};

struct TinyVlm {
    ModelConfig cfg;
    Mat tok_emb;  // vocab x d
    Mat pos_emb;  // max_seq x d
    std::vector<LayerWeights> layers;
    Mat final_norm;  // 1 x d gain
    Mat lm_head;     // vocab x d

    // Visits every weight matrix in the fixed checkpoint order.
    template <typename F>
    void for_each_weight(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            auto& lw = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "norm1", lw.norm1);
            for (int h = 0; h < cfg.heads; ++h) {
                const std::string hp = p + "h" + std::to_string(h) + ".";
                f(hp + "wq", lw.wq[h]);
                f(hp + "wk", lw.wk[h]);
                f(hp + "wv", lw.wv[h]);
                f(hp + "wo", lw.wo[h]);
            }
            f(p + "norm2", lw.norm2);
            f(p + "w_gate", lw.w_gate);
            f(p + "w_up", lw.w_up);
            f(p + "b_gate", lw.b_gate);
            f(p + "b_up", lw.b_up);
            f(p + "w_down", lw.w_down);
        }
        f("final_norm", final_norm);
        f("lm_head", lm_head);
    }
    template <typename F>
    void for_each_weight(F&& f) const {
        const_cast<TinyVlm*>(this)->for_each_weight(
            [&](const std::string& name, Mat& m) { f(name, const_cast<const Mat&>(m)); });
    }

    std::string checksum() const;  // sha256 over all weight bytes in order
};

// Deterministic init: matrices uniform in +-1/sqrt(d) from the seeded
// generator, biases zero, norm gains one. Identical seed, identical model.
TinyVlm init_model(const ModelConfig& cfg);

// Inference-time edit of the FFN intermediate h, applied before the
// down-projection at every position of every targeted layer.
struct Intervention {
    enum class Mode { kNone, kMask, kAmplify };
    Mode mode = Mode::kNone;
    SafetyNeuronSet target;
    double alpha = 2.0;

    // 1 x d_m multiplier row for a layer (all ones when not targeted).
    Mat row_for_layer(int layer, int d_m) const;
};

struct ActivationTrace {
    std::vector<Mat> h;  // per layer: positions x d_m
    std::vector<std::vector<double>> mean;  // per layer: d_m
    long counted = 0;  // total recorded positions

    void accumulate_means();  // fills mean/counted from h
};

struct ForwardOptions {
    const AdapterSet* adapters = nullptr;
    const Intervention* intervention = nullptr;
    bool record = false;
    bool with_answer = false;  // teacher-forced: tokens = prompt + answer
};

// A forward pass keeps its tape so callers can attach a loss and run
// backward. The model, adapters and sample must outlive this object.
struct Forward {
    Tape tape;
    Tape::NodeId logits = -1;
    std::vector<Tape::NodeId> ffn_h;  // per layer, post-intervention h node
    // Leaf handles for adapter matrices; index refers into the AdapterSet.
    struct AdapterNodes {
        int index;
        Tape::NodeId a, b;
    };
    std::vector<AdapterNodes> adapter_nodes;
    // Every base-weight leaf, for full-parameter training.
    std::vector<std::pair<const Mat*, Tape::NodeId>> weight_leaves;
    int seq_len = 0;
    int n_vis = 0;
    int n_prompt = 0;

    ActivationTrace trace(const ModelConfig& cfg) const;
    // Gradient of the given base weight after backward(); zero if unused.
    const Mat* grad_for(const Mat* weight) const;
};

Forward run_forward(const TinyVlm& model, const Sample& sample, const ForwardOptions& opt);

// Appends the answer-token cross-entropy (summed form) to fwd's tape.
// Requires opt.with_answer at forward time and a nonempty answer span.
Tape::NodeId answer_loss_node(Forward& fwd, const Sample& sample);

struct AnswerLoss {
    double sum = 0.0;
    double mean = 0.0;
    int tokens = 0;
};

// Teacher-forced answer loss; summed form drives optimization, mean is
// for logging.
AnswerLoss loss_answer_tokens(const TinyVlm& model, const Sample& sample,
                              const AdapterSet* adapters);

// Greedy decoding; stops at EOS or max_new tokens. Ties break to the
// lowest token id.
std::vector<int> generate_greedy(const TinyVlm& model, const Sample& sample,
                                 const AdapterSet* adapters, const Intervention* intervention,
                                 int max_new = 16);

// Single-position gated FFN evaluation (h and y for one input vector).
struct FfnOut {
    std::vector<double> h;
    std::vector<double> y;
};
FfnOut ffn_forward(const TinyVlm& model, const std::vector<double>& x, int layer,
                   const Intervention* intervention);

// Binary checkpoint: "TVLM" magic, version, config as little-endian 32-bit
// ints, seed as 64-bit, then every weight matrix as little-endian doubles
// in for_each_weight order. Round-trips bit-exactly.
void save_model(const TinyVlm& model, const std::string& path);
TinyVlm load_model(const std::string& path);

}  // namespace shield
