#include "shield/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "shield/hash.hpp"
#include "shield/rng.hpp"

namespace shield {

void ModelConfig::validate() const {
    if (L <= 0 || d <= 0 || d_m <= 0 || vocab <= 0 || heads <= 0 || max_seq <= 0)
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (d % heads != 0) throw std::invalid_argument("ModelConfig: d must be divisible by heads");
    if (d_m < d) throw std::invalid_argument("ModelConfig: d_m must be >= d");
    if (vocab < 3) throw std::invalid_argument("ModelConfig: vocab must reserve PAD/EOS/REFUSE");
}

long ModelConfig::param_count() const {
    const long dh = d / heads;
    const long per_layer = d                   // norm1
                           + heads * 4 * dh * d  // wq wk wv wo
                           + d                   // norm2
                           + 2L * d_m * d        // w_gate w_up
                           + 2L * d_m            // b_gate b_up
                           + long(d) * d_m;      // w_down
    return long(vocab) * d + long(max_seq) * d + L * per_layer + d + long(vocab) * d;
}

std::string TinyVlm::checksum() const {
    Sha256 h;
    for_each_weight([&](const std::string&, const Mat& m) {
        h.update(m.data.data(), m.data.size() * sizeof(double));
    });
    return h.hex_digest();
}

TinyVlm init_model(const ModelConfig& cfg) {
    cfg.validate();
    TinyVlm m;
    m.cfg = cfg;
    const int dh = cfg.d / cfg.heads;

    m.tok_emb = Mat(cfg.vocab, cfg.d);
    m.pos_emb = Mat(cfg.max_seq, cfg.d);
    m.layers.resize(cfg.L);
    for (auto& lw : m.layers) {
        lw.norm1 = Mat(1, cfg.d);
        lw.norm2 = Mat(1, cfg.d);
        lw.norm1.fill(1.0);
        lw.norm2.fill(1.0);
        lw.wq.assign(cfg.heads, Mat(dh, cfg.d));
        lw.wk.assign(cfg.heads, Mat(dh, cfg.d));
        lw.wv.assign(cfg.heads, Mat(dh, cfg.d));
        lw.wo.assign(cfg.heads, Mat(dh, cfg.d));
        lw.w_gate = Mat(cfg.d_m, cfg.d);
        lw.w_up = Mat(cfg.d_m, cfg.d);
        lw.b_gate = Mat(1, cfg.d_m);
        lw.b_up = Mat(1, cfg.d_m);
        lw.w_down = Mat(cfg.d, cfg.d_m);
    }
    m.final_norm = Mat(1, cfg.d);
    m.final_norm.fill(1.0);
    m.lm_head = Mat(cfg.vocab, cfg.d);

    // Draws happen in checkpoint order; norm gains and biases stay at
    // their constant init and consume no randomness.
    Rng rng(cfg.seed);
    const double scale = 1.0 / std::sqrt(double(cfg.d));
    m.for_each_weight([&](const std::string& name, Mat& w) {
        if (name.find("norm") != std::string::npos) return;
        if (name.find(".b_") != std::string::npos) return;
        for (double& v : w.data) v = rng.uniform_sym(scale);
    });
    return m;
}

Mat Intervention::row_for_layer(int layer, int d_m) const {
    Mat row(1, d_m);
    row.fill(1.0);
    if (mode == Mode::kNone) return row;
    if (layer < target.layer_count)
        for (int i : target.layers[layer]) {
            if (i < 0 || i >= d_m) throw std::invalid_argument("Intervention: index out of range");
            row.data[i] = mode == Mode::kMask ? 0.0 : alpha;
        }
    return row;
}

void ActivationTrace::accumulate_means() {
    mean.assign(h.size(), {});
    counted = h.empty() ? 0 : h[0].rows;
    for (size_t l = 0; l < h.size(); ++l) {
        mean[l].assign(h[l].cols, 0.0);
        for (int t = 0; t < h[l].rows; ++t) {
            const double* row = h[l].row(t);
            for (int c = 0; c < h[l].cols; ++c) mean[l][c] += row[c];
        }
        if (h[l].rows > 0)
            for (double& v : mean[l]) v /= h[l].rows;
    }
}

ActivationTrace Forward::trace(const ModelConfig& cfg) const {
    ActivationTrace tr;
    tr.h.reserve(ffn_h.size());
    for (auto node : ffn_h) tr.h.push_back(tape.value(node));
    (void)cfg;
    tr.accumulate_means();
    return tr;
}

const Mat* Forward::grad_for(const Mat* weight) const {
    for (const auto& [mat, node] : weight_leaves)
        if (mat == weight) return &tape.grad(node);
    return nullptr;
}

Forward run_forward(const TinyVlm& model, const Sample& sample, const ForwardOptions& opt) {
    const ModelConfig& cfg = model.cfg;
    const int n_vis = static_cast<int>(sample.vis.size());
    std::vector<int> tokens = sample.prompt_ids;
    if (opt.with_answer)
        tokens.insert(tokens.end(), sample.answer_ids.begin(), sample.answer_ids.end());
    const int T = n_vis + static_cast<int>(tokens.size());
    if (T > cfg.max_seq)
        throw std::invalid_argument("run_forward: sequence length " + std::to_string(T) +
                                    " exceeds max_seq " + std::to_string(cfg.max_seq));
    if (tokens.empty()) throw std::invalid_argument("run_forward: empty token sequence");
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab)
            throw std::invalid_argument("run_forward: token id out of vocab");
    for (const auto& v : sample.vis)
        if (static_cast<int>(v.size()) != cfg.d)
            throw std::invalid_argument("run_forward: vis vector dim != d");

    Forward fwd;
    fwd.seq_len = T;
    fwd.n_vis = n_vis;
    fwd.n_prompt = static_cast<int>(sample.prompt_ids.size());
    Tape& tp = fwd.tape;
    auto wleaf = [&](const Mat* m) {
        const auto id = tp.leaf(m);
        fwd.weight_leaves.emplace_back(m, id);
        return id;
    };

    const auto tok_x = tp.gather_rows(wleaf(&model.tok_emb), tokens);
    Tape::NodeId x;
    if (n_vis > 0) {
        Mat vis_mat(n_vis, cfg.d);
        for (int i = 0; i < n_vis; ++i)
            std::copy(sample.vis[i].begin(), sample.vis[i].end(), vis_mat.row(i));
        x = tp.concat_rows(tp.leaf_owned(std::move(vis_mat)), tok_x);
    } else {
        x = tok_x;
    }
    std::vector<int> pos_ids(T);
    for (int t = 0; t < T; ++t) pos_ids[t] = t;
    x = tp.add(x, tp.gather_rows(wleaf(&model.pos_emb), pos_ids));

    // Additive causal mask; exp(-1e30 - max) underflows to exactly zero.
    Mat causal(T, T);
    for (int t = 0; t < T; ++t)
        for (int s = t + 1; s < T; ++s) causal.at(t, s) = -1e30;
    const auto mask_node = tp.leaf_owned(std::move(causal));

    const int dh = cfg.d / cfg.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    for (int l = 0; l < cfg.L; ++l) {
        const LayerWeights& lw = model.layers[l];

        const auto xn = tp.rmsnorm_rows(x, wleaf(&lw.norm1));
        Tape::NodeId attn = -1;
        for (int h = 0; h < cfg.heads; ++h) {
            const auto q = tp.matmul_nt(xn, wleaf(&lw.wq[h]));
            const auto k = tp.matmul_nt(xn, wleaf(&lw.wk[h]));
            const auto v = tp.matmul_nt(xn, wleaf(&lw.wv[h]));
            auto scores = tp.scale(tp.matmul_nt(q, k), inv_sqrt_dh);
            scores = tp.add(scores, mask_node);
            const auto probs = tp.softmax_rows(scores);
            const auto o = tp.matmul(probs, v);
            const auto head_out = tp.matmul(o, wleaf(&lw.wo[h]));
            attn = attn < 0 ? head_out : tp.add(attn, head_out);
        }
        x = tp.add(x, attn);

        const auto xf = tp.rmsnorm_rows(x, wleaf(&lw.norm2));

        // W_eff = W0 + (M .* B) A when an adapter targets this projection.
        auto projection = [&](const Mat* w0, MaskedLoraAdapter::Target tgt) {
            auto w_node = wleaf(w0);
            if (!opt.adapters) return w_node;
            const MaskedLoraAdapter* ad = find_adapter(*opt.adapters, l, tgt);
            if (!ad) return w_node;
            const auto a_node = tp.leaf(&ad->A);
            const auto b_node = tp.leaf(&ad->B);
            fwd.adapter_nodes.push_back(
                {int(ad - opt.adapters->data()), a_node, b_node});
            const auto bm = tp.hadamard(b_node, tp.leaf_owned(ad->mask_mat()));
            auto delta = tp.matmul(bm, a_node);
            if (ad->scaling != 1.0) delta = tp.scale(delta, ad->scaling);
            return tp.add(w_node, delta);
        };
        const auto w_gate_eff = projection(&lw.w_gate, MaskedLoraAdapter::Target::kGate);
        const auto w_up_eff = projection(&lw.w_up, MaskedLoraAdapter::Target::kUp);

        const auto gate_pre = tp.add_row(tp.matmul_nt(xf, w_gate_eff), wleaf(&lw.b_gate));
        const auto up_pre = tp.add_row(tp.matmul_nt(xf, w_up_eff), wleaf(&lw.b_up));
        auto h_node = tp.hadamard(tp.silu(gate_pre), up_pre);
        if (opt.intervention && opt.intervention->mode != Intervention::Mode::kNone)
            h_node = tp.mul_row(h_node, tp.leaf_owned(opt.intervention->row_for_layer(l, cfg.d_m)));
        fwd.ffn_h.push_back(h_node);
        x = tp.add(x, tp.matmul_nt(h_node, wleaf(&lw.w_down)));
    }

    const auto xf = tp.rmsnorm_rows(x, wleaf(&model.final_norm));
    fwd.logits = tp.matmul_nt(xf, wleaf(&model.lm_head));
    return fwd;
}

Tape::NodeId answer_loss_node(Forward& fwd, const Sample& sample) {
    if (sample.answer_ids.empty())
        throw std::invalid_argument("answer_loss_node: empty answer span");
    const int base = fwd.n_vis + fwd.n_prompt;
    if (base + static_cast<int>(sample.answer_ids.size()) != fwd.seq_len)
        throw std::invalid_argument("answer_loss_node: forward was not teacher-forced");
    std::vector<int> rows(sample.answer_ids.size());
    for (size_t k = 0; k < sample.answer_ids.size(); ++k)
        rows[k] = base - 1 + static_cast<int>(k);
    return fwd.tape.ce_sum(fwd.logits, std::move(rows), sample.answer_ids);
}

AnswerLoss loss_answer_tokens(const TinyVlm& model, const Sample& sample,
                              const AdapterSet* adapters) {
    ForwardOptions opt;
    opt.adapters = adapters;
    opt.with_answer = true;
    Forward fwd = run_forward(model, sample, opt);
    const auto loss = answer_loss_node(fwd, sample);
    AnswerLoss out;
    out.sum = fwd.tape.value(loss).data[0];
    out.tokens = static_cast<int>(sample.answer_ids.size());
    out.mean = out.sum / out.tokens;
    return out;
}

std::vector<int> generate_greedy(const TinyVlm& model, const Sample& sample,
                                 const AdapterSet* adapters, const Intervention* intervention,
                                 int max_new) {
    const int n_vis = static_cast<int>(sample.vis.size());
    if (n_vis + static_cast<int>(sample.prompt_ids.size()) + max_new > model.cfg.max_seq)
        throw std::invalid_argument("generate_greedy: prompt does not fit in max_seq - max_new");

    Sample work = sample;
    work.answer_ids.clear();
    std::vector<int> out;
    ForwardOptions opt;
    opt.adapters = adapters;
    opt.intervention = intervention;
    for (int step = 0; step < max_new; ++step) {
        const Forward fwd = run_forward(model, work, opt);
        const Mat& logits = fwd.tape.value(fwd.logits);
        const double* row = logits.row(logits.rows - 1);
        int best = 0;
        for (int c = 1; c < logits.cols; ++c)
            if (row[c] > row[best]) best = c;  // strict: ties keep lowest id
        out.push_back(best);
        work.prompt_ids.push_back(best);
        if (best == kEos) break;
    }
    return out;
}

FfnOut ffn_forward(const TinyVlm& model, const std::vector<double>& x, int layer,
                   const Intervention* intervention) {
    const ModelConfig& cfg = model.cfg;
    if (layer < 0 || layer >= cfg.L) throw std::invalid_argument("ffn_forward: bad layer");
    if (static_cast<int>(x.size()) != cfg.d)
        throw std::invalid_argument("ffn_forward: input dim != d");
    const LayerWeights& lw = model.layers[layer];

    FfnOut out;
    out.h.assign(cfg.d_m, 0.0);
    for (int i = 0; i < cfg.d_m; ++i) {
        double g = lw.b_gate.data[i];
        double u = lw.b_up.data[i];
        const double* wg = lw.w_gate.row(i);
        const double* wu = lw.w_up.row(i);
        for (int j = 0; j < cfg.d; ++j) {
            g += wg[j] * x[j];
            u += wu[j] * x[j];
        }
        out.h[i] = silu(g) * u;
    }
    if (intervention && intervention->mode != Intervention::Mode::kNone) {
        const Mat row = intervention->row_for_layer(layer, cfg.d_m);
        for (int i = 0; i < cfg.d_m; ++i) out.h[i] *= row.data[i];
    }
    out.y.assign(cfg.d, 0.0);
    for (int j = 0; j < cfg.d; ++j) {
        const double* wd = lw.w_down.row(j);
        double s = 0.0;
        for (int i = 0; i < cfg.d_m; ++i) s += wd[i] * out.h[i];
        out.y[j] = s;
    }
    return out;
}

namespace {

void write_u32(std::ofstream& out, uint32_t v) {
    uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = uint8_t(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
    return v;
}

void write_u64(std::ofstream& out, uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = uint8_t(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::ifstream& in) {
    uint8_t b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_model(const TinyVlm& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);
    out.write("TVLM", 4);
    write_u32(out, 1);  // version
    write_u32(out, uint32_t(model.cfg.L));
    write_u32(out, uint32_t(model.cfg.d));
    write_u32(out, uint32_t(model.cfg.d_m));
    write_u32(out, uint32_t(model.cfg.vocab));
    write_u32(out, uint32_t(model.cfg.heads));
    write_u32(out, uint32_t(model.cfg.max_seq));
    write_u64(out, model.cfg.seed);
    model.for_each_weight([&](const std::string&, const Mat& m) {
        static_assert(sizeof(double) == 8);
        // x86-64 doubles are already little-endian IEEE 754.
        out.write(reinterpret_cast<const char*>(m.data.data()),
                  std::streamsize(m.data.size() * sizeof(double)));
    });
    if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

TinyVlm load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TVLM", 4) != 0)
        throw std::runtime_error("load_model: bad magic in " + path);
    const uint32_t version = read_u32(in);
    if (version != 1) throw std::runtime_error("load_model: unsupported version");
    ModelConfig cfg;
    cfg.L = int(read_u32(in));
    cfg.d = int(read_u32(in));
    cfg.d_m = int(read_u32(in));
    cfg.vocab = int(read_u32(in));
    cfg.heads = int(read_u32(in));
    cfg.max_seq = int(read_u32(in));
    cfg.seed = read_u64(in);
    cfg.validate();

    TinyVlm model = init_model(cfg);
    model.for_each_weight([&](const std::string& name, Mat& m) {
        in.read(reinterpret_cast<char*>(m.data.data()),
                std::streamsize(m.data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("load_model: truncated file at " + name);
    });
    return model;
}

}  // namespace shield
