#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shield/rng.hpp"

namespace shield {

// Reserved token ids shared by every synthetic language.
constexpr int kPad = 0;
constexpr int kEos = 1;
constexpr int kRefuse = 2;

// A synthetic language: a marker token plus a content-token inventory.
// Family members draw 60% of their inventory from a family-shared pool;
// isolates own their full inventory. A fixed subset of each inventory is
// designated harm-capable; the rest is the benign pool.
struct LanguageSpec {
    std::string tag;
    std::string family;  // "A" | "B" | "C" | "isolate"
    bool hrl = false;    // high-resource (5x safety pretraining data)
    int marker = 0;
    std::vector<int> shared_tokens;
    std::vector<int> private_tokens;
    double shared_fraction = 0.0;

    std::vector<int> content() const;      // shared + private, sorted
    std::vector<int> harm_tokens() const;  // harm-capable subset
    std::vector<int> benign_tokens() const;
};

// Builds the 10-language inventory over [3, vocab). Throws if the
// vocabulary is too small to host it.
std::vector<LanguageSpec> build_languages(int vocab);

const LanguageSpec& language_by_tag(const std::vector<LanguageSpec>& langs,
                                    const std::string& tag);
// nullptr when id is not a marker.
const LanguageSpec* language_by_marker(const std::vector<LanguageSpec>& langs, int id);

// Deterministic benign-answer mapping: cycles within the family-shared
// benign pool or the language-private benign pool that owns the token.
int answer_token(const std::vector<LanguageSpec>& langs, int payload_id);

// Language-local prompt spec; `items` are indices into content().
struct TokenSpec {
    std::string lang;
    std::vector<int> items;
};

std::vector<int> tokenize(const std::vector<LanguageSpec>& langs, const TokenSpec& spec);
TokenSpec detokenize(const std::vector<LanguageSpec>& langs, const std::vector<int>& ids);

struct Sample {
    std::string id;
    std::string lang;
    std::string modality;  // "image-dominant" | "text-dominant" | "benign"
    std::string risk;      // "harmful" | "benign"
    std::vector<int> prompt_ids;
    std::vector<std::vector<double>> vis;  // visual prefix vectors, dim d each
    std::vector<int> answer_ids;
};

struct Corpus {
    std::string tag;
    std::vector<Sample> samples;

    bool empty() const { return samples.empty(); }
    size_t size() const { return samples.size(); }
    Corpus filter_lang(const std::string& lang) const;
    Corpus filter_modality(const std::string& modality) const;
};

struct GenConfig {
    int vis_dim = 32;  // must equal the model dim d
    int n_vis = 4;
    int train_harmful = 60;  // per (language, modality)
    int eval_harmful = 30;   // per (language, modality)
    int benign_total = 400;  // split between probing and evaluation
    double benign_probe_fraction = 0.6;
    int pretrain_benign = 2200;
    int pretrain_harmful_base = 12;  // per (language, modality); HRLs get hrl_boost x
    int hrl_boost = 5;
    double vis_noise = 0.5;
    double harm_vis_strength = 2.0;
    int min_filler = 3;
    int max_filler = 6;
    uint64_t seed = 1;
};

struct CorpusBundle {
    Corpus pretrain;
    Corpus d_safe_train;
    Corpus d_safe_eval;
    Corpus d_mm;
    Corpus benign_eval;
    std::vector<double> harm_direction;  // unit vector, dim vis_dim
};

// Deterministic corpus generation; same config -> byte-identical JSONL.
CorpusBundle gen_corpora(const GenConfig& cfg, int vocab);

void save_jsonl(const Corpus& c, const std::string& path);
Corpus load_jsonl(const std::string& path, const std::string& tag);

}  // namespace shield
