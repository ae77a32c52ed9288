#pragma once

#include <map>
#include <string>
#include <vector>

#include "shield/analyze.hpp"
#include "shield/corpus.hpp"
#include "shield/eval.hpp"
#include "shield/model.hpp"
#include "shield/probe.hpp"
#include "shield/tune.hpp"

namespace shield {

// One flat bag of knobs for the whole pipeline; every field has a default
// and a dotted key in the plain-text config format.
struct RunConfig {
    ModelConfig model;
    GenConfig gen;
    double probe_p = 0.05;
    TrainConfig tune;
    PretrainConfig pretrain;
    double alpha = 2.0;
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string out_dir = "out";
};

// key=value lines, '#' comments. Unknown keys are rejected.
RunConfig load_config(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key_value);

// Canonical key-value snapshot (out_dir excluded so reruns in different
// roots stay byte-identical).
std::map<std::string, std::string> config_snapshot(const RunConfig& cfg);

// Content address for a run: first 12 hex chars of the hash of
// (command, canonical config).
std::string run_id(const std::string& command, const RunConfig& cfg);

// SHIELD_OUT env var beats the flag, which beats the config file.
std::string resolve_out_root(const std::string& flag_value, const RunConfig& cfg);

struct Manifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::vector<uint64_t> seeds;
    std::map<std::string, std::string> artifacts;  // relative path -> sha256
};

// Hashes the file and records it under its path relative to run_dir.
void manifest_add(Manifest& m, const std::string& run_dir, const std::string& rel_path);
void write_manifest(const Manifest& m, const std::string& run_dir);

// Derived per-seed stream seeds so corpus, init, pretraining and tuning
// draw from independent streams.
struct SeedPlan {
    uint64_t gen, model, pretrain, tune, controls;
};
SeedPlan seed_plan(uint64_t seed);

std::string format_sig4(double v);

// CSV emitters matching the report layouts (languages as columns, AVG
// last; matrices with a label header row/column).
void write_asr_table_csv(const std::string& path, const std::vector<std::string>& langs,
                         const std::vector<std::pair<std::string, std::vector<double>>>& rows);
void write_cells_table_csv(const std::string& path, const std::vector<std::string>& langs,
                           const std::vector<std::pair<std::string, std::vector<std::string>>>& rows);
void write_matrix_csv(const std::string& path, const std::vector<std::string>& labels,
                      const Mat& matrix);
void write_layers_csv(const std::string& path, const LayerDistribution& dist);

// Full per-seed pipeline state shared by the canned recipes.
struct SeedArtifacts {
    CorpusBundle corpora;
    TinyVlm model;
    std::vector<double> pretrain_losses;
};

// gen -> init -> pretrain for one seed; reuses <dir>/model-<seed>.tvlm when
// present (earlier identical run), otherwise trains and writes it.
SeedArtifacts build_seed(const RunConfig& cfg, uint64_t seed, const std::string& dir);

// Table-1 analog: per modality split, probe -> tune and probe -> amplify,
// evaluate vanilla / training-free / tuned, emit CSVs. Returns run dir.
std::string recipe_table1(const RunConfig& cfg);

// Table-4 analog: vanilla vs masking random neurons vs masking safety
// neurons, mean +- std over the seed list.
std::string recipe_table4(const RunConfig& cfg);

}  // namespace shield
