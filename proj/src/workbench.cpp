#include "shield/workbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "shield/hash.hpp"
#include "shield/rng.hpp"

namespace fs = std::filesystem;

namespace shield {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

long to_long(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const long out = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": " + v);
    }
}

double to_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad number for " + key + ": " + v);
    }
}

bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: bad bool for " + key + ": " + v);
}

std::vector<uint64_t> to_seeds(const std::string& v, const std::string& key) {
    std::vector<uint64_t> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(uint64_t(to_long(tok, key)));
    }
    if (out.empty()) throw std::invalid_argument("config: empty seeds list");
    return out;
}

}  // namespace

void apply_override(RunConfig& c, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("config: expected key=value, got: " + kv);
    const std::string key = trim(kv.substr(0, eq));
    const std::string val = trim(kv.substr(eq + 1));

    if (key == "model.L") c.model.L = int(to_long(val, key));
    else if (key == "model.d") c.model.d = int(to_long(val, key));
    else if (key == "model.d_m") c.model.d_m = int(to_long(val, key));
    else if (key == "model.vocab") c.model.vocab = int(to_long(val, key));
    else if (key == "model.heads") c.model.heads = int(to_long(val, key));
    else if (key == "model.max_seq") c.model.max_seq = int(to_long(val, key));
    else if (key == "model.seed") c.model.seed = uint64_t(to_long(val, key));
    else if (key == "gen.n_vis") c.gen.n_vis = int(to_long(val, key));
    else if (key == "gen.train_harmful") c.gen.train_harmful = int(to_long(val, key));
    else if (key == "gen.eval_harmful") c.gen.eval_harmful = int(to_long(val, key));
    else if (key == "gen.benign_total") c.gen.benign_total = int(to_long(val, key));
    else if (key == "gen.benign_probe_fraction") c.gen.benign_probe_fraction = to_double(val, key);
    else if (key == "gen.pretrain_benign") c.gen.pretrain_benign = int(to_long(val, key));
    else if (key == "gen.pretrain_harmful_base") c.gen.pretrain_harmful_base = int(to_long(val, key));
    else if (key == "gen.hrl_boost") c.gen.hrl_boost = int(to_long(val, key));
    else if (key == "gen.vis_noise") c.gen.vis_noise = to_double(val, key);
    else if (key == "gen.harm_vis_strength") c.gen.harm_vis_strength = to_double(val, key);
    else if (key == "gen.min_filler") c.gen.min_filler = int(to_long(val, key));
    else if (key == "gen.max_filler") c.gen.max_filler = int(to_long(val, key));
    else if (key == "gen.seed") c.gen.seed = uint64_t(to_long(val, key));
    else if (key == "probe.p") c.probe_p = to_double(val, key);
    else if (key == "tune.lr") c.tune.lr = to_double(val, key);
    else if (key == "tune.epochs") c.tune.epochs = int(to_long(val, key));
    else if (key == "tune.batch_size") c.tune.batch_size = int(to_long(val, key));
    else if (key == "tune.grad_clip") c.tune.grad_clip = to_double(val, key);
    else if (key == "tune.r") c.tune.r = int(to_long(val, key));
    else if (key == "tune.seed") c.tune.seed = uint64_t(to_long(val, key));
    else if (key == "tune.benign_replay") c.tune.benign_replay = to_bool(val, key);
    else if (key == "tune.replay_fraction") c.tune.replay_fraction = to_double(val, key);
    else if (key == "pretrain.steps") c.pretrain.steps = int(to_long(val, key));
    else if (key == "pretrain.batch_size") c.pretrain.batch_size = int(to_long(val, key));
    else if (key == "pretrain.lr") c.pretrain.lr = to_double(val, key);
    else if (key == "pretrain.grad_clip") c.pretrain.grad_clip = to_double(val, key);
    else if (key == "pretrain.optimizer") c.pretrain.optimizer = val;
    else if (key == "pretrain.seed") c.pretrain.seed = uint64_t(to_long(val, key));
    else if (key == "intervene.alpha") c.alpha = to_double(val, key);
    else if (key == "seeds") c.seeds = to_seeds(val, key);
    else if (key == "out_dir") c.out_dir = val;
    else throw std::invalid_argument("config: unknown key: " + key);
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_config: cannot open " + path);
    RunConfig cfg;
    std::string line;
    while (std::getline(in, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        apply_override(cfg, line);
    }
    return cfg;
}

std::map<std::string, std::string> config_snapshot(const RunConfig& c) {
    std::map<std::string, std::string> m;
    auto put_l = [&](const std::string& k, long v) { m[k] = std::to_string(v); };
    auto put_d = [&](const std::string& k, double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        m[k] = buf;
    };
    put_l("model.L", c.model.L);
    put_l("model.d", c.model.d);
    put_l("model.d_m", c.model.d_m);
    put_l("model.vocab", c.model.vocab);
    put_l("model.heads", c.model.heads);
    put_l("model.max_seq", c.model.max_seq);
    put_l("model.seed", long(c.model.seed));
    put_l("gen.n_vis", c.gen.n_vis);
    put_l("gen.train_harmful", c.gen.train_harmful);
    put_l("gen.eval_harmful", c.gen.eval_harmful);
    put_l("gen.benign_total", c.gen.benign_total);
    put_d("gen.benign_probe_fraction", c.gen.benign_probe_fraction);
    put_l("gen.pretrain_benign", c.gen.pretrain_benign);
    put_l("gen.pretrain_harmful_base", c.gen.pretrain_harmful_base);
    put_l("gen.hrl_boost", c.gen.hrl_boost);
    put_d("gen.vis_noise", c.gen.vis_noise);
    put_d("gen.harm_vis_strength", c.gen.harm_vis_strength);
    put_l("gen.min_filler", c.gen.min_filler);
    put_l("gen.max_filler", c.gen.max_filler);
    put_l("gen.seed", long(c.gen.seed));
    put_d("probe.p", c.probe_p);
    put_d("tune.lr", c.tune.lr);
    put_l("tune.epochs", c.tune.epochs);
    put_l("tune.batch_size", c.tune.batch_size);
    put_d("tune.grad_clip", c.tune.grad_clip);
    put_l("tune.r", c.tune.r);
    put_l("tune.seed", long(c.tune.seed));
    m["tune.benign_replay"] = c.tune.benign_replay ? "true" : "false";
    put_d("tune.replay_fraction", c.tune.replay_fraction);
    put_l("pretrain.steps", c.pretrain.steps);
    put_l("pretrain.batch_size", c.pretrain.batch_size);
    put_d("pretrain.lr", c.pretrain.lr);
    put_d("pretrain.grad_clip", c.pretrain.grad_clip);
    m["pretrain.optimizer"] = c.pretrain.optimizer;
    put_l("pretrain.seed", long(c.pretrain.seed));
    put_d("intervene.alpha", c.alpha);
    std::string seeds;
    for (size_t i = 0; i < c.seeds.size(); ++i)
        seeds += (i ? "," : "") + std::to_string(c.seeds[i]);
    m["seeds"] = seeds;
    return m;
}

std::string run_id(const std::string& command, const RunConfig& cfg) {
    std::string blob = command + "\n";
    for (const auto& [k, v] : config_snapshot(cfg)) blob += k + "=" + v + "\n";
    return sha256_hex(blob).substr(0, 12);
}

std::string resolve_out_root(const std::string& flag_value, const RunConfig& cfg) {
    if (const char* env = std::getenv("SHIELD_OUT"); env && *env) return env;
    if (!flag_value.empty()) return flag_value;
    return cfg.out_dir;
}

void manifest_add(Manifest& m, const std::string& run_dir, const std::string& rel_path) {
    m.artifacts[rel_path] = sha256_file_hex((fs::path(run_dir) / rel_path).string());
}

void write_manifest(const Manifest& m, const std::string& run_dir) {
    nlohmann::json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["seeds"] = m.seeds;
    j["artifacts"] = m.artifacts;
    std::ofstream out(fs::path(run_dir) / "manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("write_manifest: cannot open manifest in " + run_dir);
    out << j.dump(2) << "\n";
}

SeedPlan seed_plan(uint64_t seed) {
    Rng r(seed);
    SeedPlan p{};
    p.gen = r.next_u64();
    p.model = r.next_u64();
    p.pretrain = r.next_u64();
    p.tune = r.next_u64();
    p.controls = r.next_u64();
    return p;
}

std::string format_sig4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

namespace {

std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace

void write_asr_table_csv(const std::string& path, const std::vector<std::string>& langs,
                         const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_asr_table_csv: cannot open " + path);
    out << "method";
    for (const auto& l : langs) out << "," << l;
    out << ",AVG\n";
    for (const auto& [name, vals] : rows) {
        out << name;
        double sum = 0.0;
        for (double v : vals) {
            out << "," << fmt4(v);
            sum += v;
        }
        out << "," << fmt4(sum / double(vals.size())) << "\n";
    }
}

void write_cells_table_csv(
    const std::string& path, const std::vector<std::string>& langs,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_cells_table_csv: cannot open " + path);
    out << "condition";
    for (const auto& l : langs) out << "," << l;
    out << ",AVG\n";
    for (const auto& [name, vals] : rows) {
        out << name;
        for (const auto& v : vals) out << "," << v;
        out << "\n";
    }
}

void write_matrix_csv(const std::string& path, const std::vector<std::string>& labels,
                      const Mat& matrix) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_matrix_csv: cannot open " + path);
    out << "label";
    for (const auto& l : labels) out << "," << l;
    out << "\n";
    for (int i = 0; i < matrix.rows; ++i) {
        out << labels[i];
        for (int j = 0; j < matrix.cols; ++j) out << "," << fmt4(matrix.at(i, j));
        out << "\n";
    }
}

void write_layers_csv(const std::string& path, const LayerDistribution& dist) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_layers_csv: cannot open " + path);
    out << "layer,hrl,nhrl,delta\n";
    for (size_t l = 0; l < dist.delta.size(); ++l)
        out << l << "," << fmt4(dist.hrl[l]) << "," << fmt4(dist.nhrl[l]) << ","
            << fmt4(dist.delta[l]) << "\n";
}

SeedArtifacts build_seed(const RunConfig& cfg, uint64_t seed, const std::string& dir) {
    const SeedPlan plan = seed_plan(seed);
    SeedArtifacts art;

    GenConfig gen = cfg.gen;
    gen.seed = plan.gen;
    gen.vis_dim = cfg.model.d;
    art.corpora = gen_corpora(gen, cfg.model.vocab);

    const fs::path model_path = fs::path(dir) / ("model-" + std::to_string(seed) + ".tvlm");
    if (fs::exists(model_path)) {
        art.model = load_model(model_path.string());
        return art;
    }
    ModelConfig mc = cfg.model;
    mc.seed = plan.model;
    PretrainConfig pc = cfg.pretrain;
    pc.seed = plan.pretrain;
    PretrainResult pre = pretrain_base(init_model(mc), art.corpora.pretrain, pc);
    art.model = std::move(pre.model);
    art.pretrain_losses = std::move(pre.losses);
    save_model(art.model, model_path.string());
    return art;
}

namespace {

const char* kModalities[2] = {"image-dominant", "text-dominant"};

std::vector<std::string> language_tags(int vocab) {
    std::vector<std::string> tags;
    for (const auto& l : build_languages(vocab)) tags.push_back(l.tag);
    return tags;
}

std::vector<double> per_lang_row(const EvalReport& rep, const std::vector<std::string>& langs) {
    std::vector<double> row;
    for (const auto& l : langs) {
        auto it = rep.asr_by_lang.find(l);
        row.push_back(it == rep.asr_by_lang.end() ? 0.0 : it->second);
    }
    return row;
}

}  // namespace

std::string recipe_table1(const RunConfig& cfg) {
    const std::string root = resolve_out_root("", cfg);
    const std::string dir = (fs::path(root) / ("recipe-table1-" + run_id("recipe-table1", cfg))).string();
    fs::create_directories(dir);

    const auto langs = language_tags(cfg.model.vocab);
    // acc[mod][method][lang] accumulates over seeds
    std::map<std::string, std::map<std::string, std::vector<double>>> acc;

    Manifest manifest;
    manifest.command = "recipe-table1";
    manifest.config = config_snapshot(cfg);
    manifest.seeds = cfg.seeds;

    for (uint64_t seed : cfg.seeds) {
        SeedArtifacts art = build_seed(cfg, seed, dir);
        const SeedPlan plan = seed_plan(seed);

        for (const char* mod : kModalities) {
            const Corpus safe_train = art.corpora.d_safe_train.filter_modality(mod);
            const Corpus eval_slice = art.corpora.d_safe_eval.filter_modality(mod);

            const SafetyNeuronSet set =
                probe_pipeline(art.model, safe_train, art.corpora.d_mm, cfg.probe_p);
            save_neuron_set(set, (fs::path(dir) / ("set-" + std::string(mod) + "-" +
                                                   std::to_string(seed) + ".json")).string());

            TrainConfig tc = cfg.tune;
            tc.seed = plan.tune;
            const TuneResult tuned = tune(art.model, safe_train, set, tc);
            save_adapters(tuned.adapters,
                          (fs::path(dir) / ("adapters-" + std::string(mod) + "-" +
                                            std::to_string(seed) + ".json")).string());

            const EvalReport vanilla = asr_eval(art.model, nullptr, nullptr, eval_slice);
            const Intervention amp = apply_amplify(set, cfg.alpha);
            const EvalReport training_free = asr_eval(art.model, nullptr, &amp, eval_slice);
            const EvalReport ours = asr_eval(art.model, &tuned.adapters, nullptr, eval_slice);

            auto push = [&](const std::string& method, const EvalReport& rep) {
                auto& row = acc[mod][method];
                const auto vals = per_lang_row(rep, langs);
                if (row.empty()) row.assign(vals.size(), 0.0);
                for (size_t i = 0; i < vals.size(); ++i) row[i] += vals[i];
            };
            push("vanilla", vanilla);
            push("ours_training_free", training_free);
            push("ours_tuned", ours);
        }
    }

    for (const char* mod : kModalities) {
        std::vector<std::pair<std::string, std::vector<double>>> rows;
        for (const char* method : {"vanilla", "ours_training_free", "ours_tuned"}) {
            auto row = acc[mod][method];
            for (double& v : row) v /= double(cfg.seeds.size());
            rows.emplace_back(method, std::move(row));
        }
        const std::string rel = "table1_" + std::string(mod) + ".csv";
        write_asr_table_csv((fs::path(dir) / rel).string(), langs, rows);
        manifest_add(manifest, dir, rel);
    }
    for (uint64_t seed : cfg.seeds) {
        manifest_add(manifest, dir, "model-" + std::to_string(seed) + ".tvlm");
        for (const char* mod : kModalities) {
            manifest_add(manifest, dir,
                         "set-" + std::string(mod) + "-" + std::to_string(seed) + ".json");
            manifest_add(manifest, dir,
                         "adapters-" + std::string(mod) + "-" + std::to_string(seed) + ".json");
        }
    }
    write_manifest(manifest, dir);
    return dir;
}

std::string recipe_table4(const RunConfig& cfg) {
    const std::string root = resolve_out_root("", cfg);
    const std::string dir = (fs::path(root) / ("recipe-table4-" + run_id("recipe-table4", cfg))).string();
    fs::create_directories(dir);

    const auto langs = language_tags(cfg.model.vocab);
    // samples[mod][condition][lang] -> per-seed values
    std::map<std::string, std::map<std::string, std::vector<std::vector<double>>>> samples;

    Manifest manifest;
    manifest.command = "recipe-table4";
    manifest.config = config_snapshot(cfg);
    manifest.seeds = cfg.seeds;

    for (uint64_t seed : cfg.seeds) {
        SeedArtifacts art = build_seed(cfg, seed, dir);
        const SeedPlan plan = seed_plan(seed);

        for (const char* mod : kModalities) {
            const Corpus safe_train = art.corpora.d_safe_train.filter_modality(mod);
            const Corpus eval_slice = art.corpora.d_safe_eval.filter_modality(mod);
            const SafetyNeuronSet sn =
                probe_pipeline(art.model, safe_train, art.corpora.d_mm, cfg.probe_p);
            const SafetyNeuronSet rn = random_set_like(sn, plan.controls);

            const EvalReport vanilla = asr_eval(art.model, nullptr, nullptr, eval_slice);
            const Intervention mask_sn = apply_mask(sn);
            const Intervention mask_rn = apply_mask(rn);
            const EvalReport wo_sn = asr_eval(art.model, nullptr, &mask_sn, eval_slice);
            const EvalReport wo_rn = asr_eval(art.model, nullptr, &mask_rn, eval_slice);

            auto push = [&](const std::string& cond, const EvalReport& rep) {
                auto& cell = samples[mod][cond];
                const auto vals = per_lang_row(rep, langs);
                if (cell.empty()) cell.assign(vals.size(), {});
                for (size_t i = 0; i < vals.size(); ++i) cell[i].push_back(vals[i]);
            };
            push("vanilla", vanilla);
            push("wo_rn", wo_rn);
            push("wo_sn", wo_sn);
        }
    }

    auto mean_std = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= double(v.size());
        double var = 0.0;
        for (double x : v) var += (x - m) * (x - m);
        var /= double(v.size());
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.4f±%.4f", m, std::sqrt(var));
        return std::string(buf);
    };

    for (const char* mod : kModalities) {
        std::vector<std::pair<std::string, std::vector<std::string>>> rows;
        for (const char* cond : {"vanilla", "wo_rn", "wo_sn"}) {
            std::vector<std::string> cells;
            std::vector<double> all;
            for (const auto& per_seed : samples[mod][cond]) {
                cells.push_back(mean_std(per_seed));
                all.insert(all.end(), per_seed.begin(), per_seed.end());
            }
            cells.push_back(mean_std(all));
            rows.emplace_back(cond, std::move(cells));
        }
        const std::string rel = "table4_" + std::string(mod) + ".csv";
        // AVG column is already appended per row.
        std::ofstream out((fs::path(dir) / rel).string(), std::ios::binary);
        out << "condition";
        for (const auto& l : langs) out << "," << l;
        out << ",AVG\n";
        for (const auto& [name, cells] : rows) {
            out << name;
            for (const auto& c : cells) out << "," << c;
            out << "\n";
        }
        out.close();
        manifest_add(manifest, dir, rel);
    }
    for (uint64_t seed : cfg.seeds)
        manifest_add(manifest, dir, "model-" + std::to_string(seed) + ".tvlm");
    write_manifest(manifest, dir);
    return dir;
}

}  // namespace shield
