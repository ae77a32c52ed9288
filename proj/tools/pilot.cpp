// Temporary calibration harness, not part of the shipped tool set.
#include <chrono>
#include <cstdio>
#include <set>

#include "shield/analyze.hpp"
#include "shield/corpus.hpp"
#include "shield/eval.hpp"
#include "shield/probe.hpp"
#include "shield/tune.hpp"
#include "shield/workbench.hpp"

using namespace shield;
using Clock = std::chrono::steady_clock;

static double secs(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

int main(int argc, char** argv) {
    RunConfig cfg;
    for (int i = 1; i < argc; ++i) apply_override(cfg, argv[i]);
    const uint64_t seed = cfg.seeds[0];
    const SeedPlan plan = seed_plan(seed);

    GenConfig gen = cfg.gen;
    gen.seed = plan.gen;
    gen.vis_dim = cfg.model.d;
    auto t0 = Clock::now();
    const CorpusBundle bundle = gen_corpora(gen, cfg.model.vocab);
    auto t1 = Clock::now();
    std::printf("gen: %.2fs pretrain=%zu train=%zu eval=%zu mm=%zu beval=%zu\n", secs(t0, t1),
                bundle.pretrain.size(), bundle.d_safe_train.size(), bundle.d_safe_eval.size(),
                bundle.d_mm.size(), bundle.benign_eval.size());

    ModelConfig mc = cfg.model;
    mc.seed = plan.model;
    PretrainConfig pc = cfg.pretrain;
    pc.seed = plan.pretrain;
    t0 = Clock::now();
    PretrainResult pre = pretrain_base(init_model(mc), bundle.pretrain, pc);
    t1 = Clock::now();
    const TinyVlm& model = pre.model;
    std::printf("pretrain: %.1fs steps=%d loss %.4f -> %.4f (ratio %.3f)\n", secs(t0, t1),
                pc.steps, pre.losses.front(), pre.losses.back(),
                pre.losses.back() / pre.losses.front());

    t0 = Clock::now();
    const double bacc = benign_accuracy(model, nullptr, bundle.benign_eval);
    const EvalReport vanilla = asr_eval(model, nullptr, nullptr, bundle.d_safe_eval);
    t1 = Clock::now();
    std::printf("eval: %.1fs benign_acc=%.3f overall_asr=%.3f img=%.3f txt=%.3f\n", secs(t0, t1),
                bacc, vanilla.overall, vanilla.asr_by_modality.at("image-dominant"),
                vanilla.asr_by_modality.at("text-dominant"));
    const auto langs = build_languages(cfg.model.vocab);
    double hrl_asr = 0, nhrl_asr = 0;
    std::printf("per-lang ASR: ");
    for (const auto& l : langs) {
        const double a = vanilla.asr_by_lang.at(l.tag);
        std::printf("%s=%.2f ", l.tag.c_str(), a);
        (l.hrl ? hrl_asr : nhrl_asr) += a;
    }
    std::printf("\nHRL mean=%.3f NHRL mean=%.3f gap=%.3f\n", hrl_asr / 2, nhrl_asr / 8,
                nhrl_asr / 8 - hrl_asr / 2);

    // Probing per modality
    t0 = Clock::now();
    std::map<std::string, SafetyNeuronSet> mod_sets;
    for (const char* mod : {"image-dominant", "text-dominant"}) {
        const Corpus safe_m = bundle.d_safe_train.filter_modality(mod);
        mod_sets[mod] = probe_pipeline(model, safe_m, bundle.d_mm, cfg.probe_p);
        std::printf("set[%s]: total=%zu layers:", mod, mod_sets[mod].total());
        for (const auto& l : mod_sets[mod].layers) std::printf(" %zu", l.size());
        std::printf("\n");
    }
    t1 = Clock::now();
    std::printf("probe: %.1fs\n", secs(t0, t1));

    // Tune per modality + evals
    for (const char* mod : {"image-dominant", "text-dominant"}) {
        const Corpus safe_m = bundle.d_safe_train.filter_modality(mod);
        const Corpus eval_m = bundle.d_safe_eval.filter_modality(mod);
        const auto& set = mod_sets[mod];
        if (set.empty()) {
            std::printf("[%s] EMPTY SET — skipping tune\n", mod);
            continue;
        }
        TrainConfig tc = cfg.tune;
        tc.seed = plan.tune;
        t0 = Clock::now();
        const TuneResult tr = tune(model, safe_m, set, tc);
        t1 = Clock::now();
        const EvalReport van = asr_eval(model, nullptr, nullptr, eval_m);
        const EvalReport tuned = asr_eval(model, &tr.adapters, nullptr, eval_m);
        const Intervention amp = apply_amplify(set, cfg.alpha);
        const EvalReport ampd = asr_eval(model, nullptr, &amp, eval_m);
        const Intervention msk = apply_mask(set);
        const EvalReport masked = asr_eval(model, nullptr, &msk, eval_m);
        const SafetyNeuronSet rn = random_set_like(set, plan.controls);
        const Intervention mskr = apply_mask(rn);
        const EvalReport masked_rn = asr_eval(model, nullptr, &mskr, eval_m);
        const double tuned_bacc = benign_accuracy(model, &tr.adapters, bundle.benign_eval);
        std::printf(
            "[%s] tune %.1fs loss %.3f->%.3f | van=%.3f tuned=%.3f amp=%.3f woSN=%.3f woRN=%.3f "
            "tuned_bacc=%.3f\n",
            mod, secs(t0, t1), tr.losses.front(), tr.losses.back(), van.overall, tuned.overall,
            ampd.overall, masked.overall, masked_rn.overall, tuned_bacc);
    }

    // Per-language pooled probes: counts + overlap structure
    t0 = Clock::now();
    std::vector<std::pair<std::string, SafetyNeuronSet>> lang_sets;
    std::printf("per-lang counts: ");
    for (const auto& l : langs) {
        const Corpus safe_l = bundle.d_safe_train.filter_lang(l.tag);
        const Corpus mm_l = bundle.d_mm.filter_lang(l.tag);
        lang_sets.emplace_back(l.tag, probe_pipeline(model, safe_l, mm_l, cfg.probe_p));
        std::printf("%s=%zu ", l.tag.c_str(), lang_sets.back().second.total());
    }
    t1 = Clock::now();
    std::printf("(%.1fs)\n", secs(t0, t1));

    std::vector<double> counts, asrs;
    for (const auto& [tag, s] : lang_sets) {
        counts.push_back(double(s.total()));
        asrs.push_back(vanilla.asr_by_lang.at(tag));
    }
    try {
        const auto corr = correlate(counts, asrs, 10000, 1);
        std::printf("correlate: r=%.3f p=%.4f\n", corr.r, corr.p);
    } catch (const std::exception& e) {
        std::printf("correlate failed: %s\n", e.what());
    }

    // Family vs cross-family Jaccard
    auto jac = [&](const std::string& a, const std::string& b) {
        const SafetyNeuronSet *sa = nullptr, *sb = nullptr;
        for (auto& [t, s] : lang_sets) {
            if (t == a) sa = &s;
            if (t == b) sb = &s;
        }
        return overlap(*sa, *sb).first;
    };
    double fam = 0, cross = 0;
    int nf = 0, nc = 0;
    for (const auto& a : langs)
        for (const auto& b : langs) {
            if (a.tag >= b.tag) continue;
            const double j = jac(a.tag, b.tag);
            if (a.family == b.family && a.family != "isolate") {
                fam += j;
                ++nf;
            } else {
                cross += j;
                ++nc;
            }
        }
    std::printf("jaccard: family=%.3f cross=%.3f\n", fam / nf, cross / nc);

    // Cross-modal within-language vs cross-lingual within-modality
    double cm = 0;
    int ncm = 0;
    for (const auto& l : langs) {
        const Corpus img = bundle.d_safe_train.filter_lang(l.tag).filter_modality("image-dominant");
        const Corpus txt = bundle.d_safe_train.filter_lang(l.tag).filter_modality("text-dominant");
        const Corpus mm_l = bundle.d_mm.filter_lang(l.tag);
        const auto si = probe_pipeline(model, img, mm_l, cfg.probe_p);
        const auto st = probe_pipeline(model, txt, mm_l, cfg.probe_p);
        cm += overlap(si, st).first;
        ++ncm;
    }
    std::printf("cross-modal within-lang jaccard=%.3f vs cross-lingual=%.3f\n", cm / ncm,
                cross / nc);

    // Zero transfer: family-mate vs cross-family amplify
    struct Pair {
        const char *tgt, *fam_src, *cross_src;
    };
    for (const Pair pr : {Pair{"ab", "aa", "ba"}, Pair{"bb", "ba", "aa"}}) {
        const SafetyNeuronSet *fam_set = nullptr, *cross_set = nullptr;
        for (auto& [t, s] : lang_sets) {
            if (t == pr.fam_src) fam_set = &s;
            if (t == pr.cross_src) cross_set = &s;
        }
        const Corpus tgt_eval = bundle.d_safe_eval.filter_lang(pr.tgt);
        const auto tf = transfer_eval(model, *fam_set, tgt_eval, "amplify", cfg.alpha);
        const auto tcx = transfer_eval(model, *cross_set, tgt_eval, "amplify", cfg.alpha);
        std::printf("transfer->%s: fam(%s) red=%.3f cross(%s) red=%.3f (before=%.3f)\n", pr.tgt,
                    pr.fam_src, tf.relative_reduction, pr.cross_src, tcx.relative_reduction,
                    tf.before);
    }
    return 0;
}
