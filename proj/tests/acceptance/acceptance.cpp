// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
// line fails. Tolerances and seeds are fixed here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "unialign/diagnostics.hpp"
#include "unialign/fusion.hpp"
#include "unialign/global_align.hpp"
#include "unialign/hard_negative.hpp"
#include "unialign/train.hpp"

using namespace unialign;

namespace {

constexpr double kGradTolerance = 1e-3;
constexpr double kGradSeconds = 60;
constexpr std::size_t kOtTrialsPerSize = 100;
constexpr double kOtSeconds = 30;
constexpr double kRowSumTolerance = 1e-9;
constexpr double kExactTolerance = 1e-12;
constexpr double kTvTolerance = 0.05;
constexpr std::size_t kSamplerDraws = 10000;
constexpr double kSaturationTolerance = 1e-6;
constexpr double kRecallFloor = 5.0 / 128.0;
constexpr double kPretrainSeconds = 30 * 60;
constexpr double kHnFloor = 0.9;
constexpr std::uint64_t kAblationSeeds = 5;
constexpr std::uint64_t kHnSeeds = 3;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(const char* id, const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] %-3s %-44s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

Tensor randn(Shape shape, RngStream& rng, double sd = 1.0) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  std::vector<Real> d(n);
  for (Real& x : d) x = Real(rng.normal(0.0, sd));
  return Tensor(std::move(shape), std::move(d));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i] - b.data()[i])));
  return m;
}

double max_row_sum_error(const Tensor& p) {
  double worst = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < p.cols(); ++j) s += p.at(i, j);
    worst = std::max(worst, std::abs(s - 1));
  }
  return worst;
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = run_gradcheck_suite(1);
  const double secs = seconds_since(t0);
  double worst = 0;
  bool ok = !entries.empty();
  for (const auto& e : entries) {
    worst = std::max(worst, e.max_rel_error);
    ok = ok && e.passed && e.tolerance <= kGradTolerance;
  }
  ok = ok && worst <= kGradTolerance && secs < kGradSeconds;
  report("1", "gradient suite", ok,
         fmt("%zu checks, max rel err %.2e, %.1f s", entries.size(), worst, secs));
}

void ot_bench() {
  const auto t0 = Clock::now();
  const OtBenchReport r = run_ot_bench(kOtTrialsPerSize, 1, ipot_config(TrainConfig{}));
  const double secs = seconds_since(t0);
  const bool ok = r.failures == 0 && r.max_gap <= 1e-3 && r.max_residual <= 1e-4 && secs < kOtSeconds;
  report("2", "IPOT vs exact optimum (4x4, 5x5)", ok,
         fmt("%zu trials, max gap %.2e, max residual %.2e, %.1f s", r.trials.size(), r.max_gap,
             r.max_residual, secs));
}

void distribution_contracts() {
  RngStream rng(3, 1);
  double rows = 0, kl_self = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor s = randn({8, 8}, rng, 3.0);
    const Tensor p = alignment_probs(s, 0.07);
    const Tensor h = soft_labels(p, 0.01);
    rows = std::max({rows, max_row_sum_error(softmax_rows(s)), max_row_sum_error(p),
                     max_row_sum_error(h)});
    kl_self = std::max(kl_self, std::abs(kl_row_loss(h, h).item()));
  }
  HardNegativeSet set;
  for (std::size_t label : {0, 1, 0, 1, 1})
    set.pairs.push_back({randn({1, 6}, rng), randn({1, 6}, rng), label, PairKind::kImageText});
  const double ce = hn_loss({set}, Linear::zeros(12, 2)).item();
  const double ce_err = std::abs(ce - std::log(2.0));
  const bool ok = rows <= kRowSumTolerance && kl_self <= kExactTolerance && ce_err <= kExactTolerance;
  report("3", "distribution contracts", ok,
         fmt("row-sum err %.1e, KL(H||H) %.1e, |CE-ln2| %.1e", rows, kl_self, ce_err));
}

void sampler() {
  RngStream rng(4, 1);
  double worst_tv = 0;
  bool excluded = false;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 4 + rng.index(6);
    std::vector<Real> row(n);
    for (Real& x : row) x = Real(rng.uniform());
    if (trial % 5 == 0) std::fill(row.begin(), row.end(), Real{0});  // uniform fallback
    const std::size_t ex = rng.index(n);
    double mass = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != ex) mass += row[j];
    std::vector<double> counts(n, 0);
    for (std::size_t d = 0; d < kSamplerDraws; ++d) counts[sample_hard_negative(row, ex, rng)] += 1;
    if (counts[ex] > 0) excluded = true;
    double tv = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double expect = j == ex ? 0 : mass > 1e-12 ? row[j] / mass : 1.0 / double(n - 1);
      tv += std::abs(counts[j] / double(kSamplerDraws) - expect);
    }
    worst_tv = std::max(worst_tv, tv / 2);
  }
  report("4", "hard-negative sampler", worst_tv <= kTvTolerance && !excluded,
         fmt("max TV %.4f at %zu draws, excluded index drawn: %s", worst_tv, kSamplerDraws,
             excluded ? "yes" : "no"));
}

void gate() {
  RngStream rng(5, 1);
  double convex = 0, saturation = 0, identity = 0;
  for (int trial = 0; trial < 20; ++trial) {
    GatedFusion g = GatedFusion::make(8, 2, 16, rng);
    const Tensor f_i = randn({4, 8}, rng), f_p = randn({6, 8}, rng);
    const GatedFusionState init = gated_fusion(g, f_i, f_p);
    identity = std::max({identity, max_abs_diff(init.f_pi, f_i), max_abs_diff(init.mixed, f_i)});

    for (Real& x : g.cross_attn.output.weight.data_mut()) x = Real(rng.normal(0.0, 1.0));
    for (Real& x : g.gate_proj.bias.data_mut()) x = Real(rng.normal(0.0, 2.0));
    const GatedFusionState st = gated_fusion(g, f_i, f_p);
    for (std::size_t k = 0; k < st.mixed.numel(); ++k) {
      const double a = st.f_pi.data()[k], b = st.f_i.data()[k], m = st.mixed.data()[k];
      convex = std::max({convex, std::min(a, b) - m, m - std::max(a, b), 0.0});
    }
    for (Real& x : g.gate_proj.weight.data_mut()) x = 0;
    for (double bias : {20.0, -20.0}) {
      for (Real& x : g.gate_proj.bias.data_mut()) x = Real(bias);
      const GatedFusionState s = gated_fusion(g, f_i, f_p);
      saturation = std::max(saturation, max_abs_diff(s.mixed, bias > 0 ? s.f_pi : f_i));
    }
  }
  // The other attention blocks at initialization.
  CoAttentionConfig cc;
  cc.width = 16;
  cc.heads = 2;
  cc.ffn_width = 32;
  const CoAttention co(cc, rng);
  const Tensor img = randn({9, 16}, rng), txt = randn({13, 16}, rng);
  const auto [v, r] = co(img, txt);
  const KnowledgeEncoder ke = KnowledgeEncoder::make(16, 2, 32, rng);
  const Tensor know = randn({10, 16}, rng);
  identity = std::max({identity, max_abs_diff(v, img), max_abs_diff(r, txt),
                       max_abs_diff(knowledge_encode(ke, know), know)});

  const bool ok = convex <= kExactTolerance && saturation <= kSaturationTolerance && identity == 0;
  report("5", "gate exactness", ok,
         fmt("convexity violation %.1e, saturation err %.1e, identity-at-init err %.1e", convex,
             saturation, identity));
}

// ---------------------------------------------------------------------------
// Training criteria.

struct Scratch {
  std::filesystem::path dir;
  Scratch() {
    dir = std::filesystem::temp_directory_path() / "unialign_acceptance";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
  }
  ~Scratch() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

struct Run {
  double recall1 = 0;
  double hn_accuracy = 0;
  double stage1_recall1 = 0;
};

double last_of_stage(const PretrainReport& r, int stage, double EpochMetrics::*field) {
  double v = std::nan("");
  for (const auto& e : r.epochs)
    if (e.stage == stage) v = e.*field;
  return v;
}

std::string stage1_checkpoint(const Corpus& corpus, TrainConfig cfg, const Scratch& s,
                              const std::string& name) {
  cfg.stage2_epochs = 0;
  Model m = make_model(cfg, corpus);
  pretrain(m, corpus, cfg);
  const std::string path = s.path(name);
  save_model(m, path);
  return path;
}

Run stage2_from(const std::string& ckpt, const Corpus& corpus, TrainConfig cfg,
                const std::string& save_as = {}) {
  cfg.stage1_epochs = 0;
  Model m = load_model(ckpt);
  const PretrainReport r = pretrain(m, corpus, cfg);
  if (!save_as.empty()) save_model(m, save_as);
  Run run;
  run.recall1 = last_of_stage(r, 2, &EpochMetrics::recall1);
  run.hn_accuracy = last_of_stage(r, 2, &EpochMetrics::hn_accuracy);
  return run;
}

double vqa_accuracy(const std::string& ckpt, const Corpus& corpus, TrainConfig cfg) {
  Model m = load_model(ckpt);
  return finetune_vqa(m, corpus, cfg).accuracy;
}

struct Arms {
  std::vector<double> full, inter_only, no_local, one_hot, no_hn, hn_acc;
  std::vector<double> gated, ungated, pretrained, scratch;
};

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / double(v.size());
}

void training_criteria() {
  const Scratch scratch;
  const Corpus corpus = generate_corpus(CorpusConfig{});
  std::ofstream log("acceptance_runs.csv");
  log << "seed,arm,recall1,hn_accuracy,vqa_accuracy\n";

  // Criteria 6 and 9: two full single-call runs with the default config.
  TrainConfig base;
  base.seed = 1;
  const auto t0 = Clock::now();
  Model a = make_model(base, corpus);
  const PretrainReport ra = pretrain(a, corpus, base);
  const double secs = seconds_since(t0);
  Model b = make_model(base, corpus);
  const PretrainReport rb = pretrain(b, corpus, base);

  const double r1 = last_of_stage(ra, 1, &EpochMetrics::recall1);
  report("6", "stage-1 retrieval and pretrain time", r1 >= kRecallFloor && secs < kPretrainSeconds,
         fmt("stage-1 R@1 %.4f (floor %.4f), pretrain %.0f s", r1, kRecallFloor, secs));

  const std::string csv_a = metrics_csv(ra.epochs), csv_b = metrics_csv(rb.epochs);
  report("9", "bit-identical metric CSVs", csv_a == csv_b && !csv_a.empty(),
         fmt("%zu bytes, %s", csv_a.size(), csv_a == csv_b ? "identical" : "differ"));

  // Ablation arms. Arms that share stage 1 continue from one checkpoint.
  Arms arms;
  for (std::uint64_t seed = 1; seed <= kAblationSeeds; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    const std::string s1 = stage1_checkpoint(corpus, cfg, scratch, "s1_full.ckpt");

    const std::string full_ckpt = scratch.path("full.ckpt");
    const Run full = stage2_from(s1, corpus, cfg, full_ckpt);
    TrainConfig c = cfg;
    c.w_local = 0;
    const Run no_local = stage2_from(s1, corpus, c);
    c = cfg;
    c.w_hn = 0;
    const Run no_hn = stage2_from(s1, corpus, c);

    c = cfg;
    c.intra_alignment = false;
    const Run inter_only = stage2_from(stage1_checkpoint(corpus, c, scratch, "s1_inter.ckpt"), corpus, c);
    c = cfg;
    c.soft_labels = false;
    const Run one_hot = stage2_from(stage1_checkpoint(corpus, c, scratch, "s1_onehot.ckpt"), corpus, c);

    c = cfg;
    const double gated = vqa_accuracy(full_ckpt, corpus, c);
    c.gated_fusion = false;
    const double ungated = vqa_accuracy(full_ckpt, corpus, c);
    c = cfg;
    c.init_from_pretrained = false;
    const double scratch_acc = vqa_accuracy(full_ckpt, corpus, c);

    arms.full.push_back(full.recall1);
    arms.no_local.push_back(no_local.recall1);
    arms.no_hn.push_back(no_hn.recall1);
    arms.inter_only.push_back(inter_only.recall1);
    arms.one_hot.push_back(one_hot.recall1);
    if (seed <= kHnSeeds) arms.hn_acc.push_back(full.hn_accuracy);
    arms.gated.push_back(gated);
    arms.ungated.push_back(ungated);
    arms.pretrained.push_back(gated);
    arms.scratch.push_back(scratch_acc);

    const auto row = [&](const char* arm, double r, double hn, double vqa) {
      log << seed << ',' << arm << ',' << fmt("%.6f,%.6f,%.6f", r, hn, vqa) << '\n';
    };
    const double nan = std::nan("");
    row("full", full.recall1, full.hn_accuracy, gated);
    row("no_local", no_local.recall1, no_local.hn_accuracy, nan);
    row("no_hn", no_hn.recall1, nan, nan);
    row("inter_only", inter_only.recall1, inter_only.hn_accuracy, nan);
    row("one_hot", one_hot.recall1, one_hot.hn_accuracy, nan);
    row("ungated", nan, nan, ungated);
    row("scratch", nan, nan, scratch_acc);
    log.flush();
    std::printf("       seed %llu: R@1 full %.4f inter %.4f no-local %.4f one-hot %.4f no-HN %.4f | "
                "HN acc %.4f | VQA gated %.4f ungated %.4f scratch %.4f\n",
                (unsigned long long)seed, full.recall1, inter_only.recall1, no_local.recall1,
                one_hot.recall1, no_hn.recall1, full.hn_accuracy, gated, ungated, scratch_acc);
    std::fflush(stdout);
  }

  const auto delta = [&](const char* id, const char* name, const std::vector<double>& with,
                         const std::vector<double>& without) {
    const double d = mean(with) - mean(without);
    report(id, name, d >= 0, fmt("mean %.4f vs %.4f, delta %+.4f", mean(with), mean(without), d));
  };
  delta("7a", "+intra-modality vs inter-only (R@1)", arms.full, arms.inter_only);
  delta("7b", "+local alignment vs without (R@1)", arms.full, arms.no_local);
  delta("7c", "soft labels vs one-hot (R@1)", arms.full, arms.one_hot);
  delta("7d", "+hard-negative mining vs without (R@1)", arms.full, arms.no_hn);
  delta("7e", "gated fusion vs gate-ablated (VQA acc)", arms.gated, arms.ungated);
  delta("7f", "pretrained vs scratch fine-tune (VQA acc)", arms.pretrained, arms.scratch);

  const double hn = mean(arms.hn_acc);
  report("8", "held-out hard-negative accuracy", hn >= kHnFloor,
         fmt("mean %.4f over %llu seeds (floor %.2f)", hn, (unsigned long long)kHnSeeds, kHnFloor));
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::string(argv[1]) == "--no-training";
  try {
    gradient_suite();
    ot_bench();
    distribution_contracts();
    sampler();
    gate();
    if (!quick) training_criteria();
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criterion line(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
