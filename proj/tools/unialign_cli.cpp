#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "unialign/unialign_c.h"

namespace {

struct Failure {
  ua_status status;
};

void check(ua_status s) {
  if (s != UA_OK) throw Failure{s};
}

template <class T, void (*Free)(T*)>
struct Owned {
  T* p = nullptr;
  ~Owned() { Free(p); }
  T** out() { return &p; }
};
using Config = Owned<ua_config, ua_config_free>;
using CorpusH = Owned<ua_corpus, ua_corpus_free>;
using ModelH = Owned<ua_model, ua_model_free>;

std::string fmt(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_epoch(const ua_epoch_metrics* m, void*) {
  std::printf("stage %d epoch %zu  global %s  local %s  hn %s  R@1 %s  R@5 %s  hn_acc %s\n",
              m->stage, m->epoch, fmt(m->loss_global).c_str(), fmt(m->loss_local).c_str(),
              fmt(m->loss_hn).c_str(), fmt(m->recall1).c_str(), fmt(m->recall5).c_str(),
              fmt(m->hn_accuracy).c_str());
  std::fflush(stdout);
}

void print_vqa(const ua_vqa_report& r) {
  std::printf("vqa accuracy %.4f  open %.4f (%zu)  closed %.4f (%zu)\n", r.accuracy,
              r.open_accuracy, r.open_count, r.closed_accuracy, r.closed_count);
}

std::string meta_or(const ua_model* m, const char* key) {
  char buf[4096];
  if (ua_model_get_meta(m, key, buf, sizeof buf) != UA_OK) return {};
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unialign: unified image-text alignment with hard negatives and gated fusion"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_dir, ckpt_path, vqa_dir, csv_path;
  std::size_t trials = 100, sample = 0;
  std::uint64_t seed = 1;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--config", config_path, "Key-value config file");
  gen->add_option("--out", out_path, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Two-stage alignment pretraining");
  pre->add_option("--data", data_dir, "Corpus directory")->required();
  pre->add_option("--config", config_path, "Key-value config file");
  pre->add_option("--out", out_path, "Output checkpoint")->required();
  pre->add_option("--metrics", csv_path, "Metrics CSV (default <out>.metrics.csv)");

  auto* fin = app.add_subcommand("finetune", "VQA fine-tuning");
  fin->add_option("--ckpt", ckpt_path, "Pretrained checkpoint")->required();
  fin->add_option("--vqa", vqa_dir, "Corpus directory with VQA splits")->required();
  fin->add_option("--config", config_path, "Overrides for the stored training config");
  fin->add_option("--out", out_path, "Output checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "Retrieval, hard-negative and VQA metrics");
  ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  ev->add_option("--data", data_dir, "Corpus directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--seed", seed, "Seed");

  auto* ot = app.add_subcommand("ot-bench", "IPOT against the exact permutation optimum");
  ot->add_option("--trials", trials, "Trials per size (4x4 and 5x5)");
  ot->add_option("--seed", seed, "Seed");
  ot->add_option("--config", config_path, "Solver settings (ipot_* keys)");
  ot->add_option("--out", csv_path, "Dump every plan as CSV");

  auto* hm = app.add_subcommand("heatmap", "Transport plan and gate values of one sample");
  hm->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  hm->add_option("--sample", sample, "Held-out sample index");
  hm->add_option("--out", out_path, "Output CSV")->required();
  hm->add_option("--data", data_dir, "Corpus directory (default: the one used for pretraining)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      Config cfg;
      check(config_path.empty() ? ua_config_create(cfg.out())
                                : ua_config_load(config_path.c_str(), cfg.out()));
      CorpusH corpus;
      check(ua_corpus_generate(cfg.p, corpus.out()));
      check(ua_corpus_save(corpus.p, out_path.c_str()));
      ua_corpus_info info{};
      check(ua_corpus_info_get(corpus.p, &info));
      std::printf("wrote %s: %zu train, %zu eval, %zu vqa train, %zu vqa eval, %zu answers\n",
                  out_path.c_str(), info.train, info.eval, info.vqa_train, info.vqa_eval,
                  info.answers);
    } else if (*pre) {
      Config cfg;
      check(config_path.empty() ? ua_config_create(cfg.out())
                                : ua_config_load(config_path.c_str(), cfg.out()));
      CorpusH corpus;
      check(ua_corpus_load(data_dir.c_str(), corpus.out()));
      ModelH model;
      check(ua_model_create(cfg.p, corpus.p, model.out()));
      if (csv_path.empty()) csv_path = out_path + ".metrics.csv";
      check(ua_pretrain(model.p, corpus.p, cfg.p, csv_path.c_str(), print_epoch, nullptr));
      const std::string abs = std::filesystem::absolute(data_dir).string();
      check(ua_model_set_meta(model.p, "data_dir", abs.c_str()));
      check(ua_model_save(model.p, out_path.c_str()));
      std::printf("wrote %s and %s\n", out_path.c_str(), csv_path.c_str());
    } else if (*fin) {
      ModelH model;
      check(ua_model_load(ckpt_path.c_str(), model.out()));
      Config cfg;
      check(ua_model_config(model.p, cfg.out()));
      if (!config_path.empty()) check(ua_config_update(cfg.p, config_path.c_str()));
      CorpusH corpus;
      check(ua_corpus_load(vqa_dir.c_str(), corpus.out()));
      ua_vqa_report r{};
      check(ua_finetune(model.p, corpus.p, cfg.p, &r));
      print_vqa(r);
      check(ua_model_save(model.p, out_path.c_str()));
      std::printf("wrote %s\n", out_path.c_str());
    } else if (*ev) {
      ModelH model;
      check(ua_model_load(ckpt_path.c_str(), model.out()));
      CorpusH corpus;
      check(ua_corpus_load(data_dir.c_str(), corpus.out()));
      ua_eval_report r{};
      check(ua_evaluate(model.p, corpus.p, &r));
      std::printf("retrieval R@1 %.4f  R@5 %.4f  (%zu pairs)\n", r.recall1, r.recall5,
                  r.retrieval_count);
      std::printf("hard-negative accuracy %.4f\n", r.hn_accuracy);
      if (r.has_vqa) print_vqa(r.vqa);
    } else if (*gc) {
      std::size_t failures = 0;
      check(ua_gradcheck(
          seed, [](const char* line, void*) { std::printf("%s\n", line); }, nullptr, &failures));
      std::printf("%zu failed\n", failures);
      return failures == 0 ? 0 : 1;
    } else if (*ot) {
      Config cfg;
      if (!config_path.empty()) check(ua_config_load(config_path.c_str(), cfg.out()));
      ua_ot_bench_report r{};
      check(ua_ot_bench(trials, seed, cfg.p, csv_path.empty() ? nullptr : csv_path.c_str(), &r));
      std::printf("%zu trials  max |gap| %.3e  max residual %.3e  failures %zu\n", r.trials,
                  r.max_gap, r.max_residual, r.failures);
      return r.failures == 0 ? 0 : 1;
    } else if (*hm) {
      ModelH model;
      check(ua_model_load(ckpt_path.c_str(), model.out()));
      if (data_dir.empty()) data_dir = meta_or(model.p, "data_dir");
      if (data_dir.empty()) {
        std::fprintf(stderr, "error: checkpoint does not record its corpus; pass --data\n");
        return 2;
      }
      CorpusH corpus;
      check(ua_corpus_load(data_dir.c_str(), corpus.out()));
      check(ua_heatmap(model.p, corpus.p, sample, out_path.c_str()));
      std::printf("wrote %s\n", out_path.c_str());
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error (%s): %s\n", ua_status_name(f.status), ua_last_error());
    return 1;
  }
  return 0;
}
