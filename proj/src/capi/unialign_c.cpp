#include "unialign/unialign_c.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "unialign/config.hpp"
#include "unialign/corpus.hpp"
#include "unialign/diagnostics.hpp"
#include "unialign/error.hpp"
#include "unialign/model.hpp"
#include "unialign/train.hpp"

using namespace unialign;

struct ua_config {
  CorpusConfig corpus;
  TrainConfig train;
};

struct ua_corpus {
  Corpus corpus;
};

struct ua_model {
  Model model;
  KeyValues meta;
};

namespace {

thread_local std::string g_last_error;

ua_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return UA_ERR_INVALID_ARGUMENT;
    case ErrorCode::kConfig: return UA_ERR_CONFIG;
    case ErrorCode::kDimension: return UA_ERR_DIMENSION;
    case ErrorCode::kNumeric: return UA_ERR_NUMERIC;
    case ErrorCode::kDegenerate: return UA_ERR_DEGENERATE;
    case ErrorCode::kContract: return UA_ERR_CONTRACT;
    case ErrorCode::kIo: return UA_ERR_IO;
    case ErrorCode::kVocabulary: return UA_ERR_VOCABULARY;
    case ErrorCode::kDiverged: return UA_ERR_DIVERGED;
    case ErrorCode::kSize: return UA_ERR_SIZE;
    case ErrorCode::kEmpty: return UA_ERR_EMPTY;
  }
  return UA_ERR_INTERNAL;
}

template <class F>
ua_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return UA_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return UA_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return UA_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return UA_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) fail(ErrorCode::kInvalidArgument, std::string(what) + " is null");
}

void copy_out(const std::string& s, char* buf, std::size_t len) {
  require(buf, "buf");
  if (s.size() + 1 > len) {
    fail(ErrorCode::kSize, "buffer of " + std::to_string(len) + " bytes too small for " +
                               std::to_string(s.size() + 1));
  }
  std::memcpy(buf, s.c_str(), s.size() + 1);
}

ua_vqa_report to_c(const VqaReport& r) {
  ua_vqa_report out{};
  out.accuracy = r.accuracy;
  out.open_accuracy = r.open_accuracy;
  out.closed_accuracy = r.closed_accuracy;
  out.open_count = r.open_count;
  out.closed_count = r.closed_count;
  return out;
}

std::ofstream open_out(const char* path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, std::string("cannot open '") + path + "' for writing");
  os.precision(17);
  return os;
}

}  // namespace

extern "C" {

const char* ua_last_error(void) { return g_last_error.c_str(); }

const char* ua_status_name(ua_status status) {
  switch (status) {
    case UA_OK: return "ok";
    case UA_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case UA_ERR_CONFIG: return "config";
    case UA_ERR_DIMENSION: return "dimension";
    case UA_ERR_NUMERIC: return "numeric";
    case UA_ERR_DEGENERATE: return "degenerate";
    case UA_ERR_CONTRACT: return "contract";
    case UA_ERR_IO: return "io";
    case UA_ERR_VOCABULARY: return "vocabulary";
    case UA_ERR_DIVERGED: return "diverged";
    case UA_ERR_SIZE: return "size";
    case UA_ERR_EMPTY: return "empty";
    case UA_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* ua_version(void) { return "0.1.0"; }

ua_status ua_config_create(ua_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new ua_config();
  });
}

ua_status ua_config_load(const char* path, ua_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto cfg = std::make_unique<ua_config>();
    load_configs(path, &cfg->corpus, &cfg->train);
    *out = cfg.release();
  });
}

ua_status ua_config_update(ua_config* cfg, const char* path) {
  return guarded([&] {
    require(cfg, "cfg");
    require(path, "path");
    const KeyValues kv = load_key_values(path);
    CorpusConfig c = cfg->corpus;
    TrainConfig t = cfg->train;
    const auto uc = apply_config(c, kv);
    const auto ut = apply_config(t, kv);
    for (const auto& k : uc) {
      if (std::find(ut.begin(), ut.end(), k) != ut.end())
        fail(ErrorCode::kConfig, "unknown config key '" + k + "' in '" + path + "'");
    }
    validate(c);
    validate(t);
    cfg->corpus = c;
    cfg->train = t;
  });
}

ua_status ua_config_set(ua_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    const KeyValues kv{{key, value}};
    CorpusConfig c = cfg->corpus;
    TrainConfig t = cfg->train;
    const bool in_corpus = apply_config(c, kv).empty();
    const bool in_train = apply_config(t, kv).empty();
    if (!in_corpus && !in_train) fail(ErrorCode::kConfig, std::string("unknown config key '") + key + "'");
    cfg->corpus = c;
    cfg->train = t;
  });
}

ua_status ua_config_get(const ua_config* cfg, const char* key, char* buf, size_t len) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    for (const KeyValues& kvs : {to_key_values(cfg->corpus), to_key_values(cfg->train)}) {
      for (const auto& [k, v] : kvs) {
        if (k == key) {
          copy_out(v, buf, len);
          return;
        }
      }
    }
    fail(ErrorCode::kConfig, std::string("unknown config key '") + key + "'");
  });
}

void ua_config_free(ua_config* cfg) { delete cfg; }

ua_status ua_corpus_generate(const ua_config* cfg, ua_corpus** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = new ua_corpus{generate_corpus(cfg->corpus)};
  });
}

ua_status ua_corpus_save(const ua_corpus* corpus, const char* dir) {
  return guarded([&] {
    require(corpus, "corpus");
    require(dir, "dir");
    save_corpus(corpus->corpus, dir);
  });
}

ua_status ua_corpus_load(const char* dir, ua_corpus** out) {
  return guarded([&] {
    require(dir, "dir");
    require(out, "out");
    *out = new ua_corpus{load_corpus(dir)};
  });
}

ua_status ua_corpus_info_get(const ua_corpus* corpus, ua_corpus_info* out) {
  return guarded([&] {
    require(corpus, "corpus");
    require(out, "out");
    const Corpus& c = corpus->corpus;
    out->train = c.train.size();
    out->eval = c.eval.size();
    out->vqa_train = c.vqa_train.size();
    out->vqa_eval = c.vqa_eval.size();
    out->answers = c.answers.size();
    out->patches = c.config.patches;
    out->text_tokens = c.config.text_tokens;
    out->feature_width = c.config.feature_width;
  });
}

void ua_corpus_free(ua_corpus* corpus) { delete corpus; }

ua_status ua_model_create(const ua_config* cfg, const ua_corpus* corpus, ua_model** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(corpus, "corpus");
    require(out, "out");
    *out = new ua_model{make_model(cfg->train, corpus->corpus), {}};
  });
}

ua_status ua_model_load(const char* path, ua_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    KeyValues meta;
    Model m = load_model(path, &meta);
    KeyValues extra;
    for (const auto& [k, v] : meta) {
      if (k.rfind("user.", 0) == 0) extra.emplace_back(k.substr(5), v);
    }
    *out = new ua_model{std::move(m), std::move(extra)};
  });
}

ua_status ua_model_save(const ua_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    KeyValues extra;
    for (const auto& [k, v] : model->meta) extra.emplace_back("user." + k, v);
    save_model(model->model, path, extra);
  });
}

ua_status ua_model_set_meta(ua_model* model, const char* key, const char* value) {
  return guarded([&] {
    require(model, "model");
    require(key, "key");
    require(value, "value");
    for (auto& [k, v] : model->meta) {
      if (k == key) {
        v = value;
        return;
      }
    }
    model->meta.emplace_back(key, value);
  });
}

ua_status ua_model_get_meta(const ua_model* model, const char* key, char* buf, size_t len) {
  return guarded([&] {
    require(model, "model");
    require(key, "key");
    for (const auto& [k, v] : model->meta) {
      if (k == key) {
        copy_out(v, buf, len);
        return;
      }
    }
    fail(ErrorCode::kInvalidArgument, std::string("model has no meta '") + key + "'");
  });
}

ua_status ua_model_config(const ua_model* model, ua_config** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    auto cfg = std::make_unique<ua_config>();
    cfg->train = model->model.config;
    *out = cfg.release();
  });
}

void ua_model_free(ua_model* model) { delete model; }

ua_status ua_pretrain(ua_model* model, const ua_corpus* corpus, const ua_config* cfg,
                      const char* metrics_csv, ua_progress_fn progress, void* user) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    const TrainConfig& tc = cfg ? cfg->train : model->model.config;
    ProgressFn fn;
    if (progress) {
      fn = [&](const EpochMetrics& m) {
        const ua_epoch_metrics c{m.stage,  m.epoch,   m.loss_global, m.loss_local,
                                 m.loss_hn, m.recall1, m.recall5,     m.hn_accuracy};
        progress(&c, user);
      };
    }
    const PretrainReport report = pretrain(model->model, corpus->corpus, tc, fn);
    if (metrics_csv) write_metrics_csv(metrics_csv, report.epochs);
  });
}

ua_status ua_finetune(ua_model* model, const ua_corpus* corpus, const ua_config* cfg,
                      ua_vqa_report* out) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    TrainConfig tc = cfg ? cfg->train : model->model.config;
    const VqaReport r = finetune_vqa(model->model, corpus->corpus, tc);
    if (out) *out = to_c(r);
  });
}

ua_status ua_evaluate(const ua_model* model, const ua_corpus* corpus, ua_eval_report* out) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    require(out, "out");
    const Model& m = model->model;
    const Corpus& c = corpus->corpus;
    *out = ua_eval_report{};
    const RetrievalMetrics r = evaluate_retrieval(m, c.eval);
    out->recall1 = r.recall1;
    out->recall5 = r.recall5;
    out->retrieval_count = r.count;
    out->hn_accuracy = evaluate_hn_accuracy(m, c.eval, c.teacher, m.config, m.config.seed);
    if (m.has_vqa && !c.vqa_eval.empty()) {
      out->has_vqa = 1;
      out->vqa = to_c(evaluate_vqa(m, c.vqa_eval));
    }
  });
}

ua_status ua_gradcheck(uint64_t seed, ua_line_fn line, void* user, size_t* failures) {
  return guarded([&] {
    std::size_t failed = 0;
    for (const GradCheckEntry& e : run_gradcheck_suite(seed)) {
      if (!e.passed) ++failed;
      if (line) {
        std::ostringstream os;
        os << (e.passed ? "PASS " : "FAIL ") << e.name << " max_rel=" << e.max_rel_error
           << " tol=" << e.tolerance << " coords=" << e.coordinates;
        line(os.str().c_str(), user);
      }
    }
    if (failures) *failures = failed;
  });
}

ua_status ua_ot_bench(size_t trials_per_size, uint64_t seed, const ua_config* cfg,
                      const char* csv_path, ua_ot_bench_report* out) {
  return guarded([&] {
    const IpotConfig ipc = cfg ? ipot_config(cfg->train) : IpotConfig{};
    const OtBenchReport r = run_ot_bench(trials_per_size, seed, ipc);
    if (csv_path) {
      std::ofstream os = open_out(csv_path);
      write_ot_bench_csv(os, r, ipc.beta);
    }
    if (out) {
      out->trials = r.trials.size();
      out->failures = r.failures;
      out->max_gap = r.max_gap;
      out->max_residual = r.max_residual;
    }
  });
}

ua_status ua_ot_solve(const double* cost, size_t p, size_t t, const ua_config* cfg, double* plan,
                      double* value, double* residual) {
  return guarded([&] {
    require(cost, "cost");
    require(plan, "plan");
    if (p == 0 || t == 0) fail(ErrorCode::kEmpty, "ua_ot_solve: empty cost matrix");
    Tensor c = Tensor::zeros({p, t});
    for (std::size_t i = 0; i < p * t; ++i) c.data_mut()[i] = static_cast<Real>(cost[i]);
    const IpotConfig ipc = cfg ? ipot_config(cfg->train) : IpotConfig{};
    const TransportPlan tp = ipot(c, ipc);
    std::copy(tp.plan.begin(), tp.plan.end(), plan);
    if (value) *value = tp.value(c);
    if (residual) *residual = tp.marginal_residual;
  });
}

ua_status ua_heatmap(const ua_model* model, const ua_corpus* corpus, size_t sample,
                     const char* csv_path) {
  return guarded([&] {
    require(model, "model");
    require(corpus, "corpus");
    require(csv_path, "csv_path");
    const Heatmap h = heatmap(model->model, corpus->corpus, sample);
    std::ofstream os = open_out(csv_path);
    write_plan_csv(os, h.plan, h.beta);
    if (h.gate.defined()) {
      os << "gate\n";
      for (std::size_t i = 0; i < h.gate.rows(); ++i) {
        for (std::size_t j = 0; j < h.gate.cols(); ++j)
          os << (j ? "," : "") << static_cast<double>(h.gate.at(i, j));
        os << '\n';
      }
    }
  });
}

}  // extern "C"
