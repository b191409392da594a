#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unialign/corpus.hpp"
#include "unialign/hard_negative.hpp"
#include "unialign/local_align.hpp"
#include "unialign/model.hpp"

namespace unialign {

struct EpochMetrics {
  int stage = 1;
  std::size_t epoch = 0;
  double loss_global = 0;
  double loss_local = 0;
  double loss_hn = 0;
  double recall1 = 0;
  double recall5 = 0;
  double hn_accuracy = 0;  // NaN in stage 1
};

/// How often each loss was evaluated during a stage.
struct StageCounters {
  std::size_t steps = 0;
  std::size_t global = 0;
  std::size_t local = 0;
  std::size_t hn = 0;
};

struct PretrainReport {
  std::vector<EpochMetrics> epochs;
  StageCounters stage1;
  StageCounters stage2;
};

struct RetrievalMetrics {
  double recall1 = 0;
  double recall5 = 0;
  std::size_t count = 0;
};

struct VqaReport {
  double accuracy = 0;
  double open_accuracy = 0;
  double closed_accuracy = 0;
  std::size_t open_count = 0;
  std::size_t closed_count = 0;
  std::vector<double> epoch_loss;
};

/// Transport plans recorded on a first evaluation and replayed afterwards,
/// so finite-difference probes see the same constant plans.
struct PlanCache {
  std::vector<TransportPlan> plans;
  bool frozen = false;
  std::size_t next = 0;
};

struct Objective {
  Tensor total;
  Tensor global;  // undefined when the stage does not evaluate it
  Tensor local;
  Tensor hn;
};

/// The stage-`stage` pretraining objective on `batch` (indices into
/// corpus.train), without an optimizer step. Views, dropout masks and
/// negatives come from streams keyed by `seed`, so repeated calls agree.
Objective pretrain_objective(const Model& model, const Corpus& corpus,
                             const std::vector<std::size_t>& batch, const TrainConfig& cfg,
                             int stage, std::uint64_t seed, PlanCache* plans = nullptr);

/// Decoder loss on `batch` (indices into corpus.vqa_train); needs VQA parts.
Tensor vqa_objective(const Model& model, const Corpus& corpus,
                     const std::vector<std::size_t>& batch, std::uint64_t seed);

/// Model sized for the corpus token counts and feature width.
Model make_model(const TrainConfig& cfg, const Corpus& corpus);

using ProgressFn = std::function<void(const EpochMetrics&)>;

/// Stage 1 trains the global loss; stage 2 trains local + hard-negative
/// losses (plus the global loss when `stage2_global`).
PretrainReport pretrain(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                        const ProgressFn& progress = {});

/// Image (view 1) to report retrieval through the i2t head; the true report
/// must outrank every other, ties counted against it.
RetrievalMetrics evaluate_retrieval(const Model& model, const std::vector<RawSample>& samples);

/// Pair-classifier accuracy on batches of `samples` with teacher-sampled
/// negatives.
double evaluate_hn_accuracy(const Model& model, const std::vector<RawSample>& samples,
                            const TeacherOracle& teacher, const TrainConfig& cfg,
                            std::uint64_t seed);

/// Fine-tunes on corpus.vqa_train and reports accuracy on corpus.vqa_eval.
/// With init_from_pretrained = false the backbone is re-drawn first.
VqaReport finetune_vqa(Model& model, const Corpus& corpus, const TrainConfig& cfg);
VqaReport evaluate_vqa(const Model& model, const std::vector<VqaSample>& samples);

std::string metrics_csv(const std::vector<EpochMetrics>& epochs);
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& epochs);

IpotConfig ipot_config(const TrainConfig& cfg);

/// Fused view-1/report pair of one sample with its transport plan and, when
/// the model has VQA parts, the fusion gate of one VQA sample.
struct Heatmap {
  TransportPlan plan;
  double beta = 0;
  Tensor gate;  // undefined without VQA parts
};
Heatmap heatmap(const Model& model, const Corpus& corpus, std::size_t sample);
void write_plan_csv(std::ostream& os, const TransportPlan& plan, double beta);

}  // namespace unialign
