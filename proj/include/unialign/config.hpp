#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace unialign {

/// Synthetic corpus shape. Keys in config files match the field names.
struct CorpusConfig {
  std::size_t num_samples = 512;   // training studies
  std::size_t eval_samples = 128;  // held-out studies
  std::size_t clusters = 8;
  std::size_t latent_dim = 16;
  std::size_t patches = 8;
  std::size_t text_tokens = 12;
  std::size_t feature_width = 16;
  double view_noise = 0.2;
  double text_noise = 0.2;
  double cluster_spread = 1.0;  // within-cluster latent jitter
  std::size_t teacher_dim = 16;
  std::size_t vqa_train_samples = 512;
  std::size_t vqa_eval_samples = 256;
  std::uint64_t seed = 7;
};

struct TrainConfig {
  std::size_t stage1_epochs = 30;
  std::size_t stage2_epochs = 15;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double stage2_learning_rate = 1e-3;
  double weight_decay = 0.01;
  double tau1 = 0.07;
  double tau2 = 0.07;
  double tau3 = 0.07;
  double lambda = 0.01;
  double w_local = 1.0;
  double w_hn = 1.0;
  std::string optimizer = "adamw";
  std::uint64_t seed = 1;

  // Model widths.
  std::size_t embed_dim = 32;
  std::size_t hidden_width = 64;
  std::size_t proj_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_width = 64;
  double text_dropout = 0.1;
  double attention_dropout = 0.0;

  // Ablation switches.
  bool inter_alignment = true;
  bool intra_alignment = true;
  bool soft_labels = true;
  bool stage2_global = false;   // keep the global loss active in stage 2
  bool freeze_encoders = false; // stage 2 trains fusion and heads only

  // Transport solver.
  double ipot_beta = 0.5;
  std::size_t ipot_outer_iters = 200;
  std::size_t ipot_inner_iters = 1;
  double ipot_tolerance = 1e-4;

  // Fine-tuning.
  std::size_t finetune_epochs = 15;
  double finetune_learning_rate = 1e-3;
  bool finetune_backbone = true;  // false: only knowledge, fusion and decoder train
  bool gated_fusion = true;
  bool init_from_pretrained = true;
};

void validate(const CorpusConfig& cfg);
void validate(const TrainConfig& cfg);

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Flat `key = value` text; '#' starts a comment, blank lines are skipped.
KeyValues parse_key_values(const std::string& text);
KeyValues load_key_values(const std::string& path);

/// Applies every key the config knows. Returns the keys it did not use.
std::vector<std::string> apply_config(CorpusConfig& cfg, const KeyValues& kv);
std::vector<std::string> apply_config(TrainConfig& cfg, const KeyValues& kv);

KeyValues to_key_values(const CorpusConfig& cfg);
KeyValues to_key_values(const TrainConfig& cfg);

/// Loads a file that may mix corpus and training keys; any key known to
/// neither is a config error.
void load_configs(const std::string& path, CorpusConfig* corpus, TrainConfig* train);

}  // namespace unialign
