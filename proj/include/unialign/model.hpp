#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unialign/config.hpp"
#include "unialign/encoders.hpp"
#include "unialign/fusion.hpp"
#include "unialign/global_align.hpp"
#include "unialign/layers.hpp"

namespace unialign {

/// Every trainable part of the system. The VQA parts exist only after
/// init_vqa().
struct Model {
  TrainConfig config;
  std::size_t feature_width = 0;
  std::size_t max_tokens = 0;

  TokenEncoder image_encoder;
  TokenEncoder text_encoder;
  ProjectionHeads heads;
  CoAttention co_attention;
  Linear pair_head;  // 2d -> 2

  bool has_vqa = false;
  AnswerVocabulary vocabulary;
  KnowledgeEncoder knowledge;
  GatedFusion fusion;
  AnswerDecoder decoder;

  Model() = default;
  Model(const TrainConfig& cfg, std::size_t feature_width, std::size_t max_tokens);

  /// Re-draws encoders, heads and co-attention from `seed`.
  void reset_backbone(std::uint64_t seed);
  /// Creates knowledge encoder, fusion block and decoder for `vocab`.
  void init_vqa(const AnswerVocabulary& vocab, std::uint64_t seed);

  ParamList encoder_params() const;
  /// Heads, co-attention and pair classifier.
  ParamList alignment_params() const;
  ParamList vqa_params() const;
  ParamList params() const;
};

/// Checkpoint: an archive of all parameters plus the config, vocabulary and
/// any caller metadata.
void save_model(const Model& model, const std::string& path,
                const std::vector<std::pair<std::string, std::string>>& extra_meta = {});
Model load_model(const std::string& path,
                 std::vector<std::pair<std::string, std::string>>* meta_out = nullptr);

}  // namespace unialign
