#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "unialign/layers.hpp"

namespace unialign {

/// One generated study: two image views and a report as raw token features,
/// plus the generative latent and cluster that only the teacher may see.
struct RawSample {
  Tensor view1;   // p×f
  Tensor view2;   // p×f
  Tensor report;  // t×f
  Tensor latent;  // 1×k
  std::size_t cluster = 0;
};

/// Student encodings of one study. Row 0 of every token matrix is CLS.
struct EncodedSample {
  Tensor v1;      // (p+1)×d
  Tensor v2;      // (p+1)×d
  Tensor r;       // (t+1)×d
  Tensor latent;  // metadata only
  std::size_t cluster_id = 0;
};

struct EncoderConfig {
  std::size_t feature_width = 16;
  std::size_t hidden_width = 64;
  std::size_t embed_dim = 32;
  std::size_t max_tokens = 32;  // learned positions
  Real dropout = 0;
};

/// Token-wise two-layer MLP (with a learned position added to the hidden
/// pre-activation) and a learned CLS embedding refined by attention pooling
/// over the token outputs.
class TokenEncoder {
 public:
  struct Batch {
    Tensor tokens;  // (count*per_sample)×d, CLS excluded
    Tensor cls;     // count×d
    std::size_t count = 0;
    std::size_t per_sample = 0;

    /// (per_sample+1)×d token matrix of sample b with CLS in row 0.
    Tensor sample(std::size_t b) const;
    /// Token rows of sample b without CLS.
    Tensor body(std::size_t b) const;
  };

  TokenEncoder() = default;
  TokenEncoder(const EncoderConfig& cfg, RngStream& init);

  /// Encodes samples sharing one token count. Dropout is applied to the
  /// hidden layer only when `dropout_rng` is non-null and the rate is > 0.
  Batch encode(std::span<const Tensor> raw, RngStream* dropout_rng = nullptr) const;

  const EncoderConfig& config() const { return cfg_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  EncoderConfig cfg_;
  Linear hidden_;
  Linear output_;
  Tensor position_;  // max_tokens×hidden
  Tensor cls_;
  Linear pool_query_;
};

Tensor encode_image(const TokenEncoder& encoder, const Tensor& raw_view);
Tensor encode_text(const TokenEncoder& encoder, const Tensor& raw_tokens,
                   RngStream* dropout_rng = nullptr);

struct TeacherEmbeddings {
  Tensor view1;  // N×d_T, unit rows
  Tensor view2;
  Tensor text;
};

/// Frozen stand-in for a pre-trained image/text model: a fixed linear map of
/// the true latent, with small per-view offsets on the image side.
class TeacherOracle {
 public:
  TeacherOracle() = default;
  TeacherOracle(Tensor image_map, Tensor text_map, Tensor view1_offset, Tensor view2_offset);

  /// Image map is random; the text map is the image map plus a perturbation
  /// of relative size `text_gap`, so paired embeddings are close but not equal.
  static TeacherOracle generate(std::size_t latent_dim, std::size_t teacher_dim, RngStream& rng,
                                Real text_gap = Real(0.15), Real offset_scale = Real(0.05));

  TeacherEmbeddings embed(const Tensor& latents) const;
  TeacherEmbeddings embed(const EncodedSample& sample) const;

  std::uint64_t checksum() const;
  std::size_t latent_dim() const { return image_map_.rows(); }
  std::size_t teacher_dim() const { return image_map_.cols(); }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Tensor image_map_;
  Tensor text_map_;
  Tensor view1_offset_;
  Tensor view2_offset_;
};

}  // namespace unialign
