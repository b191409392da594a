#include "unialign/encoders.hpp"

#include <cmath>
#include <functional>
#include <string_view>

namespace unialign {

TokenEncoder::TokenEncoder(const EncoderConfig& cfg, RngStream& init) : cfg_(cfg) {
  if (cfg.feature_width == 0 || cfg.hidden_width == 0 || cfg.embed_dim < 2 || cfg.max_tokens == 0) {
    fail(ErrorCode::kConfig, "TokenEncoder: widths must be positive and embed_dim >= 2");
  }
  hidden_ = Linear::random(cfg.feature_width, cfg.hidden_width, init);
  output_ = Linear::random(cfg.hidden_width, cfg.embed_dim, init);
  std::vector<Real> pos(cfg.max_tokens * cfg.hidden_width);
  for (Real& x : pos) x = static_cast<Real>(init.normal(0.0, 0.5));
  position_ = Tensor({cfg.max_tokens, cfg.hidden_width}, std::move(pos), true);
  std::vector<Real> c(cfg.embed_dim);
  for (Real& x : c) x = static_cast<Real>(init.normal(0.0, 0.5));
  cls_ = Tensor({1, cfg.embed_dim}, std::move(c), true);
  pool_query_ = Linear::random(cfg.embed_dim, cfg.embed_dim, init, false);
}

TokenEncoder::Batch TokenEncoder::encode(std::span<const Tensor> raw,
                                         RngStream* dropout_rng) const {
  if (raw.empty()) fail(ErrorCode::kEmpty, "TokenEncoder: empty batch");
  const std::size_t p = raw.front().rows();
  for (const Tensor& x : raw) {
    if (x.cols() != cfg_.feature_width) {
      fail(ErrorCode::kConfig, "TokenEncoder: feature width " + std::to_string(x.cols()) +
                                   " does not match configured width " +
                                   std::to_string(cfg_.feature_width));
    }
    if (x.rows() != p || p == 0) {
      fail(ErrorCode::kDimension, "TokenEncoder: samples in a batch must share a token count");
    }
  }
  if (p > cfg_.max_tokens) {
    fail(ErrorCode::kDimension, "TokenEncoder: " + std::to_string(p) + " tokens exceed max_tokens " +
                                    std::to_string(cfg_.max_tokens));
  }
  const std::size_t b = raw.size();
  const std::size_t d = cfg_.embed_dim;

  Tensor stacked = raw.size() == 1 ? raw.front() : concat_rows({raw.begin(), raw.end()});
  std::vector<std::size_t> pos(b * p);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % p;
  Tensor h = gelu(add(hidden_(stacked), gather_rows(position_, pos)));
  if (dropout_rng && cfg_.dropout > 0) h = dropout(h, cfg_.dropout, *dropout_rng);
  Tensor tokens = output_(h);

  // CLS = c + softmax_j(<tokens_j, c·Wq> / sqrt(d)) · tokens
  Tensor q = pool_query_(cls_);
  Tensor scores = scale(matmul(tokens, transpose(q)), Real{1} / std::sqrt(Real(d)));
  Tensor weights = softmax_rows(scores.reshape({b, p}));
  Tensor cls = add_row(segment_pool(weights, tokens), cls_);
  return {tokens, cls, b, p};
}

Tensor TokenEncoder::Batch::sample(std::size_t b) const {
  return concat_rows({slice_rows(cls, b, b + 1), body(b)});
}

Tensor TokenEncoder::Batch::body(std::size_t b) const {
  return slice_rows(tokens, b * per_sample, (b + 1) * per_sample);
}

void TokenEncoder::collect(ParamList& out, const std::string& prefix) const {
  hidden_.collect(out, prefix + ".hidden");
  output_.collect(out, prefix + ".output");
  out.push_back({prefix + ".position", position_});
  out.push_back({prefix + ".cls", cls_});
  pool_query_.collect(out, prefix + ".pool_query");
}

Tensor encode_image(const TokenEncoder& encoder, const Tensor& raw_view) {
  return encoder.encode(std::span<const Tensor>(&raw_view, 1)).sample(0);
}

Tensor encode_text(const TokenEncoder& encoder, const Tensor& raw_tokens,
                   RngStream* dropout_rng) {
  return encoder.encode(std::span<const Tensor>(&raw_tokens, 1), dropout_rng).sample(0);
}

// ---------------------------------------------------------------------------

TeacherOracle::TeacherOracle(Tensor image_map, Tensor text_map, Tensor view1_offset,
                             Tensor view2_offset)
    : image_map_(image_map.detach()),
      text_map_(text_map.detach()),
      view1_offset_(view1_offset.detach()),
      view2_offset_(view2_offset.detach()) {
  if (image_map_.shape() != text_map_.shape() || view1_offset_.rows() != 1 ||
      view1_offset_.cols() != image_map_.cols() || view2_offset_.shape() != view1_offset_.shape()) {
    fail(ErrorCode::kDimension, "TeacherOracle: inconsistent parameter shapes");
  }
}

TeacherOracle TeacherOracle::generate(std::size_t latent_dim, std::size_t teacher_dim,
                                      RngStream& rng, Real text_gap, Real offset_scale) {
  const double s = 1.0 / std::sqrt(static_cast<double>(latent_dim));
  std::vector<Real> img(latent_dim * teacher_dim), txt(latent_dim * teacher_dim);
  for (Real& x : img) x = static_cast<Real>(rng.normal(0.0, s));
  for (std::size_t i = 0; i < txt.size(); ++i)
    txt[i] = img[i] + static_cast<Real>(rng.normal(0.0, s * text_gap));
  std::vector<Real> o1(teacher_dim), o2(teacher_dim);
  for (Real& x : o1) x = static_cast<Real>(rng.normal(0.0, offset_scale));
  for (Real& x : o2) x = static_cast<Real>(rng.normal(0.0, offset_scale));
  return TeacherOracle(Tensor({latent_dim, teacher_dim}, std::move(img)),
                       Tensor({latent_dim, teacher_dim}, std::move(txt)),
                       Tensor({1, teacher_dim}, std::move(o1)),
                       Tensor({1, teacher_dim}, std::move(o2)));
}

TeacherEmbeddings TeacherOracle::embed(const Tensor& latents) const {
  if (latents.cols() != image_map_.rows()) {
    fail(ErrorCode::kDimension, "TeacherOracle: latent " + to_string(latents.shape()) +
                                    " does not match map " + to_string(image_map_.shape()));
  }
  NoGradGuard guard;
  Tensor image = matmul(latents, image_map_);
  return {l2_normalize_rows(add_row(image, view1_offset_)),
          l2_normalize_rows(add_row(image, view2_offset_)),
          l2_normalize_rows(matmul(latents, text_map_))};
}

TeacherEmbeddings TeacherOracle::embed(const EncodedSample& sample) const {
  if (!sample.latent.defined()) fail(ErrorCode::kContract, "TeacherOracle: sample has no latent");
  return embed(sample.latent.reshape({1, sample.latent.numel()}));
}

std::uint64_t TeacherOracle::checksum() const {
  // FNV-1a over the raw parameter bytes.
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor* t : {&image_map_, &text_map_, &view1_offset_, &view2_offset_}) {
    const auto d = t->data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (std::size_t i = 0; i < d.size() * sizeof(Real); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

void TeacherOracle::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".image_map", image_map_});
  out.push_back({prefix + ".text_map", text_map_});
  out.push_back({prefix + ".view1_offset", view1_offset_});
  out.push_back({prefix + ".view2_offset", view2_offset_});
}

}  // namespace unialign
