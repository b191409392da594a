#include "unialign/layers.hpp"

#include <cmath>

namespace unialign {

Linear Linear::random(std::size_t in, std::size_t out, RngStream& rng, bool with_bias) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<Real> w(in * out);
  for (Real& x : w) x = static_cast<Real>(rng.normal(0.0, stddev));
  Linear l;
  l.weight = Tensor({in, out}, std::move(w), true);
  if (with_bias) l.bias = Tensor::zeros({1, out}, true);
  return l;
}

Linear Linear::zeros(std::size_t in, std::size_t out, bool with_bias) {
  Linear l;
  l.weight = Tensor::zeros({in, out}, true);
  if (with_bias) l.bias = Tensor::zeros({1, out}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.cols() != in()) {
    fail(ErrorCode::kDimension, "Linear: input " + to_string(x.shape()) + " does not match weight " +
                                    to_string(weight.shape()));
  }
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::make(std::size_t width) {
  return {Tensor::filled({1, width}, Real{1}, true), Tensor::zeros({1, width}, true)};
}

Tensor LayerNorm::operator()(const Tensor& x) const {
  return add_row(mul_row(layer_norm_rows(x), gain), shift);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".shift", shift});
}

MultiHeadAttention MultiHeadAttention::make(std::size_t width, std::size_t heads,
                                            RngStream& rng) {
  if (heads == 0 || width % heads != 0) {
    fail(ErrorCode::kConfig, "attention width " + std::to_string(width) +
                                 " is not divisible by " + std::to_string(heads) + " heads");
  }
  MultiHeadAttention a;
  a.query = Linear::random(width, width, rng);
  a.key = Linear::random(width, width, rng);
  a.value = Linear::random(width, width, rng);
  a.output = Linear::zeros(width, width);
  a.heads = heads;
  return a;
}

Tensor MultiHeadAttention::operator()(const Tensor& q_rows, std::span<const RowSpan> q_spans,
                                      const Tensor& kv_rows, std::span<const RowSpan> kv_spans,
                                      bool causal, std::vector<Real>* probs) const {
  if (q_spans.size() != kv_spans.size()) {
    fail(ErrorCode::kDimension, "attention: query and key/value span counts differ");
  }
  if (q_rows.cols() != query.in() || kv_rows.cols() != key.in()) {
    fail(ErrorCode::kDimension, "attention: width mismatch, query " + to_string(q_rows.shape()) +
                                    " key/value " + to_string(kv_rows.shape()) +
                                    " expected width " + std::to_string(query.in()));
  }
  std::vector<AttentionSegment> segs(q_spans.size());
  for (std::size_t s = 0; s < segs.size(); ++s)
    segs[s] = {q_spans[s].begin, q_spans[s].len, kv_spans[s].begin, kv_spans[s].len};
  const Tensor mixed =
      unialign::attention(query(q_rows), key(kv_rows), value(kv_rows), segs, heads, causal, probs);
  return output(mixed);
}

void MultiHeadAttention::collect(ParamList& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

FeedForward FeedForward::make(std::size_t width, std::size_t hidden, RngStream& rng) {
  return {LayerNorm::make(width), Linear::random(width, hidden, rng), Linear::zeros(hidden, width)};
}

Tensor FeedForward::operator()(const Tensor& x) const {
  return add(x, down(gelu(up(norm(x)))));
}

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rows() == 0) fail(ErrorCode::kEmpty, "cross_entropy: no rows");
  return scale(mean(pick_cols(log_softmax_rows(logits), labels)), Real{-1});
}

}  // namespace unialign
