#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "unialign/gradcheck.hpp"
#include "unialign/rng.hpp"
#include "unialign/tensor.hpp"

namespace unialign {

using ParamList = std::vector<NamedTensor>;

/// Affine map x·W + b over the rows of x. W is in×out, b is 1×out.
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias

  static Linear random(std::size_t in, std::size_t out, RngStream& rng, bool with_bias = true);
  static Linear zeros(std::size_t in, std::size_t out, bool with_bias = true);

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Row layer normalization with learned gain and shift.
struct LayerNorm {
  Tensor gain;
  Tensor shift;

  static LayerNorm make(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Contiguous run of rows inside a row-stacked batch.
struct RowSpan {
  std::size_t begin = 0;
  std::size_t len = 0;
};

/// Multi-head attention with input projections and an output projection that
/// starts at zero, so a residual block built on it is the identity at init.
struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention make(std::size_t width, std::size_t heads, RngStream& rng);

  /// Query rows `q_spans[s]` attend to key/value rows `kv_spans[s]`.
  Tensor operator()(const Tensor& q_rows, std::span<const RowSpan> q_spans,
                    const Tensor& kv_rows, std::span<const RowSpan> kv_spans, bool causal = false,
                    std::vector<Real>* probs = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Pre-norm feed-forward residual: x + W2·gelu(W1·LN(x)), W2 zero at init.
struct FeedForward {
  LayerNorm norm;
  Linear up;
  Linear down;

  static FeedForward make(std::size_t width, std::size_t hidden, RngStream& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Mean cross-entropy of row logits against class labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace unialign
