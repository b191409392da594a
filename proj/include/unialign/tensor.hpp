#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unialign/error.hpp"

namespace unialign {

#ifdef UNIALIGN_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

class RngStream;

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until the node takes part in a backward pass
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real{0});
  }
};

}  // namespace detail

/// Dense row-major array of rank 1 to 3 that records the operations applied
/// to it so gradients can be accumulated by a reverse sweep.
///
/// Tensors share their storage on copy. Operations never mutate their inputs;
/// only leaf parameters are written, by optimizers and finite-difference
/// probes, through data_mut().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value);
  static Tensor from_rows(const std::vector<std::vector<Real>>& rows,
                          bool requires_grad = false);
  static Tensor row(std::vector<Real> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Real> data() const;
  std::span<Real> data_mut();
  Real at(std::size_t i, std::size_t j) const;
  Real item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();

  /// Reverse sweep from a single-element tensor.
  void backward() const;

  /// Same values, no graph history, no gradient.
  Tensor detach() const;
  /// Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;
  Tensor reshape(Shape shape) const;

  const detail::Node* id() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(Shape shape, std::vector<Real> data,
                        std::initializer_list<const Tensor*> inputs,
                        std::function<void(detail::Node&)> backward);
  friend Tensor make_op_list(Shape shape, std::vector<Real> data,
                             const std::vector<Tensor>& inputs,
                             std::function<void(detail::Node&)> backward);
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Core algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
Tensor add_scalar(const Tensor& a, Real s);

// Broadcasts: `row` is 1×n against an m×n matrix, `col` is m×1.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul_row(const Tensor& a, const Tensor& row);
Tensor add_col(const Tensor& a, const Tensor& col);
Tensor mul_col(const Tensor& a, const Tensor& col);

// Elementwise maps.
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);

// Row-wise maps over rank-2 tensors.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, Real eps = Real(1e-5));

// Reductions. sum/mean return a one-element tensor of shape {1}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // m×n -> 1×n

// Structural.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
/// out[i] = a[i, index[i]], shape m×1.
Tensor pick_cols(const Tensor& a, std::span<const std::size_t> index);

/// Inverted dropout with a mask drawn from `rng`; identity when rate == 0.
Tensor dropout(const Tensor& a, Real rate, RngStream& rng);

/// out[b] = sum_j weights[b, j] * tokens[b*p + j] for weights B×p and
/// tokens (B*p)×d.
Tensor segment_pool(const Tensor& weights, const Tensor& tokens);

/// One attention problem inside row-stacked Q/K/V matrices.
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t kv_begin = 0;
  std::size_t kv_len = 0;
};

/// Multi-head scaled dot-product attention over independent segments of
/// stacked query/key/value rows. Heads split the column axis evenly. With
/// `causal`, query i of a segment sees keys 0..i only. When `probs` is given
/// it receives the attention weights, segment-major then head-major, each
/// block q_len×kv_len row-major.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads,
                 bool causal, std::vector<Real>* probs = nullptr);

}  // namespace unialign
