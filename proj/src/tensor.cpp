#include "unialign/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "unialign/rng.hpp"

namespace unialign {

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    fail(ErrorCode::kDimension,
         std::string(op) + ": expected a rank-2 tensor, got " + to_string(a.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimension, std::string(op) + ": shape mismatch " +
                                    to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_finite(std::span<const Real> v, const char* op) {
  for (Real x : v) {
    if (std::isnan(x)) fail(ErrorCode::kNumeric, std::string(op) + ": NaN input");
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
  if (shape.empty() || shape.size() > 3) {
    fail(ErrorCode::kDimension, "Tensor: rank must be 1..3, got shape " + to_string(shape));
  }
  if (unialign::numel(shape) != data.size()) {
    fail(ErrorCode::kDimension, "Tensor: shape " + to_string(shape) + " holds " +
                                    std::to_string(unialign::numel(shape)) +
                                    " elements but data has " + std::to_string(data.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), Real{0}, requires_grad);
}

Tensor Tensor::filled(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = unialign::numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value) { return Tensor({1}, {value}); }

Tensor Tensor::from_rows(const std::vector<std::vector<Real>>& rows, bool requires_grad) {
  if (rows.empty()) fail(ErrorCode::kDimension, "Tensor::from_rows: no rows");
  const std::size_t n = rows.front().size();
  std::vector<Real> data;
  data.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.size() != n) fail(ErrorCode::kDimension, "Tensor::from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), n}, std::move(data), requires_grad);
}

Tensor Tensor::row(std::vector<Real> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return node_->shape[1];
}

std::span<const Real> Tensor::data() const {
  return node_ ? std::span<const Real>(node_->data) : std::span<const Real>();
}

std::span<Real> Tensor::data_mut() { return std::span<Real>(node_->data); }

Real Tensor::at(std::size_t i, std::size_t j) const {
  return node_->data[i * cols() + j];
}

Real Tensor::item() const {
  if (numel() != 1) {
    fail(ErrorCode::kContract, "item: tensor has shape " + to_string(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  return node_ ? std::span<const Real>(node_->grad) : std::span<const Real>();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const {
  if (numel() != 1) {
    fail(ErrorCode::kContract,
         "backward: expected a single-element tensor, got " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Post-order DFS gives a topological order with inputs before outputs.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->parents.empty()) n->grad.assign(n->data.size(), Real{0});
  }
  node_->ensure_grad();
  node_->grad[0] += Real{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->data, requires_grad);
}

Tensor make_op(Shape shape, std::vector<Real> data,
               std::initializer_list<const Tensor*> inputs,
               std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const Tensor* t : inputs) n->parents.push_back(t->node_);
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

Tensor make_op_list(Shape shape, std::vector<Real> data, const std::vector<Tensor>& inputs,
                    std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const Tensor& t : inputs) n->parents.push_back(t.node_);
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

Tensor Tensor::reshape(Shape shape) const {
  if (unialign::numel(shape) != numel()) {
    fail(ErrorCode::kDimension,
         "reshape: cannot view " + to_string(this->shape()) + " as " + to_string(shape));
  }
  return make_op(std::move(shape), node_->data, {this}, [](Node& self) {
    Node& a = parent(self, 0);
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorCode::kDimension, "matmul: inner dimensions differ, " + to_string(a.shape()) +
                                    " x " + to_string(b.shape()));
  }
  std::vector<Real> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return make_op({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    MapC g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      Map(pa.grad.data(), m, k).noalias() += g * MapC(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      Map(pb.grad.data(), k, n).noalias() += MapC(pa.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<Real> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_op({n, m}, std::move(out), {&a}, [m, n](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa.grad[i * n + j] += self.grad[j * m + i];
  });
}

namespace {

// Elementwise binary op with per-element partials da(x, y), db(x, y).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  require_same_shape(a, b, name);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return make_op(a.shape(), std::move(out), {&a, &b}, [da, db](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] * da(pa.data[i], pb.data[i]);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] += self.grad[i] * db(pa.data[i], pb.data[i]);
    }
  });
}

// Elementwise unary op whose derivative is expressed through input x and
// output y.
template <class F, class D>
Tensor unary(const Tensor& a, F f, D d) {
  const auto x = a.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make_op(a.shape(), std::move(out), {&a}, [d](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa.grad[i] += self.grad[i] * d(pa.data[i], self.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{1}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real{1}; },
      [](Real, Real) { return Real{-1}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor scale(const Tensor& a, Real s) {
  return unary(a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

Tensor add_scalar(const Tensor& a, Real s) {
  return unary(a, [s](Real x) { return x + s; }, [](Real, Real) { return Real{1}; });
}

namespace {

enum class Axis { kRow, kCol };

template <bool kMultiply>
Tensor broadcast(const Tensor& a, const Tensor& v, Axis axis, const char* name) {
  require_rank2(a, name);
  require_rank2(v, name);
  const std::size_t m = a.rows(), n = a.cols();
  const bool ok = axis == Axis::kRow ? (v.rows() == 1 && v.cols() == n)
                                     : (v.rows() == m && v.cols() == 1);
  if (!ok) {
    fail(ErrorCode::kDimension, std::string(name) + ": cannot broadcast " +
                                    to_string(v.shape()) + " against " + to_string(a.shape()));
  }
  const auto x = a.data();
  const auto w = v.data();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Real wv = axis == Axis::kRow ? w[j] : w[i];
      out[i * n + j] = kMultiply ? x[i * n + j] * wv : x[i * n + j] + wv;
    }
  }
  return make_op({m, n}, std::move(out), {&a, &v}, [m, n, axis](Node& self) {
    Node& pa = parent(self, 0);
    Node& pv = parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const Real wv = axis == Axis::kRow ? pv.data[j] : pv.data[i];
          pa.grad[i * n + j] += kMultiply ? self.grad[i * n + j] * wv : self.grad[i * n + j];
        }
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const Real g =
              kMultiply ? self.grad[i * n + j] * pa.data[i * n + j] : self.grad[i * n + j];
          pv.grad[axis == Axis::kRow ? j : i] += g;
        }
    }
  });
}

}  // namespace

Tensor add_row(const Tensor& a, const Tensor& row) {
  return broadcast<false>(a, row, Axis::kRow, "add_row");
}
Tensor mul_row(const Tensor& a, const Tensor& row) {
  return broadcast<true>(a, row, Axis::kRow, "mul_row");
}
Tensor add_col(const Tensor& a, const Tensor& col) {
  return broadcast<false>(a, col, Axis::kCol, "add_col");
}
Tensor mul_col(const Tensor& a, const Tensor& col) {
  return broadcast<true>(a, col, Axis::kCol, "mul_col");
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](Real x) {
        if (x >= 0) return Real{1} / (Real{1} + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real{1} + e);
      },
      [](Real, Real y) { return y * (Real{1} - y); });
}

Tensor log(const Tensor& a) {
  for (Real x : a.data()) {
    if (!(x > 0)) fail(ErrorCode::kNumeric, "log: non-positive input");
  }
  return unary(a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real{1} / x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor gelu(const Tensor& a) {
  constexpr Real c = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real k = Real(0.044715);
  return unary(
      a, [](Real x) { return Real(0.5) * x * (Real{1} + std::tanh(c * (x + k * x * x * x))); },
      [](Real x, Real) {
        const Real u = c * (x + k * x * x * x);
        const Real t = std::tanh(u);
        const Real du = c * (Real{1} + Real{3} * k * x * x);
        return Real(0.5) * (Real{1} + t) + Real(0.5) * x * (Real{1} - t * t) * du;
      });
}

// ---------------------------------------------------------------------------
// Row-wise maps

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  require_finite(a.data(), "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data() + i * n;
    Real* yi = out.data() + i * n;
    const Real mx = *std::max_element(xi, xi + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) total += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= total;
  }
  return make_op({m, n}, std::move(out), {&a}, [m, n](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const Real* y = self.data.data() + i * n;
      const Real* g = self.grad.data() + i * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) pa.grad[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  require_rank2(a, "log_softmax_rows");
  require_finite(a.data(), "log_softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data() + i * n;
    const Real mx = *std::max_element(xi, xi + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(xi[j] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xi[j] - lse;
  }
  return make_op({m, n}, std::move(out), {&a}, [m, n](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const Real* y = self.data.data() + i * n;
      const Real* g = self.grad.data() + i * n;
      Real total = 0;
      for (std::size_t j = 0; j < n; ++j) total += g[j];
      for (std::size_t j = 0; j < n; ++j) pa.grad[i * n + j] += g[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor l2_normalize_rows(const Tensor& a) {
  require_rank2(a, "l2_normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data();
  std::vector<Real> out(m * n);
  std::vector<Real> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    norms[i] = std::sqrt(s);
    if (norms[i] < Real(1e-12)) {
      fail(ErrorCode::kDegenerate,
           "l2_normalize_rows: row " + std::to_string(i) + " has (near-)zero norm");
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / norms[i];
  }
  return make_op({m, n}, std::move(out), {&a}, [m, n, norms = std::move(norms)](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const Real* y = self.data.data() + i * n;
      const Real* g = self.grad.data() + i * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) pa.grad[i * n + j] += (g[j] - y[j] * dot) / norms[i];
    }
  });
}

Tensor layer_norm_rows(const Tensor& a, Real eps) {
  require_rank2(a, "layer_norm_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto x = a.data();
  std::vector<Real> out(m * n);
  std::vector<Real> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data() + i * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= Real(n);
    inv_std[i] = Real{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (xi[j] - mu) * inv_std[i];
  }
  return make_op({m, n}, std::move(out), {&a}, [m, n, inv_std = std::move(inv_std)](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const Real* y = self.data.data() + i * n;
      const Real* g = self.grad.data() + i * n;
      Real gm = 0, gy = 0;
      for (std::size_t j = 0; j < n; ++j) {
        gm += g[j];
        gy += g[j] * y[j];
      }
      gm /= Real(n);
      gy /= Real(n);
      for (std::size_t j = 0; j < n; ++j)
        pa.grad[i * n + j] += inv_std[i] * (g[j] - gm - y[j] * gy);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  Real s = 0;
  for (Real x : a.data()) s += x;
  return make_op({1}, {s}, {&a}, [](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (Real& g : pa.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail(ErrorCode::kEmpty, "mean: empty tensor");
  return scale(sum(a), Real{1} / Real(a.numel()));
}

Tensor mean_rows(const Tensor& a) {
  require_rank2(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) fail(ErrorCode::kEmpty, "mean_rows: no rows");
  const auto x = a.data();
  std::vector<Real> out(n, Real{0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (Real& v : out) v /= Real(m);
  return make_op({1, n}, std::move(out), {&a}, [m, n](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa.grad[i * n + j] += self.grad[j] / Real(m);
  });
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorCode::kEmpty, "concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) {
      fail(ErrorCode::kDimension, "concat_cols: row count mismatch " +
                                      to_string(parts.front().shape()) + " vs " +
                                      to_string(p.shape()));
    }
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<Real> out(m * n);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(x.data() + i * widths[k], widths[k], out.data() + i * n + off);
    off += widths[k];
  }
  return make_op_list({m, n}, std::move(out), parts, [m, n, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = parent(self, k);
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            p.grad[i * widths[k] + j] += self.grad[i * n + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorCode::kEmpty, "concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) {
    if (p.cols() != n) {
      fail(ErrorCode::kDimension, "concat_rows: column count mismatch " +
                                      to_string(parts.front().shape()) + " vs " +
                                      to_string(p.shape()));
    }
    m += p.rows();
    sizes.push_back(p.numel());
  }
  std::vector<Real> out;
  out.reserve(m * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op_list({m, n}, std::move(out), parts, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      Node& p = parent(self, k);
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t i = 0; i < sizes[k]; ++i) p.grad[i] += self.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  if (begin > end || end > a.rows()) {
    fail(ErrorCode::kDimension, "slice_rows: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") outside " + to_string(a.shape()));
  }
  const std::size_t n = a.cols();
  const auto x = a.data();
  std::vector<Real> out(x.begin() + begin * n, x.begin() + end * n);
  return make_op({end - begin, n}, std::move(out), {&a}, [begin, n](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[begin * n + i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_rank2(a, "gather_rows");
  const std::size_t n = a.cols();
  const auto x = a.data();
  std::vector<Real> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= a.rows()) {
      fail(ErrorCode::kDimension, "gather_rows: index " + std::to_string(index[r]) +
                                      " outside " + to_string(a.shape()));
    }
    std::copy_n(x.data() + index[r] * n, n, out.data() + r * n);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op({idx.size(), n}, std::move(out), {&a}, [n, idx](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) pa.grad[idx[r] * n + j] += self.grad[r * n + j];
  });
}

Tensor pick_cols(const Tensor& a, std::span<const std::size_t> index) {
  require_rank2(a, "pick_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (index.size() != m) {
    fail(ErrorCode::kDimension, "pick_cols: " + std::to_string(index.size()) +
                                    " indices for " + to_string(a.shape()));
  }
  const auto x = a.data();
  std::vector<Real> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) {
      fail(ErrorCode::kDimension, "pick_cols: column " + std::to_string(index[i]) +
                                      " outside " + to_string(a.shape()));
    }
    out[i] = x[i * n + index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op({m, 1}, std::move(out), {&a}, [n, idx](Node& self) {
    Node& pa = parent(self, 0);
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) pa.grad[i * n + idx[i]] += self.grad[i];
  });
}

Tensor dropout(const Tensor& a, Real rate, RngStream& rng) {
  if (rate < 0 || rate >= 1) fail(ErrorCode::kInvalidArgument, "dropout: rate must be in [0,1)");
  if (rate == 0) return a;
  const Real keep = Real{1} - rate;
  std::vector<Real> mask(a.numel());
  for (Real& m : mask) m = rng.bernoulli(keep) ? Real{1} / keep : Real{0};
  return mul(a, Tensor(a.shape(), std::move(mask)));
}

Tensor segment_pool(const Tensor& weights, const Tensor& tokens) {
  require_rank2(weights, "segment_pool");
  require_rank2(tokens, "segment_pool");
  const std::size_t b = weights.rows(), p = weights.cols(), d = tokens.cols();
  if (tokens.rows() != b * p) {
    fail(ErrorCode::kDimension, "segment_pool: weights " + to_string(weights.shape()) +
                                    " do not tile tokens " + to_string(tokens.shape()));
  }
  const auto w = weights.data();
  const auto x = tokens.data();
  std::vector<Real> out(b * d, Real{0});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t c = 0; c < d; ++c) out[s * d + c] += w[s * p + j] * x[(s * p + j) * d + c];
  return make_op({b, d}, std::move(out), {&weights, &tokens}, [b, p, d](Node& self) {
    Node& pw = parent(self, 0);
    Node& px = parent(self, 1);
    if (pw.requires_grad) pw.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    for (std::size_t s = 0; s < b; ++s) {
      const Real* g = self.grad.data() + s * d;
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t row = s * p + j;
        if (pw.requires_grad) {
          Real dot = 0;
          for (std::size_t c = 0; c < d; ++c) dot += g[c] * px.data[row * d + c];
          pw.grad[s * p + j] += dot;
        }
        if (px.requires_grad) {
          const Real wv = pw.data[s * p + j];
          for (std::size_t c = 0; c < d; ++c) px.grad[row * d + c] += wv * g[c];
        }
      }
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads, bool causal,
                 std::vector<Real>* probs) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    fail(ErrorCode::kDimension, "attention: width mismatch q" + to_string(q.shape()) + " k" +
                                    to_string(k.shape()) + " v" + to_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    fail(ErrorCode::kDimension, "attention: width " + std::to_string(d) +
                                    " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const Real scl = Real{1} / std::sqrt(Real(dh));
  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  std::size_t total = 0;
  for (const auto& s : segs) {
    if (s.q_begin + s.q_len > q.rows() || s.kv_begin + s.kv_len > k.rows() || s.kv_len == 0) {
      fail(ErrorCode::kDimension, "attention: segment outside the stacked inputs");
    }
    total += heads * s.q_len * s.kv_len;
  }

  const auto Q = q.data();
  const auto K = k.data();
  const auto V = v.data();
  std::vector<Real> out(q.numel(), Real{0});
  std::vector<Real> weights(total);
  std::size_t off = 0;
  for (const auto& s : segs) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < s.q_len; ++i) {
        Real* w = weights.data() + off + i * s.kv_len;
        const Real* qi = Q.data() + (s.q_begin + i) * d + c0;
        const std::size_t visible = causal ? std::min(i + 1, s.kv_len) : s.kv_len;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const Real* kj = K.data() + (s.kv_begin + j) * d + c0;
          Real dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          w[j] = dot * scl;
          mx = std::max(mx, w[j]);
        }
        Real z = 0;
        for (std::size_t j = 0; j < visible; ++j) z += (w[j] = std::exp(w[j] - mx));
        for (std::size_t j = 0; j < visible; ++j) w[j] /= z;
        for (std::size_t j = visible; j < s.kv_len; ++j) w[j] = 0;
        Real* oi = out.data() + (s.q_begin + i) * d + c0;
        for (std::size_t j = 0; j < visible; ++j) {
          const Real* vj = V.data() + (s.kv_begin + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w[j] * vj[c];
        }
      }
      off += s.q_len * s.kv_len;
    }
  }
  if (probs) *probs = weights;

  return make_op(
      q.shape(), std::move(out), {&q, &k, &v},
      [segs = std::move(segs), weights = std::move(weights), heads, dh, d, scl](Node& self) {
        Node& pq = parent(self, 0);
        Node& pk = parent(self, 1);
        Node& pv = parent(self, 2);
        if (pq.requires_grad) pq.ensure_grad();
        if (pk.requires_grad) pk.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        std::vector<Real> dw;
        std::size_t off = 0;
        for (const auto& s : segs) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            dw.assign(s.kv_len, Real{0});
            for (std::size_t i = 0; i < s.q_len; ++i) {
              const Real* w = weights.data() + off + i * s.kv_len;
              const Real* go = self.grad.data() + (s.q_begin + i) * d + c0;
              Real dot = 0;
              for (std::size_t j = 0; j < s.kv_len; ++j) {
                const std::size_t row = (s.kv_begin + j) * d + c0;
                Real dp = 0;
                for (std::size_t c = 0; c < dh; ++c) dp += go[c] * pv.data[row + c];
                dw[j] = dp;
                dot += dp * w[j];
                if (pv.requires_grad)
                  for (std::size_t c = 0; c < dh; ++c) pv.grad[row + c] += w[j] * go[c];
              }
              const std::size_t qrow = (s.q_begin + i) * d + c0;
              for (std::size_t j = 0; j < s.kv_len; ++j) {
                const Real ds = w[j] * (dw[j] - dot) * scl;
                if (ds == 0) continue;
                const std::size_t krow = (s.kv_begin + j) * d + c0;
                if (pq.requires_grad)
                  for (std::size_t c = 0; c < dh; ++c) pq.grad[qrow + c] += ds * pk.data[krow + c];
                if (pk.requires_grad)
                  for (std::size_t c = 0; c < dh; ++c) pk.grad[krow + c] += ds * pq.data[qrow + c];
              }
            }
            off += s.q_len * s.kv_len;
          }
        }
      });
}

}  // namespace unialign
