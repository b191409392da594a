#include "unialign/local_align.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace unialign {

namespace {

constexpr double kTiny = 1e-300;

double residual(const std::vector<double>& t, std::size_t m, std::size_t n,
                std::span<const double> a, std::span<const double> b) {
  double worst = 0;
  std::vector<double> col(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += t[i * n + j];
      col[j] += t[i * n + j];
    }
    worst = std::max(worst, std::abs(row - a[i]));
  }
  for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(col[j] - b[j]));
  return worst;
}

void check_marginal(std::span<const double> m, std::size_t n, const char* which) {
  if (m.size() != n) {
    fail(ErrorCode::kDimension, std::string("ipot: ") + which + " marginal has " +
                                    std::to_string(m.size()) + " entries, expected " +
                                    std::to_string(n));
  }
  double total = 0;
  for (double x : m) {
    if (!(x > 0)) fail(ErrorCode::kInvalidArgument, std::string("ipot: ") + which + " marginal must be strictly positive");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    fail(ErrorCode::kInvalidArgument, std::string("ipot: ") + which + " marginal must sum to 1");
  }
}

}  // namespace

Tensor TransportPlan::as_tensor() const {
  std::vector<Real> d(plan.begin(), plan.end());
  return Tensor({rows, cols}, std::move(d));
}

double TransportPlan::value(const Tensor& cost) const {
  if (cost.rows() != rows || cost.cols() != cols) {
    fail(ErrorCode::kDimension, "TransportPlan::value: cost " + to_string(cost.shape()) +
                                    " does not match plan");
  }
  double v = 0;
  const auto c = cost.data();
  for (std::size_t i = 0; i < plan.size(); ++i) v += plan[i] * static_cast<double>(c[i]);
  return v;
}

Tensor cost_matrix(const Tensor& image_tokens, const Tensor& text_tokens) {
  if (image_tokens.cols() != text_tokens.cols()) {
    fail(ErrorCode::kDimension, "cost_matrix: token widths differ, " +
                                    to_string(image_tokens.shape()) + " vs " +
                                    to_string(text_tokens.shape()));
  }
  const Tensor sim =
      matmul(l2_normalize_rows(image_tokens), transpose(l2_normalize_rows(text_tokens)));
  return add_scalar(scale(sim, Real{-1}), Real{1});
}

void validate(const IpotConfig& cfg) {
  if (!(cfg.beta > 0)) fail(ErrorCode::kConfig, "ipot: beta must be > 0");
  if (cfg.outer_iters < 1) fail(ErrorCode::kConfig, "ipot: outer_iters must be >= 1");
  if (cfg.inner_sinkhorn_iters < 1) fail(ErrorCode::kConfig, "ipot: inner_sinkhorn_iters must be >= 1");
  if (!(cfg.tolerance > 0)) fail(ErrorCode::kConfig, "ipot: tolerance must be > 0");
}

TransportPlan ipot(const Tensor& cost, std::span<const double> a, std::span<const double> b,
                   const IpotConfig& cfg) {
  validate(cfg);
  const std::size_t m = cost.rows(), n = cost.cols();
  if (m == 0 || n == 0) fail(ErrorCode::kEmpty, "ipot: empty cost matrix");
  check_marginal(a, m, "row");
  check_marginal(b, n, "column");
  const auto c = cost.data();
  std::vector<double> kernel(m * n);
  for (std::size_t i = 0; i < m * n; ++i) {
    const double x = static_cast<double>(c[i]);
    if (!std::isfinite(x)) fail(ErrorCode::kNumeric, "ipot: non-finite cost");
    kernel[i] = std::exp(-x / cfg.beta);
  }

  TransportPlan out;
  out.rows = m;
  out.cols = n;
  out.a.assign(a.begin(), a.end());
  out.b.assign(b.begin(), b.end());
  std::vector<double> t(m * n, 1.0);
  std::vector<double> q(m * n);
  std::vector<double> u(m, 1.0), v(n, 1.0 / static_cast<double>(n));

  for (std::size_t it = 0; it < cfg.outer_iters; ++it) {
    for (std::size_t i = 0; i < m * n; ++i) q[i] = kernel[i] * t[i];
    for (std::size_t k = 0; k < cfg.inner_sinkhorn_iters; ++k) {
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += q[i * n + j] * v[j];
        u[i] = a[i] / std::max(s, kTiny);
      }
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < m; ++i) s += q[i * n + j] * u[i];
        v[j] = b[j] / std::max(s, kTiny);
      }
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) t[i * n + j] = u[i] * q[i * n + j] * v[j];
    out.residual_history.push_back(residual(t, m, n, a, b));
  }
  out.plan = std::move(t);
  out.iterations_run = cfg.outer_iters;
  out.marginal_residual = out.residual_history.back();
  out.converged = out.marginal_residual <= cfg.tolerance;
  return out;
}

TransportPlan ipot(const Tensor& cost, const IpotConfig& cfg) {
  const std::vector<double> a(cost.rows(), 1.0 / static_cast<double>(cost.rows()));
  const std::vector<double> b(cost.cols(), 1.0 / static_cast<double>(cost.cols()));
  return ipot(cost, a, b, cfg);
}

double lp_oracle(const Tensor& cost) {
  const std::size_t n = cost.rows();
  if (cost.cols() != n) {
    fail(ErrorCode::kDimension, "lp_oracle: expected a square cost, got " + to_string(cost.shape()));
  }
  if (n == 0) fail(ErrorCode::kEmpty, "lp_oracle: empty cost");
  if (n > 6) fail(ErrorCode::kSize, "lp_oracle: n = " + std::to_string(n) + " exceeds 6");
  const auto c = cost.data();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double v = 0;
    for (std::size_t j = 0; j < n; ++j) v += static_cast<double>(c[j * n + perm[j]]);
    best = std::min(best, v);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

Tensor local_loss(const Tensor& cost, const TransportPlan& plan) {
  if (cost.rows() != plan.rows || cost.cols() != plan.cols) {
    fail(ErrorCode::kDimension, "local_loss: cost " + to_string(cost.shape()) + " vs plan [" +
                                    std::to_string(plan.rows) + "x" + std::to_string(plan.cols) + "]");
  }
  return sum(mul(plan.as_tensor(), cost));
}

}  // namespace unialign
