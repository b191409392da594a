#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "unialign/tensor.hpp"

namespace unialign {

struct IpotConfig {
  double beta = 0.5;                  // proximal weight
  std::size_t outer_iters = 200;
  std::size_t inner_sinkhorn_iters = 1;
  double tolerance = 1e-4;            // max-abs marginal residual
};

/// Output of the proximal-point solver. Always double precision; the plan
/// enters the loss as a constant.
struct TransportPlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> plan;  // rows×cols row-major
  std::vector<double> a;     // row marginal
  std::vector<double> b;     // column marginal
  std::size_t iterations_run = 0;
  double marginal_residual = 0;
  bool converged = false;
  /// Residual after every outer iteration.
  std::vector<double> residual_history;

  double at(std::size_t i, std::size_t j) const { return plan[i * cols + j]; }
  Tensor as_tensor() const;
  /// <T, C>
  double value(const Tensor& cost) const;
};

/// C[j][k] = 1 - <n(v_j), n(r_k)> on token rows (CLS excluded by the caller).
Tensor cost_matrix(const Tensor& image_tokens, const Tensor& text_tokens);

void validate(const IpotConfig& cfg);

/// Inexact proximal point iterations: per outer step the kernel
/// exp(-C/beta) ⊙ T is rescaled toward the marginals by a few alternating
/// Sinkhorn updates, then becomes the new T.
TransportPlan ipot(const Tensor& cost, std::span<const double> a, std::span<const double> b,
                   const IpotConfig& cfg = {});
/// Uniform marginals 1/p and 1/t.
TransportPlan ipot(const Tensor& cost, const IpotConfig& cfg = {});

/// Exact optimum of uniform-marginal transport on a square cost (n <= 6)
/// by enumerating permutations.
double lp_oracle(const Tensor& cost);

/// sum_jk T_jk C_jk with T held constant.
Tensor local_loss(const Tensor& cost, const TransportPlan& plan);

}  // namespace unialign
