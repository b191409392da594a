#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "unialign/local_align.hpp"

namespace unialign {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Central-difference checks of every differentiable tensor operation on
/// `trials` random inputs each.
std::vector<GradCheckEntry> gradcheck_ops(std::uint64_t seed, std::size_t trials = 10);

/// Checks of every loss and fusion block on micro instances (batch 4,
/// width 8), plus the composed pipeline on a two-sample batch. Transport
/// plans, negatives and dropout masks are frozen at the base point.
std::vector<GradCheckEntry> gradcheck_modules(std::uint64_t seed);

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed);

struct OtTrial {
  std::size_t n = 0;
  double ipot_value = 0;
  double oracle_value = 0;
  double gap = 0;
  double residual = 0;
  bool converged = false;
  TransportPlan plan;
};

struct OtBenchReport {
  std::vector<OtTrial> trials;
  double max_gap = 0;
  double max_residual = 0;
  std::size_t failures = 0;  // gap or residual over tolerance
  double gap_tolerance = 1e-3;
  double residual_tolerance = 1e-4;
};

/// IPOT against the permutation oracle on `trials_per_size` random square
/// costs (entries uniform in [0, 2]) for every size in `sizes`.
OtBenchReport run_ot_bench(std::size_t trials_per_size, std::uint64_t seed, const IpotConfig& cfg,
                           const std::vector<std::size_t>& sizes = {4, 5});

/// Every plan of the bench, each as a header line, a parameter line and the
/// matrix rows.
void write_ot_bench_csv(std::ostream& os, const OtBenchReport& report, double beta);

}  // namespace unialign
