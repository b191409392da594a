#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "unialign/rng.hpp"
#include "unialign/tensor.hpp"

namespace unialign {

/// Largest |analytic - central| / max(1, |analytic|, |central|) over the
/// coordinates of `x`, where the analytic gradient comes from a reverse sweep
/// through `f` and the central difference uses step `eps`.
Real grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                Real eps = Real(1e-5));

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ParamCheck {
  std::string name;
  Real max_rel_error = 0;
  std::size_t coordinates = 0;
};

/// Same measure as grad_check, taken over leaf parameters that `loss` closes
/// over. At most `max_coords` coordinates per parameter are probed (chosen by
/// `rng`; all of them when the tensor is smaller). Parameter values are
/// restored on return.
std::vector<ParamCheck> grad_check_params(const std::function<Tensor()>& loss,
                                          std::vector<NamedTensor>& params, Real eps,
                                          std::size_t max_coords, RngStream& rng);

}  // namespace unialign
