#include "unialign/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace unialign {

namespace {

Real rel_error(Real analytic, Real numeric) {
  const Real denom = std::max({Real{1}, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

Real scalar_of(const Tensor& y) {
  if (y.numel() != 1) {
    fail(ErrorCode::kContract,
         "grad_check: function must return a single element, got " + to_string(y.shape()));
  }
  return y.item();
}

}  // namespace

Real grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Real eps) {
  Tensor leaf = x.clone(true);
  const Tensor y = f(leaf);
  scalar_of(y);
  y.backward();
  std::vector<Real> analytic(leaf.numel(), Real{0});
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  Real worst = 0;
  NoGradGuard guard;
  auto values = leaf.data_mut();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Real saved = values[i];
    values[i] = saved + eps;
    const Real up = scalar_of(f(leaf));
    values[i] = saved - eps;
    const Real down = scalar_of(f(leaf));
    values[i] = saved;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (Real{2} * eps)));
  }
  return worst;
}

std::vector<ParamCheck> grad_check_params(const std::function<Tensor()>& loss,
                                          std::vector<NamedTensor>& params, Real eps,
                                          std::size_t max_coords, RngStream& rng) {
  for (auto& p : params) p.tensor.zero_grad();
  {
    const Tensor y = loss();
    scalar_of(y);
    y.backward();
  }

  std::vector<ParamCheck> out;
  NoGradGuard guard;
  for (auto& p : params) {
    const std::size_t n = p.tensor.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    ParamCheck check{p.name, 0, coords.size()};
    auto values = p.tensor.data_mut();
    for (std::size_t i : coords) {
      const Real analytic = p.tensor.has_grad() ? p.tensor.grad()[i] : Real{0};
      const Real saved = values[i];
      values[i] = saved + eps;
      const Real up = scalar_of(loss());
      values[i] = saved - eps;
      const Real down = scalar_of(loss());
      values[i] = saved;
      check.max_rel_error =
          std::max(check.max_rel_error, rel_error(analytic, (up - down) / (Real{2} * eps)));
    }
    out.push_back(std::move(check));
  }
  for (auto& p : params) p.tensor.zero_grad();
  return out;
}

}  // namespace unialign
