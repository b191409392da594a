#include "unialign/optim.hpp"

#include <cmath>

namespace unialign {

AdamW::AdamW(ParamList params, Options options) : params_(std::move(params)), opt_(options) {
  if (opt_.learning_rate <= 0 || opt_.eps <= 0 || opt_.weight_decay < 0 || opt_.beta1 < 0 ||
      opt_.beta1 >= 1 || opt_.beta2 < 0 || opt_.beta2 >= 1) {
    fail(ErrorCode::kConfig, "AdamW: invalid hyper-parameters");
  }
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) fail(ErrorCode::kContract, "AdamW: '" + p.name + "' is not trainable");
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = params_[k].tensor;
    if (!w.has_grad()) continue;
    const auto g = w.grad();
    auto x = w.data_mut();
    const bool decay = w.rank() == 2 && w.rows() > 1;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i];
      m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi;
      double xi = x[i];
      if (decay) xi -= opt_.learning_rate * opt_.weight_decay * xi;
      xi -= opt_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
      x[i] = static_cast<Real>(xi);
    }
  }
}

}  // namespace unialign
