#pragma once

#include <cstddef>
#include <vector>

#include "unialign/layers.hpp"

namespace unialign {

/// Adam with decoupled weight decay. Decay applies to matrices only; 1×n
/// biases, gains and embeddings rows are left alone.
class AdamW {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(ParamList params, Options options);

  void zero_grad();
  /// Parameters without a gradient are skipped.
  void step();
  std::size_t steps() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace unialign
