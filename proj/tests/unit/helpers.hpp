#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "doctest.h"
#include "unialign/error.hpp"
#include "unialign/rng.hpp"
#include "unialign/tensor.hpp"

namespace test {

using unialign::ErrorCode;
using unialign::Real;
using unialign::RngStream;
using unialign::Tensor;

inline Tensor randn(std::vector<std::size_t> shape, RngStream& rng, double sd = 1.0,
                    bool requires_grad = false) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<Real> d(n);
  for (auto& x : d) x = static_cast<Real>(rng.normal(0, sd));
  return Tensor(shape, std::move(d), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const unialign::Error& e) {
    return e.code();
  }
  FAIL("expected unialign::Error");
  return ErrorCode::kInvalidArgument;
}

}  // namespace test

#define CHECK_CODE(expr, code) CHECK(test::code_of([&] { (void)(expr); }) == (code))
