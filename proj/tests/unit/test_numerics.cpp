#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "unialign/diagnostics.hpp"
#include "unialign/gradcheck.hpp"
#include "unialign/serialize.hpp"

using namespace unialign;
using test::max_abs_diff;
using test::randn;

TEST_CASE("matmul examples") {
  const Tensor a = Tensor::from_rows({{1, 2}});
  const Tensor b = Tensor::from_rows({{3}, {4}});
  CHECK(matmul(a, b).item() == 11);

  RngStream rng(3, 1);
  const Tensor x = randn({5, 4}, rng);
  const Tensor eye = Tensor::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  CHECK(max_abs_diff(matmul(x, eye), x) == 0);

  CHECK_CODE(matmul(a, a), ErrorCode::kDimension);
}

TEST_CASE("matmul agrees with a triple loop on 8x8") {
  RngStream rng(5, 1);
  const Tensor a = randn({8, 8}, rng), b = randn({8, 8}, rng);
  const Tensor c = matmul(a, b);
  double worst = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < 8; ++k) s += (long double)a.at(i, k) * b.at(k, j);
      worst = std::max(worst, std::abs(double(s) - double(c.at(i, j))));
    }
  CHECK(worst < 1e-12);
}

TEST_CASE("softmax examples") {
  const Tensor p0 = softmax_rows(Tensor::from_rows({{0, 0}}));
  CHECK(p0.at(0, 0) == doctest::Approx(0.5));
  CHECK(p0.at(0, 1) == doctest::Approx(0.5));

  const Tensor p1 = softmax_rows(Tensor::from_rows({{1, 0}}));
  CHECK(p1.at(0, 0) == doctest::Approx(0.73106).epsilon(1e-5));
  CHECK(p1.at(0, 1) == doctest::Approx(0.26894).epsilon(1e-5));

  const Tensor p2 = softmax_rows(Tensor::from_rows({{1000, 0}}));
  CHECK(std::isfinite(p2.at(0, 0)));
  CHECK(p2.at(0, 0) == doctest::Approx(1.0));
  CHECK(p2.at(0, 1) < 1e-300);

  const Tensor lp = log_softmax_rows(Tensor::from_rows({{1000, 0}}));
  CHECK(lp.at(0, 0) == doctest::Approx(0.0));
  CHECK(lp.at(0, 1) == doctest::Approx(-1000.0));
}

TEST_CASE("softmax rows sum to one") {
  RngStream rng(9, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor p = softmax_rows(randn({6, 7}, rng, 5.0));
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(p.at(i, j) >= 0);
        s += p.at(i, j);
      }
      CHECK(std::abs(s - 1) < 1e-9);
    }
  }
}

TEST_CASE("l2_normalize examples") {
  const Tensor n = l2_normalize_rows(Tensor::from_rows({{3, 4}}));
  CHECK(n.at(0, 0) == doctest::Approx(0.6));
  CHECK(n.at(0, 1) == doctest::Approx(0.8));
  CHECK_CODE(l2_normalize_rows(Tensor::from_rows({{1, 1}, {0, 0}})), ErrorCode::kDegenerate);

  RngStream rng(2, 2);
  const Tensor m = l2_normalize_rows(randn({10, 5}, rng));
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += m.at(i, j) * m.at(i, j);
    CHECK(std::abs(std::sqrt(s) - 1) < 1e-12);
  }
}

TEST_CASE("grad_check examples") {
  RngStream rng(4, 1);
  const Tensor x = randn({3, 4}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x) < 1e-8);

  const Tensor c = randn({3, 4}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(softmax_rows(t), c)); }, x) < 1e-6);

  CHECK(grad_check([](const Tensor&) { return Tensor::scalar(3.0); }, x) < 1e-10);

  CHECK_CODE(grad_check([](const Tensor& t) { return scale(t, 2); }, x), ErrorCode::kContract);
}

TEST_CASE("every differentiable op passes finite differences on random inputs") {
  const auto entries = gradcheck_ops(17, 10);
  CHECK(entries.size() > 30);
  for (const auto& e : entries) {
    INFO(e.name << " " << e.max_rel_error);
    CHECK(e.max_rel_error < 1e-5);
  }
}

TEST_CASE("backward accumulates through shared inputs") {
  const Tensor x = Tensor::from_rows({{1, 2}}, true);
  const Tensor y = sum(add(mul(x, x), x));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(3));
  CHECK(x.grad()[1] == doctest::Approx(5));
}

TEST_CASE("no_grad records no graph") {
  const Tensor x = Tensor::from_rows({{1, 2}}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("attention weights rows sum to one") {
  RngStream rng(6, 1);
  const Tensor q = randn({5, 8}, rng), k = randn({7, 8}, rng), v = randn({7, 8}, rng);
  const AttentionSegment seg{0, 5, 0, 7};
  for (bool causal : {false, true}) {
    std::vector<Real> probs;
    attention(q, k, v, std::span(&seg, 1), 2, causal, &probs);
    REQUIRE(probs.size() == 2 * 5 * 7);
    for (std::size_t row = 0; row < 10; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += probs[row * 7 + j];
      CHECK(std::abs(s - 1) < 1e-9);
    }
  }
}

TEST_CASE("rng streams replay and separate") {
  RngStream a(1, 2), b(1, 2), c(1, 3);
  bool differs = false;
  for (int i = 0; i < 20; ++i) {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    if (x != c.uniform()) differs = true;
  }
  CHECK(differs);
  RngStream p(1, 2);
  const RngStream s1 = p.substream(4);
  p.uniform();
  RngStream s2 = p.substream(4), s1c = s1;
  CHECK(s1c.uniform() == s2.uniform());
}

TEST_CASE("dropout keeps expectation and is identity at rate zero") {
  RngStream rng(8, 1);
  const Tensor x = Tensor::filled({200, 50}, 1.0);
  CHECK(max_abs_diff(dropout(x, 0, rng), x) == 0);
  const Tensor y = dropout(x, 0.1, rng);
  double s = 0;
  std::size_t zeros = 0;
  for (Real v : y.data()) {
    s += v;
    if (v == 0) ++zeros;
  }
  CHECK(s / 10000 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(zeros > 800);
  CHECK(zeros < 1200);
}

TEST_CASE("tensor wire format round-trips") {
  RngStream rng(10, 1);
  for (const Shape& shape : {Shape{4}, Shape{3, 5}, Shape{2, 3, 4}}) {
    const Tensor t = randn(shape, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    const Tensor back = read_tensor(ss);
    CHECK(back.shape() == shape);
    CHECK(max_abs_diff(back, t) == 0);
  }
  std::stringstream bad("garbage");
  CHECK_CODE(read_tensor(bad), ErrorCode::kIo);
}
