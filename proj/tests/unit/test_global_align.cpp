#include <cmath>

#include "helpers.hpp"
#include "unialign/global_align.hpp"
#include "unialign/gradcheck.hpp"

using namespace unialign;
using test::max_abs_diff;
using test::randn;

namespace {

Linear identity_head(std::size_t d) {
  Linear l = Linear::zeros(d, d, false);
  for (std::size_t i = 0; i < d; ++i) l.weight.data_mut()[i * d + i] = 1;
  return l;
}

Tensor row_stochastic(std::size_t n, RngStream& rng) {
  return softmax_rows(randn({n, n}, rng, 2.0));
}

// sum_ij h ln(h/p) / n in long double.
long double kl_oracle(const Tensor& h, const Tensor& p) {
  long double s = 0;
  for (std::size_t i = 0; i < h.numel(); ++i) {
    const long double x = h.data()[i], y = p.data()[i];
    if (x > 0) s += x * std::log(x / y);
  }
  return s / h.rows();
}

}  // namespace

TEST_CASE("similarity_matrix examples") {
  RngStream rng(1, 1);
  const Tensor a = randn({5, 4}, rng);
  const Linear head = Linear::random(4, 3, rng);
  const Tensor s = similarity_matrix(a, a, head);
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(s.at(i, i) - 1) < 1e-12);

  const Tensor e = Tensor::from_rows({{1, 0, 0}, {0, 2, 0}});
  CHECK(std::abs(similarity_matrix(e, e, identity_head(3)).at(0, 1)) < 1e-15);

  const Tensor b = randn({6, 4}, rng);
  const Tensor sab = similarity_matrix(a, b, head);
  const Tensor pa = head(a), pb = head(b);
  double worst = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      long double dot = 0, na = 0, nb = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        dot += (long double)pa.at(i, k) * pb.at(j, k);
        na += (long double)pa.at(i, k) * pa.at(i, k);
        nb += (long double)pb.at(j, k) * pb.at(j, k);
      }
      worst = std::max(worst, std::abs(double(dot / std::sqrt(na * nb)) - sab.at(i, j)));
    }
  CHECK(worst < 1e-12);

  CHECK_CODE(similarity_matrix(Tensor::zeros({0, 4}), b, head), ErrorCode::kEmpty);
}

TEST_CASE("alignment_probs examples") {
  const Tensor p = alignment_probs(Tensor::from_rows({{0.07, 0}}), 0.07);
  CHECK(p.at(0, 0) == doctest::Approx(0.73106).epsilon(1e-5));
  CHECK(p.at(0, 1) == doctest::Approx(0.26894).epsilon(1e-5));

  const Tensor sharp = alignment_probs(Tensor::from_rows({{0.5, 0.4, 0.1}}), 1e-4);
  CHECK(sharp.at(0, 0) > 1 - 1e-12);

  RngStream rng(2, 1);
  const Tensor s = randn({4, 6}, rng);
  CHECK(max_abs_diff(alignment_probs(add_scalar(s, 0.37), 0.07), alignment_probs(s, 0.07)) < 1e-9);
  CHECK(max_abs_diff(exp(alignment_log_probs(s, 0.07)), alignment_probs(s, 0.07)) < 1e-12);
  CHECK_CODE(alignment_probs(s, 0), ErrorCode::kInvalidArgument);
}

TEST_CASE("soft_labels examples") {
  const Tensor q = Tensor::from_rows({{0.7, 0.3}, {0.3, 0.7}});
  const Tensor h = soft_labels(q, 0.01);
  CHECK(h.at(0, 0) == doctest::Approx(0.70297).epsilon(1e-5));
  CHECK(h.at(0, 1) == doctest::Approx(0.29703).epsilon(1e-5));
  CHECK(soft_labels(q, 10).at(0, 0) > 0.9);
  CHECK_CODE(soft_labels(q, -0.1), ErrorCode::kInvalidArgument);
}

TEST_CASE("soft-label rows sum to one and keep the diagonal largest gain") {
  RngStream rng(3, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor q = row_stochastic(7, rng);
    const Real lambda = Real(rng.uniform() * 2);
    const Tensor h = soft_labels(q, lambda);
    for (std::size_t i = 0; i < 7; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += h.at(i, j);
      CHECK(std::abs(s - 1) < 1e-9);
      CHECK(h.at(i, i) >= q.at(i, i) - 1e-15);
    }
  }
}

TEST_CASE("kl_row_loss examples") {
  const Tensor h = Tensor::from_rows({{1, 0}});
  const Tensor p = Tensor::from_rows({{0.5, 0.5}});
  CHECK(std::abs(kl_row_loss(h, p).item() - std::log(2.0)) < 1e-12);

  RngStream rng(4, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = row_stochastic(6, rng), b = row_stochastic(6, rng);
    CHECK(std::abs(kl_row_loss(a, b).item() - double(kl_oracle(a, b))) < 1e-10);
    CHECK(std::abs(kl_row_loss(a, a).item()) < 1e-12);
    CHECK(kl_row_loss(a, b).item() >= 0);
  }
  CHECK_CODE(kl_row_loss(Tensor::from_rows({{0.7, 0.7}}), p), ErrorCode::kContract);
}

TEST_CASE("kl_row_loss gradient with respect to logits") {
  RngStream rng(5, 1);
  const Tensor h = row_stochastic(4, rng);
  const Tensor s = randn({4, 4}, rng);
  CHECK(grad_check([&](const Tensor& x) { return kl_row_loss_log(h, alignment_log_probs(x, 0.5)); },
                   s) < 1e-6);
}

TEST_CASE("global_loss matches its composition") {
  RngStream rng(6, 1);
  const std::size_t n = 5, d = 6;
  const ProjectionHeads heads = ProjectionHeads::make(d, 4, rng);
  GlobalBatch b{randn({n, d}, rng), randn({n, d}, rng), randn({n, d}, rng), randn({n, d}, rng)};
  SoftLabelBlock labels{row_stochastic(n, rng), row_stochastic(n, rng), row_stochastic(n, rng),
                        row_stochastic(n, rng), row_stochastic(n, rng), 0.01};
  const Temperatures temps{0.07, 0.1, 0.2};

  const Tensor s_it = similarity_matrix(b.image, b.text, heads.i2t);
  const Tensor s_ii = similarity_matrix(b.view1, b.view2, heads.i1i2);
  const Tensor s_tt = similarity_matrix(b.text, b.text, heads.t2t);
  const double i2t = kl_row_loss(labels.i2t, alignment_probs(s_it, 0.07)).item();
  const double t2i = kl_row_loss(labels.t2i, alignment_probs(transpose(s_it), 0.07)).item();
  const double i1i2 = kl_row_loss(labels.i1i2, alignment_probs(s_ii, 0.1)).item();
  const double i2i1 = kl_row_loss(labels.i2i1, alignment_probs(transpose(s_ii), 0.1)).item();
  const double t2t = kl_row_loss(labels.t2t, alignment_probs(s_tt, 0.2)).item();

  const GlobalLoss all = global_loss(b, heads, labels, temps);
  CHECK(std::abs(all.total.item() - ((i2t + t2i) / 2 + (i1i2 + i2i1) / 2 + t2t)) < 1e-12);
  CHECK(std::abs(all.t2t - t2t) < 1e-12);

  const GlobalLoss inter = global_loss(b, heads, labels, temps, {true, false});
  CHECK(std::abs(inter.total.item() - (i2t + t2i) / 2) < 1e-12);
  const GlobalLoss intra = global_loss(b, heads, labels, temps, {false, true});
  CHECK(std::abs(intra.total.item() - ((i1i2 + i2i1) / 2 + t2t)) < 1e-12);
  CHECK_CODE(global_loss(b, heads, labels, temps, {false, false}), ErrorCode::kConfig);
}

TEST_CASE("text-text term enters the global loss with unit weight") {
  RngStream rng(7, 1);
  const std::size_t n = 4, d = 5;
  const ProjectionHeads heads = ProjectionHeads::make(d, 3, rng);
  GlobalBatch b{randn({n, d}, rng), randn({n, d}, rng), randn({n, d}, rng), randn({n, d}, rng)};
  SoftLabelBlock l1 = one_hot_labels(n), l2 = l1;
  l2.t2t = row_stochastic(n, rng);
  const Temperatures temps;
  const GlobalLoss a = global_loss(b, heads, l1, temps), c = global_loss(b, heads, l2, temps);
  CHECK(std::abs((c.total.item() - a.total.item()) - (c.t2t - a.t2t)) < 1e-12);
}

TEST_CASE("teacher soft labels are row-stochastic and peak on the pair") {
  RngStream rng(8, 1);
  const TeacherOracle teacher = TeacherOracle::generate(8, 8, rng);
  const TeacherEmbeddings e = teacher.embed(randn({6, 8}, rng));
  const SoftLabelBlock l = teacher_soft_labels(e.view1, e, Temperatures{}, 0.01);
  for (const Tensor* m : {&l.i2t, &l.t2i, &l.i1i2, &l.i2i1, &l.t2t})
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0;
      std::size_t best = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        s += m->at(i, j);
        if (m->at(i, j) > m->at(i, best)) best = j;
      }
      CHECK(std::abs(s - 1) < 1e-9);
      CHECK(best == i);
    }
}
