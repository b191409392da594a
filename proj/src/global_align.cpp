#include "unialign/global_align.hpp"

#include <cmath>

namespace unialign {

namespace {

void require_tau(Real tau) {
  if (!(tau > 0)) fail(ErrorCode::kInvalidArgument, "temperature must be > 0");
}

void require_stochastic(const Tensor& m, const char* what) {
  const std::size_t n = m.cols();
  const auto d = m.data();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += d[i * n + j];
    if (std::abs(s - Real{1}) > Real(1e-6)) {
      fail(ErrorCode::kContract, std::string("kl_row_loss: row ") + std::to_string(i) + " of " +
                                     what + " sums to " + std::to_string(s));
    }
  }
}

}  // namespace

Tensor similarity_matrix(const Tensor& a, const Tensor& b, const Linear& head) {
  if (a.rows() == 0 || b.rows() == 0) fail(ErrorCode::kEmpty, "similarity_matrix: empty batch");
  return matmul(l2_normalize_rows(head(a)), transpose(l2_normalize_rows(head(b))));
}

Tensor alignment_probs(const Tensor& s, Real tau) {
  require_tau(tau);
  return softmax_rows(scale(s, Real{1} / tau));
}

Tensor alignment_log_probs(const Tensor& s, Real tau) {
  require_tau(tau);
  return log_softmax_rows(scale(s, Real{1} / tau));
}

Tensor soft_labels(const Tensor& q, Real lambda) {
  if (lambda < 0) fail(ErrorCode::kInvalidArgument, "soft_labels: lambda must be >= 0");
  if (q.rows() != q.cols()) {
    fail(ErrorCode::kDimension, "soft_labels: expected a square matrix, got " + to_string(q.shape()));
  }
  const std::size_t n = q.rows();
  std::vector<Real> h(q.data().begin(), q.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    h[i * n + i] += lambda;
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += h[i * n + j];
    for (std::size_t j = 0; j < n; ++j) h[i * n + j] /= s;
  }
  return Tensor({n, n}, std::move(h));
}

Tensor kl_row_loss(const Tensor& h, const Tensor& p) {
  if (h.shape() != p.shape()) {
    fail(ErrorCode::kDimension,
         "kl_row_loss: shape mismatch " + to_string(h.shape()) + " vs " + to_string(p.shape()));
  }
  require_stochastic(h, "H");
  require_stochastic(p, "P");
  return kl_row_loss_log(h, log(p));
}

Tensor kl_row_loss_log(const Tensor& h, const Tensor& log_p) {
  if (h.shape() != log_p.shape()) {
    fail(ErrorCode::kDimension, "kl_row_loss: shape mismatch " + to_string(h.shape()) + " vs " +
                                    to_string(log_p.shape()));
  }
  const std::size_t n = h.rows();
  // sum H ln H is a constant; only -sum H ln P carries gradient.
  Real entropy_term = 0;
  for (Real x : h.data())
    if (x > 0) entropy_term += x * std::log(x);
  Tensor cross = sum(mul(h.detach(), log_p));
  return scale(add_scalar(scale(cross, Real{-1}), entropy_term), Real{1} / Real(n));
}

SoftLabelBlock teacher_soft_labels(const Tensor& inter_image, const TeacherEmbeddings& teacher,
                                   const Temperatures& temps, Real lambda) {
  NoGradGuard guard;
  const Tensor s_it = matmul(inter_image, transpose(teacher.text));
  const Tensor s_ii = matmul(teacher.view1, transpose(teacher.view2));
  const Tensor s_tt = matmul(teacher.text, transpose(teacher.text));
  SoftLabelBlock out;
  out.i2t = soft_labels(alignment_probs(s_it, temps.inter), lambda);
  out.t2i = soft_labels(alignment_probs(transpose(s_it), temps.inter), lambda);
  out.i1i2 = soft_labels(alignment_probs(s_ii, temps.multiview), lambda);
  out.i2i1 = soft_labels(alignment_probs(transpose(s_ii), temps.multiview), lambda);
  out.t2t = soft_labels(alignment_probs(s_tt, temps.text), lambda);
  out.lambda = lambda;
  return out;
}

SoftLabelBlock one_hot_labels(std::size_t n) {
  std::vector<Real> eye(n * n, Real{0});
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = Real{1};
  const Tensor id({n, n}, std::move(eye));
  return {id, id, id, id, id, Real{0}};
}

ProjectionHeads ProjectionHeads::make(std::size_t width, std::size_t proj_dim, RngStream& rng) {
  return {Linear::random(width, proj_dim, rng), Linear::random(width, proj_dim, rng),
          Linear::random(width, proj_dim, rng)};
}

void ProjectionHeads::collect(ParamList& out, const std::string& prefix) const {
  i2t.collect(out, prefix + ".i2t");
  i1i2.collect(out, prefix + ".i1i2");
  t2t.collect(out, prefix + ".t2t");
}

GlobalLoss global_loss(const GlobalBatch& batch, const ProjectionHeads& heads,
                       const SoftLabelBlock& labels, const Temperatures& temps,
                       GlobalTerms terms) {
  if (!terms.inter && !terms.intra) {
    fail(ErrorCode::kConfig, "global_loss: at least one of inter/intra must be enabled");
  }
  GlobalLoss out;
  Tensor total;
  auto accumulate = [&total](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
  if (terms.inter) {
    const Tensor s = similarity_matrix(batch.image, batch.text, heads.i2t);
    const Tensor a = kl_row_loss_log(labels.i2t, alignment_log_probs(s, temps.inter));
    const Tensor b = kl_row_loss_log(labels.t2i, alignment_log_probs(transpose(s), temps.inter));
    out.i2t = a.item();
    out.t2i = b.item();
    accumulate(scale(add(a, b), Real(0.5)));
  }
  if (terms.intra) {
    const Tensor s = similarity_matrix(batch.view1, batch.view2, heads.i1i2);
    const Tensor a = kl_row_loss_log(labels.i1i2, alignment_log_probs(s, temps.multiview));
    const Tensor b =
        kl_row_loss_log(labels.i2i1, alignment_log_probs(transpose(s), temps.multiview));
    const Tensor st = similarity_matrix(batch.text, batch.text, heads.t2t);
    const Tensor c = kl_row_loss_log(labels.t2t, alignment_log_probs(st, temps.text));
    out.i1i2 = a.item();
    out.i2i1 = b.item();
    out.t2t = c.item();
    accumulate(add(scale(add(a, b), Real(0.5)), c));
  }
  out.total = total;
  return out;
}

}  // namespace unialign
