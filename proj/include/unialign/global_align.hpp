#pragma once

#include <cstddef>

#include "unialign/encoders.hpp"
#include "unialign/layers.hpp"

namespace unialign {

/// Cosine similarities between projected rows: S[i][j] = <n(A_i W), n(B_j W)>
/// where n() is row L2 normalization and W is `head`.
Tensor similarity_matrix(const Tensor& a, const Tensor& b, const Linear& head);

/// Row softmax of S / tau. The reverse direction is alignment_probs(S^T, tau).
Tensor alignment_probs(const Tensor& s, Real tau);
/// log of alignment_probs, computed stably.
Tensor alignment_log_probs(const Tensor& s, Real tau);

/// Adds `lambda` to the diagonal of Q and renormalizes every row to sum 1.
/// Returns a constant tensor.
Tensor soft_labels(const Tensor& q, Real lambda);

/// (1/N) sum_ij H_ij ln(H_ij / P_ij) with 0·ln 0 = 0. H is treated as data.
Tensor kl_row_loss(const Tensor& h, const Tensor& p);
/// Same loss given log P directly.
Tensor kl_row_loss_log(const Tensor& h, const Tensor& log_p);

/// Five row-stochastic target matrices for one batch.
struct SoftLabelBlock {
  Tensor i2t;
  Tensor t2i;
  Tensor i1i2;
  Tensor i2i1;
  Tensor t2t;
  Real lambda = 0;
};

struct Temperatures {
  Real inter = Real(0.07);      // image-text
  Real multiview = Real(0.07);  // view 1 - view 2
  Real text = Real(0.07);       // text-text
};

/// Teacher soft labels. `inter_image` holds the teacher image embedding of
/// whichever view the student uses for the image-text term.
SoftLabelBlock teacher_soft_labels(const Tensor& inter_image, const TeacherEmbeddings& teacher,
                                   const Temperatures& temps, Real lambda);

/// Identity-row targets, the one-hot baseline.
SoftLabelBlock one_hot_labels(std::size_t n);

/// One projection head per stream pair.
struct ProjectionHeads {
  Linear i2t;
  Linear i1i2;
  Linear t2t;

  static ProjectionHeads make(std::size_t width, std::size_t proj_dim, RngStream& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// CLS embeddings of one batch, each N×d.
struct GlobalBatch {
  Tensor image;  // per-sample chosen view, used for the image-text term
  Tensor view1;
  Tensor view2;
  Tensor text;
};

struct GlobalTerms {
  bool inter = true;
  bool intra = true;
};

struct GlobalLoss {
  Tensor total;
  Real i2t = 0, t2i = 0, i1i2 = 0, i2i1 = 0, t2t = 0;
};

/// L_inter + L_intra with
///   L_inter = (KL_i2t + KL_t2i) / 2
///   L_intra = (KL_i1i2 + KL_i2i1) / 2 + KL_t2t.
GlobalLoss global_loss(const GlobalBatch& batch, const ProjectionHeads& heads,
                       const SoftLabelBlock& labels, const Temperatures& temps,
                       GlobalTerms terms = {});

}  // namespace unialign
