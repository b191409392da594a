#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "unialign/global_align.hpp"
#include "unialign/layers.hpp"
#include "unialign/rng.hpp"

namespace unialign {

enum class PairKind { kImageText, kImageImage, kTextText };

const char* pair_kind_name(PairKind kind);

/// Draws j != exclude with probability h_row[j] / sum_{k != exclude} h_row[k];
/// uniform over j != exclude when that mass is below 1e-12.
std::size_t sample_hard_negative(std::span<const Real> h_row, std::size_t exclude,
                                 RngStream& rng);

/// Which representations to fuse for one classification pair.
///  kImageText:  (image of i, report of j)
///  kImageImage: (view 1 of i, view 2 of j)
///  kTextText:   (report of i, report of j); for the positive (i == j) the
///               second side is an independent dropout encoding of report i.
/// label 1 marks a hard negative (i != j), label 0 the positive counterpart.
struct PairIndex {
  PairKind kind = PairKind::kImageText;
  std::size_t i = 0;
  std::size_t j = 0;
  std::size_t label = 0;
};

struct HardNegativePair {
  Tensor a;  // 1×d pooled fused representation
  Tensor b;
  std::size_t label = 0;
  PairKind kind = PairKind::kImageText;
};

/// Per-sample hard negatives (three, one per kind) with their positives.
struct HardNegativeSet {
  std::size_t sample = 0;
  std::vector<HardNegativePair> pairs;
  std::vector<std::pair<std::size_t, std::size_t>> source_indices;
};

/// Index pairs for every sample: negatives drawn from the i2t, i1i2 and t2t
/// rows of `labels`, followed by the three positives.
std::vector<std::vector<PairIndex>> plan_hard_negatives(const SoftLabelBlock& labels,
                                                        RngStream& rng);

/// Fuses a flat list of pairs, returning pooled (a, b) per entry.
using PairFuser =
    std::function<std::vector<std::pair<Tensor, Tensor>>(std::span<const PairIndex>)>;

std::vector<HardNegativeSet> build_hn_set(const SoftLabelBlock& labels, RngStream& rng,
                                          const PairFuser& fuse);

/// Linear head over concat(a, b) -> 2 logits. Accepts P×d stacks.
Tensor pair_logits(const Tensor& a, const Tensor& b, const Linear& head);

/// Mean cross-entropy over every pair of every set.
Tensor hn_loss(const std::vector<HardNegativeSet>& sets, const Linear& head);

/// Fraction of pairs whose argmax logit equals the label.
double hn_accuracy(const std::vector<HardNegativeSet>& sets, const Linear& head);

}  // namespace unialign
