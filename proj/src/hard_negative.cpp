#include "unialign/hard_negative.hpp"

namespace unialign {

const char* pair_kind_name(PairKind kind) {
  switch (kind) {
    case PairKind::kImageText: return "i2t";
    case PairKind::kImageImage: return "i2i";
    case PairKind::kTextText: return "t2t";
  }
  return "?";
}

std::size_t sample_hard_negative(std::span<const Real> h_row, std::size_t exclude,
                                 RngStream& rng) {
  const std::size_t n = h_row.size();
  if (n < 2) fail(ErrorCode::kSize, "sample_hard_negative: batch of " + std::to_string(n) + " is too small");
  if (exclude >= n) fail(ErrorCode::kInvalidArgument, "sample_hard_negative: exclude out of range");
  double mass = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (h_row[j] < 0) fail(ErrorCode::kInvalidArgument, "sample_hard_negative: negative weight");
    if (j != exclude) mass += static_cast<double>(h_row[j]);
  }
  if (mass < 1e-12) {
    const std::size_t k = rng.index(n - 1);
    return k < exclude ? k : k + 1;
  }
  const double target = rng.uniform() * mass;
  double run = 0;
  std::size_t last = exclude;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == exclude || h_row[j] <= 0) continue;
    run += static_cast<double>(h_row[j]);
    last = j;
    if (target < run) return j;
  }
  return last;  // rounding at the top of the range
}

std::vector<std::vector<PairIndex>> plan_hard_negatives(const SoftLabelBlock& labels,
                                                        RngStream& rng) {
  const std::size_t n = labels.i2t.rows();
  std::vector<std::vector<PairIndex>> plan(n);
  auto row = [n](const Tensor& h, std::size_t i) { return h.data().subspan(i * n, n); };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t m = sample_hard_negative(row(labels.i2t, i), i, rng);
    const std::size_t v = sample_hard_negative(row(labels.i1i2, i), i, rng);
    const std::size_t k = sample_hard_negative(row(labels.t2t, i), i, rng);
    plan[i] = {{PairKind::kImageText, i, m, 1},  {PairKind::kImageImage, i, v, 1},
               {PairKind::kTextText, i, k, 1},   {PairKind::kImageText, i, i, 0},
               {PairKind::kImageImage, i, i, 0}, {PairKind::kTextText, i, i, 0}};
  }
  return plan;
}

std::vector<HardNegativeSet> build_hn_set(const SoftLabelBlock& labels, RngStream& rng,
                                          const PairFuser& fuse) {
  const auto plan = plan_hard_negatives(labels, rng);
  std::vector<PairIndex> flat;
  for (const auto& p : plan) flat.insert(flat.end(), p.begin(), p.end());
  const auto fused = fuse(flat);
  if (fused.size() != flat.size()) {
    fail(ErrorCode::kContract, "build_hn_set: fuser returned " + std::to_string(fused.size()) +
                                   " pairs for " + std::to_string(flat.size()) + " requests");
  }
  std::vector<HardNegativeSet> sets(plan.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    sets[i].sample = i;
    for (const PairIndex& pi : plan[i]) {
      sets[i].pairs.push_back({fused[k].first, fused[k].second, pi.label, pi.kind});
      sets[i].source_indices.emplace_back(pi.i, pi.j);
      ++k;
    }
  }
  return sets;
}

Tensor pair_logits(const Tensor& a, const Tensor& b, const Linear& head) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimension,
         "pair_logits: representation shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (head.in() != 2 * a.cols() || head.out() != 2) {
    fail(ErrorCode::kDimension, "pair_logits: head " + to_string(head.weight.shape()) +
                                    " does not fit representations of width " + std::to_string(a.cols()));
  }
  return head(concat_cols({a, b}));
}

namespace {

void stack_pairs(const std::vector<HardNegativeSet>& sets, Tensor& a, Tensor& b,
                 std::vector<std::size_t>& labels) {
  std::vector<Tensor> as, bs;
  for (const auto& s : sets)
    for (const auto& p : s.pairs) {
      as.push_back(p.a);
      bs.push_back(p.b);
      labels.push_back(p.label);
    }
  if (as.empty()) fail(ErrorCode::kContract, "hn_loss: no pairs");
  a = concat_rows(as);
  b = concat_rows(bs);
}

}  // namespace

Tensor hn_loss(const std::vector<HardNegativeSet>& sets, const Linear& head) {
  Tensor a, b;
  std::vector<std::size_t> labels;
  stack_pairs(sets, a, b, labels);
  return cross_entropy(pair_logits(a, b, head), labels);
}

double hn_accuracy(const std::vector<HardNegativeSet>& sets, const Linear& head) {
  NoGradGuard guard;
  Tensor a, b;
  std::vector<std::size_t> labels;
  stack_pairs(sets, a, b, labels);
  const Tensor logits = pair_logits(a, b, head);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t pred = logits.at(i, 1) > logits.at(i, 0) ? 1 : 0;
    hits += pred == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace unialign
