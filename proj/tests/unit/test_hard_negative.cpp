#include <cmath>
#include <map>

#include "helpers.hpp"
#include "unialign/global_align.hpp"
#include "unialign/hard_negative.hpp"

using namespace unialign;
using test::randn;

namespace {

double tv_distance(const std::vector<double>& counts, const std::vector<double>& expected) {
  double total = 0, tv = 0;
  for (double c : counts) total += c;
  for (std::size_t j = 0; j < counts.size(); ++j) tv += std::abs(counts[j] / total - expected[j]);
  return tv / 2;
}

PairFuser fake_fuser(std::size_t d) {
  return [d](std::span<const PairIndex> pairs) {
    std::vector<std::pair<Tensor, Tensor>> out;
    for (const auto& p : pairs)
      out.emplace_back(Tensor::filled({1, d}, Real(p.i)), Tensor::filled({1, d}, Real(p.j)));
    return out;
  };
}

}  // namespace

TEST_CASE("sampler example row") {
  const std::vector<Real> h{0, 0.8, 0.2};
  RngStream rng(1, 1);
  std::vector<double> counts(3, 0);
  for (int i = 0; i < 10000; ++i) counts[sample_hard_negative(h, 0, rng)] += 1;
  CHECK(counts[0] == 0);
  CHECK(tv_distance(counts, {0, 0.8, 0.2}) <= 0.05);
}

TEST_CASE("sampler matches the normalized off-diagonal row") {
  RngStream rng(2, 1);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Real> row(8);
    for (auto& x : row) x = Real(rng.uniform());
    const std::size_t ex = rng.index(8);
    double mass = 0;
    for (std::size_t j = 0; j < 8; ++j)
      if (j != ex) mass += row[j];
    std::vector<double> expected(8), counts(8, 0);
    for (std::size_t j = 0; j < 8; ++j) expected[j] = j == ex ? 0 : row[j] / mass;
    for (int i = 0; i < 10000; ++i) counts[sample_hard_negative(row, ex, rng)] += 1;
    CHECK(counts[ex] == 0);
    CHECK(tv_distance(counts, expected) <= 0.05);
  }
}

TEST_CASE("sampler falls back to uniform when the row has no off-diagonal mass") {
  const std::vector<Real> h{1, 0, 0, 0};
  RngStream rng(3, 1);
  std::vector<double> counts(4, 0);
  for (int i = 0; i < 9000; ++i) counts[sample_hard_negative(h, 0, rng)] += 1;
  CHECK(counts[0] == 0);
  CHECK(tv_distance(counts, {0, 1.0 / 3, 1.0 / 3, 1.0 / 3}) <= 0.05);
  CHECK_CODE(sample_hard_negative(std::vector<Real>{1}, 0, rng), ErrorCode::kSize);
  CHECK_CODE(sample_hard_negative(h, 4, rng), ErrorCode::kInvalidArgument);
}

TEST_CASE("hard-negative set of a batch of four") {
  RngStream rng(4, 1);
  const std::size_t n = 4;
  SoftLabelBlock labels{};
  for (Tensor* t : {&labels.i2t, &labels.t2i, &labels.i1i2, &labels.i2i1, &labels.t2t})
    *t = soft_labels(softmax_rows(randn({n, n}, rng)), 0.01);
  const auto sets = build_hn_set(labels, rng, fake_fuser(3));
  std::size_t pairs = 0;
  std::map<PairKind, std::pair<int, int>> by_kind;
  for (const auto& s : sets) {
    for (std::size_t k = 0; k < s.pairs.size(); ++k) {
      const auto& p = s.pairs[k];
      const auto [i, j] = s.source_indices[k];
      CHECK(i == s.sample);
      if (p.label == 1) {
        CHECK(j != i);
        ++by_kind[p.kind].first;
      } else {
        CHECK(j == i);
        ++by_kind[p.kind].second;
      }
      CHECK(p.a.at(0, 0) == Real(i));
      CHECK(p.b.at(0, 0) == Real(j));
      ++pairs;
    }
  }
  CHECK(pairs == 24);
  for (PairKind k : {PairKind::kImageText, PairKind::kImageImage, PairKind::kTextText}) {
    CHECK(by_kind[k].first == 4);
    CHECK(by_kind[k].second == 4);
  }
}

TEST_CASE("the most similar partner is drawn most often") {
  RngStream rng(5, 1);
  const std::size_t n = 6;
  const Tensor h = soft_labels(softmax_rows(randn({n, n}, rng, 3.0)), 0.01);
  SoftLabelBlock labels{h, h, h, h, h, 0.01};
  std::vector<std::vector<double>> counts(n, std::vector<double>(n, 0));
  for (int batch = 0; batch < 1000; ++batch) {
    const auto plan = plan_hard_negatives(labels, rng);
    for (std::size_t i = 0; i < n; ++i) counts[i][plan[i][0].j] += 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i == 0 ? 1 : 0, drawn = best;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (h.at(i, j) > h.at(i, best)) best = j;
      if (counts[i][j] > counts[i][drawn]) drawn = j;
    }
    CHECK(drawn == best);
  }
}

TEST_CASE("pair head cross-entropy") {
  RngStream rng(6, 1);
  const std::size_t d = 4;
  Linear head = Linear::zeros(2 * d, 2);
  HardNegativeSet set;
  for (std::size_t label : {0, 1, 1, 0})
    set.pairs.push_back({randn({1, d}, rng), randn({1, d}, rng), label, PairKind::kImageText});
  const std::vector<HardNegativeSet> sets{set};

  const Tensor z = pair_logits(set.pairs[0].a, set.pairs[0].b, head);
  CHECK(z.at(0, 0) == 0);
  CHECK(z.at(0, 1) == 0);
  CHECK(std::abs(hn_loss(sets, head).item() - std::log(2.0)) < 1e-12);

  // Margin of +10 toward the correct class.
  Linear margin = Linear::zeros(2 * d, 2);
  HardNegativeSet pos_only;
  for (const auto& p : set.pairs)
    if (p.label == 0) pos_only.pairs.push_back(p);
  margin.bias.data_mut()[0] = 10;
  CHECK(hn_loss({pos_only}, margin).item() < 1e-4);
  CHECK(hn_accuracy({pos_only}, margin) == 1.0);

  Linear rnd = Linear::random(2 * d, 2, rng);
  const Tensor lg = pair_logits(concat_rows({set.pairs[0].a, set.pairs[1].a, set.pairs[2].a, set.pairs[3].a}),
                                concat_rows({set.pairs[0].b, set.pairs[1].b, set.pairs[2].b, set.pairs[3].b}),
                                rnd);
  long double ce = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    const long double a = lg.at(r, 0), b = lg.at(r, 1);
    const long double mx = std::max(a, b);
    const long double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    ce += lse - (set.pairs[r].label == 0 ? a : b);
  }
  CHECK(std::abs(hn_loss(sets, rnd).item() - double(ce / 4)) < 1e-12);

  CHECK_CODE(pair_logits(randn({1, d}, rng), randn({1, d + 1}, rng), rnd), ErrorCode::kDimension);
  CHECK_CODE(hn_loss({}, rnd), ErrorCode::kContract);
}
