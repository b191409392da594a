#include <cmath>

#include "helpers.hpp"
#include "unialign/fusion.hpp"
#include "unialign/gradcheck.hpp"

using namespace unialign;
using test::max_abs_diff;
using test::randn;

namespace {

void randomize(Tensor& t, RngStream& rng, double sd = 0.3) {
  for (Real& x : t.data_mut()) x = Real(rng.normal(0.0, sd));
}

void set_identity(Linear& l) {
  auto w = l.weight.data_mut();
  std::fill(w.begin(), w.end(), Real{0});
  for (std::size_t i = 0; i < l.in(); ++i) w[i * l.out() + i] = 1;
  if (l.bias.defined()) {
    auto b = l.bias.data_mut();
    std::fill(b.begin(), b.end(), Real{0});
  }
}

}  // namespace

TEST_CASE("cross_attention starts at zero and weights sum to one") {
  RngStream rng(1, 1);
  const MultiHeadAttention mha = MultiHeadAttention::make(8, 2, rng);
  const Tensor q = randn({3, 8}, rng), kv = randn({5, 8}, rng);
  std::vector<Real> probs;
  const Tensor out = cross_attention(q, kv, mha, &probs);
  CHECK(out.shape() == Shape{3, 8});
  CHECK(max_abs_diff(out, Tensor::zeros({3, 8})) == 0);
  REQUIRE(probs.size() == 2 * 3 * 5);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += probs[r * 5 + j];
    CHECK(std::abs(s - 1) < 1e-12);
  }
}

TEST_CASE("cross_attention onto a single token returns its value") {
  RngStream rng(2, 1);
  MultiHeadAttention mha = MultiHeadAttention::make(6, 3, rng);
  set_identity(mha.output);
  const Tensor q = randn({4, 6}, rng), kv = randn({1, 6}, rng);
  std::vector<Real> probs;
  const Tensor out = cross_attention(q, kv, mha, &probs);
  for (Real p : probs) CHECK(p == doctest::Approx(1.0).epsilon(1e-12));
  const Tensor v = mha.value(kv);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(max_abs_diff(slice_rows(out, i, i + 1), v) < 1e-12);
}

TEST_CASE("co-attention is the identity at init") {
  RngStream rng(3, 1);
  CoAttentionConfig cfg;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.ffn_width = 32;
  const CoAttention co(cfg, rng);
  const Tensor img = randn({5, 16}, rng), txt = randn({7, 16}, rng);
  const auto [a, b] = co(img, txt);
  CHECK(max_abs_diff(a, img) == 0);
  CHECK(max_abs_diff(b, txt) == 0);

  // Once the cross blocks are live, text tokens move the image stream.
  ParamList ps;
  co.collect(ps, "co");
  for (auto& p : ps)
    if (p.name.find("output.weight") != std::string::npos) randomize(p.tensor, rng);
  Tensor txt2 = txt.clone();
  txt2.data_mut()[20] += 0.5;
  CHECK(max_abs_diff(co(img, txt).first, co(img, txt2).first) > 1e-6);

  cfg.width = 15;
  CHECK_CODE(validate(cfg), ErrorCode::kConfig);
}

TEST_CASE("knowledge encoder") {
  RngStream rng(4, 1);
  KnowledgeEncoder enc = KnowledgeEncoder::make(8, 2, 16, rng);
  const Tensor x = randn({5, 8}, rng);
  CHECK(max_abs_diff(knowledge_encode(enc, x), x) == 0);

  randomize(enc.self_attn.output.weight, rng);
  randomize(enc.ffn.down.weight, rng);
  const Tensor one = randn({1, 8}, rng);
  CHECK(knowledge_encode(enc, one).shape() == Shape{1, 8});
  CHECK(knowledge_encode(enc, x).shape() == Shape{5, 8});
  CHECK_CODE(knowledge_encode(enc, Tensor::zeros({0, 8})), ErrorCode::kEmpty);
}

TEST_CASE("gate saturation and midpoint") {
  RngStream rng(5, 1);
  GatedFusion g = GatedFusion::make(8, 2, 16, rng);
  randomize(g.cross_attn.output.weight, rng, 1.0);
  const Tensor f_i = randn({4, 8}, rng), f_p = randn({6, 8}, rng);

  auto zero = [](Tensor& t) {
    auto d = t.data_mut();
    std::fill(d.begin(), d.end(), Real{0});
  };
  zero(g.gate_proj.weight);
  for (double b : {20.0, -20.0}) {
    for (Real& x : g.gate_proj.bias.data_mut()) x = Real(b);
    const GatedFusionState st = gated_fusion(g, f_i, f_p);
    CHECK(max_abs_diff(st.f_pi, f_i) > 1e-3);
    CHECK(max_abs_diff(st.mixed, b > 0 ? st.f_pi : f_i) < 1e-6);
  }
  zero(g.gate_proj.bias);
  const GatedFusionState mid = gated_fusion(g, f_i, f_p);
  CHECK(max_abs_diff(mid.mixed, scale(add(mid.f_pi, f_i), 0.5)) < 1e-15);
  CHECK_CODE(gated_fusion(g, f_i, Tensor::zeros({0, 8})), ErrorCode::kEmpty);
}

TEST_CASE("gated output is a convex combination") {
  RngStream rng(6, 1);
  for (int trial = 0; trial < 20; ++trial) {
    GatedFusion g = GatedFusion::make(8, 2, 16, rng);
    randomize(g.cross_attn.output.weight, rng, 1.0);
    randomize(g.gate_proj.bias, rng, 2.0);
    const GatedFusionState st = gated_fusion(g, randn({3, 8}, rng), randn({5, 8}, rng));
    for (std::size_t k = 0; k < st.mixed.numel(); ++k) {
      const double a = st.f_pi.data()[k], b = st.f_i.data()[k], m = st.mixed.data()[k];
      CHECK(st.gate.data()[k] >= 0);
      CHECK(st.gate.data()[k] <= 1);
      CHECK(m >= std::min(a, b) - 1e-12);
      CHECK(m <= std::max(a, b) + 1e-12);
    }
  }
}

TEST_CASE("identity at init and the ungated ablation") {
  RngStream rng(7, 1);
  GatedFusion g = GatedFusion::make(8, 2, 16, rng);
  const Tensor f_i = randn({4, 8}, rng), f_p = randn({6, 8}, rng);
  const GatedFusionState st = gated_fusion(g, f_i, f_p);
  CHECK(max_abs_diff(st.out, f_i) == 0);

  randomize(g.cross_attn.output.weight, rng, 1.0);
  g.gated = false;
  const GatedFusionState un = gated_fusion(g, f_i, f_p);
  CHECK(max_abs_diff(un.mixed, un.f_pi) == 0);
}

TEST_CASE("answer vocabulary") {
  const AnswerVocabulary v({"yes", "no", "left lung", "right lung"});
  CHECK(v.size() == 4);
  CHECK(v.word_count() == 6);
  CHECK(v.max_tokens() == 2);
  CHECK(v.tokenize("left lung") == v.tokens(2));
  CHECK_CODE(v.tokenize("spleen"), ErrorCode::kVocabulary);
  const Tensor pool = v.pooling_matrix();
  CHECK(pool.shape() == Shape{4, 6});
  for (std::size_t a = 0; a < 4; ++a) {
    double s = 0;
    for (std::size_t w = 0; w < 6; ++w) s += pool.at(a, w);
    CHECK(std::abs(s - 1) < 1e-15);
    CHECK(pool.at(a, 0) == 0);
  }
  CHECK_CODE(AnswerVocabulary(std::vector<std::string>{}), ErrorCode::kVocabulary);
}

TEST_CASE("decoder loss at init is near log of the vocabulary") {
  RngStream rng(8, 1);
  const std::size_t words = 12;
  const AnswerDecoder dec(words, 16, 2, 32, 4, rng);
  const Tensor ctx = randn({5, 16}, rng);
  const double l = decoder_loss(dec, ctx, {3}).item();
  CHECK(std::abs(l - std::log(double(words))) < 0.1);

  const Tensor lg = dec.logits(ctx, std::vector<RowSpan>{{0, 5}}, {{3}});
  CHECK(lg.shape() == Shape{1, words});
  const Tensor lp = log_softmax_rows(lg);
  CHECK(std::abs(l + lp.at(0, 3)) < 1e-12);

  CHECK_CODE(decoder_loss(dec, ctx, {}), ErrorCode::kVocabulary);
  CHECK_CODE(decoder_loss(dec, ctx, {words}), ErrorCode::kVocabulary);
  CHECK_CODE(decoder_loss(dec, ctx, {1, 2, 3, 4, 5}), ErrorCode::kVocabulary);
}

TEST_CASE("decoder loss gradient with respect to the context") {
  RngStream rng(9, 1);
  AnswerDecoder dec(7, 8, 2, 16, 3, rng);
  ParamList ps;
  dec.collect(ps, "dec");
  for (auto& p : ps)
    if (p.name.find("output.weight") != std::string::npos || p.name.find("down.weight") != std::string::npos)
      randomize(p.tensor, rng);
  const Tensor ctx = randn({4, 8}, rng);
  CHECK(grad_check([&](const Tensor& x) { return decoder_loss(dec, x, {2, 5}); }, ctx) < 1e-5);
}

TEST_CASE("rank_answers") {
  RngStream rng(10, 1);
  const AnswerDecoder dec(9, 16, 2, 32, 3, rng);
  const Tensor ctx = randn({5, 16}, rng);
  CHECK(rank_answers(dec, ctx, {{4, 2}}) == 0);
  CHECK(rank_answers(dec, ctx, {{6}, {6}, {6}}) == 0);

  const std::vector<std::vector<std::size_t>> cands{{1}, {2, 3}, {4}, {5, 6}, {7}};
  std::size_t best = 0;
  double lo = 1e300;
  for (std::size_t c = 0; c < cands.size(); ++c) {
    const double l = decoder_loss(dec, ctx, cands[c]).item();
    if (l < lo) lo = l, best = c;
  }
  CHECK(rank_answers(dec, ctx, cands) == best);
  CHECK_CODE(rank_answers(dec, ctx, {}), ErrorCode::kEmpty);
}
