#include "unialign/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "unialign/train.hpp"

namespace unialign {

namespace {

using Probe = std::function<Tensor(const Tensor&)>;

Tensor uniform(const Shape& shape, RngStream& rng, double lo = -1, double hi = 1, bool rg = false) {
  std::vector<Real> d(numel(shape));
  for (Real& x : d) x = static_cast<Real>(lo + (hi - lo) * rng.uniform());
  return Tensor(shape, std::move(d), rg);
}

// Scalar readout with fixed pseudo-random weights, so every output entry
// contributes to the gradient with a distinct coefficient.
Tensor readout(const Tensor& y) {
  RngStream r(0x5eed, y.numel());
  return sum(mul(y, uniform(y.shape(), r)));
}

struct OpCase {
  Tensor x;
  Probe f;
};

GradCheckEntry op_entry(const std::string& name, std::size_t trials, std::uint64_t seed,
                        const std::function<OpCase(RngStream&)>& make, double tol = 1e-5) {
  GradCheckEntry e{"op." + name, 0, tol, 0, false};
  RngStream root(seed, std::hash<std::string>{}(name));
  for (std::size_t t = 0; t < trials; ++t) {
    RngStream rng = root.substream(t);
    OpCase c = make(rng);
    e.max_rel_error = std::max<double>(e.max_rel_error, grad_check(c.f, c.x));
    e.coordinates += c.x.numel();
  }
  e.passed = e.max_rel_error <= tol;
  return e;
}

void perturb(const ParamList& params, RngStream& rng, double sd) {
  for (const auto& p : params) {
    auto d = const_cast<Tensor&>(p.tensor).data_mut();
    for (Real& x : d) x += static_cast<Real>(rng.normal(0.0, sd));
  }
}

GradCheckEntry param_entry(const std::string& name, const std::function<Tensor()>& loss, ParamList params,
                           std::size_t max_coords, std::uint64_t seed, double tol) {
  RngStream rng(seed, std::hash<std::string>{}(name));
  const auto checks = grad_check_params(loss, params, Real(1e-5), max_coords, rng);
  GradCheckEntry e{name, 0, tol, 0, false};
  for (const auto& c : checks) {
    e.max_rel_error = std::max<double>(e.max_rel_error, c.max_rel_error);
    e.coordinates += c.coordinates;
  }
  e.passed = e.max_rel_error <= tol;
  return e;
}

GradCheckEntry input_entry(const std::string& name, const Probe& f, const Tensor& x, double tol) {
  GradCheckEntry e{name, grad_check(f, x), tol, x.numel(), false};
  e.passed = e.max_rel_error <= tol;
  return e;
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_ops(std::uint64_t seed, std::size_t trials) {
  std::vector<GradCheckEntry> out;
  auto add_case = [&](const std::string& name, const std::function<OpCase(RngStream&)>& make) {
    out.push_back(op_entry(name, trials, seed, make));
  };
  auto m = [](RngStream& r, std::size_t a, std::size_t b) { return uniform({a, b}, r); };

  add_case("matmul.lhs", [&](RngStream& r) {
    Tensor b = m(r, 4, 2);
    return OpCase{m(r, 3, 4), [b](const Tensor& x) { return readout(matmul(x, b)); }};
  });
  add_case("matmul.rhs", [&](RngStream& r) {
    Tensor a = m(r, 3, 4);
    return OpCase{m(r, 4, 2), [a](const Tensor& x) { return readout(matmul(a, x)); }};
  });
  add_case("transpose", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(transpose(x)); }};
  });
  add_case("add", [&](RngStream& r) {
    Tensor b = m(r, 3, 4);
    return OpCase{m(r, 3, 4), [b](const Tensor& x) { return readout(add(x, b)); }};
  });
  add_case("sub.lhs", [&](RngStream& r) {
    Tensor b = m(r, 3, 4);
    return OpCase{m(r, 3, 4), [b](const Tensor& x) { return readout(sub(x, b)); }};
  });
  add_case("sub.rhs", [&](RngStream& r) {
    Tensor a = m(r, 3, 4);
    return OpCase{m(r, 3, 4), [a](const Tensor& x) { return readout(sub(a, x)); }};
  });
  add_case("mul", [&](RngStream& r) {
    Tensor b = m(r, 3, 4);
    return OpCase{m(r, 3, 4), [b](const Tensor& x) { return readout(mul(x, b)); }};
  });
  add_case("mul.self", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(mul(x, x)); }};
  });
  add_case("scale", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(scale(x, Real(-2.5))); }};
  });
  add_case("add_scalar", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(mul(add_scalar(x, 0.7), x)); }};
  });
  add_case("add_row.matrix", [&](RngStream& r) {
    Tensor row = m(r, 1, 4);
    return OpCase{m(r, 3, 4), [row](const Tensor& x) { return readout(mul(add_row(x, row), x)); }};
  });
  add_case("add_row.row", [&](RngStream& r) {
    Tensor a = m(r, 3, 4);
    return OpCase{m(r, 1, 4), [a](const Tensor& x) { return readout(add_row(a, x)); }};
  });
  add_case("mul_row.matrix", [&](RngStream& r) {
    Tensor row = m(r, 1, 4);
    return OpCase{m(r, 3, 4), [row](const Tensor& x) { return readout(mul_row(x, row)); }};
  });
  add_case("mul_row.row", [&](RngStream& r) {
    Tensor a = m(r, 3, 4);
    return OpCase{m(r, 1, 4), [a](const Tensor& x) { return readout(mul_row(a, x)); }};
  });
  add_case("add_col.matrix", [&](RngStream& r) {
    Tensor col = m(r, 3, 1);
    return OpCase{m(r, 3, 4), [col](const Tensor& x) { return readout(mul(add_col(x, col), x)); }};
  });
  add_case("add_col.col", [&](RngStream& r) {
    Tensor a = m(r, 3, 4);
    return OpCase{m(r, 3, 1), [a](const Tensor& x) { return readout(add_col(a, x)); }};
  });
  add_case("mul_col.matrix", [&](RngStream& r) {
    Tensor col = m(r, 3, 1);
    return OpCase{m(r, 3, 4), [col](const Tensor& x) { return readout(mul_col(x, col)); }};
  });
  add_case("mul_col.col", [&](RngStream& r) {
    Tensor a = m(r, 3, 4);
    return OpCase{m(r, 3, 1), [a](const Tensor& x) { return readout(mul_col(a, x)); }};
  });
  add_case("sigmoid", [&](RngStream& r) {
    return OpCase{uniform({3, 4}, r, -3, 3), [](const Tensor& x) { return readout(sigmoid(x)); }};
  });
  add_case("log", [&](RngStream& r) {
    return OpCase{uniform({3, 4}, r, 0.5, 2), [](const Tensor& x) { return readout(log(x)); }};
  });
  add_case("exp", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(exp(x)); }};
  });
  add_case("gelu", [&](RngStream& r) {
    return OpCase{uniform({3, 4}, r, -3, 3), [](const Tensor& x) { return readout(gelu(x)); }};
  });
  add_case("softmax_rows", [&](RngStream& r) {
    return OpCase{uniform({3, 5}, r, -2, 2), [](const Tensor& x) { return readout(softmax_rows(x)); }};
  });
  add_case("log_softmax_rows", [&](RngStream& r) {
    return OpCase{uniform({3, 5}, r, -2, 2), [](const Tensor& x) { return readout(log_softmax_rows(x)); }};
  });
  add_case("l2_normalize_rows", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(l2_normalize_rows(x)); }};
  });
  add_case("layer_norm_rows", [&](RngStream& r) {
    return OpCase{m(r, 3, 5), [](const Tensor& x) { return readout(layer_norm_rows(x)); }};
  });
  add_case("sum", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return sum(mul(x, x)); }};
  });
  add_case("mean", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return mean(exp(x)); }};
  });
  add_case("mean_rows", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) { return readout(mean_rows(mul(x, x))); }};
  });
  add_case("concat_cols", [&](RngStream& r) {
    Tensor b = m(r, 3, 2);
    return OpCase{m(r, 3, 4), [b](const Tensor& x) { return readout(concat_cols({x, b, x})); }};
  });
  add_case("concat_rows", [&](RngStream& r) {
    Tensor b = m(r, 2, 4);
    return OpCase{m(r, 3, 4), [b](const Tensor& x) { return readout(concat_rows({b, x, x})); }};
  });
  add_case("slice_rows", [&](RngStream& r) {
    return OpCase{m(r, 5, 3), [](const Tensor& x) { return readout(slice_rows(x, 1, 4)); }};
  });
  add_case("gather_rows", [&](RngStream& r) {
    return OpCase{m(r, 4, 3), [](const Tensor& x) {
                    const std::size_t idx[] = {2, 0, 2, 3, 2};
                    return readout(gather_rows(x, idx));
                  }};
  });
  add_case("pick_cols", [&](RngStream& r) {
    return OpCase{m(r, 3, 4), [](const Tensor& x) {
                    const std::size_t idx[] = {3, 0, 1};
                    return readout(pick_cols(mul(x, x), idx));
                  }};
  });
  add_case("dropout", [&](RngStream& r) {
    const std::uint64_t key = r.index(1u << 30);
    return OpCase{m(r, 4, 4), [key](const Tensor& x) {
                    RngStream d(key, 1);
                    return readout(dropout(x, Real(0.3), d));
                  }};
  });
  add_case("segment_pool.weights", [&](RngStream& r) {
    Tensor tokens = m(r, 6, 3);
    return OpCase{m(r, 2, 3), [tokens](const Tensor& x) { return readout(segment_pool(x, tokens)); }};
  });
  add_case("segment_pool.tokens", [&](RngStream& r) {
    Tensor w = m(r, 2, 3);
    return OpCase{m(r, 6, 3), [w](const Tensor& x) { return readout(segment_pool(w, x)); }};
  });
  add_case("reshape", [&](RngStream& r) {
    return OpCase{m(r, 2, 6), [](const Tensor& x) { return readout(softmax_rows(x.reshape({3, 4}))); }};
  });
  for (bool causal : {false, true}) {
    const std::string tag = causal ? ".causal" : "";
    const std::vector<AttentionSegment> segs = {{0, 3, 0, 4}, {3, 2, 4, 3}};
    for (int which = 0; which < 3; ++which) {
      static const char* names[] = {"q", "k", "v"};
      add_case("attention." + std::string(names[which]) + tag, [&, which, causal, segs](RngStream& r) {
        Tensor q = m(r, 5, 4), k = m(r, 7, 4), v = m(r, 7, 4);
        Tensor base = which == 0 ? q : which == 1 ? k : v;
        return OpCase{base, [=](const Tensor& x) {
                        return readout(attention(which == 0 ? x : q, which == 1 ? x : k, which == 2 ? x : v,
                                                 segs, 2, causal));
                      }};
      });
    }
  }
  return out;
}

std::vector<GradCheckEntry> gradcheck_modules(std::uint64_t seed) {
  constexpr double kTol = 1e-3;
  std::vector<GradCheckEntry> out;
  RngStream rng(seed, 1);

  // Micro corpus and model: batch 4, width 8.
  CorpusConfig cc;
  cc.num_samples = 8;
  cc.eval_samples = 2;
  cc.clusters = 2;
  cc.latent_dim = 4;
  cc.patches = 3;
  cc.text_tokens = 4;
  cc.feature_width = 6;
  cc.teacher_dim = 4;
  cc.vqa_train_samples = 4;
  cc.vqa_eval_samples = 2;
  cc.seed = seed;
  const Corpus corpus = generate_corpus(cc);

  TrainConfig tc;
  tc.embed_dim = 8;
  tc.hidden_width = 8;
  tc.proj_dim = 8;
  tc.layers = 1;
  tc.heads = 2;
  tc.ffn_width = 8;
  tc.batch_size = 4;
  tc.seed = seed;
  Model model(tc, cc.feature_width, 8);
  model.init_vqa(corpus.answers, seed);
  // Zero-initialized projections would hide every path behind them.
  perturb(model.params(), rng, 0.2);

  const std::vector<std::size_t> batch4 = {0, 1, 2, 3};
  const std::vector<std::size_t> batch2 = {4, 5};

  {
    // KL alignment loss against the softmax of a similarity matrix.
    const Tensor s0 = uniform({4, 4}, rng, -1, 1);
    const Tensor h = soft_labels(alignment_probs(uniform({4, 4}, rng, -1, 1), Real(0.07)), Real(0.01));
    out.push_back(input_entry("loss.kl_row", [h](const Tensor& s) {
      return kl_row_loss(h, alignment_probs(s, Real(0.07)));
    }, s0.clone(), kTol));
  }
  {
    ParamList params = model.encoder_params();
    model.heads.collect(params, "heads");
    out.push_back(param_entry("loss.global", [&] {
      return pretrain_objective(model, corpus, batch4, tc, 1, seed).total;
    }, params, 6, seed, kTol));
  }
  {
    // Local loss on raw tokens, p=3, t=4, d=6, plan frozen.
    const Tensor tokens = uniform({7, 6}, rng);
    const TransportPlan plan = ipot(cost_matrix(slice_rows(tokens, 0, 3), slice_rows(tokens, 3, 7)));
    out.push_back(input_entry("loss.local.tokens", [plan](const Tensor& x) {
      return local_loss(cost_matrix(slice_rows(x, 0, 3), slice_rows(x, 3, 7)), plan);
    }, tokens.clone(), kTol));
  }
  {
    TrainConfig c = tc;
    c.w_hn = 0;
    PlanCache cache;
    pretrain_objective(model, corpus, batch4, c, 2, seed, &cache);
    cache.frozen = true;
    ParamList params = model.encoder_params();
    model.co_attention.collect(params, "co_attention");
    out.push_back(param_entry("loss.local.pipeline", [&] {
      return pretrain_objective(model, corpus, batch4, c, 2, seed, &cache).total;
    }, params, 4, seed, kTol));
  }
  {
    TrainConfig c = tc;
    c.w_local = 0;
    ParamList params = model.encoder_params();
    model.co_attention.collect(params, "co_attention");
    model.pair_head.collect(params, "pair_head");
    out.push_back(param_entry("loss.hard_negative", [&] {
      return pretrain_objective(model, corpus, batch4, c, 2, seed).total;
    }, params, 4, seed, kTol));
  }
  out.push_back(param_entry("loss.decoder", [&] {
    return vqa_objective(model, corpus, batch4, seed);
  }, model.params(), 4, seed, kTol));

  // Fusion blocks on their inputs.
  {
    MultiHeadAttention mha = MultiHeadAttention::make(8, 2, rng);
    ParamList p;
    mha.collect(p, "ca");
    perturb(p, rng, 0.3);
    const Tensor kv = uniform({5, 8}, rng);
    const Tensor q0 = uniform({3, 8}, rng);
    out.push_back(input_entry("block.cross_attention.query", [=](const Tensor& x) {
      return readout(cross_attention(x, kv, mha));
    }, q0.clone(), kTol));
    out.push_back(input_entry("block.cross_attention.kv", [=](const Tensor& x) {
      return readout(cross_attention(q0, x, mha));
    }, kv.clone(), kTol));
  }
  {
    const Tensor v0 = uniform({4, 8}, rng), r0 = uniform({5, 8}, rng);
    const CoAttention& co = model.co_attention;
    out.push_back(input_entry("block.co_attention.image", [&co, r0](const Tensor& x) {
      auto [a, b] = co(x, r0);
      return add(readout(a), readout(b));
    }, v0.clone(), kTol));
    out.push_back(input_entry("block.co_attention.text", [&co, v0](const Tensor& x) {
      auto [a, b] = co(v0, x);
      return add(readout(a), readout(b));
    }, r0.clone(), kTol));
  }
  {
    const Tensor k0 = uniform({5, 8}, rng);
    const KnowledgeEncoder& ke = model.knowledge;
    out.push_back(input_entry("block.knowledge_encode", [&ke](const Tensor& x) {
      return readout(knowledge_encode(ke, x));
    }, k0.clone(), kTol));
  }
  {
    const Tensor fi = uniform({6, 8}, rng), fp = uniform({4, 8}, rng);
    const GatedFusion& gf = model.fusion;
    out.push_back(input_entry("block.gated_fusion.joint", [&gf, fp](const Tensor& x) {
      return readout(gated_fusion(gf, x, fp).out);
    }, fi.clone(), kTol));
    out.push_back(input_entry("block.gated_fusion.knowledge", [&gf, fi](const Tensor& x) {
      return readout(gated_fusion(gf, fi, x).out);
    }, fp.clone(), kTol));
  }

  {
    // Everything composed on a two-sample batch.
    PlanCache cache;
    pretrain_objective(model, corpus, batch2, tc, 2, seed, &cache);
    cache.frozen = true;
    out.push_back(param_entry("pipeline.composed", [&] {
      Tensor total = pretrain_objective(model, corpus, batch2, tc, 1, seed).total;
      total = add(total, pretrain_objective(model, corpus, batch2, tc, 2, seed, &cache).total);
      return add(total, vqa_objective(model, corpus, {0, 1}, seed));
    }, model.params(), 3, seed, kTol));
  }
  return out;
}

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  auto out = gradcheck_ops(seed);
  for (auto& e : gradcheck_modules(seed)) out.push_back(std::move(e));
  return out;
}

OtBenchReport run_ot_bench(std::size_t trials_per_size, std::uint64_t seed, const IpotConfig& cfg,
                           const std::vector<std::size_t>& sizes) {
  validate(cfg);
  OtBenchReport rep;
  for (std::size_t n : sizes) {
    if (n == 0 || n > 6) fail(ErrorCode::kSize, "ot bench: sizes must be in 1..6");
    RngStream rng(seed, 1000 + n);
    for (std::size_t k = 0; k < trials_per_size; ++k) {
      const Tensor c = uniform({n, n}, rng, 0, 2);
      OtTrial t;
      t.n = n;
      t.plan = ipot(c, cfg);
      t.ipot_value = t.plan.value(c);
      t.oracle_value = lp_oracle(c);
      t.gap = std::abs(t.ipot_value - t.oracle_value);
      t.residual = t.plan.marginal_residual;
      t.converged = t.plan.converged;
      rep.max_gap = std::max(rep.max_gap, t.gap);
      rep.max_residual = std::max(rep.max_residual, t.residual);
      if (t.gap > rep.gap_tolerance || t.residual > rep.residual_tolerance) ++rep.failures;
      rep.trials.push_back(std::move(t));
    }
  }
  return rep;
}

void write_ot_bench_csv(std::ostream& os, const OtBenchReport& report, double beta) {
  for (const auto& t : report.trials) write_plan_csv(os, t.plan, beta);
}

}  // namespace unialign
