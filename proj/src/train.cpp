#include "unialign/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "unialign/optim.hpp"

namespace unialign {

namespace {

enum : std::uint64_t {
  kShuffle = 31,
  kViewChoice = 32,
  kDropout = 33,
  kNegatives = 34,
  kEvalNegatives = 35,
  kFinetune = 36,
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::size_t> shuffled(std::size_t n, RngStream rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

// Consecutive chunks of `order`; a trailing chunk shorter than two is dropped
// since contrastive rows need at least one other sample.
std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += size) {
    const std::size_t e = std::min(order.size(), b + size);
    if (e - b >= 2) out.emplace_back(order.begin() + b, order.begin() + e);
  }
  return out;
}

// Row-stacked token blocks, CLS first in each block.
struct Blocks {
  Tensor rows;
  Tensor cls;
  std::size_t per = 0;
  std::size_t count = 0;
};

Blocks with_cls(const TokenEncoder::Batch& b) {
  std::vector<std::size_t> idx;
  idx.reserve(b.count * (b.per_sample + 1));
  for (std::size_t s = 0; s < b.count; ++s) {
    idx.push_back(s);
    for (std::size_t j = 0; j < b.per_sample; ++j) idx.push_back(b.count + s * b.per_sample + j);
  }
  return {gather_rows(concat_rows({b.cls, b.tokens}), idx), b.cls, b.per_sample + 1, b.count};
}

Tensor gather_blocks(const Blocks& src, const std::vector<std::size_t>& blocks) {
  std::vector<std::size_t> idx;
  idx.reserve(blocks.size() * src.per);
  for (std::size_t k : blocks)
    for (std::size_t j = 0; j < src.per; ++j) idx.push_back(k * src.per + j);
  return gather_rows(src.rows, idx);
}

std::vector<RowSpan> uniform_spans(std::size_t count, std::size_t per) {
  std::vector<RowSpan> s(count);
  for (std::size_t k = 0; k < count; ++k) s[k] = {k * per, per};
  return s;
}

void check_finite(double x, const std::string& where) {
  if (!std::isfinite(x)) fail(ErrorCode::kDiverged, where + ": loss is not finite");
}

Temperatures temperatures(const TrainConfig& cfg) {
  return {static_cast<Real>(cfg.tau1), static_cast<Real>(cfg.tau2), static_cast<Real>(cfg.tau3)};
}

// Image side for the image-text terms is view 1 or view 2 per sample.
SoftLabelBlock make_labels(const TrainConfig& cfg, const TeacherOracle& teacher,
                           const std::vector<const RawSample*>& batch,
                           const std::vector<std::size_t>& image_block) {
  const std::size_t n = batch.size();
  if (!cfg.soft_labels) return one_hot_labels(n);
  NoGradGuard guard;
  std::vector<Tensor> z;
  for (const auto* s : batch) z.push_back(s->latent);
  const TeacherEmbeddings te = teacher.embed(concat_rows(z));
  const Tensor inter = gather_rows(concat_rows({te.view1, te.view2}), image_block);
  return teacher_soft_labels(inter, te, temperatures(cfg), static_cast<Real>(cfg.lambda));
}

struct Encoded {
  Blocks images;  // 2n blocks: view 1 of every sample, then view 2
  Blocks texts;   // n blocks, or 2n with a second dropout encoding
  std::vector<std::size_t> image_block;
  std::size_t n = 0;
};

Encoded encode_batch(const Model& m, const std::vector<const RawSample*>& batch,
                     const std::vector<std::size_t>& image_block, bool second_text,
                     RngStream* dropout_rng, RngStream* second_rng) {
  Encoded e;
  e.n = batch.size();
  e.image_block = image_block;
  std::vector<Tensor> views, reports;
  for (const auto* s : batch) views.push_back(s->view1);
  for (const auto* s : batch) views.push_back(s->view2);
  for (const auto* s : batch) reports.push_back(s->report);
  e.images = with_cls(m.image_encoder.encode(views));
  if (!second_text) {
    e.texts = with_cls(m.text_encoder.encode(reports, dropout_rng));
  } else if (dropout_rng == second_rng) {
    std::vector<Tensor> twice = reports;
    twice.insert(twice.end(), reports.begin(), reports.end());
    e.texts = with_cls(m.text_encoder.encode(twice, dropout_rng));
  } else {
    const auto first = m.text_encoder.encode(reports, dropout_rng);
    const auto second = m.text_encoder.encode(reports, second_rng);
    TokenEncoder::Batch both;
    both.count = 2 * e.n;
    both.per_sample = first.per_sample;
    both.cls = concat_rows({first.cls, second.cls});
    both.tokens = concat_rows({first.tokens, second.tokens});
    e.texts = with_cls(both);
  }
  return e;
}

GlobalLoss global_terms(const Model& m, const Encoded& e, const SoftLabelBlock& labels,
                        const TrainConfig& cfg) {
  const std::size_t n = e.n;
  GlobalBatch gb;
  gb.image = gather_rows(e.images.cls, e.image_block);
  gb.view1 = slice_rows(e.images.cls, 0, n);
  gb.view2 = slice_rows(e.images.cls, n, 2 * n);
  gb.text = slice_rows(e.texts.cls, 0, n);
  return global_loss(gb, m.heads, labels, temperatures(cfg),
                     {cfg.inter_alignment, cfg.intra_alignment});
}

struct FusedGroup {
  Tensor a, b;
  std::size_t per_a = 0, per_b = 0;
};

// Co-attention over one kind of pair. The t2t positive pairs report i with
// its second dropout encoding (text block n + i).
FusedGroup fuse_group(const Model& m, const Encoded& e, PairKind kind,
                      const std::vector<PairIndex>& pairs, RngStream* attn_rng) {
  std::vector<std::size_t> ab, bb;
  for (const auto& p : pairs) {
    switch (kind) {
      case PairKind::kImageText:
        ab.push_back(e.image_block[p.i]);
        bb.push_back(p.j);
        break;
      case PairKind::kImageImage:
        ab.push_back(p.i);
        bb.push_back(e.n + p.j);
        break;
      case PairKind::kTextText:
        ab.push_back(p.i);
        bb.push_back(p.label == 0 ? e.n + p.i : p.j);
        break;
    }
  }
  const Blocks& sa = kind == PairKind::kTextText ? e.texts : e.images;
  const Blocks& sb = kind == PairKind::kImageImage ? e.images : e.texts;
  CoAttention::Side a{gather_blocks(sa, ab), uniform_spans(ab.size(), sa.per),
                      kind == PairKind::kTextText ? Stream::kText : Stream::kImage};
  CoAttention::Side b{gather_blocks(sb, bb), uniform_spans(bb.size(), sb.per),
                      kind == PairKind::kImageImage ? Stream::kImage : Stream::kText};
  auto [oa, ob] = m.co_attention.forward(a, b, attn_rng);
  return {oa, ob, sa.per, sb.per};
}

Tensor pooled(const Tensor& rows, std::size_t count, std::size_t per) {
  std::vector<std::size_t> idx(count);
  for (std::size_t k = 0; k < count; ++k) idx[k] = k * per;
  return gather_rows(rows, idx);
}

// Mean over pairs of <T, C> on the fused token rows (CLS excluded); T comes
// from the proximal solver on the current cost and is held constant.
Tensor local_term(const FusedGroup& g, const std::vector<std::size_t>& which, const IpotConfig& ipc,
                  PlanCache* cache) {
  Tensor total;
  for (std::size_t k : which) {
    const Tensor img = slice_rows(g.a, k * g.per_a + 1, (k + 1) * g.per_a);
    const Tensor txt = slice_rows(g.b, k * g.per_b + 1, (k + 1) * g.per_b);
    const Tensor cost = cost_matrix(img, txt);
    TransportPlan plan;
    if (cache && cache->frozen) {
      if (cache->next >= cache->plans.size()) fail(ErrorCode::kContract, "plan cache exhausted");
      plan = cache->plans[cache->next++];
    } else {
      plan = ipot(cost.detach(), ipc);
      if (cache) cache->plans.push_back(plan);
    }
    const Tensor term = local_loss(cost, plan);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, Real(1) / Real(which.size()));
}

struct Stage2Out {
  Tensor local;                      // undefined when not requested
  std::vector<HardNegativeSet> sets; // empty when not requested
};

Stage2Out stage2_forward(const Model& m, const Encoded& e, const SoftLabelBlock& labels,
                         bool want_local, bool want_hn, const IpotConfig& ipc, RngStream& neg_rng,
                         RngStream* attn_rng, PlanCache* cache = nullptr) {
  Stage2Out out;
  if (!want_hn) {
    if (!want_local) return out;
    std::vector<PairIndex> pairs;
    for (std::size_t i = 0; i < e.n; ++i) pairs.push_back({PairKind::kImageText, i, i, 0});
    const FusedGroup g = fuse_group(m, e, PairKind::kImageText, pairs, attn_rng);
    std::vector<std::size_t> all(e.n);
    std::iota(all.begin(), all.end(), 0);
    out.local = local_term(g, all, ipc, cache);
    return out;
  }
  const PairFuser fuser = [&](std::span<const PairIndex> flat) {
    std::vector<std::pair<Tensor, Tensor>> result(flat.size());
    for (PairKind kind : {PairKind::kImageText, PairKind::kImageImage, PairKind::kTextText}) {
      std::vector<PairIndex> pairs;
      std::vector<std::size_t> where;
      for (std::size_t k = 0; k < flat.size(); ++k)
        if (flat[k].kind == kind) {
          pairs.push_back(flat[k]);
          where.push_back(k);
        }
      if (pairs.empty()) continue;
      const FusedGroup g = fuse_group(m, e, kind, pairs, attn_rng);
      const Tensor pa = pooled(g.a, pairs.size(), g.per_a);
      const Tensor pb = pooled(g.b, pairs.size(), g.per_b);
      for (std::size_t k = 0; k < pairs.size(); ++k)
        result[where[k]] = {slice_rows(pa, k, k + 1), slice_rows(pb, k, k + 1)};
      if (kind == PairKind::kImageText && want_local) {
        // The i2t positives are exactly the pairs the local loss aligns.
        std::vector<std::size_t> positives;
        for (std::size_t k = 0; k < pairs.size(); ++k)
          if (pairs[k].label == 0) positives.push_back(k);
        out.local = local_term(g, positives, ipc, cache);
      }
    }
    return result;
  };
  out.sets = build_hn_set(labels, neg_rng, fuser);
  return out;
}

std::vector<const RawSample*> pick(const std::vector<RawSample>& all, const std::vector<std::size_t>& idx) {
  std::vector<const RawSample*> out;
  for (std::size_t i : idx) out.push_back(&all[i]);
  return out;
}

void zero_all(const Model& m) {
  for (auto p : m.params()) p.tensor.zero_grad();
}

struct Accum {
  double sum = 0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    ++n;
  }
  double mean() const { return n ? sum / double(n) : kNaN; }
};

void check_architecture(const Model& m, const TrainConfig& cfg) {
  const TrainConfig& a = m.config;
  if (a.embed_dim != cfg.embed_dim || a.hidden_width != cfg.hidden_width || a.proj_dim != cfg.proj_dim ||
      a.layers != cfg.layers || a.heads != cfg.heads || a.ffn_width != cfg.ffn_width) {
    fail(ErrorCode::kConfig, "model widths do not match the training config");
  }
}

std::string step_label(int stage, std::size_t epoch, std::size_t step) {
  return "stage " + std::to_string(stage) + " epoch " + std::to_string(epoch + 1) + " step " +
         std::to_string(step + 1);
}

Objective objective(const Model& model, const Corpus& corpus, const std::vector<const RawSample*>& batch,
                    const TrainConfig& cfg, int stage, RngStream& view_rng, RngStream& drop_rng,
                    RngStream& neg_rng, PlanCache* cache) {
  const std::size_t n = batch.size();
  std::vector<std::size_t> image_block(n);
  for (std::size_t i = 0; i < n; ++i) image_block[i] = view_rng.bernoulli(0.5) ? n + i : i;
  const SoftLabelBlock labels = make_labels(cfg, corpus.teacher, batch, image_block);
  Objective obj;
  auto accumulate = [&](const Tensor& t) { obj.total = obj.total.defined() ? add(obj.total, t) : t; };
  if (stage == 1) {
    const Encoded e = encode_batch(model, batch, image_block, false, &drop_rng, &drop_rng);
    obj.global = global_terms(model, e, labels, cfg).total;
    accumulate(obj.global);
    return obj;
  }
  const bool want_local = cfg.w_local > 0;
  const bool want_hn = cfg.w_hn > 0;
  const Encoded e = encode_batch(model, batch, image_block, want_hn, &drop_rng, &drop_rng);
  const Stage2Out s2 =
      stage2_forward(model, e, labels, want_local, want_hn, ipot_config(cfg), neg_rng, &drop_rng, cache);
  if (s2.local.defined()) {
    obj.local = s2.local;
    accumulate(scale(s2.local, Real(cfg.w_local)));
  }
  if (!s2.sets.empty()) {
    obj.hn = hn_loss(s2.sets, model.pair_head);
    accumulate(scale(obj.hn, Real(cfg.w_hn)));
  }
  if (cfg.stage2_global) {
    obj.global = global_terms(model, e, labels, cfg).total;
    accumulate(obj.global);
  }
  if (!obj.total.defined()) fail(ErrorCode::kConfig, "stage 2 has no active loss");
  return obj;
}

}  // namespace

IpotConfig ipot_config(const TrainConfig& cfg) {
  IpotConfig c;
  c.beta = cfg.ipot_beta;
  c.outer_iters = cfg.ipot_outer_iters;
  c.inner_sinkhorn_iters = cfg.ipot_inner_iters;
  c.tolerance = cfg.ipot_tolerance;
  return c;
}

Objective pretrain_objective(const Model& model, const Corpus& corpus,
                             const std::vector<std::size_t>& batch, const TrainConfig& cfg,
                             int stage, std::uint64_t seed, PlanCache* plans) {
  if (stage != 1 && stage != 2) fail(ErrorCode::kInvalidArgument, "pretrain_objective: stage must be 1 or 2");
  if (batch.size() < 2) fail(ErrorCode::kSize, "pretrain_objective: batch needs at least two samples");
  for (std::size_t i : batch)
    if (i >= corpus.train.size()) fail(ErrorCode::kInvalidArgument, "pretrain_objective: index out of range");
  RngStream view_rng(seed, kViewChoice), drop_rng(seed, kDropout), neg_rng(seed, kNegatives);
  if (plans && plans->frozen) plans->next = 0;
  return objective(model, corpus, pick(corpus.train, batch), cfg, stage, view_rng, drop_rng, neg_rng, plans);
}

PretrainReport pretrain(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                        const ProgressFn& progress) {
  validate(cfg);
  if (corpus.train.size() < 2) fail(ErrorCode::kEmpty, "pretrain: need at least two training samples");
  if (corpus.eval.size() < 10) fail(ErrorCode::kEmpty, "pretrain: need at least ten held-out samples");
  const bool want_local = cfg.w_local > 0;
  const bool want_hn = cfg.w_hn > 0;
  if (cfg.stage2_epochs > 0 && !want_local && !want_hn && !cfg.stage2_global) {
    fail(ErrorCode::kConfig, "pretrain: stage 2 has no active loss");
  }
  check_architecture(model, cfg);
  model.config = cfg;
  PretrainReport report;

  const RngStream shuffle_root(cfg.seed, kShuffle), view_root(cfg.seed, kViewChoice),
      drop_root(cfg.seed, kDropout), neg_root(cfg.seed, kNegatives);

  for (int stage = 1; stage <= 2; ++stage) {
    const std::size_t epochs = stage == 1 ? cfg.stage1_epochs : cfg.stage2_epochs;
    if (epochs == 0) continue;
    ParamList trainable = model.alignment_params();
    if (stage == 1 || !cfg.freeze_encoders)
      for (auto& p : model.encoder_params()) trainable.push_back(p);
    const double lr = stage == 1 ? cfg.learning_rate : cfg.stage2_learning_rate;
    AdamW opt(trainable, {lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    StageCounters& counters = stage == 1 ? report.stage1 : report.stage2;

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
      const std::uint64_t key = std::uint64_t(stage) * 100000 + epoch;
      const auto batches = chunk(shuffled(corpus.train.size(), shuffle_root.substream(key)), cfg.batch_size);
      RngStream view_rng = view_root.substream(key);
      RngStream drop_rng = drop_root.substream(key);
      RngStream neg_rng = neg_root.substream(key);
      Accum lg, ll, lh;
      for (std::size_t step = 0; step < batches.size(); ++step) {
        zero_all(model);
        const Objective obj = objective(model, corpus, pick(corpus.train, batches[step]), cfg, stage,
                                        view_rng, drop_rng, neg_rng, nullptr);
        const Tensor& loss = obj.total;
        if (obj.global.defined()) {
          ++counters.global;
          lg.add(obj.global.item());
        }
        if (obj.local.defined()) {
          ++counters.local;
          ll.add(obj.local.item());
        }
        if (obj.hn.defined()) {
          ++counters.hn;
          lh.add(obj.hn.item());
        }
        ++counters.steps;
        check_finite(loss.item(), step_label(stage, epoch, step));
        loss.backward();
        opt.step();
      }

      EpochMetrics em;
      em.stage = stage;
      em.epoch = epoch + 1;
      em.loss_global = lg.mean();
      em.loss_local = ll.mean();
      em.loss_hn = lh.mean();
      const RetrievalMetrics r = evaluate_retrieval(model, corpus.eval);
      em.recall1 = r.recall1;
      em.recall5 = r.recall5;
      em.hn_accuracy = stage == 2 && want_hn
                           ? evaluate_hn_accuracy(model, corpus.eval, corpus.teacher, cfg, key)
                           : kNaN;
      report.epochs.push_back(em);
      if (progress) progress(em);
    }
  }
  zero_all(model);
  return report;
}

RetrievalMetrics evaluate_retrieval(const Model& model, const std::vector<RawSample>& samples) {
  if (samples.size() < 2) fail(ErrorCode::kEmpty, "evaluate_retrieval: need at least two samples");
  NoGradGuard guard;
  std::vector<Tensor> views, reports;
  for (const auto& s : samples) {
    views.push_back(s.view1);
    reports.push_back(s.report);
  }
  const Tensor img = model.image_encoder.encode(views).cls;
  const Tensor txt = model.text_encoder.encode(reports).cls;
  const Tensor s = similarity_matrix(img, txt, model.heads.i2t);
  const std::size_t n = samples.size();
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real own = s.at(i, i);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && s.at(i, j) >= own) ++rank;
    hit1 += rank < 1;
    hit5 += rank < 5;
  }
  return {double(hit1) / double(n), double(hit5) / double(n), n};
}

double evaluate_hn_accuracy(const Model& model, const std::vector<RawSample>& samples,
                            const TeacherOracle& teacher, const TrainConfig& cfg,
                            std::uint64_t seed) {
  NoGradGuard guard;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  const RngStream root(cfg.seed, kEvalNegatives);
  RngStream neg_rng = root.substream(seed);
  RngStream drop_rng = root.substream(seed).substream(1);
  std::vector<HardNegativeSet> all;
  for (const auto& idx : chunk(order, cfg.batch_size)) {
    const auto batch = pick(samples, idx);
    std::vector<std::size_t> image_block(batch.size());
    std::iota(image_block.begin(), image_block.end(), 0);
    const SoftLabelBlock labels = make_labels(cfg, teacher, batch, image_block);
    const Encoded e = encode_batch(model, batch, image_block, true, nullptr, &drop_rng);
    auto s2 = stage2_forward(model, e, labels, false, true, ipot_config(cfg), neg_rng, nullptr);
    for (auto& s : s2.sets) all.push_back(std::move(s));
  }
  if (all.empty()) fail(ErrorCode::kEmpty, "evaluate_hn_accuracy: no batches");
  return hn_accuracy(all, model.pair_head);
}

// ---------------------------------------------------------------------------

namespace {

struct VqaContext {
  GatedFusionState state;
  std::vector<RowSpan> spans;
};

VqaContext vqa_context(const Model& m, const std::vector<const VqaSample*>& batch, RngStream* drop) {
  std::vector<Tensor> images, questions;
  for (const auto* s : batch) {
    images.push_back(s->image);
    questions.push_back(s->question);
  }
  const Blocks img = with_cls(m.image_encoder.encode(images));
  const Blocks q = with_cls(m.text_encoder.encode(questions, drop));
  const std::size_t n = batch.size();
  auto [oa, ob] = m.co_attention.forward({img.rows, uniform_spans(n, img.per), Stream::kImage},
                                         {q.rows, uniform_spans(n, q.per), Stream::kText}, drop);
  // F_i stacks the fused image and question tokens, CLS rows dropped.
  const std::size_t per = img.per + q.per - 2;
  const std::size_t offset = n * img.per;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 1; j < img.per; ++j) idx.push_back(b * img.per + j);
    for (std::size_t j = 1; j < q.per; ++j) idx.push_back(offset + b * q.per + j);
  }
  const Tensor f_i = gather_rows(concat_rows({oa, ob}), idx);
  const Tensor vocab = matmul(m.vocabulary.pooling_matrix(), m.decoder.token_embedding());
  const Tensor f_p = m.knowledge(vocab);
  VqaContext ctx;
  ctx.spans = uniform_spans(n, per);
  ctx.state = m.fusion(f_i, ctx.spans, f_p);
  return ctx;
}

}  // namespace

VqaReport evaluate_vqa(const Model& model, const std::vector<VqaSample>& samples) {
  if (!model.has_vqa) fail(ErrorCode::kContract, "evaluate_vqa: model has no VQA parts");
  if (samples.empty()) fail(ErrorCode::kEmpty, "evaluate_vqa: no samples");
  NoGradGuard guard;
  const std::size_t m = model.vocabulary.size();
  std::vector<std::vector<std::size_t>> candidates;
  for (std::size_t a = 0; a < m; ++a) candidates.push_back(model.vocabulary.tokens(a));
  VqaReport r;
  std::size_t hits = 0, open_hits = 0, closed_hits = 0;
  constexpr std::size_t kBatch = 64;
  for (std::size_t b = 0; b < samples.size(); b += kBatch) {
    std::vector<const VqaSample*> batch;
    for (std::size_t i = b; i < std::min(samples.size(), b + kBatch); ++i) batch.push_back(&samples[i]);
    const VqaContext ctx = vqa_context(model, batch, nullptr);
    std::vector<RowSpan> spans;
    std::vector<std::vector<std::size_t>> answers;
    for (std::size_t i = 0; i < batch.size(); ++i)
      for (std::size_t a = 0; a < m; ++a) {
        spans.push_back(ctx.spans[i]);
        answers.push_back(candidates[a]);
      }
    const auto losses = model.decoder.sequence_losses(ctx.state.out, spans, answers);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto first = losses.begin() + std::ptrdiff_t(i * m);
      const std::size_t pred = std::size_t(std::min_element(first, first + std::ptrdiff_t(m)) - first);
      const bool ok = pred == batch[i]->answer;
      hits += ok;
      if (batch[i]->type == QuestionType::kOpen) {
        ++r.open_count;
        open_hits += ok;
      } else {
        ++r.closed_count;
        closed_hits += ok;
      }
    }
  }
  r.accuracy = double(hits) / double(samples.size());
  r.open_accuracy = r.open_count ? double(open_hits) / double(r.open_count) : kNaN;
  r.closed_accuracy = r.closed_count ? double(closed_hits) / double(r.closed_count) : kNaN;
  return r;
}

VqaReport finetune_vqa(Model& model, const Corpus& corpus, const TrainConfig& cfg) {
  validate(cfg);
  check_architecture(model, cfg);
  if (corpus.vqa_train.size() < 2 || corpus.vqa_eval.empty())
    fail(ErrorCode::kEmpty, "finetune_vqa: corpus has no VQA split");
  if (!cfg.init_from_pretrained) model.reset_backbone(cfg.seed);
  if (!model.has_vqa) {
    model.init_vqa(corpus.answers, cfg.seed);
  } else if (!(model.vocabulary == corpus.answers)) {
    fail(ErrorCode::kVocabulary, "finetune_vqa: checkpoint vocabulary differs from the corpus");
  }
  model.config.gated_fusion = cfg.gated_fusion;
  model.config.init_from_pretrained = cfg.init_from_pretrained;
  model.config.finetune_epochs = cfg.finetune_epochs;
  model.config.finetune_learning_rate = cfg.finetune_learning_rate;
  model.config.finetune_backbone = cfg.finetune_backbone;
  model.fusion.gated = cfg.gated_fusion;

  AdamW opt(cfg.finetune_backbone ? model.params() : model.vqa_params(),
            {cfg.finetune_learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const RngStream root(cfg.seed, kFinetune);
  std::vector<double> epoch_loss;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    const auto batches = chunk(shuffled(corpus.vqa_train.size(), root.substream(2 * epoch)), cfg.batch_size);
    RngStream drop = root.substream(2 * epoch + 1);
    Accum acc;
    for (std::size_t step = 0; step < batches.size(); ++step) {
      std::vector<const VqaSample*> batch;
      std::vector<std::vector<std::size_t>> answers;
      for (std::size_t i : batches[step]) {
        batch.push_back(&corpus.vqa_train[i]);
        answers.push_back(model.vocabulary.tokens(corpus.vqa_train[i].answer));
      }
      zero_all(model);
      const VqaContext ctx = vqa_context(model, batch, &drop);
      const Tensor loss = model.decoder.loss(ctx.state.out, ctx.spans, answers);
      check_finite(loss.item(), "finetune epoch " + std::to_string(epoch + 1) + " step " + std::to_string(step + 1));
      acc.add(loss.item());
      loss.backward();
      opt.step();
    }
    epoch_loss.push_back(acc.mean());
  }
  zero_all(model);
  VqaReport r = evaluate_vqa(model, corpus.vqa_eval);
  r.epoch_loss = std::move(epoch_loss);
  return r;
}

Tensor vqa_objective(const Model& model, const Corpus& corpus, const std::vector<std::size_t>& batch,
                     std::uint64_t seed) {
  if (!model.has_vqa) fail(ErrorCode::kContract, "vqa_objective: model has no VQA parts");
  if (batch.empty()) fail(ErrorCode::kEmpty, "vqa_objective: empty batch");
  std::vector<const VqaSample*> samples;
  std::vector<std::vector<std::size_t>> answers;
  for (std::size_t i : batch) {
    if (i >= corpus.vqa_train.size()) fail(ErrorCode::kInvalidArgument, "vqa_objective: index out of range");
    samples.push_back(&corpus.vqa_train[i]);
    answers.push_back(model.vocabulary.tokens(corpus.vqa_train[i].answer));
  }
  RngStream drop(seed, kFinetune);
  const VqaContext ctx = vqa_context(model, samples, &drop);
  return model.decoder.loss(ctx.state.out, ctx.spans, answers);
}

// ---------------------------------------------------------------------------

std::string metrics_csv(const std::vector<EpochMetrics>& epochs) {
  std::ostringstream os;
  os << "stage,epoch,loss_global,loss_local,loss_hn,recall1,recall5,hn_accuracy\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  for (const auto& e : epochs) {
    os << e.stage << ',' << e.epoch << ',' << num(e.loss_global) << ',' << num(e.loss_local) << ','
       << num(e.loss_hn) << ',' << num(e.recall1) << ',' << num(e.recall5) << ','
       << num(e.hn_accuracy) << '\n';
  }
  return os.str();
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& epochs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write metrics '" + path + "'");
  os << metrics_csv(epochs);
}

void write_plan_csv(std::ostream& os, const TransportPlan& plan, double beta) {
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  os << "p,t,beta,iters,residual\n";
  os << plan.rows << ',' << plan.cols << ',' << num(beta) << ',' << plan.iterations_run << ','
     << num(plan.marginal_residual) << '\n';
  for (std::size_t i = 0; i < plan.rows; ++i) {
    for (std::size_t j = 0; j < plan.cols; ++j) os << (j ? "," : "") << num(plan.at(i, j));
    os << '\n';
  }
}

Heatmap heatmap(const Model& model, const Corpus& corpus, std::size_t sample) {
  if (sample >= corpus.eval.size()) {
    fail(ErrorCode::kInvalidArgument, "heatmap: sample " + std::to_string(sample) + " out of range (" +
                                          std::to_string(corpus.eval.size()) + " held-out samples)");
  }
  NoGradGuard guard;
  const RawSample& s = corpus.eval[sample];
  const auto [vi, ri] = model.co_attention(encode_image(model.image_encoder, s.view1),
                                           encode_text(model.text_encoder, s.report));
  const Tensor cost = cost_matrix(slice_rows(vi, 1, vi.rows()), slice_rows(ri, 1, ri.rows()));
  Heatmap h;
  const IpotConfig ipc = ipot_config(model.config);
  h.plan = ipot(cost, ipc);
  h.beta = ipc.beta;
  if (model.has_vqa && !corpus.vqa_eval.empty()) {
    const VqaSample* v = &corpus.vqa_eval[sample % corpus.vqa_eval.size()];
    h.gate = vqa_context(model, {v}, nullptr).state.gate;
  }
  return h;
}

Model make_model(const TrainConfig& cfg, const Corpus& corpus) {
  const CorpusConfig& c = corpus.config;
  const std::size_t mt = std::max({c.patches, c.text_tokens, corpus.question_tokens()});
  return Model(cfg, c.feature_width, mt);
}

}  // namespace unialign
