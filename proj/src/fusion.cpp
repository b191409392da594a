#include "unialign/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace unialign {

void validate(const CoAttentionConfig& cfg) {
  if (cfg.layers < 1) fail(ErrorCode::kConfig, "co-attention needs at least one layer");
  if (cfg.heads == 0 || cfg.width % cfg.heads != 0) {
    fail(ErrorCode::kConfig, "co-attention width " + std::to_string(cfg.width) +
                                 " is not divisible by " + std::to_string(cfg.heads) + " heads");
  }
  if (cfg.ffn_width == 0) fail(ErrorCode::kConfig, "co-attention ffn_width must be positive");
  if (cfg.dropout < 0 || cfg.dropout >= 1) fail(ErrorCode::kConfig, "co-attention dropout must be in [0,1)");
}

Tensor cross_attention(const Tensor& query_tokens, const Tensor& kv_tokens,
                       const MultiHeadAttention& params, std::vector<Real>* probs) {
  const RowSpan q{0, query_tokens.rows()};
  const RowSpan kv{0, kv_tokens.rows()};
  return params(query_tokens, std::span<const RowSpan>(&q, 1), kv_tokens,
                std::span<const RowSpan>(&kv, 1), false, probs);
}

// ---------------------------------------------------------------------------

CoAttention::CoAttention(const CoAttentionConfig& cfg, RngStream& init) : cfg_(cfg) {
  validate(cfg);
  for (auto& stream : layers_) {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      stream.push_back({LayerNorm::make(cfg.width),
                        MultiHeadAttention::make(cfg.width, cfg.heads, init),
                        LayerNorm::make(cfg.width), LayerNorm::make(cfg.width),
                        MultiHeadAttention::make(cfg.width, cfg.heads, init),
                        FeedForward::make(cfg.width, cfg.ffn_width, init)});
    }
  }
}

std::pair<Tensor, Tensor> CoAttention::forward(const Side& a, const Side& b,
                                               RngStream* dropout_rng) const {
  if (a.spans.size() != b.spans.size()) {
    fail(ErrorCode::kDimension, "co_attention: sides hold different numbers of pairs");
  }
  auto drop = [&](const Tensor& x) {
    return dropout_rng && cfg_.dropout > 0 ? dropout(x, cfg_.dropout, *dropout_rng) : x;
  };
  Tensor x = a.rows;
  Tensor y = b.rows;
  const auto& la = layers_[static_cast<int>(a.stream)];
  const auto& lb = layers_[static_cast<int>(b.stream)];
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const Layer& pa = la[l];
    const Layer& pb = lb[l];
    const Tensor xs = pa.self_norm(x);
    x = add(x, drop(pa.self_attn(xs, a.spans, xs, a.spans)));
    const Tensor ys = pb.self_norm(y);
    y = add(y, drop(pb.self_attn(ys, b.spans, ys, b.spans)));
    const Tensor xc = add(x, drop(pa.cross_attn(pa.cross_query_norm(x), a.spans,
                                                pa.cross_kv_norm(y), b.spans)));
    const Tensor yc = add(y, drop(pb.cross_attn(pb.cross_query_norm(y), b.spans,
                                                pb.cross_kv_norm(x), a.spans)));
    x = pa.ffn(xc);
    y = pb.ffn(yc);
  }
  return {x, y};
}

std::pair<Tensor, Tensor> CoAttention::operator()(const Tensor& image, const Tensor& text) const {
  return forward({image, {{0, image.rows()}}, Stream::kImage},
                 {text, {{0, text.rows()}}, Stream::kText});
}

void CoAttention::collect(ParamList& out, const std::string& prefix) const {
  const char* names[2] = {"image", "text"};
  for (int s = 0; s < 2; ++s) {
    for (std::size_t l = 0; l < layers_[s].size(); ++l) {
      const std::string p = prefix + "." + names[s] + "." + std::to_string(l);
      const Layer& L = layers_[s][l];
      L.self_norm.collect(out, p + ".self_norm");
      L.self_attn.collect(out, p + ".self_attn");
      L.cross_query_norm.collect(out, p + ".cross_query_norm");
      L.cross_kv_norm.collect(out, p + ".cross_kv_norm");
      L.cross_attn.collect(out, p + ".cross_attn");
      L.ffn.collect(out, p + ".ffn");
    }
  }
}

// ---------------------------------------------------------------------------

AnswerVocabulary::AnswerVocabulary(std::vector<std::string> answers) : answers_(std::move(answers)) {
  if (answers_.empty()) fail(ErrorCode::kVocabulary, "answer vocabulary is empty");
  for (const auto& a : answers_) {
    std::istringstream is(a);
    std::string w;
    std::vector<std::size_t> ids;
    while (is >> w) {
      auto it = std::find(words_.begin(), words_.end(), w);
      if (it == words_.end()) {
        words_.push_back(w);
        it = words_.end() - 1;
      }
      ids.push_back(static_cast<std::size_t>(it - words_.begin()) + 1);
    }
    if (ids.empty()) fail(ErrorCode::kVocabulary, "answer vocabulary holds a blank answer");
    tokens_.push_back(std::move(ids));
  }
}

AnswerVocabulary AnswerVocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot open answer vocabulary '" + path + "'");
  std::vector<std::string> answers;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    answers.push_back(line);
  }
  while (!answers.empty() && answers.back().empty()) answers.pop_back();
  return AnswerVocabulary(std::move(answers));
}

void AnswerVocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write answer vocabulary '" + path + "'");
  for (const auto& a : answers_) os << a << '\n';
}

std::size_t AnswerVocabulary::max_tokens() const {
  std::size_t m = 0;
  for (const auto& t : tokens_) m = std::max(m, t.size());
  return m;
}

std::vector<std::size_t> AnswerVocabulary::tokenize(const std::string& text) const {
  std::istringstream is(text);
  std::string w;
  std::vector<std::size_t> ids;
  while (is >> w) {
    auto it = std::find(words_.begin(), words_.end(), w);
    if (it == words_.end()) fail(ErrorCode::kVocabulary, "unknown answer word '" + w + "'");
    ids.push_back(static_cast<std::size_t>(it - words_.begin()) + 1);
  }
  return ids;
}

Tensor AnswerVocabulary::pooling_matrix() const {
  const std::size_t w = word_count();
  std::vector<Real> m(size() * w, Real{0});
  for (std::size_t a = 0; a < size(); ++a)
    for (std::size_t id : tokens_[a]) m[a * w + id] += Real{1} / Real(tokens_[a].size());
  return Tensor({size(), w}, std::move(m));
}

// ---------------------------------------------------------------------------

KnowledgeEncoder KnowledgeEncoder::make(std::size_t width, std::size_t heads,
                                        std::size_t ffn_width, RngStream& rng) {
  return {LayerNorm::make(width), MultiHeadAttention::make(width, heads, rng),
          FeedForward::make(width, ffn_width, rng)};
}

Tensor KnowledgeEncoder::operator()(const Tensor& x) const {
  if (x.rows() == 0) fail(ErrorCode::kEmpty, "knowledge_encode: empty knowledge");
  const RowSpan all{0, x.rows()};
  const std::span<const RowSpan> s(&all, 1);
  const Tensor n = norm(x);
  return ffn(add(x, self_attn(n, s, n, s)));
}

void KnowledgeEncoder::collect(ParamList& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  self_attn.collect(out, prefix + ".self_attn");
  ffn.collect(out, prefix + ".ffn");
}

Tensor knowledge_encode(const KnowledgeEncoder& encoder, const Tensor& vocab_embeddings) {
  return encoder(vocab_embeddings);
}

GatedFusion GatedFusion::make(std::size_t width, std::size_t heads, std::size_t ffn_width,
                              RngStream& rng) {
  return {LayerNorm::make(width), LayerNorm::make(width),
          MultiHeadAttention::make(width, heads, rng), Linear::random(width, width, rng),
          FeedForward::make(width, ffn_width, rng), true};
}

GatedFusionState GatedFusion::operator()(const Tensor& f_i, std::span<const RowSpan> spans,
                                         const Tensor& f_p) const {
  if (f_p.rows() == 0) fail(ErrorCode::kEmpty, "gated_fusion: empty knowledge");
  const std::vector<RowSpan> kv(spans.size(), RowSpan{0, f_p.rows()});
  GatedFusionState st;
  st.f_i = f_i;
  st.f_p = f_p;
  st.f_pi = add(cross_attn(query_norm(f_i), spans, kv_norm(f_p), kv), f_i);
  st.gate = sigmoid(gate_proj(st.f_pi));
  if (gated) {
    // f_i + g(f_pi - f_i): exact when f_pi == f_i.
    st.mixed = add(f_i, mul(st.gate, sub(st.f_pi, f_i)));
  } else {
    st.mixed = st.f_pi;
  }
  st.out = ffn(st.mixed);
  return st;
}

void GatedFusion::collect(ParamList& out, const std::string& prefix) const {
  query_norm.collect(out, prefix + ".query_norm");
  kv_norm.collect(out, prefix + ".kv_norm");
  cross_attn.collect(out, prefix + ".cross_attn");
  gate_proj.collect(out, prefix + ".gate_proj");
  ffn.collect(out, prefix + ".ffn");
}

GatedFusionState gated_fusion(const GatedFusion& block, const Tensor& f_i, const Tensor& f_p) {
  const RowSpan all{0, f_i.rows()};
  return block(f_i, std::span<const RowSpan>(&all, 1), f_p);
}

// ---------------------------------------------------------------------------

AnswerDecoder::AnswerDecoder(std::size_t vocab_words, std::size_t width, std::size_t heads,
                             std::size_t ffn_width, std::size_t max_len, RngStream& init) {
  if (vocab_words < 2) fail(ErrorCode::kVocabulary, "decoder vocabulary needs at least one word");
  std::vector<Real> te(vocab_words * width), pe(max_len * width);
  for (Real& x : te) x = static_cast<Real>(init.normal(0.0, 1.0));
  for (Real& x : pe) x = static_cast<Real>(init.normal(0.0, 0.1));
  token_embed_ = Tensor({vocab_words, width}, std::move(te), true);
  pos_embed_ = Tensor({max_len, width}, std::move(pe), true);
  self_norm_ = LayerNorm::make(width);
  self_attn_ = MultiHeadAttention::make(width, heads, init);
  cross_query_norm_ = LayerNorm::make(width);
  cross_kv_norm_ = LayerNorm::make(width);
  cross_attn_ = MultiHeadAttention::make(width, heads, init);
  ffn_ = FeedForward::make(width, ffn_width, init);
  out_norm_ = LayerNorm::make(width);
  out_ = Linear::zeros(width, vocab_words);
  for (Real& x : out_.weight.data_mut()) x = static_cast<Real>(init.normal(0.0, 0.02));
}

void AnswerDecoder::check(const std::vector<std::vector<std::size_t>>& answers,
                          std::span<const RowSpan> context_spans) const {
  if (answers.size() != context_spans.size()) {
    fail(ErrorCode::kDimension, "decoder: one context span per answer required");
  }
  for (const auto& a : answers) {
    if (a.empty()) fail(ErrorCode::kVocabulary, "decoder: empty answer sequence");
    if (a.size() > pos_embed_.rows()) fail(ErrorCode::kVocabulary, "decoder: answer longer than max_len");
    for (std::size_t id : a)
      if (id == 0 || id >= vocab_words())
        fail(ErrorCode::kVocabulary, "decoder: unknown token id " + std::to_string(id));
  }
}

Tensor AnswerDecoder::logits(const Tensor& context, std::span<const RowSpan> context_spans,
                             const std::vector<std::vector<std::size_t>>& answers) const {
  check(answers, context_spans);
  std::vector<std::size_t> inputs, positions;
  std::vector<RowSpan> spans;
  for (const auto& a : answers) {
    spans.push_back({inputs.size(), a.size()});
    for (std::size_t k = 0; k < a.size(); ++k) {
      inputs.push_back(k == 0 ? 0 : a[k - 1]);
      positions.push_back(k);
    }
  }
  Tensor x = add(gather_rows(token_embed_, inputs), gather_rows(pos_embed_, positions));
  const Tensor xs = self_norm_(x);
  x = add(x, self_attn_(xs, spans, xs, spans, true));
  x = add(x, cross_attn_(cross_query_norm_(x), spans, cross_kv_norm_(context), context_spans));
  x = ffn_(x);
  return out_(out_norm_(x));
}

Tensor AnswerDecoder::loss(const Tensor& context, std::span<const RowSpan> context_spans,
                           const std::vector<std::vector<std::size_t>>& answers) const {
  const Tensor lg = logits(context, context_spans, answers);
  std::vector<std::size_t> targets;
  std::vector<Real> weights;
  for (const auto& a : answers) {
    targets.insert(targets.end(), a.begin(), a.end());
    weights.insert(weights.end(), a.size(),
                   Real{1} / (Real(a.size()) * Real(answers.size())));
  }
  const Tensor picked = pick_cols(log_softmax_rows(lg), targets);
  const std::size_t n = weights.size();
  const Tensor w({n, 1}, std::move(weights));
  return scale(sum(mul(picked, w)), Real{-1});
}

std::vector<double> AnswerDecoder::sequence_losses(
    const Tensor& context, std::span<const RowSpan> context_spans,
    const std::vector<std::vector<std::size_t>>& answers) const {
  NoGradGuard guard;
  const Tensor lp = log_softmax_rows(logits(context, context_spans, answers));
  const std::size_t w = lp.cols();
  std::vector<double> out;
  std::size_t row = 0;
  for (const auto& a : answers) {
    double total = 0;
    for (std::size_t id : a) total -= static_cast<double>(lp.data()[row++ * w + id]);
    out.push_back(total / static_cast<double>(a.size()));
  }
  return out;
}

void AnswerDecoder::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".token_embed", token_embed_});
  out.push_back({prefix + ".pos_embed", pos_embed_});
  self_norm_.collect(out, prefix + ".self_norm");
  self_attn_.collect(out, prefix + ".self_attn");
  cross_query_norm_.collect(out, prefix + ".cross_query_norm");
  cross_kv_norm_.collect(out, prefix + ".cross_kv_norm");
  cross_attn_.collect(out, prefix + ".cross_attn");
  ffn_.collect(out, prefix + ".ffn");
  out_norm_.collect(out, prefix + ".out_norm");
  out_.collect(out, prefix + ".out");
}

Tensor decoder_loss(const AnswerDecoder& decoder, const Tensor& f_prime,
                    const std::vector<std::size_t>& answer_tokens) {
  const RowSpan all{0, f_prime.rows()};
  return decoder.loss(f_prime, std::span<const RowSpan>(&all, 1), {answer_tokens});
}

std::size_t rank_answers(const AnswerDecoder& decoder, const Tensor& f_prime,
                         const std::vector<std::vector<std::size_t>>& candidates) {
  if (candidates.empty()) fail(ErrorCode::kEmpty, "rank_answers: no candidates");
  const std::vector<RowSpan> spans(candidates.size(), RowSpan{0, f_prime.rows()});
  const auto losses = decoder.sequence_losses(f_prime, spans, candidates);
  std::size_t best = 0;
  for (std::size_t i = 1; i < losses.size(); ++i)
    if (losses[i] < losses[best]) best = i;
  return best;
}

}  // namespace unialign
