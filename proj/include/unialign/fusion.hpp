#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unialign/layers.hpp"

namespace unialign {

struct CoAttentionConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 32;
  std::size_t ffn_width = 64;
  Real dropout = 0;
};

void validate(const CoAttentionConfig& cfg);

enum class Stream { kImage = 0, kText = 1 };

/// Standard multi-head cross-attention of `query_tokens` onto `kv_tokens`
/// with the output projection of `params` (zero at init).
Tensor cross_attention(const Tensor& query_tokens, const Tensor& kv_tokens,
                       const MultiHeadAttention& params, std::vector<Real>* probs = nullptr);

/// Paired two-stream encoder. Each layer runs, per stream, pre-norm
/// self-attention, pre-norm cross-attention onto the other stream's current
/// tokens, then a feed-forward block, all residual. Stream parameters are
/// picked per side, so image-image and text-text pairs reuse one stream's
/// weights on both sides.
class CoAttention {
 public:
  /// One side of a batch of pairs: stacked rows, one span per pair.
  struct Side {
    Tensor rows;
    std::vector<RowSpan> spans;
    Stream stream = Stream::kImage;
  };

  CoAttention() = default;
  CoAttention(const CoAttentionConfig& cfg, RngStream& init);

  std::pair<Tensor, Tensor> forward(const Side& a, const Side& b,
                                    RngStream* dropout_rng = nullptr) const;

  /// Single image/text pair; both token matrices include their CLS rows.
  std::pair<Tensor, Tensor> operator()(const Tensor& image, const Tensor& text) const;

  const CoAttentionConfig& config() const { return cfg_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  struct Layer {
    LayerNorm self_norm;
    MultiHeadAttention self_attn;
    LayerNorm cross_query_norm;
    LayerNorm cross_kv_norm;
    MultiHeadAttention cross_attn;
    FeedForward ffn;
  };

  CoAttentionConfig cfg_;
  std::vector<Layer> layers_[2];
};

/// Answer vocabulary: one answer string per entry, whitespace-split into
/// words. Word id 0 is reserved for the begin-of-sequence token.
class AnswerVocabulary {
 public:
  AnswerVocabulary() = default;
  explicit AnswerVocabulary(std::vector<std::string> answers);

  static AnswerVocabulary load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return answers_.size(); }
  std::size_t word_count() const { return words_.size() + 1; }
  const std::vector<std::string>& answers() const { return answers_; }
  const std::vector<std::string>& words() const { return words_; }
  const std::vector<std::size_t>& tokens(std::size_t answer) const { return tokens_.at(answer); }
  std::size_t max_tokens() const;
  /// Word ids for a free-form answer; throws on unknown words.
  std::vector<std::size_t> tokenize(const std::string& text) const;
  /// M×W row-averaging matrix: row a averages the words of answer a.
  Tensor pooling_matrix() const;

  bool operator==(const AnswerVocabulary& o) const { return answers_ == o.answers_; }

 private:
  std::vector<std::string> answers_;
  std::vector<std::string> words_;
  std::vector<std::vector<std::size_t>> tokens_;
};

/// Self-attention + feed-forward over the answer-vocabulary embeddings.
struct KnowledgeEncoder {
  LayerNorm norm;
  MultiHeadAttention self_attn;
  FeedForward ffn;

  static KnowledgeEncoder make(std::size_t width, std::size_t heads, std::size_t ffn_width,
                               RngStream& rng);
  Tensor operator()(const Tensor& vocab_embeddings) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor knowledge_encode(const KnowledgeEncoder& encoder, const Tensor& vocab_embeddings);

struct GatedFusionState {
  Tensor f_i;    // joint image-question rows
  Tensor f_p;    // encoded knowledge
  Tensor f_pi;   // knowledge-fused rows
  Tensor gate;   // sigmoid gate, same shape as f_i
  Tensor mixed;  // gate ⊙ f_pi + (1 - gate) ⊙ f_i, before the feed-forward
  Tensor out;    // final representation
};

/// Knowledge fusion block:
///   f_pi  = CA(f_i, f_p) + f_i
///   gate  = sigmoid(f_pi W + b)
///   mixed = gate ⊙ f_pi + (1 - gate) ⊙ f_i   (f_pi alone when ungated)
///   out   = FFN(mixed)
struct GatedFusion {
  LayerNorm query_norm;
  LayerNorm kv_norm;
  MultiHeadAttention cross_attn;
  Linear gate_proj;
  FeedForward ffn;
  bool gated = true;

  static GatedFusion make(std::size_t width, std::size_t heads, std::size_t ffn_width,
                          RngStream& rng);
  /// f_i may stack several samples, one span each; every sample attends to
  /// the whole of f_p.
  GatedFusionState operator()(const Tensor& f_i, std::span<const RowSpan> spans,
                              const Tensor& f_p) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

GatedFusionState gated_fusion(const GatedFusion& block, const Tensor& f_i, const Tensor& f_p);

/// Single-layer causal decoder cross-attending to a fused context and
/// trained with teacher forcing: inputs [BOS, a1 .. a(n-1)], targets
/// [a1 .. an].
class AnswerDecoder {
 public:
  AnswerDecoder() = default;
  AnswerDecoder(std::size_t vocab_words, std::size_t width, std::size_t heads,
                std::size_t ffn_width, std::size_t max_len, RngStream& init);

  /// Stacked next-token logits for every sequence, (sum of lengths)×W.
  Tensor logits(const Tensor& context, std::span<const RowSpan> context_spans,
                const std::vector<std::vector<std::size_t>>& answers) const;

  /// Mean over sequences of the per-sequence mean token cross-entropy.
  Tensor loss(const Tensor& context, std::span<const RowSpan> context_spans,
              const std::vector<std::vector<std::size_t>>& answers) const;

  /// Per-sequence mean cross-entropy, no graph.
  std::vector<double> sequence_losses(const Tensor& context, std::span<const RowSpan> context_spans,
                                      const std::vector<std::vector<std::size_t>>& answers) const;

  const Tensor& token_embedding() const { return token_embed_; }
  std::size_t vocab_words() const { return token_embed_.rows(); }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  void check(const std::vector<std::vector<std::size_t>>& answers,
             std::span<const RowSpan> context_spans) const;

  Tensor token_embed_;
  Tensor pos_embed_;
  LayerNorm self_norm_;
  MultiHeadAttention self_attn_;
  LayerNorm cross_query_norm_;
  LayerNorm cross_kv_norm_;
  MultiHeadAttention cross_attn_;
  FeedForward ffn_;
  LayerNorm out_norm_;
  Linear out_;
};

/// Teacher-forced loss of one answer given one fused context.
Tensor decoder_loss(const AnswerDecoder& decoder, const Tensor& f_prime,
                    const std::vector<std::size_t>& answer_tokens);

/// Index of the candidate with the lowest decoder loss; ties go to the
/// lowest index.
std::size_t rank_answers(const AnswerDecoder& decoder, const Tensor& f_prime,
                         const std::vector<std::vector<std::size_t>>& candidates);

}  // namespace unialign
