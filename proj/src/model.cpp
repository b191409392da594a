#include "unialign/model.hpp"

#include <algorithm>

#include "unialign/serialize.hpp"

namespace unialign {

namespace {

enum : std::uint64_t { kBackboneStream = 11, kVqaStream = 20 };

EncoderConfig encoder_config(const TrainConfig& cfg, std::size_t feature_width,
                             std::size_t max_tokens, Real dropout) {
  EncoderConfig e;
  e.feature_width = feature_width;
  e.hidden_width = cfg.hidden_width;
  e.embed_dim = cfg.embed_dim;
  e.max_tokens = max_tokens;
  e.dropout = dropout;
  return e;
}

}  // namespace

Model::Model(const TrainConfig& cfg, std::size_t fw, std::size_t mt)
    : config(cfg), feature_width(fw), max_tokens(mt) {
  validate(cfg);
  reset_backbone(cfg.seed);
}

void Model::reset_backbone(std::uint64_t seed) {
  RngStream rng(seed, kBackboneStream);
  RngStream r_img = rng.substream(1), r_txt = rng.substream(2), r_heads = rng.substream(3),
            r_co = rng.substream(4), r_pair = rng.substream(5);
  image_encoder = TokenEncoder(encoder_config(config, feature_width, max_tokens, 0), r_img);
  text_encoder =
      TokenEncoder(encoder_config(config, feature_width, max_tokens, config.text_dropout), r_txt);
  heads = ProjectionHeads::make(config.embed_dim, config.proj_dim, r_heads);
  CoAttentionConfig co;
  co.layers = config.layers;
  co.heads = config.heads;
  co.width = config.embed_dim;
  co.ffn_width = config.ffn_width;
  co.dropout = config.attention_dropout;
  co_attention = CoAttention(co, r_co);
  pair_head = Linear::random(2 * config.embed_dim, 2, r_pair);
}

void Model::init_vqa(const AnswerVocabulary& vocab, std::uint64_t seed) {
  if (vocab.size() == 0) fail(ErrorCode::kVocabulary, "init_vqa: empty answer vocabulary");
  RngStream rng(seed, kVqaStream);
  RngStream r_k = rng.substream(1), r_f = rng.substream(2), r_d = rng.substream(3);
  vocabulary = vocab;
  knowledge = KnowledgeEncoder::make(config.embed_dim, config.heads, config.ffn_width, r_k);
  fusion = GatedFusion::make(config.embed_dim, config.heads, config.ffn_width, r_f);
  fusion.gated = config.gated_fusion;
  decoder = AnswerDecoder(vocab.word_count(), config.embed_dim, config.heads, config.ffn_width,
                          vocab.max_tokens(), r_d);
  has_vqa = true;
}

ParamList Model::encoder_params() const {
  ParamList out;
  image_encoder.collect(out, "image_encoder");
  text_encoder.collect(out, "text_encoder");
  return out;
}

ParamList Model::alignment_params() const {
  ParamList out;
  heads.collect(out, "heads");
  co_attention.collect(out, "co_attention");
  pair_head.collect(out, "pair_head");
  return out;
}

ParamList Model::vqa_params() const {
  ParamList out;
  if (!has_vqa) return out;
  knowledge.collect(out, "knowledge");
  fusion.collect(out, "fusion");
  decoder.collect(out, "decoder");
  return out;
}

ParamList Model::params() const {
  ParamList out = encoder_params();
  for (auto& p : alignment_params()) out.push_back(std::move(p));
  for (auto& p : vqa_params()) out.push_back(std::move(p));
  return out;
}

void save_model(const Model& model, const std::string& path,
                const std::vector<std::pair<std::string, std::string>>& extra_meta) {
  Archive ar;
  ar.meta.emplace_back("kind", "model");
  ar.meta.emplace_back("feature_width", std::to_string(model.feature_width));
  ar.meta.emplace_back("max_tokens", std::to_string(model.max_tokens));
  for (const auto& [k, v] : to_key_values(model.config)) ar.meta.emplace_back("train." + k, v);
  ar.meta.emplace_back("has_vqa", model.has_vqa ? "1" : "0");
  if (model.has_vqa) {
    const auto& answers = model.vocabulary.answers();
    ar.meta.emplace_back("answers", std::to_string(answers.size()));
    for (std::size_t i = 0; i < answers.size(); ++i)
      ar.meta.emplace_back("answer." + std::to_string(i), answers[i]);
  }
  for (const auto& kv : extra_meta) ar.meta.push_back(kv);
  for (const auto& p : model.params()) ar.tensors.push_back({p.name, p.tensor.detach()});
  save_archive(path, ar);
}

Model load_model(const std::string& path,
                 std::vector<std::pair<std::string, std::string>>* meta_out) {
  const Archive ar = load_archive(path);
  const std::string* kind = ar.find_meta("kind");
  if (!kind || *kind != "model") fail(ErrorCode::kIo, "'" + path + "' is not a model checkpoint");
  auto need = [&](const std::string& key) -> const std::string& {
    const std::string* v = ar.find_meta(key);
    if (!v) fail(ErrorCode::kIo, "checkpoint '" + path + "' lacks meta '" + key + "'");
    return *v;
  };
  TrainConfig cfg;
  KeyValues kv;
  for (const auto& [k, v] : ar.meta)
    if (k.rfind("train.", 0) == 0) kv.emplace_back(k.substr(6), v);
  const auto unused = apply_config(cfg, kv);
  if (!unused.empty()) fail(ErrorCode::kIo, "checkpoint has unknown config key '" + unused.front() + "'");
  Model model(cfg, std::stoull(need("feature_width")), std::stoull(need("max_tokens")));
  if (need("has_vqa") == "1") {
    const std::size_t n = std::stoull(need("answers"));
    std::vector<std::string> answers;
    for (std::size_t i = 0; i < n; ++i) answers.push_back(need("answer." + std::to_string(i)));
    model.init_vqa(AnswerVocabulary(answers), cfg.seed);
  }
  for (auto& p : model.params()) {
    const Tensor* t = ar.find(p.name);
    if (!t) fail(ErrorCode::kIo, "checkpoint '" + path + "' lacks tensor '" + p.name + "'");
    if (t->shape() != p.tensor.shape()) {
      fail(ErrorCode::kIo, "checkpoint tensor '" + p.name + "' has shape " + to_string(t->shape()) +
                               ", expected " + to_string(p.tensor.shape()));
    }
    std::copy(t->data().begin(), t->data().end(), p.tensor.data_mut().begin());
  }
  if (meta_out) *meta_out = ar.meta;
  return model;
}

}  // namespace unialign
