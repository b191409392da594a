#include "unialign/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "unialign/error.hpp"

namespace unialign {

namespace {

template <class V>
void visit(CorpusConfig& c, V&& v) {
  v("num_samples", c.num_samples);
  v("eval_samples", c.eval_samples);
  v("clusters", c.clusters);
  v("latent_dim", c.latent_dim);
  v("patches", c.patches);
  v("text_tokens", c.text_tokens);
  v("feature_width", c.feature_width);
  v("view_noise", c.view_noise);
  v("text_noise", c.text_noise);
  v("cluster_spread", c.cluster_spread);
  v("teacher_dim", c.teacher_dim);
  v("vqa_train_samples", c.vqa_train_samples);
  v("vqa_eval_samples", c.vqa_eval_samples);
  v("seed", c.seed);
}

template <class V>
void visit(TrainConfig& c, V&& v) {
  v("stage1_epochs", c.stage1_epochs);
  v("stage2_epochs", c.stage2_epochs);
  v("batch_size", c.batch_size);
  v("learning_rate", c.learning_rate);
  v("stage2_learning_rate", c.stage2_learning_rate);
  v("weight_decay", c.weight_decay);
  v("tau1", c.tau1);
  v("tau2", c.tau2);
  v("tau3", c.tau3);
  v("lambda", c.lambda);
  v("w_local", c.w_local);
  v("w_hn", c.w_hn);
  v("optimizer", c.optimizer);
  v("seed", c.seed);
  v("embed_dim", c.embed_dim);
  v("hidden_width", c.hidden_width);
  v("proj_dim", c.proj_dim);
  v("layers", c.layers);
  v("heads", c.heads);
  v("ffn_width", c.ffn_width);
  v("text_dropout", c.text_dropout);
  v("attention_dropout", c.attention_dropout);
  v("inter_alignment", c.inter_alignment);
  v("intra_alignment", c.intra_alignment);
  v("soft_labels", c.soft_labels);
  v("stage2_global", c.stage2_global);
  v("freeze_encoders", c.freeze_encoders);
  v("ipot_beta", c.ipot_beta);
  v("ipot_outer_iters", c.ipot_outer_iters);
  v("ipot_inner_iters", c.ipot_inner_iters);
  v("ipot_tolerance", c.ipot_tolerance);
  v("finetune_epochs", c.finetune_epochs);
  v("finetune_learning_rate", c.finetune_learning_rate);
  v("finetune_backbone", c.finetune_backbone);
  v("gated_fusion", c.gated_fusion);
  v("init_from_pretrained", c.init_from_pretrained);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  fail(ErrorCode::kConfig, "config key '" + key + "': cannot parse '" + value + "'");
}

template <class T>
void parse_value(const std::string& key, const std::string& s, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") out = true;
    else if (s == "false" || s == "0") out = false;
    else bad_value(key, s);
  } else if constexpr (std::is_same_v<T, std::string>) {
    out = s;
  } else if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    try {
      out = std::stod(s, &used);
    } catch (const std::exception&) {
      bad_value(key, s);
    }
    if (used != s.size()) bad_value(key, s);
  } else {
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, out);
    if (ec != std::errc() || ptr != end) bad_value(key, s);
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_floating_point_v<T>) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  } else {
    return std::to_string(v);
  }
}

template <class C>
std::vector<std::string> apply_impl(C& cfg, const KeyValues& kv) {
  std::vector<std::string> unused;
  for (const auto& [key, value] : kv) {
    bool hit = false;
    visit(cfg, [&](const char* name, auto& field) {
      if (key == name) {
        parse_value(key, value, field);
        hit = true;
      }
    });
    if (!hit) unused.push_back(key);
  }
  return unused;
}

template <class C>
KeyValues to_kv_impl(const C& cfg) {
  KeyValues out;
  visit(const_cast<C&>(cfg),
        [&](const char* name, auto& field) { out.emplace_back(name, format_value(field)); });
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void validate(const CorpusConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::kConfig, "corpus config: " + what);
  };
  need(c.clusters >= 1, "clusters must be >= 1");
  need(c.num_samples >= 2 * c.clusters, "num_samples must be >= 2 * clusters");
  need(c.latent_dim >= 1 && c.patches >= 1 && c.text_tokens >= 1 && c.feature_width >= 1 &&
           c.teacher_dim >= 1,
       "all dimensions must be >= 1");
  need(c.eval_samples >= 2, "eval_samples must be >= 2");
  need(c.view_noise >= 0 && c.text_noise >= 0 && c.cluster_spread >= 0, "noise levels must be >= 0");
}

void validate(const TrainConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::kConfig, "train config: " + what);
  };
  need(c.batch_size >= 2, "batch_size must be >= 2");
  need(c.learning_rate > 0 && c.stage2_learning_rate > 0 && c.finetune_learning_rate > 0, "learning rates must be > 0");
  need(c.weight_decay >= 0, "weight_decay must be >= 0");
  need(c.tau1 > 0 && c.tau2 > 0 && c.tau3 > 0, "temperatures must be > 0");
  need(c.lambda >= 0, "lambda must be >= 0");
  need(c.w_local >= 0 && c.w_hn >= 0, "loss weights must be >= 0");
  need(c.optimizer == "adamw", "optimizer must be adamw");
  need(c.inter_alignment || c.intra_alignment, "at least one global alignment term is required");
  need(c.embed_dim >= 2 && c.hidden_width >= 1 && c.proj_dim >= 1 && c.ffn_width >= 1,
       "widths must be positive");
  need(c.layers >= 1, "layers must be >= 1");
  need(c.heads >= 1 && c.embed_dim % c.heads == 0, "embed_dim must be divisible by heads");
  need(c.text_dropout >= 0 && c.text_dropout < 1, "text_dropout must be in [0,1)");
  need(c.attention_dropout >= 0 && c.attention_dropout < 1, "attention_dropout must be in [0,1)");
  need(c.ipot_beta > 0 && c.ipot_outer_iters >= 1 && c.ipot_inner_iters >= 1 && c.ipot_tolerance > 0,
       "ipot settings must be positive");
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kConfig, "config line " + std::to_string(n) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(ErrorCode::kConfig, "config line " + std::to_string(n) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

KeyValues load_key_values(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_key_values(ss.str());
}

std::vector<std::string> apply_config(CorpusConfig& cfg, const KeyValues& kv) { return apply_impl(cfg, kv); }
std::vector<std::string> apply_config(TrainConfig& cfg, const KeyValues& kv) { return apply_impl(cfg, kv); }

KeyValues to_key_values(const CorpusConfig& cfg) { return to_kv_impl(cfg); }
KeyValues to_key_values(const TrainConfig& cfg) { return to_kv_impl(cfg); }

void load_configs(const std::string& path, CorpusConfig* corpus, TrainConfig* train) {
  const KeyValues kv = load_key_values(path);
  CorpusConfig c_scratch;
  TrainConfig t_scratch;
  const auto c_unused = apply_config(corpus ? *corpus : c_scratch, kv);
  const auto t_unused = apply_config(train ? *train : t_scratch, kv);
  for (const auto& k : c_unused) {
    if (std::find(t_unused.begin(), t_unused.end(), k) != t_unused.end()) {
      fail(ErrorCode::kConfig, "unknown config key '" + k + "' in " + path);
    }
  }
  if (corpus) validate(*corpus);
  if (train) validate(*train);
}

}  // namespace unialign
