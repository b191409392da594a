#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "unialign/train.hpp"

using namespace unialign;
using test::max_abs_diff;

namespace {

CorpusConfig tiny_corpus(std::uint64_t seed = 3) {
  CorpusConfig c;
  c.num_samples = 64;
  c.eval_samples = 32;
  c.vqa_train_samples = 48;
  c.vqa_eval_samples = 40;
  c.clusters = 4;
  c.seed = seed;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.stage1_epochs = 2;
  t.stage2_epochs = 1;
  t.finetune_epochs = 1;
  t.batch_size = 16;
  t.embed_dim = 16;
  t.hidden_width = 32;
  t.proj_dim = 16;
  t.layers = 1;
  t.heads = 2;
  t.ffn_width = 32;
  t.ipot_outer_iters = 50;
  return t;
}

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("unialign_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

bool same_params(const Model& a, const Model& b) {
  const ParamList pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].name != pb[i].name || max_abs_diff(pa[i].tensor, pb[i].tensor) != 0) return false;
  return true;
}

}  // namespace

TEST_CASE("corpus shape and teacher structure") {
  const Corpus c = generate_corpus(tiny_corpus());
  CHECK(c.train.size() == 64);
  CHECK(c.eval.size() == 32);
  CHECK(c.vqa_train.size() == 48);
  CHECK(c.vqa_eval.size() == 40);
  CHECK(c.answers.size() == 4 + 2);
  for (const RawSample& s : c.train) {
    CHECK(s.view1.shape() == Shape{8, 16});
    CHECK(s.view2.shape() == Shape{8, 16});
    CHECK(s.report.shape() == Shape{12, 16});
    CHECK(max_abs_diff(s.view1, s.view2) > 0);
  }
  CHECK(c.correspondence.size() == 8);

  std::vector<Tensor> lat;
  for (const RawSample& s : c.train) lat.push_back(s.latent);
  const TeacherEmbeddings e = c.teacher.embed(concat_rows(lat));
  double within = 0, between = 0;
  int nw = 0, nb = 0;
  for (std::size_t i = 0; i < c.train.size(); ++i)
    for (std::size_t j = i + 1; j < c.train.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < e.text.cols(); ++k) dot += e.text.at(i, k) * e.text.at(j, k);
      if (c.train[i].cluster == c.train[j].cluster) within += dot, ++nw;
      else between += dot, ++nb;
    }
  CHECK(within / nw > between / nb);
}

TEST_CASE("corpus is a function of its seed and survives save/load") {
  const Corpus a = generate_corpus(tiny_corpus()), b = generate_corpus(tiny_corpus());
  const Corpus other = generate_corpus(tiny_corpus(4));
  CHECK(max_abs_diff(a.train[5].report, b.train[5].report) == 0);
  CHECK(max_abs_diff(a.train[5].report, other.train[5].report) > 0);

  const auto dir = scratch("corpus");
  save_corpus(a, dir.string());
  const Corpus back = load_corpus(dir.string());
  CHECK(back.train.size() == a.train.size());
  CHECK(back.answers == a.answers);
  CHECK(back.teacher.checksum() == a.teacher.checksum());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(max_abs_diff(back.train[i].view1, a.train[i].view1) == 0);
    CHECK(back.train[i].cluster == a.train[i].cluster);
  }
  for (std::size_t i = 0; i < a.vqa_eval.size(); ++i) {
    CHECK(back.vqa_eval[i].answer == a.vqa_eval[i].answer);
    CHECK(back.vqa_eval[i].type == a.vqa_eval[i].type);
  }
  CHECK_CODE(load_corpus((dir / "missing").string()), ErrorCode::kIo);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config parsing") {
  const KeyValues kv = parse_key_values("# comment\nstage1_epochs = 3\n\nview_noise=0.25\nsoft_labels = false\n");
  REQUIRE(kv.size() == 3);
  TrainConfig t;
  CorpusConfig c;
  CHECK(apply_config(t, kv) == std::vector<std::string>{"view_noise"});
  CHECK(apply_config(c, kv).size() == 2);
  CHECK(t.stage1_epochs == 3);
  CHECK_FALSE(t.soft_labels);
  CHECK(c.view_noise == 0.25);

  TrainConfig rt;
  apply_config(rt, to_key_values(t));
  CHECK(to_key_values(rt) == to_key_values(t));

  CHECK_CODE(apply_config(t, parse_key_values("stage1_epochs = many")), ErrorCode::kConfig);
  CHECK_CODE(parse_key_values("no equals sign"), ErrorCode::kConfig);
  TrainConfig bad;
  bad.tau1 = 0;
  CHECK_CODE(validate(bad), ErrorCode::kConfig);
  bad = TrainConfig{};
  bad.optimizer = "sgd-nesterov";
  CHECK_CODE(validate(bad), ErrorCode::kConfig);
}

TEST_CASE("zero epochs leave the model at its initialization") {
  const Corpus c = generate_corpus(tiny_corpus());
  TrainConfig t = tiny_train();
  t.stage1_epochs = 0;
  t.stage2_epochs = 0;
  Model m = make_model(t, c);
  const Model init = make_model(t, c);
  const PretrainReport r = pretrain(m, c, t);
  CHECK(r.epochs.empty());
  CHECK(same_params(m, init));
}

TEST_CASE("pretraining lowers the loss and runs both stages") {
  const Corpus c = generate_corpus(tiny_corpus());
  TrainConfig t = tiny_train();
  t.stage1_epochs = 4;
  Model m = make_model(t, c);
  const PretrainReport r = pretrain(m, c, t);
  REQUIRE(r.epochs.size() == 5);
  CHECK(r.epochs.back().stage == 2);
  CHECK(r.epochs[3].loss_global < r.epochs[0].loss_global);
  CHECK(std::isnan(r.epochs[0].hn_accuracy));
  CHECK(std::isfinite(r.epochs.back().hn_accuracy));

  // Stage 1 evaluates the global loss only, stage 2 local and HN only.
  CHECK(r.stage1.steps == 4 * 4);
  CHECK(r.stage1.global == r.stage1.steps);
  CHECK(r.stage1.local == 0);
  CHECK(r.stage1.hn == 0);
  CHECK(r.stage2.steps == 4);
  CHECK(r.stage2.global == 0);
  CHECK(r.stage2.local == r.stage2.steps);
  CHECK(r.stage2.hn == r.stage2.steps);

  const std::string csv = metrics_csv(r.epochs);
  std::istringstream is(csv);
  std::string line;
  int lines = 0, s1 = 0, s2 = 0;
  while (std::getline(is, line)) {
    if (lines++ == 0) continue;
    if (line.rfind("1,", 0) == 0) ++s1;
    if (line.rfind("2,", 0) == 0) ++s2;
  }
  CHECK(s1 == 4);
  CHECK(s2 == 1);
}

TEST_CASE("training is deterministic") {
  const Corpus c = generate_corpus(tiny_corpus());
  const TrainConfig t = tiny_train();
  Model a = make_model(t, c), b = make_model(t, c);
  const PretrainReport ra = pretrain(a, c, t), rb = pretrain(b, c, t);
  CHECK(metrics_csv(ra.epochs) == metrics_csv(rb.epochs));
  CHECK(same_params(a, b));
}

TEST_CASE("untrained baselines sit near chance") {
  const Corpus c = generate_corpus(tiny_corpus());
  const TrainConfig t = tiny_train();
  Model m = make_model(t, c);
  const RetrievalMetrics r = evaluate_retrieval(m, c.eval);
  CHECK(r.count == 32);
  CHECK(r.recall5 >= r.recall1);
  CHECK(r.recall1 < 0.25);

  m.init_vqa(c.answers, 5);
  const VqaReport v = evaluate_vqa(m, c.vqa_eval);
  CHECK(v.open_count + v.closed_count == 40);
  CHECK(v.accuracy < 0.5);
}

TEST_CASE("fine-tuning scope") {
  const Corpus c = generate_corpus(tiny_corpus());
  TrainConfig t = tiny_train();
  const Model before = make_model(t, c);
  const auto encoders_moved = [&](const Model& m) {
    const ParamList pa = m.encoder_params(), pb = before.encoder_params();
    double d = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) d = std::max(d, max_abs_diff(pa[i].tensor, pb[i].tensor));
    return d > 0;
  };
  Model all = make_model(t, c);
  const VqaReport v = finetune_vqa(all, c, t);
  CHECK(v.epoch_loss.size() == 1);
  CHECK(all.has_vqa);
  CHECK(encoders_moved(all));

  t.finetune_backbone = false;
  Model head_only = make_model(t, c);
  finetune_vqa(head_only, c, t);
  CHECK_FALSE(encoders_moved(head_only));
}

TEST_CASE("model checkpoints round-trip") {
  const Corpus c = generate_corpus(tiny_corpus());
  TrainConfig t = tiny_train();
  t.stage2_epochs = 0;
  Model m = make_model(t, c);
  pretrain(m, c, t);
  m.init_vqa(c.answers, 9);
  const auto dir = scratch("model");
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  save_model(m, path, {{"note", "x"}});
  std::vector<std::pair<std::string, std::string>> meta;
  const Model back = load_model(path, &meta);
  CHECK(same_params(m, back));
  CHECK(back.has_vqa);
  CHECK(back.vocabulary == m.vocabulary);
  CHECK(to_key_values(back.config) == to_key_values(m.config));
  bool found = false;
  for (const auto& [k, v] : meta)
    if (k == "note" && v == "x") found = true;
  CHECK(found);
  CHECK(evaluate_retrieval(back, c.eval).recall1 == evaluate_retrieval(m, c.eval).recall1);

  {
    std::ofstream os(dir / "junk.ckpt");
    os << "not a checkpoint";
  }
  CHECK_CODE(load_model((dir / "junk.ckpt").string()), ErrorCode::kIo);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage 2 resumed from a stage-1 checkpoint matches a single run") {
  const Corpus c = generate_corpus(tiny_corpus());
  const TrainConfig t = tiny_train();
  Model whole = make_model(t, c);
  const PretrainReport rw = pretrain(whole, c, t);

  TrainConfig first = t, second = t;
  first.stage2_epochs = 0;
  second.stage1_epochs = 0;
  Model m = make_model(t, c);
  const PretrainReport r1 = pretrain(m, c, first);
  const auto dir = scratch("resume");
  std::filesystem::create_directories(dir);
  save_model(m, (dir / "s1.ckpt").string());
  Model resumed = load_model((dir / "s1.ckpt").string());
  const PretrainReport r2 = pretrain(resumed, c, second);

  std::vector<EpochMetrics> joined = r1.epochs;
  joined.insert(joined.end(), r2.epochs.begin(), r2.epochs.end());
  CHECK(metrics_csv(joined) == metrics_csv(rw.epochs));
  CHECK(same_params(resumed, whole));
  std::filesystem::remove_all(dir);
}

TEST_CASE("hard-negative loss reaches co-attention and encoders") {
  const Corpus c = generate_corpus(tiny_corpus());
  TrainConfig t = tiny_train();
  t.w_local = 0;
  const Model m = make_model(t, c);
  const std::vector<std::size_t> batch{0, 1, 2, 3, 4, 5, 6, 7};
  const Objective o = pretrain_objective(m, c, batch, t, 2, 11);
  REQUIRE(o.hn.defined());
  CHECK_FALSE(o.local.defined());
  o.hn.backward();
  double co = 0, enc = 0;
  for (const auto& p : m.params()) {
    if (!p.tensor.has_grad()) continue;
    double s = 0;
    for (Real g : p.tensor.grad()) s += double(g) * g;
    if (p.name.rfind("co_attention", 0) == 0) co += s;
    if (p.name.rfind("image_encoder", 0) == 0 || p.name.rfind("text_encoder", 0) == 0) enc += s;
  }
  CHECK(co > 0);
  CHECK(enc > 0);
  for (auto p : m.params()) p.tensor.zero_grad();
}

TEST_CASE("untrained decoder answers at chance") {
  CorpusConfig cc = tiny_corpus();
  cc.vqa_eval_samples = 400;
  const Corpus c = generate_corpus(cc);
  Model m = make_model(tiny_train(), c);
  m.init_vqa(c.answers, 5);
  const double p = 1.0 / double(c.answers.size());
  const double se = std::sqrt(p * (1 - p) / 400.0);
  CHECK(std::abs(evaluate_vqa(m, c.vqa_eval).accuracy - p) <= 3 * se);
}
