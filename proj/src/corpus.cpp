#include "unialign/corpus.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "unialign/serialize.hpp"

namespace unialign {

namespace {

constexpr const char* kGreek[] = {"alpha", "beta",  "gamma", "delta",   "epsilon", "zeta",
                                  "eta",   "theta", "iota",  "kappa",   "lambda",  "mu",
                                  "nu",    "xi",    "omicron", "pi",    "rho",     "sigma",
                                  "tau",   "upsilon", "phi", "chi",     "psi",     "omega"};

// Stream ids under the corpus seed.
enum : std::uint64_t { kMaps = 1, kTrain = 2, kEval = 3, kVqaMaps = 4, kVqaTrain = 5, kVqaEval = 6, kTeacher = 7 };

std::vector<Real> gaussian(std::size_t n, double sd, RngStream& rng) {
  std::vector<Real> v(n);
  for (Real& x : v) x = static_cast<Real>(rng.normal(0.0, sd));
  return v;
}

struct Generator {
  const CorpusConfig& cfg;
  std::size_t slice;
  std::vector<std::vector<Real>> centers;            // K × k
  std::vector<std::vector<Real>> view_local[2];      // per view, per patch: slice×f
  std::vector<std::vector<Real>> view_global[2];     // per view, per patch: k×f
  std::vector<std::vector<Real>> text_local;         // per token: slice×f
  std::vector<std::vector<Real>> text_global;        // per token: k×f
  static constexpr double kGlobalWeight = 0.5;

  explicit Generator(const CorpusConfig& c) : cfg(c) {
    slice = std::max<std::size_t>(1, c.latent_dim / c.patches);
    RngStream rng(c.seed, kMaps);
    for (std::size_t k = 0; k < c.clusters; ++k) centers.push_back(gaussian(c.latent_dim, 1.0, rng));
    const double sl = 1.0 / std::sqrt(double(slice));
    const double sg = 1.0 / std::sqrt(double(c.latent_dim));
    for (int v = 0; v < 2; ++v)
      for (std::size_t j = 0; j < c.patches; ++j) {
        view_local[v].push_back(gaussian(slice * c.feature_width, sl, rng));
        view_global[v].push_back(gaussian(c.latent_dim * c.feature_width, sg, rng));
      }
    for (std::size_t l = 0; l < c.text_tokens; ++l) {
      text_local.push_back(gaussian(slice * c.feature_width, sl, rng));
      text_global.push_back(gaussian(c.latent_dim * c.feature_width, sg, rng));
    }
  }

  std::size_t slice_dim(std::size_t j, std::size_t s) const {
    return (j * slice + s) % cfg.latent_dim;
  }

  // One token: slice j of z through `local` (when given), plus the weak
  // global map, plus noise.
  void token(const std::vector<Real>& z, std::size_t j, const std::vector<Real>* local,
             const std::vector<Real>& global, double noise, RngStream& rng, Real* out) const {
    const std::size_t f = cfg.feature_width;
    for (std::size_t c = 0; c < f; ++c) {
      double acc = 0;
      if (local)
        for (std::size_t s = 0; s < slice; ++s) acc += z[slice_dim(j, s)] * (*local)[s * f + c];
      double g = 0;
      for (std::size_t m = 0; m < z.size(); ++m) g += z[m] * global[m * f + c];
      out[c] = static_cast<Real>(acc + kGlobalWeight * g + rng.normal(0.0, noise));
    }
  }

  std::vector<Real> latent(std::size_t cluster, RngStream& rng) const {
    std::vector<Real> z = centers[cluster];
    for (Real& x : z) x += static_cast<Real>(rng.normal(0.0, cfg.cluster_spread));
    return z;
  }

  Tensor view(const std::vector<Real>& z, int v, RngStream& rng) const {
    std::vector<Real> data(cfg.patches * cfg.feature_width);
    for (std::size_t j = 0; j < cfg.patches; ++j)
      token(z, j, &view_local[v][j], view_global[v][j], cfg.view_noise, rng,
            data.data() + j * cfg.feature_width);
    return Tensor({cfg.patches, cfg.feature_width}, std::move(data));
  }

  Tensor report(const std::vector<Real>& z, RngStream& rng) const {
    const std::size_t paired = std::min(cfg.patches, cfg.text_tokens);
    std::vector<Real> data(cfg.text_tokens * cfg.feature_width);
    for (std::size_t l = 0; l < cfg.text_tokens; ++l)
      token(z, l, l < paired ? &text_local[l] : nullptr, text_global[l], cfg.text_noise, rng,
            data.data() + l * cfg.feature_width);
    return Tensor({cfg.text_tokens, cfg.feature_width}, std::move(data));
  }

  RawSample sample(RngStream& rng) const {
    RawSample s;
    s.cluster = rng.index(cfg.clusters);
    const auto z = latent(s.cluster, rng);
    s.view1 = view(z, 0, rng);
    s.view2 = view(z, 1, rng);
    s.report = report(z, rng);
    s.latent = Tensor({1, cfg.latent_dim}, z);
    return s;
  }
};

struct QuestionMaps {
  std::vector<Real> type[2];             // q×f each
  std::vector<std::vector<Real>> query;  // K × (q×f)
};

std::vector<VqaSample> make_vqa(const Generator& gen, const QuestionMaps& qm, std::size_t count,
                                std::size_t q, RngStream& rng) {
  const auto& cfg = gen.cfg;
  const std::size_t k = cfg.clusters;
  const std::size_t f = cfg.feature_width;
  std::vector<VqaSample> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    VqaSample s;
    s.answer = rng.index(k + 2);
    std::size_t queried = k;
    if (s.answer < k) {
      s.type = QuestionType::kOpen;
      s.cluster = s.answer;
    } else {
      s.type = QuestionType::kClosed;
      s.cluster = rng.index(k);
      if (s.answer == k) {
        queried = s.cluster;
      } else {
        if (k < 2) fail(ErrorCode::kConfig, "corpus: closed 'no' questions need >= 2 clusters");
        const std::size_t r = rng.index(k - 1);
        queried = r < s.cluster ? r : r + 1;
      }
    }
    const auto z = gen.latent(s.cluster, rng);
    s.image = gen.view(z, 0, rng);
    std::vector<Real> tokens(q * f);
    const auto& type = qm.type[static_cast<int>(s.type)];
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      double x = type[i] + rng.normal(0.0, cfg.text_noise);
      if (queried < k) x += qm.query[queried][i];
      tokens[i] = static_cast<Real>(x);
    }
    s.question = Tensor({q, f}, std::move(tokens));
    out.push_back(std::move(s));
  }
  return out;
}

Tensor stack3(const std::vector<Tensor>& items) {
  if (items.empty()) fail(ErrorCode::kEmpty, "corpus: cannot store an empty split");
  const std::size_t a = items.front().rows(), b = items.front().cols();
  std::vector<Real> data;
  data.reserve(items.size() * a * b);
  for (const Tensor& t : items) data.insert(data.end(), t.data().begin(), t.data().end());
  return Tensor({items.size(), a, b}, std::move(data));
}

std::vector<Tensor> unstack3(const Tensor& t) {
  if (t.rank() != 3) fail(ErrorCode::kIo, "corpus: expected a rank-3 tensor, got " + to_string(t.shape()));
  const std::size_t n = t.shape()[0], a = t.shape()[1], b = t.shape()[2];
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = t.data().subspan(i * a * b, a * b);
    out.emplace_back(Shape{a, b}, std::vector<Real>(d.begin(), d.end()));
  }
  return out;
}

Tensor index_vector(const std::vector<std::size_t>& v) {
  std::vector<Real> d(v.begin(), v.end());
  return Tensor({v.size()}, std::move(d));
}

std::vector<std::size_t> read_indices(const Tensor& t) {
  std::vector<std::size_t> out;
  for (Real x : t.data()) {
    if (x < 0 || x != std::floor(x)) fail(ErrorCode::kIo, "corpus: corrupt index tensor");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

void put_split(Archive& ar, const std::string& name, const std::vector<RawSample>& split) {
  std::vector<Tensor> v1, v2, r, z;
  std::vector<std::size_t> c;
  for (const auto& s : split) {
    v1.push_back(s.view1);
    v2.push_back(s.view2);
    r.push_back(s.report);
    c.push_back(s.cluster);
  }
  for (const auto& s : split) z.push_back(s.latent);
  ar.tensors.push_back({name + ".view1", stack3(v1)});
  ar.tensors.push_back({name + ".view2", stack3(v2)});
  ar.tensors.push_back({name + ".report", stack3(r)});
  ar.tensors.push_back({name + ".latent", concat_rows(z).detach()});
  ar.tensors.push_back({name + ".cluster", index_vector(c)});
}

void put_vqa(Archive& ar, const std::string& name, const std::vector<VqaSample>& split) {
  std::vector<Tensor> img, q;
  std::vector<std::size_t> ans, type, cl;
  for (const auto& s : split) {
    img.push_back(s.image);
    q.push_back(s.question);
    ans.push_back(s.answer);
    type.push_back(static_cast<std::size_t>(s.type));
    cl.push_back(s.cluster);
  }
  ar.tensors.push_back({name + ".image", stack3(img)});
  ar.tensors.push_back({name + ".question", stack3(q)});
  ar.tensors.push_back({name + ".answer", index_vector(ans)});
  ar.tensors.push_back({name + ".type", index_vector(type)});
  ar.tensors.push_back({name + ".cluster", index_vector(cl)});
}

const Tensor& need(const Archive& ar, const std::string& name) {
  const Tensor* t = ar.find(name);
  if (!t) fail(ErrorCode::kIo, "corpus: missing tensor '" + name + "'");
  return *t;
}

std::vector<RawSample> get_split(const Archive& ar, const std::string& name) {
  const auto v1 = unstack3(need(ar, name + ".view1"));
  const auto v2 = unstack3(need(ar, name + ".view2"));
  const auto r = unstack3(need(ar, name + ".report"));
  const Tensor& z = need(ar, name + ".latent");
  const auto c = read_indices(need(ar, name + ".cluster"));
  if (v2.size() != v1.size() || r.size() != v1.size() || z.rows() != v1.size() || c.size() != v1.size())
    fail(ErrorCode::kIo, "corpus: split '" + name + "' has inconsistent sizes");
  std::vector<RawSample> out(v1.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].view1 = v1[i];
    out[i].view2 = v2[i];
    out[i].report = r[i];
    out[i].latent = slice_rows(z, i, i + 1).detach();
    out[i].cluster = c[i];
  }
  return out;
}

std::vector<VqaSample> get_vqa(const Archive& ar, const std::string& name) {
  const auto img = unstack3(need(ar, name + ".image"));
  const auto q = unstack3(need(ar, name + ".question"));
  const auto ans = read_indices(need(ar, name + ".answer"));
  const auto type = read_indices(need(ar, name + ".type"));
  const auto cl = read_indices(need(ar, name + ".cluster"));
  if (q.size() != img.size() || ans.size() != img.size() || type.size() != img.size() ||
      cl.size() != img.size())
    fail(ErrorCode::kIo, "corpus: split '" + name + "' has inconsistent sizes");
  std::vector<VqaSample> out(img.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (type[i] > 1) fail(ErrorCode::kIo, "corpus: bad question type");
    out[i] = {img[i], q[i], ans[i], static_cast<QuestionType>(type[i]), cl[i]};
  }
  return out;
}

}  // namespace

std::string finding_name(std::size_t cluster) {
  std::string name = kGreek[cluster % 24];
  if (cluster >= 24) name += std::to_string(cluster / 24);
  return name;
}

std::size_t Corpus::question_tokens() const { return std::max<std::size_t>(2, config.text_tokens / 2); }

Corpus generate_corpus(const CorpusConfig& cfg) {
  validate(cfg);
  Corpus c;
  c.config = cfg;
  const Generator gen(cfg);
  {
    RngStream rng(cfg.seed, kTrain);
    for (std::size_t i = 0; i < cfg.num_samples; ++i) c.train.push_back(gen.sample(rng));
  }
  {
    RngStream rng(cfg.seed, kEval);
    for (std::size_t i = 0; i < cfg.eval_samples; ++i) c.eval.push_back(gen.sample(rng));
  }
  std::vector<std::string> answers;
  for (std::size_t k = 0; k < cfg.clusters; ++k) answers.push_back("finding " + finding_name(k));
  answers.push_back("yes");
  answers.push_back("no");
  c.answers = AnswerVocabulary(answers);

  const std::size_t q = c.question_tokens();
  QuestionMaps qm;
  {
    RngStream rng(cfg.seed, kVqaMaps);
    qm.type[0] = gaussian(q * cfg.feature_width, 1.0, rng);
    qm.type[1] = gaussian(q * cfg.feature_width, 1.0, rng);
    for (std::size_t k = 0; k < cfg.clusters; ++k) qm.query.push_back(gaussian(q * cfg.feature_width, 1.0, rng));
  }
  {
    RngStream rng(cfg.seed, kVqaTrain);
    c.vqa_train = make_vqa(gen, qm, cfg.vqa_train_samples, q, rng);
  }
  {
    RngStream rng(cfg.seed, kVqaEval);
    c.vqa_eval = make_vqa(gen, qm, cfg.vqa_eval_samples, q, rng);
  }
  {
    RngStream rng(cfg.seed, kTeacher);
    c.teacher = TeacherOracle::generate(cfg.latent_dim, cfg.teacher_dim, rng);
  }
  for (std::size_t l = 0; l < std::min(cfg.patches, cfg.text_tokens); ++l) c.correspondence.emplace_back(l, l);
  return c;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create directory '" + dir + "': " + ec.message());
  {
    std::ofstream os(dir + "/corpus.cfg");
    if (!os) fail(ErrorCode::kIo, "cannot write '" + dir + "/corpus.cfg'");
    for (const auto& [k, v] : to_key_values(corpus.config)) os << k << " = " << v << "\n";
  }
  corpus.answers.save(dir + "/answers.txt");
  Archive ar;
  ar.meta.emplace_back("kind", "corpus");
  put_split(ar, "train", corpus.train);
  put_split(ar, "eval", corpus.eval);
  if (!corpus.vqa_train.empty() && !corpus.vqa_eval.empty()) {
    put_vqa(ar, "vqa_train", corpus.vqa_train);
    put_vqa(ar, "vqa_eval", corpus.vqa_eval);
  }
  corpus.teacher.collect(ar.tensors, "teacher");
  save_archive(dir + "/corpus.bin", ar);
}

Corpus load_corpus(const std::string& dir) {
  Corpus c;
  const auto unused = apply_config(c.config, load_key_values(dir + "/corpus.cfg"));
  if (!unused.empty()) fail(ErrorCode::kConfig, "corpus.cfg: unknown key '" + unused.front() + "'");
  validate(c.config);
  c.answers = AnswerVocabulary::load(dir + "/answers.txt");
  const Archive ar = load_archive(dir + "/corpus.bin");
  c.train = get_split(ar, "train");
  c.eval = get_split(ar, "eval");
  if (ar.find("vqa_train.image")) {
    c.vqa_train = get_vqa(ar, "vqa_train");
    c.vqa_eval = get_vqa(ar, "vqa_eval");
  }
  c.teacher = TeacherOracle(need(ar, "teacher.image_map"), need(ar, "teacher.text_map"),
                            need(ar, "teacher.view1_offset"), need(ar, "teacher.view2_offset"));
  for (std::size_t l = 0; l < std::min(c.config.patches, c.config.text_tokens); ++l)
    c.correspondence.emplace_back(l, l);
  return c;
}

}  // namespace unialign
