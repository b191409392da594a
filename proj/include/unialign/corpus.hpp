#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "unialign/config.hpp"
#include "unialign/encoders.hpp"
#include "unialign/fusion.hpp"

namespace unialign {

enum class QuestionType { kOpen = 0, kClosed = 1 };

struct VqaSample {
  Tensor image;     // p×f, a single view
  Tensor question;  // q×f
  std::size_t answer = 0;
  QuestionType type = QuestionType::kOpen;
  std::size_t cluster = 0;
};

/// Synthetic paired corpus.
///
/// Each study draws a cluster c and a latent z = center_c + spread·N(0, I).
/// The latent is cut into one slice per patch. Patch j of view v is a fixed
/// region map of slice j plus a weak map of the whole latent plus noise, with
/// separate maps per view. Report token l < min(p, t) carries slice l through
/// its own map (the ground-truth local correspondence); later report tokens
/// carry only the weak global part.
///
/// VQA items pick a gold answer uniformly from K finding names plus yes/no.
/// Open questions ask for the finding; closed ones ask whether a named
/// finding is present.
struct Corpus {
  CorpusConfig config;
  std::vector<RawSample> train;
  std::vector<RawSample> eval;
  std::vector<VqaSample> vqa_train;
  std::vector<VqaSample> vqa_eval;
  AnswerVocabulary answers;
  TeacherOracle teacher;
  /// (patch, report token) pairs generated from the same latent slice.
  std::vector<std::pair<std::size_t, std::size_t>> correspondence;

  std::size_t question_tokens() const;
};

Corpus generate_corpus(const CorpusConfig& cfg);

/// Writes corpus.cfg, corpus.bin and answers.txt into `dir`, creating it.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

std::string finding_name(std::size_t cluster);

}  // namespace unialign
