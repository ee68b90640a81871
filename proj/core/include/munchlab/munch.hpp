// Copyright 2026 The munchlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "munchlab/kbgen.hpp"
#include "munchlab/seqmodel.hpp"

namespace munchlab::munch {

using seqmodel::ModelCheckpoint;
using seqmodel::TokenSequence;

inline constexpr double kInfiniteScore = std::numeric_limits<double>::infinity();
inline const std::string kDefaultRejection = "I must decline to answer due to lack of information.";

struct DecomposedQuestion {
  std::string source_id;
  std::vector<std::string> subquestions;  // hop 2+ use coreference forms
  std::string origin;                     // "template" or "external"
};

/// Inverts kbgen's multi-hop rendering: the text is split after each '?',
/// the first piece must match a question template and every later piece a
/// coreference template. Throws munch.decomposition_invalid otherwise, or
/// when the hop count differs from the item's fact count.
DecomposedQuestion decompose_template(const kbgen::QAItem& item,
                                      const std::vector<kbgen::RelationSpec>& relations);

/// Checks an externally produced decomposition against the source item.
void validate_decomposition(const DecomposedQuestion& dq, const kbgen::QAItem& item);

/// Abstract external decomposer speaking the line-JSON protocol.
class Decomposer {
 public:
  virtual ~Decomposer() = default;
  virtual std::vector<std::string> decompose(const std::string& id, const std::string& question) = 0;
};

/// Spawns `command` through /bin/sh and exchanges one JSON line per request
/// over its stdin/stdout.
std::unique_ptr<Decomposer> make_process_decomposer(const std::string& command);
/// POSTs {"id","question"} to url and expects {"id","subquestions"} back.
std::unique_ptr<Decomposer> make_http_decomposer(const std::string& url);

/// Parses one protocol reply; throws munch.protocol on malformed input or
/// an id mismatch.
std::vector<std::string> parse_decomposer_reply(const std::string& line, const std::string& expected_id);
std::string decomposer_request(const std::string& id, const std::string& question);

DecomposedQuestion decompose_external(const kbgen::QAItem& item, Decomposer& decomposer);

struct HopAnswer {
  std::size_t index = 0;
  TokenSequence prompt;     // the exact prompt fed to the original model
  TokenSequence token_ids;  // greedy continuation, EOS stripped
  std::string text;
  std::size_t dropped_hops = 0;  // oldest hops removed to fit the context
};

/// Hop i's prompt: <bos> q1 <sep> a1 <sep> q2 ... <sep> qi.
TokenSequence hop_prompt(const seqmodel::Vocabulary& vocab, const std::vector<std::string>& subquestions,
                         const std::vector<TokenSequence>& previous_answers, std::size_t hop,
                         std::size_t context, std::size_t reserve, std::size_t* dropped);

/// Answers subquestions in order with the original checkpoint.
std::vector<HopAnswer> answer_subquestions(const ModelCheckpoint& original, const DecomposedQuestion& dq,
                                           std::size_t max_answer_tokens = 8);

enum class ScoreMode { mean, sum };
const char* to_string(ScoreMode m);
ScoreMode parse_score_mode(const std::string& s);

/// NLL of a hop answer under the unlearned checkpoint; mean per generated
/// token by default. An empty answer scores +infinity.
double hop_score(const ModelCheckpoint& unlearned, const HopAnswer& answer, ScoreMode mode = ScoreMode::mean);
std::vector<double> uncertainty_scores(const ModelCheckpoint& unlearned, const std::vector<HopAnswer>& answers,
                                       ScoreMode mode = ScoreMode::mean);

struct DensityBin {
  double left = 0.0;
  double right = 0.0;
  double forget_density = 0.0;
  double retain_density = 0.0;
};

struct Calibration {
  double tau = 0.0;
  double balanced_error = 0.0;
  double forget_miss_rate = 0.0;
  double retain_reject_rate = 0.0;
  bool degenerate = false;   // all scores identical
  bool inseparable = false;  // no threshold beats chance
  std::vector<DensityBin> density;
};

/// Balanced error of threshold tau (reject iff score > tau).
double balanced_error(const std::vector<double>& forget, const std::vector<double>& retain, double tau);

/// Minimizes balanced error over midpoints of consecutive distinct pooled
/// finite scores; the lowest such midpoint wins ties. Densities use 50
/// equal-width bins over the pooled finite range.
Calibration calibrate_threshold(const std::vector<double>& forget_scores,
                                const std::vector<double>& retain_scores, std::size_t bins = 50);

nlohmann::ordered_json to_json(const Calibration& c);
std::string density_tsv(const Calibration& c);

using Similarity = std::function<double(const std::string&, const std::string&)>;

/// Cosine similarity of lower-cased character-trigram count vectors.
/// Strings shorter than three characters count as a single gram.
double trigram_cosine(const std::string& a, const std::string& b);

struct MemoryEntry {
  std::string question;
  std::string answer;
};

struct ForgetMemory {
  std::vector<MemoryEntry> entries;
  double similarity_threshold = 0.8;
  Similarity similarity = trigram_cosine;

  static ForgetMemory from_bundle(const kbgen::DatasetBundle& bundle, double threshold = 0.8);
};

struct Retrieval {
  double similarity = 0.0;
  std::optional<std::size_t> entry;  // most similar entry, first on ties
  bool hit = false;
};

Retrieval retrieval_gate(const std::string& subquestion, const ForgetMemory& memory);

/// Rewrites a coreference subquestion into its standalone form using the
/// previous hop's answer; other strings are returned unchanged.
std::string resolve_subquestion(const std::string& subquestion, const std::string& previous_answer,
                                const std::vector<kbgen::RelationSpec>& relations);

enum class Verdict { answer, reject };
const char* to_string(Verdict v);

struct DecisionTrace {
  std::string question_id;
  std::vector<std::string> subquestions;
  std::vector<std::string> resolved_subquestions;
  std::vector<std::string> hop_answers;
  std::vector<std::optional<double>> scores;  // empty for gated hops
  std::vector<bool> gate_hits;
  std::vector<double> similarities;
  std::optional<double> tau;  // absent for the baseline
  Verdict verdict = Verdict::answer;
  std::string final_text;
  std::size_t dropped_hops = 0;
};

nlohmann::ordered_json to_json(const DecisionTrace& t);

/// Reject iff any gate hit or any computed score exceeds tau; otherwise the
/// final text is the last hop's answer.
Verdict decide(const std::vector<bool>& gate_hits, const std::vector<std::optional<double>>& scores,
               double tau);

struct MunchConfig {
  ScoreMode score_mode = ScoreMode::mean;
  double similarity_threshold = 0.8;
  std::string rejection_text = kDefaultRejection;
  std::size_t max_answer_tokens = 8;
  bool use_gate = true;
  std::string decomposer = "template";  // template | process | http
  std::string decomposer_endpoint;       // command line or URL
};

nlohmann::ordered_json to_json(const MunchConfig& c);
MunchConfig munch_config_from_json(const nlohmann::json& j, MunchConfig defaults = {});

/// Everything MUNCH needs for one question that does not depend on tau.
struct QuestionRun {
  DecomposedQuestion dq;
  std::vector<HopAnswer> answers;
  std::vector<std::string> resolved;
  std::vector<Retrieval> retrievals;
  std::vector<std::optional<double>> scores;  // computed for every non-gated hop
  std::vector<double> all_scores;             // every hop, ignoring the gate
};

QuestionRun prepare_question(const DecomposedQuestion& dq, const ModelCheckpoint& original,
                             const ModelCheckpoint& unlearned, const ForgetMemory& memory,
                             const std::vector<kbgen::RelationSpec>& relations, const MunchConfig& config);

DecisionTrace munch_decision(const QuestionRun& run, double tau, const MunchConfig& config);

/// MeLLo-style baseline: reject when a hop's answer equals (case-folded)
/// the answer of the memory entry most similar to that hop's subquestion.
DecisionTrace mello_baseline(const QuestionRun& run, const ForgetMemory& memory, const MunchConfig& config);

}  // namespace munchlab::munch
