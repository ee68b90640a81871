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

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "munchlab/kbgen.hpp"
#include "munchlab/munch.hpp"
#include "munchlab/seqmodel.hpp"

namespace munchlab::evalsuite {

using seqmodel::ModelCheckpoint;

/// Candidate objects per relation: every distinct KB object of that relation,
/// sorted.
using CandidateMap = std::map<std::string, std::vector<std::string>>;

CandidateMap candidate_map(const kbgen::DatasetBundle& bundle);

struct ProbeItem {
  std::string id;
  std::string question;
  std::string answer;
  std::string relation;  // relation of the last fact in the chain
};

std::vector<ProbeItem> probe_items(const kbgen::DatasetBundle& bundle,
                                   const std::vector<const kbgen::QAItem*>& items);

struct ProbingResult {
  double pa = 0.0;  // percentage, macro over relations
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_relation;  // hits, total
  std::vector<std::string> gold_missing;                                    // item ids
  std::vector<bool> hits;                                                   // per item
};

/// Gold counts as top-1 only with a strictly greater log-probability than
/// every other candidate.
ProbingResult probing_accuracy(const ModelCheckpoint& ckpt, const std::vector<ProbeItem>& items,
                               const CandidateMap& candidates);

struct RougeResult {
  double recall = 0.0;
  bool empty_reference = false;
};

RougeResult rouge_l_recall(const std::string& prediction, const std::string& reference);

/// Pooled per-token NLL over all answer tokens (EOS included).
double lm_loss(const ModelCheckpoint& ckpt, const std::vector<ProbeItem>& items);

enum class Pipeline { raw, munch, mello };
const char* to_string(Pipeline p);
Pipeline parse_pipeline(const std::string& s);

struct Cell {
  kbgen::Split split = kbgen::Split::forget;  // forget or retain_test
  kbgen::QuestionKind kind = kbgen::QuestionKind::single_hop;
  std::size_t n = 0;
  double pa = 0.0;
  double rl = 0.0;
  double lm = 0.0;
  std::size_t gold_missing = 0;
  std::size_t empty_references = 0;
};

struct MetricsReport {
  std::string method;  // row label, e.g. "GA+RT"
  Pipeline pipeline = Pipeline::raw;
  std::string original_tag;
  std::string evaluated_tag;
  double forget_fraction = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> tau;
  std::vector<Cell> cells;  // forget/single, forget/multi, retain/single, retain/multi

  const Cell& at(kbgen::Split split, kbgen::QuestionKind kind) const;
};

nlohmann::ordered_json to_json(const MetricsReport& r);
std::string tsv_header();
/// One row per cell in fixed order; PA and R-L to one decimal, LM to three.
std::string tsv_rows(const MetricsReport& r);

/// Multi-hop items of one split with their MUNCH bookkeeping. Building this
/// runs the hop answers once so many thresholds can be tried cheaply.
struct PreparedMultiHop {
  kbgen::Split split = kbgen::Split::forget;
  std::vector<ProbeItem> items;
  std::vector<munch::QuestionRun> runs;

  /// Per-question max hop score, ignoring the gate.
  std::vector<double> max_scores() const;
};

PreparedMultiHop prepare_multi_hop(const kbgen::DatasetBundle& bundle, kbgen::Split split,
                                   const ModelCheckpoint& original, const ModelCheckpoint& unlearned,
                                   const munch::ForgetMemory& memory, const munch::MunchConfig& config);

struct PipelineCell {
  double pa = 0.0;
  double rl = 0.0;
  std::vector<munch::DecisionTrace> traces;
};

/// Exact-match PA: rejected items score 0, answered items score 1 iff the
/// case-folded final text equals the gold answer.
PipelineCell pipeline_cell(const PreparedMultiHop& prepared, Pipeline pipeline, std::optional<double> tau,
                           const munch::ForgetMemory& memory, const munch::MunchConfig& config);

struct EvalInputs {
  const kbgen::DatasetBundle* bundle = nullptr;
  const ModelCheckpoint* original = nullptr;
  const ModelCheckpoint* evaluated = nullptr;
  Pipeline pipeline = Pipeline::raw;
  std::optional<double> tau;
  const munch::ForgetMemory* memory = nullptr;
  munch::MunchConfig munch_config;
  std::string method;
  std::size_t max_answer_tokens = 8;  // greedy decode length for R-L
};

struct EvalResult {
  MetricsReport report;
  std::vector<munch::DecisionTrace> traces;  // multi-hop items, forget then retain
};

/// Raw evaluates `evaluated` directly. MUNCH and the baseline route the
/// multi-hop items through the pipeline; single-hop cells and LM stay raw.
EvalResult evaluate(const EvalInputs& in);

}  // namespace munchlab::evalsuite
