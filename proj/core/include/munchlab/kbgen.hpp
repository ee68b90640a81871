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

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace munchlab::kbgen {

/// Surface forms for one relation. {s} marks the subject slot, {o} the object.
struct RelationSpec {
  std::string name;
  std::string question_template;   // "Who is the mentor of {s}?"
  std::string coref_template;      // "Who is the mentor of that person?"
  std::string statement_template;  // "The mentor of {s} is {o}."
};

std::vector<RelationSpec> default_relations();

struct RetainRatio {
  double train = 7.0;
  double valid = 1.0;
  double test = 1.0;
};

struct GenConfig {
  std::size_t n_entities = 500;
  std::vector<RelationSpec> relations = default_relations();
  std::size_t n_single_facts = 2000;
  std::size_t n_chains = 800;
  std::array<double, 3> hop_distribution{0.6, 0.4, 0.0};  // 2, 3, 4 hops
  double forget_fraction = 0.05;
  std::uint64_t seed = 0;
  RetainRatio retain_ratio;

  /// Throws Error("kbgen.invalid_config") on the first violated invariant.
  void validate() const;
  const RelationSpec& relation(const std::string& name) const;
};

struct FactTriple {
  std::string id;
  std::string subject;
  std::string relation;
  std::string object;

  bool operator==(const FactTriple&) const = default;
};

struct KnowledgeBase {
  std::vector<std::string> entities;
  std::vector<FactTriple> facts;

  /// nullptr when absent.
  const FactTriple* find(const std::string& fact_id) const;
};

struct FactChain {
  std::string id;
  std::vector<std::string> fact_ids;

  bool operator==(const FactChain&) const = default;
};

enum class QuestionKind { single_hop, multi_hop };
enum class Split { forget, retain_train, retain_valid, retain_test };

const char* to_string(QuestionKind kind);
const char* to_string(Split split);
QuestionKind parse_kind(const std::string& s);
Split parse_split(const std::string& s);

struct QAItem {
  std::string id;
  QuestionKind kind = QuestionKind::single_hop;
  std::string text;
  std::string answer;
  std::vector<std::string> fact_ids;
  Split split = Split::retain_train;

  bool operator==(const QAItem&) const = default;
};

struct DatasetBundle {
  GenConfig config;
  std::vector<FactTriple> facts;
  std::vector<FactChain> chains;
  std::vector<QAItem> questions;
  double forget_fraction = 0.0;
  std::uint64_t seed = 0;

  /// Lookup tables rebuilt on demand; not serialized.
  std::unordered_map<std::string, std::size_t> fact_index() const;
  std::vector<const QAItem*> select(QuestionKind kind, Split split) const;
};

struct ChainBuildResult {
  std::vector<FactChain> chains;
  std::size_t shortfall = 0;  // requested minus produced
};

/// Synthetic KB with functional relations: each (subject, relation) pair
/// has exactly one object, and object != subject.
KnowledgeBase generate_kb(const GenConfig& config);

/// Every simple path of length hops (no repeated entity), in lexicographic
/// order of fact positions. Exposed for the chain sampler and its tests.
std::vector<std::vector<std::size_t>> enumerate_paths(const KnowledgeBase& kb,
                                                      std::size_t hops);

/// Samples chains per hop count. For hop count h the target is
/// round_half_up(n_chains * w_h), the largest-weight bucket absorbing any
/// rounding remainder. Targets are drawn without replacement from
/// enumerate_paths(kb, h) by a seeded partial Fisher-Yates shuffle
/// (seed = config.seed + 1); selected chains are emitted ordered by hop
/// count, then by enumeration position. Buckets with too few paths
/// contribute all of them and the deficit is reported as shortfall.
ChainBuildResult build_chains(const KnowledgeBase& kb, const GenConfig& config);

/// One single-hop item per fact (in fact order), then one multi-hop item per
/// chain. Multi-hop text is the hop-1 question followed by the coreference
/// continuation of every later hop, space separated.
std::vector<QAItem> render_questions(const KnowledgeBase& kb,
                                     const std::vector<FactChain>& chains,
                                     const GenConfig& config);

/// Assigns split labels (see README for the exact procedure). Facts and
/// chains are not needed: linkage is read from QAItem::fact_ids.
DatasetBundle split_dataset(std::vector<QAItem> questions,
                            double forget_fraction, std::uint64_t seed,
                            const RetainRatio& ratio = {});

/// generate_kb -> build_chains -> render_questions -> split_dataset.
DatasetBundle build_dataset(const GenConfig& config);

struct CellStats {
  std::size_t count = 0;
  std::optional<double> mean_question_words;
  std::optional<double> mean_total_hops;
  std::optional<double> mean_unlearned_hops;
};

struct StatsReport {
  // Indexed [kind][split].
  std::array<std::array<CellStats, 4>, 2> cells{};

  const CellStats& at(QuestionKind kind, Split split) const {
    return cells[static_cast<int>(kind)][static_cast<int>(split)];
  }
  nlohmann::ordered_json to_json() const;
};

StatsReport dataset_stats(const DatasetBundle& bundle);

/// Whitespace-separated word count, the unit of "question length".
std::size_t word_count(const std::string& text);

/// Substitutes {s} and {o} in a template.
std::string fill_template(const std::string& tmpl, const std::string& subject,
                          const std::string& object = {});

nlohmann::ordered_json to_json(const GenConfig& config);
GenConfig gen_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const DatasetBundle& bundle);
DatasetBundle bundle_from_json(const nlohmann::json& j);

/// Serialized dataset bytes (2-space indent, trailing newline).
std::string serialize(const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::string& path);
void save_bundle(const DatasetBundle& bundle, const std::string& path);

}  // namespace munchlab::kbgen
