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

// Glue for the full lifecycle: corpus, pretraining, unlearning, calibration,
// evaluation and the forget-fraction sweep. The CLI is a thin layer over
// these functions.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "munchlab/evalsuite.hpp"
#include "munchlab/kbgen.hpp"
#include "munchlab/munch.hpp"
#include "munchlab/seqmodel.hpp"
#include "munchlab/unlearner.hpp"

namespace munchlab::experiment {

using Log = std::function<void(const std::string&)>;

struct Paths {
  std::string run_dir = "run";
  std::string dataset = "dataset.json";
  std::string original = "original.json";
  std::string unlearned = "unlearned.json";
  std::string tau = "calibration.json";
  std::string traces = "traces.jsonl";
  std::string reports = "reports";
  std::string sweep = "sweep";

  /// Relative entries are resolved against run_dir.
  std::string resolve(const std::string& p) const;
};

struct ExperimentConfig {
  Paths paths;
  kbgen::GenConfig gen;
  seqmodel::Arch arch;  // vocab_size is filled in from the corpus
  seqmodel::TrainConfig pretrain;
  std::size_t coref_contexts = 4;  // coreference prompts per fact
  std::uint64_t init_seed = 0;
  unlearner::UnlearnConfig unlearn;
  munch::MunchConfig munch;
  std::vector<double> forget_fractions{0.01, 0.05, 0.10};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<unlearner::Method> sweep_methods{unlearner::Method::ga, unlearner::Method::dpo,
                                               unlearner::Method::npo};
  std::vector<double> similarity_sweep{0.6, 0.7, 0.8, 0.9, 1.0};

  void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::string& path);

// ------------------------------------------------------------------ corpus

seqmodel::Vocabulary corpus_vocabulary(const kbgen::DatasetBundle& bundle, const ExperimentConfig& config);

/// Question/answer pairs, declarative statements, coreference-context prompts
/// and memorized multi-hop questions for every fact and chain in the bundle.
std::vector<seqmodel::Example> pretraining_corpus(const kbgen::DatasetBundle& bundle,
                                                  const seqmodel::Vocabulary& vocab,
                                                  std::size_t coref_contexts, std::uint64_t seed);

seqmodel::ModelCheckpoint pretrain(const ExperimentConfig& config, const kbgen::DatasetBundle& bundle,
                                   const Log& log = {});

/// Same KB and questions, new forget/retain assignment.
kbgen::DatasetBundle resplit(const kbgen::DatasetBundle& base, double forget_fraction, std::uint64_t seed);

unlearner::UnlearnResult unlearn(const ExperimentConfig& config, const kbgen::DatasetBundle& bundle,
                                 const seqmodel::ModelCheckpoint& original, const Log& log = {});

// ------------------------------------------------------------- calibration

struct GateRate {
  double threshold = 0.0;
  double forget_rate = 0.0;  // share of forget multi-hop questions with a gate hit
  double retain_rate = 0.0;  // same on retain_valid
};

struct CalibrationRun {
  munch::Calibration calibration;
  std::vector<double> forget_scores;
  std::vector<double> retain_scores;
  std::vector<GateRate> gate_rates;
  std::string score_mode;
};

/// Forget scores come from forget multi-hop questions, retain scores from
/// retain_valid; each score is the question's max hop score without the gate.
CalibrationRun calibrate(const ExperimentConfig& config, const kbgen::DatasetBundle& bundle,
                         const seqmodel::ModelCheckpoint& original, const seqmodel::ModelCheckpoint& unlearned);

nlohmann::ordered_json to_json(const CalibrationRun& c);
/// Reads tau from a calibration artifact; throws cli.missing_tau if absent.
double read_tau(const std::string& path);

// -------------------------------------------------------------------- sweep

struct SweepRow {
  std::uint64_t seed = 0;
  double forget_fraction = 0.0;
  evalsuite::MetricsReport report;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::string per_seed_tsv;
  std::string aggregate_tsv;  // averaged over seeds
};

std::string method_label(unlearner::Method m, bool with_retain);

/// Runs fractions x methods (with retain) per seed on the given original
/// model, writing per-run artifacts under out_dir.
SweepResult sweep(const ExperimentConfig& config, const kbgen::DatasetBundle& base,
                  const seqmodel::ModelCheckpoint& original, const std::string& out_dir, const Log& log = {});

std::string aggregate_tsv(const std::vector<SweepRow>& rows);
std::string per_seed_tsv(const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------- artifacts

void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);
std::uint32_t file_crc32(const std::string& path);
/// Lists every file under run_dir (except the manifest) with size and CRC-32.
void write_manifest(const std::string& run_dir);

}  // namespace munchlab::experiment
