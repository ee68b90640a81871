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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "munchlab/kbgen.hpp"
#include "munchlab/seqmodel.hpp"

namespace munchlab::unlearner {

using seqmodel::Example;
using seqmodel::ModelCheckpoint;
using seqmodel::SequenceObjective;
using seqmodel::TokenSequence;

enum class Method { ga, dpo, npo };
const char* to_string(Method m);
Method parse_method(const std::string& s);

/// (x, y_w, y_l): y_w is a rejection, y_l the factual answer.
struct PreferencePair {
  TokenSequence prompt;
  TokenSequence win;
  TokenSequence lose;
};

std::vector<std::string> default_rejection_pool();

// Loss values. Each is the value of the matching *_objective below.

/// mean log pi(y|x); minimizing it is gradient ascent on the NLL.
double loss_ga(const ModelCheckpoint& ckpt, const std::vector<Example>& batch);
/// Mean sequence NLL.
double loss_retain(const ModelCheckpoint& ckpt, const std::vector<Example>& batch);
/// -mean log sigmoid(beta * (dw - dl)), d = log pi_theta - log pi_ref summed over target tokens.
double loss_dpo(const ModelCheckpoint& ckpt, const ModelCheckpoint& ref,
                const std::vector<PreferencePair>& batch, double beta);
/// -mean log sigmoid(-beta * (log pi_theta - log pi_ref)).
double loss_npo(const ModelCheckpoint& ckpt, const ModelCheckpoint& ref,
                const std::vector<Example>& batch, double beta);
double combined_loss(double alpha, double forget_loss, double retain_loss);

/// log(1 + exp(-t)), stable for large |t|.
double neg_log_sigmoid(double t);

// Differentiable forms. Reference log-probabilities are constants.

SequenceObjective ga_objective(std::vector<Example> batch);
SequenceObjective retain_objective(std::vector<Example> batch);
/// Sequences are all wins followed by all losses.
SequenceObjective dpo_objective(const std::vector<PreferencePair>& batch,
                                std::vector<double> ref_win, std::vector<double> ref_lose,
                                double beta);
SequenceObjective npo_objective(std::vector<Example> batch, std::vector<double> ref_logp,
                                double beta);
/// alpha * forget + (1 - alpha) * retain over the concatenated sequences.
SequenceObjective combined_objective(double alpha, SequenceObjective forget,
                                     SequenceObjective retain);

struct EarlyStop {
  bool enabled = true;
  std::string monitor = "retain_valid_lm";  // the only supported monitor
  std::size_t patience = 1;
  double min_delta = 0.0;  // negative: allowed increase over the best value
};

struct UnlearnConfig {
  Method method = Method::ga;
  bool with_retain = true;
  double alpha = 0.1;
  double beta = 0.1;
  std::vector<std::string> rejection_pool = default_rejection_pool();
  seqmodel::TrainConfig train;
  EarlyStop early_stop;

  void validate() const;
};

nlohmann::ordered_json to_json(const UnlearnConfig& c);
UnlearnConfig unlearn_config_from_json(const nlohmann::json& j, UnlearnConfig defaults = {});

/// One optimization step, as written to the JSONL run log.
struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  Method method = Method::ga;
  double alpha = 0.0;
  double forget_loss = 0.0;
  std::optional<double> retain_loss;
  double combined = 0.0;
  double lr = 0.0;
};

nlohmann::ordered_json to_json(const StepRecord& r);

struct UnlearnData {
  std::vector<Example> forget;
  std::vector<Example> retain_train;
  std::vector<Example> retain_valid;
};

/// Single-hop forget / retain_train / retain_valid items in QA layout.
UnlearnData unlearning_data(const kbgen::DatasetBundle& bundle, const seqmodel::Vocabulary& vocab);

struct UnlearnResult {
  ModelCheckpoint checkpoint;
  std::vector<StepRecord> steps;
  std::vector<double> monitor;  // retain-valid LM loss after each epoch
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  bool diverged = false;
  std::string divergence;  // diagnostics when diverged
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Mean per-token NLL over the targets of items.
double token_mean_nll(const ModelCheckpoint& ckpt, const std::vector<Example>& items);

/// Forget batches of train.batch_size in a fresh seeded order every epoch;
/// with_retain pairs each one with an equally sized retain batch and
/// optimizes the combined loss. Early stopping is checked only after the
/// first full epoch. A non-finite loss stops the run and returns the last
/// finite checkpoint with diverged set.
UnlearnResult run_unlearning(const ModelCheckpoint& original, const UnlearnData& data,
                             const UnlearnConfig& config, const StepCallback& on_step = {});

}  // namespace munchlab::unlearner
