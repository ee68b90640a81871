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
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace munchlab::seqmodel {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kUnk = 3;

/// Word-level vocabulary. Reserved tokens occupy ids 0-3.
///
/// Text is split on whitespace, and trailing punctuation (one of "?.,!;:")
/// is peeled off into its own token. detokenize() joins with single spaces
/// and attaches punctuation to the preceding word, so canonical text
/// ("Who employs Dalo Trinn?") round-trips exactly.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Reserved tokens followed by the sorted distinct words of texts.
  static Vocabulary build(const std::vector<std::string>& texts);
  static std::vector<std::string> split_words(std::string_view text);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<TokenId> find(const std::string& word) const;

  TokenSequence tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Arch {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t layers = 2;
  std::size_t context = 64;
  std::size_t heads = 4;

  void validate() const;
  bool operator==(const Arch&) const = default;
};

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size() const;
};

/// Tensor order of the flat parameter array:
///   tok_emb [V,E], pos_emb [C,E], then per layer l
///   l.ln1.gamma [E], l.ln1.beta [E], l.attn.wqkv [E,3E], l.attn.bqkv [3E],
///   l.attn.wo [E,E], l.attn.bo [E], l.ln2.gamma [E], l.ln2.beta [E],
///   l.mlp.w1 [E,H], l.mlp.b1 [H], l.mlp.w2 [H,E], l.mlp.b2 [E],
///   then lnf.gamma [E], lnf.beta [E], unembed [E,V].
/// Matrices are row-major and act on row vectors (y = x W + b).
std::vector<TensorSpec> tensor_manifest(const Arch& arch);
std::size_t param_count(const Arch& arch);

enum class CheckpointTag { init, original, unlearned, reference };
const char* to_string(CheckpointTag tag);
CheckpointTag parse_tag(const std::string& s);

struct ModelCheckpoint {
  Arch arch;
  std::vector<float> params;
  Vocabulary vocab;
  std::uint64_t seed = 0;
  CheckpointTag tag = CheckpointTag::init;

  /// Throws seqmodel.bad_checkpoint on size mismatch or non-finite values.
  void validate() const;
};

/// Gaussian(0, 0.02) weights, zero biases, unit LayerNorm gains.
ModelCheckpoint init_checkpoint(Arch arch, Vocabulary vocab, std::uint64_t seed);
/// Every parameter zero; predicts the uniform distribution everywhere.
ModelCheckpoint zero_checkpoint(Arch arch, Vocabulary vocab);

/// Header JSON at path, raw little-endian float32 at path + ".bin".
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);
std::uint32_t params_checksum(std::span<const float> params);

/// A (prompt, target) pair. log p(target | prompt) factorizes over the
/// target tokens; the prompt must be non-empty.
struct Example {
  TokenSequence prompt;
  TokenSequence target;
};

/// Log-probabilities over the vocabulary for the token after prefix.
std::vector<double> next_token_logprobs(const ModelCheckpoint& ckpt,
                                        std::span<const TokenId> prefix);

struct NllResult {
  double value = 0.0;
  bool empty_target = false;
};

/// Sum over target positions of -log p(token | preceding tokens).
NllResult sequence_nll(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt,
                       std::span<const TokenId> target);

/// log p(target | prompt) for each example (batched forward pass).
std::vector<double> sequence_logprobs(const ModelCheckpoint& ckpt,
                                      const std::vector<Example>& batch);

/// log p(continuation | prompt) for many continuations of one prompt,
/// sharing the prompt's key/value cache.
std::vector<double> continuation_logprobs(const ModelCheckpoint& ckpt,
                                          std::span<const TokenId> prompt,
                                          const std::vector<TokenSequence>& continuations);

/// Greedy argmax decoding (ties go to the lowest token id). Stops at EOS
/// (not included in the result), at max_new_tokens, or at the context limit.
TokenSequence greedy_decode(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt,
                            std::size_t max_new_tokens);

/// A scalar objective of the per-sequence log-likelihoods of `sequences`.
/// `evaluate` returns the objective value and writes d(value)/d(logp_i) into
/// its second argument.
struct SequenceObjective {
  std::vector<Example> sequences;
  std::function<double(std::span<const double> logp, std::span<double> dlogp)> evaluate;
};

/// Mean sequence NLL over examples (the language-modeling loss).
SequenceObjective nll_objective(std::vector<Example> examples);

struct GradientResult {
  double loss = 0.0;
  std::vector<float> grad;
  std::vector<double> logps;
};

/// Exact reverse-mode gradient of objective w.r.t. all parameters.
/// An empty objective yields a zero gradient. A non-finite loss throws
/// seqmodel.numerical naming batch_id.
GradientResult gradient_of_loss(const ModelCheckpoint& ckpt, const SequenceObjective& objective,
                                std::string_view batch_id = "");

/// Double-precision variants over the same code path, used for gradient
/// checking. params follow the checkpoint's tensor order.
std::vector<double> sequence_logprobs_f64(const Arch& arch, std::span<const double> params,
                                          const std::vector<Example>& batch);
double gradient_of_loss_f64(const Arch& arch, std::span<const double> params,
                            const SequenceObjective& objective, std::span<double> grad);

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 1e-5;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  std::size_t max_epochs = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::size_t steps = 0;
};

/// Linear warmup over warmup_ratio * total_steps, constant afterwards:
/// lr(k) = base * min(1, (k + 1) / (warmup_ratio * total_steps)).
double scheduled_learning_rate(const TrainConfig& config, std::size_t step_index,
                               std::size_t total_steps);

/// One AdamW update with decoupled weight decay: p <- p * (1 - lr * wd),
/// then the bias-corrected Adam step. Returns the learning rate used.
double adamw_step(std::span<float> params, std::span<const float> grads, AdamState& state,
                  const TrainConfig& config, std::size_t step_index, std::size_t total_steps);

/// Scales grads in place so that their L2 norm is at most max_norm.
void clip_gradient(std::span<float> grads, double max_norm);

struct FitReport {
  std::vector<double> epoch_losses;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Minimizes mean sequence NLL over corpus. Returns a checkpoint tagged
/// original. Zero epochs returns the input parameters unchanged.
ModelCheckpoint fit(const ModelCheckpoint& init, const std::vector<Example>& corpus,
                    const TrainConfig& config, FitReport* report = nullptr,
                    const EpochCallback& on_epoch = {});

}  // namespace munchlab::seqmodel
