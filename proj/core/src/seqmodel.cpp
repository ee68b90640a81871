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

#include "munchlab/seqmodel.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "munchlab/error.hpp"
#include "munchlab/rng.hpp"
#include "transformer.hpp"

namespace munchlab::seqmodel {
namespace {

constexpr const char* kReserved[] = {"<bos>", "<eos>", "<sep>", "<unk>"};

bool is_punct(char c) {
  return c == '?' || c == '.' || c == ',' || c == '!' || c == ';' || c == ':';
}

bool is_punct_token(const std::string& t) { return t.size() == 1 && is_punct(t[0]); }

detail::Objective wrap(const SequenceObjective& o) {
  return [&o](std::span<const double> lp, std::span<double> d) { return o.evaluate(lp, d); };
}

}  // namespace

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.empty()) tokens.assign(std::begin(kReserved), std::end(kReserved));
  if (tokens.size() < 4)
    throw Error("seqmodel.bad_vocabulary", "vocabulary is missing reserved tokens");
  for (std::size_t i = 0; i < 4; ++i)
    if (tokens[i] != kReserved[i])
      throw Error("seqmodel.bad_vocabulary",
                  "reserved token " + std::string(kReserved[i]) + " not at index " + std::to_string(i));
  tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw Error("seqmodel.bad_vocabulary", "duplicate token '" + tokens_[i] + "'");
}

std::vector<std::string> Vocabulary::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string_view w = text.substr(i, j - i);
    std::size_t cut = w.size();
    while (cut > 0 && is_punct(w[cut - 1])) --cut;
    if (cut > 0) out.emplace_back(w.substr(0, cut));
    for (std::size_t k = cut; k < w.size(); ++k) out.emplace_back(1, w[k]);
    i = j;
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::vector<std::string> words;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) words.push_back(std::move(w));
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  std::vector<std::string> tokens(std::begin(kReserved), std::end(kReserved));
  for (auto& w : words)
    if (std::find(std::begin(kReserved), std::end(kReserved), w) == std::end(kReserved))
      tokens.push_back(std::move(w));
  return Vocabulary(std::move(tokens));
}

std::optional<TokenId> Vocabulary::find(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenSequence Vocabulary::tokenize(std::string_view text) const {
  TokenSequence ids;
  for (const auto& w : split_words(text)) ids.push_back(find(w).value_or(kUnk));
  return ids;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const std::string& t = token(id);
    if (!out.empty() && !is_punct_token(t)) out += ' ';
    out += t;
  }
  return out;
}

// -------------------------------------------------------------- architecture

void Arch::validate() const {
  auto fail = [](const std::string& m) { throw Error("seqmodel.bad_arch", m); };
  if (vocab_size < 4) fail("vocab_size must be at least 4");
  if (embed_dim == 0 || hidden_dim == 0 || layers == 0 || context == 0 || heads == 0)
    fail("dimensions must be positive");
  if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
}

std::size_t TensorSpec::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<TensorSpec> tensor_manifest(const Arch& a) {
  const std::size_t V = a.vocab_size, E = a.embed_dim, H = a.hidden_dim, C = a.context;
  std::vector<TensorSpec> m;
  std::size_t off = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    TensorSpec t{std::move(name), std::move(shape), off};
    off += t.size();
    m.push_back(std::move(t));
  };
  add("tok_emb", {V, E});
  add("pos_emb", {C, E});
  for (std::size_t l = 0; l < a.layers; ++l) {
    const std::string p = std::to_string(l) + ".";
    add(p + "ln1.gamma", {E});
    add(p + "ln1.beta", {E});
    add(p + "attn.wqkv", {E, 3 * E});
    add(p + "attn.bqkv", {3 * E});
    add(p + "attn.wo", {E, E});
    add(p + "attn.bo", {E});
    add(p + "ln2.gamma", {E});
    add(p + "ln2.beta", {E});
    add(p + "mlp.w1", {E, H});
    add(p + "mlp.b1", {H});
    add(p + "mlp.w2", {H, E});
    add(p + "mlp.b2", {E});
  }
  add("lnf.gamma", {E});
  add("lnf.beta", {E});
  add("unembed", {E, V});
  return m;
}

std::size_t param_count(const Arch& arch) { return detail::make_layout(arch).total; }

const char* to_string(CheckpointTag tag) {
  switch (tag) {
    case CheckpointTag::init: return "init";
    case CheckpointTag::original: return "original";
    case CheckpointTag::unlearned: return "unlearned";
    case CheckpointTag::reference: return "reference";
  }
  return "init";
}

CheckpointTag parse_tag(const std::string& s) {
  for (auto t : {CheckpointTag::init, CheckpointTag::original, CheckpointTag::unlearned,
                 CheckpointTag::reference})
    if (s == to_string(t)) return t;
  throw Error("seqmodel.bad_checkpoint", "unknown checkpoint tag '" + s + "'");
}

void ModelCheckpoint::validate() const {
  arch.validate();
  if (vocab.size() != arch.vocab_size)
    throw Error("seqmodel.bad_checkpoint", "vocabulary size does not match arch");
  if (params.size() != param_count(arch))
    throw Error("seqmodel.bad_checkpoint", "expected " + std::to_string(param_count(arch)) +
                                               " parameters, found " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!std::isfinite(params[i]))
      throw Error("seqmodel.bad_checkpoint", "non-finite parameter at index " + std::to_string(i));
}

ModelCheckpoint init_checkpoint(Arch arch, Vocabulary vocab, std::uint64_t seed) {
  ModelCheckpoint c = zero_checkpoint(arch, std::move(vocab));
  c.seed = seed;
  Rng rng(seed);
  for (const auto& t : tensor_manifest(c.arch)) {
    float* p = c.params.data() + t.offset;
    if (t.shape.size() == 2) {
      for (std::size_t i = 0; i < t.size(); ++i) p[i] = static_cast<float>(0.02 * rng.normal());
    } else if (t.name.ends_with("gamma")) {
      std::fill(p, p + t.size(), 1.0f);
    }
  }
  return c;
}

ModelCheckpoint zero_checkpoint(Arch arch, Vocabulary vocab) {
  if (arch.vocab_size == 0) arch.vocab_size = vocab.size();
  arch.validate();
  ModelCheckpoint c;
  c.arch = arch;
  c.vocab = std::move(vocab);
  c.params.assign(param_count(arch), 0.0f);
  c.validate();
  return c;
}

// ------------------------------------------------------------------- file IO

std::uint32_t params_checksum(std::span<const float> params) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* bytes = reinterpret_cast<const Bytef*>(params.data());
  std::size_t left = params.size_bytes();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, bytes, chunk);
    bytes += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  ckpt.validate();
  nlohmann::ordered_json h;
  h["format"] = "munchlab-checkpoint";
  h["version"] = 1;
  h["arch"] = {{"vocab_size", ckpt.arch.vocab_size}, {"embed_dim", ckpt.arch.embed_dim},
               {"hidden_dim", ckpt.arch.hidden_dim}, {"layers", ckpt.arch.layers},
               {"context", ckpt.arch.context},       {"heads", ckpt.arch.heads}};
  h["tag"] = to_string(ckpt.tag);
  h["seed"] = ckpt.seed;
  h["vocab"] = ckpt.vocab.tokens();
  auto& man = h["manifest"] = nlohmann::ordered_json::array();
  for (const auto& t : tensor_manifest(ckpt.arch))
    man.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  h["param_count"] = ckpt.params.size();
  h["checksum_crc32"] = params_checksum(ckpt.params);
  const std::string bin = path + ".bin";
  std::size_t slash = bin.find_last_of('/');
  h["params_file"] = slash == std::string::npos ? bin : bin.substr(slash + 1);

  std::ofstream b(bin, std::ios::binary);
  if (!b) throw Error("seqmodel.io", "cannot write " + bin);
  b.write(reinterpret_cast<const char*>(ckpt.params.data()),
          static_cast<std::streamsize>(ckpt.params.size() * sizeof(float)));
  if (!b) throw Error("seqmodel.io", "write failed for " + bin);
  std::ofstream o(path);
  if (!o) throw Error("seqmodel.io", "cannot write " + path);
  o << h.dump(2) << "\n";
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("seqmodel.io", "cannot read " + path);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw Error("seqmodel.bad_checkpoint", path + ": " + e.what());
  }
  try {
    ModelCheckpoint c;
    const auto& a = h.at("arch");
    c.arch.vocab_size = a.at("vocab_size");
    c.arch.embed_dim = a.at("embed_dim");
    c.arch.hidden_dim = a.at("hidden_dim");
    c.arch.layers = a.at("layers");
    c.arch.context = a.at("context");
    c.arch.heads = a.value("heads", std::size_t{4});
    c.tag = parse_tag(h.at("tag"));
    c.seed = h.at("seed");
    c.vocab = Vocabulary(h.at("vocab").get<std::vector<std::string>>());
    const std::size_t n = h.at("param_count");
    std::string bin = path + ".bin";
    std::ifstream b(bin, std::ios::binary);
    if (!b) throw Error("seqmodel.io", "cannot read " + bin);
    c.params.resize(n);
    b.read(reinterpret_cast<char*>(c.params.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (b.gcount() != static_cast<std::streamsize>(n * sizeof(float)) || b.peek() != EOF)
      throw Error("seqmodel.bad_checkpoint", bin + ": size does not match param_count");
    if (params_checksum(c.params) != h.at("checksum_crc32").get<std::uint32_t>())
      throw Error("seqmodel.bad_checkpoint", bin + ": checksum mismatch");
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error("seqmodel.bad_checkpoint", path + ": " + e.what());
  }
}

// ------------------------------------------------------------------- forward

std::vector<double> next_token_logprobs(const ModelCheckpoint& ckpt,
                                        std::span<const TokenId> prefix) {
  if (prefix.empty()) throw Error("seqmodel.empty_prompt", "prefix must be non-empty");
  if (prefix.size() > ckpt.arch.context)
    throw Error("seqmodel.context_overflow", "prefix of " + std::to_string(prefix.size()) +
                                                 " tokens exceeds context " +
                                                 std::to_string(ckpt.arch.context));
  detail::Decoder<float> dec(ckpt.arch, ckpt.params.data());
  const std::vector<double>* lp = nullptr;
  for (TokenId t : prefix) lp = &dec.push(t);
  return *lp;
}

NllResult sequence_nll(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt,
                       std::span<const TokenId> target) {
  if (target.empty()) return {0.0, true};
  std::vector<Example> b{{TokenSequence(prompt.begin(), prompt.end()),
                          TokenSequence(target.begin(), target.end())}};
  return {-detail::run_batch<float>(ckpt.arch, ckpt.params.data(), b, nullptr, nullptr, nullptr)[0],
          false};
}

std::vector<double> sequence_logprobs(const ModelCheckpoint& ckpt, const std::vector<Example>& batch) {
  return detail::run_batch<float>(ckpt.arch, ckpt.params.data(), batch, nullptr, nullptr, nullptr);
}

std::vector<double> continuation_logprobs(const ModelCheckpoint& ckpt,
                                          std::span<const TokenId> prompt,
                                          const std::vector<TokenSequence>& continuations) {
  if (prompt.empty()) throw Error("seqmodel.empty_prompt", "prompt must be non-empty");
  detail::Decoder<float> dec(ckpt.arch, ckpt.params.data());
  std::vector<double> base;
  for (TokenId t : prompt) base = dec.push(t);
  const std::size_t plen = dec.length();
  std::vector<double> out;
  out.reserve(continuations.size());
  for (const auto& c : continuations) {
    dec.truncate(plen);
    double lp = 0.0;
    const std::vector<double>* cur = &base;
    for (std::size_t k = 0; k < c.size(); ++k) {
      lp += (*cur)[static_cast<std::size_t>(c[k])];
      if (k + 1 < c.size()) cur = &dec.push(c[k]);
    }
    out.push_back(lp);
  }
  return out;
}

TokenSequence greedy_decode(const ModelCheckpoint& ckpt, std::span<const TokenId> prompt,
                            std::size_t max_new_tokens) {
  if (prompt.empty()) throw Error("seqmodel.empty_prompt", "prompt must be non-empty");
  if (prompt.size() > ckpt.arch.context)
    throw Error("seqmodel.context_overflow", "prompt exceeds context");
  detail::Decoder<float> dec(ckpt.arch, ckpt.params.data());
  const std::vector<double>* lp = nullptr;
  for (TokenId t : prompt) lp = &dec.push(t);
  TokenSequence out;
  while (out.size() < max_new_tokens) {
    const auto best = static_cast<TokenId>(std::max_element(lp->begin(), lp->end()) - lp->begin());
    if (best == kEos) break;
    out.push_back(best);
    if (dec.length() >= ckpt.arch.context) break;
    if (out.size() < max_new_tokens) lp = &dec.push(best);
  }
  return out;
}

// ------------------------------------------------------------------ gradients

SequenceObjective nll_objective(std::vector<Example> examples) {
  SequenceObjective o;
  o.sequences = std::move(examples);
  o.evaluate = [](std::span<const double> lp, std::span<double> d) {
    if (lp.empty()) return 0.0;
    const double n = static_cast<double>(lp.size());
    double v = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
      v -= lp[i] / n;
      d[i] = -1.0 / n;
    }
    return v;
  };
  return o;
}

GradientResult gradient_of_loss(const ModelCheckpoint& ckpt, const SequenceObjective& objective,
                                std::string_view batch_id) {
  GradientResult r;
  r.grad.assign(ckpt.params.size(), 0.0f);
  if (objective.sequences.empty()) return r;
  const detail::Objective obj = wrap(objective);
  r.logps = detail::run_batch<float>(ckpt.arch, ckpt.params.data(), objective.sequences, &obj,
                                     r.grad.data(), &r.loss);
  bool finite = std::isfinite(r.loss);
  for (float g : r.grad) finite = finite && std::isfinite(g);
  if (!finite)
    throw Error("seqmodel.numerical", "non-finite loss or gradient in batch '" +
                                          std::string(batch_id) + "'");
  return r;
}

std::vector<double> sequence_logprobs_f64(const Arch& arch, std::span<const double> params,
                                          const std::vector<Example>& batch) {
  if (params.size() != param_count(arch))
    throw Error("seqmodel.bad_checkpoint", "parameter count does not match arch");
  return detail::run_batch<double>(arch, params.data(), batch, nullptr, nullptr, nullptr);
}

double gradient_of_loss_f64(const Arch& arch, std::span<const double> params,
                            const SequenceObjective& objective, std::span<double> grad) {
  if (params.size() != param_count(arch) || grad.size() != params.size())
    throw Error("seqmodel.bad_checkpoint", "parameter count does not match arch");
  std::fill(grad.begin(), grad.end(), 0.0);
  if (objective.sequences.empty()) return 0.0;
  const detail::Objective obj = wrap(objective);
  double loss = 0.0;
  detail::run_batch<double>(arch, params.data(), objective.sequences, &obj, grad.data(), &loss);
  return loss;
}

// ------------------------------------------------------------------ optimizer

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("seqmodel.invalid_config", m); };
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) fail("warmup_ratio must be in [0, 1]");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (!(max_grad_norm >= 0.0)) fail("max_grad_norm must be non-negative");
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
          {"warmup_ratio", c.warmup_ratio}, {"weight_decay", c.weight_decay},
          {"max_epochs", c.max_epochs},     {"beta1", c.beta1},
          {"beta2", c.beta2},               {"epsilon", c.epsilon},
          {"max_grad_norm", c.max_grad_norm}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error("seqmodel.invalid_config", e.what());
  }
  c.validate();
  return c;
}

double scheduled_learning_rate(const TrainConfig& config, std::size_t step_index,
                               std::size_t total_steps) {
  const double warm = config.warmup_ratio * static_cast<double>(total_steps);
  if (warm <= 0.0) return config.learning_rate;
  return config.learning_rate * std::min(1.0, static_cast<double>(step_index + 1) / warm);
}

double adamw_step(std::span<float> params, std::span<const float> grads, AdamState& state,
                  const TrainConfig& config, std::size_t step_index, std::size_t total_steps) {
  if (grads.size() != params.size())
    throw Error("seqmodel.shape_mismatch", "gradient and parameter sizes differ");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0f);
    state.v.assign(params.size(), 0.0f);
    state.steps = 0;
  }
  const double lr = scheduled_learning_rate(config, step_index, total_steps);
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const auto b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0f - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0f - b2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] = static_cast<float>(params[i] * decay - lr * mhat / (std::sqrt(vhat) + config.epsilon));
  }
  return lr;
}

void clip_gradient(std::span<float> grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (float g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const auto s = static_cast<float>(max_norm / norm);
  for (float& g : grads) g *= s;
}

ModelCheckpoint fit(const ModelCheckpoint& init, const std::vector<Example>& corpus,
                    const TrainConfig& config, FitReport* report, const EpochCallback& on_epoch) {
  config.validate();
  init.validate();
  if (corpus.empty()) throw Error("seqmodel.empty_corpus", "training corpus is empty");
  ModelCheckpoint ckpt = init;
  if (config.max_epochs == 0) return ckpt;
  ckpt.tag = CheckpointTag::original;

  const std::size_t per_epoch = (corpus.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.max_epochs;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(config.seed);
  AdamState state;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    rng.shuffle(order);
    double sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<Example> batch;
      for (std::size_t i = b * config.batch_size;
           i < std::min(corpus.size(), (b + 1) * config.batch_size); ++i)
        batch.push_back(corpus[order[i]]);
      const std::size_t n = batch.size();
      auto g = gradient_of_loss(ckpt, nll_objective(std::move(batch)),
                                "epoch " + std::to_string(epoch) + " batch " + std::to_string(b));
      clip_gradient(g.grad, config.max_grad_norm);
      adamw_step(ckpt.params, g.grad, state, config, step++, total);
      sum += g.loss * static_cast<double>(n);
    }
    const double mean = sum / static_cast<double>(corpus.size());
    if (report) report->epoch_losses.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  for (float p : ckpt.params)
    if (!std::isfinite(p)) throw Error("seqmodel.numerical", "training diverged: non-finite parameters");
  return ckpt;
}

}  // namespace munchlab::seqmodel
