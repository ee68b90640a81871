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

#include "munchlab/unlearner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "munchlab/error.hpp"
#include "munchlab/qa_format.hpp"
#include "munchlab/rng.hpp"

namespace munchlab::unlearner {

const char* to_string(Method m) {
  switch (m) {
    case Method::ga: return "ga";
    case Method::dpo: return "dpo";
    case Method::npo: return "npo";
  }
  return "ga";
}

Method parse_method(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "ga") return Method::ga;
  if (l == "dpo") return Method::dpo;
  if (l == "npo") return Method::npo;
  throw Error("unlearner.invalid_config", "unknown method '" + s + "' (expected ga, dpo or npo)");
}

std::vector<std::string> default_rejection_pool() {
  return {
      "I must decline to answer due to lack of information.",
      "I do not know the answer to that.",
      "I cannot answer that question.",
      "I have no information about that.",
      "I am not able to answer that.",
      "I do not have that information.",
      "That is not something I can answer.",
      "I cannot help with that question.",
      "I am unable to provide that information.",
      "I do not know.",
      "I have no answer to that question.",
      "I cannot say.",
  };
}

double neg_log_sigmoid(double t) {
  return t > 0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
}

namespace {

double sigmoid(double t) {
  return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

std::vector<double> logps(const ModelCheckpoint& c, const std::vector<Example>& b) {
  return seqmodel::sequence_logprobs(c, b);
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<Example> wins(const std::vector<PreferencePair>& b) {
  std::vector<Example> out;
  for (const auto& p : b) out.push_back({p.prompt, p.win});
  return out;
}

std::vector<Example> loses(const std::vector<PreferencePair>& b) {
  std::vector<Example> out;
  for (const auto& p : b) out.push_back({p.prompt, p.lose});
  return out;
}

}  // namespace

double loss_ga(const ModelCheckpoint& ckpt, const std::vector<Example>& batch) {
  return mean(logps(ckpt, batch));
}

double loss_retain(const ModelCheckpoint& ckpt, const std::vector<Example>& batch) {
  return -mean(logps(ckpt, batch));
}

double loss_dpo(const ModelCheckpoint& ckpt, const ModelCheckpoint& ref,
                const std::vector<PreferencePair>& batch, double beta) {
  if (batch.empty()) return 0.0;
  const auto w = wins(batch), l = loses(batch);
  const auto tw = logps(ckpt, w), tl = logps(ckpt, l), rw = logps(ref, w), rl = logps(ref, l);
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    s += neg_log_sigmoid(beta * ((tw[i] - rw[i]) - (tl[i] - rl[i])));
  return s / static_cast<double>(batch.size());
}

double loss_npo(const ModelCheckpoint& ckpt, const ModelCheckpoint& ref,
                const std::vector<Example>& batch, double beta) {
  if (batch.empty()) return 0.0;
  const auto t = logps(ckpt, batch), r = logps(ref, batch);
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) s += neg_log_sigmoid(-beta * (t[i] - r[i]));
  return s / static_cast<double>(batch.size());
}

double combined_loss(double alpha, double forget_loss, double retain_loss) {
  return alpha * forget_loss + (1.0 - alpha) * retain_loss;
}

SequenceObjective ga_objective(std::vector<Example> batch) {
  SequenceObjective o;
  o.sequences = std::move(batch);
  o.evaluate = [](std::span<const double> lp, std::span<double> d) {
    if (lp.empty()) return 0.0;
    const double n = static_cast<double>(lp.size());
    double v = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) {
      v += lp[i] / n;
      d[i] = 1.0 / n;
    }
    return v;
  };
  return o;
}

SequenceObjective retain_objective(std::vector<Example> batch) {
  return seqmodel::nll_objective(std::move(batch));
}

SequenceObjective dpo_objective(const std::vector<PreferencePair>& batch,
                                std::vector<double> ref_win, std::vector<double> ref_lose,
                                double beta) {
  if (ref_win.size() != batch.size() || ref_lose.size() != batch.size())
    throw Error("unlearner.shape_mismatch", "reference log-probabilities do not match the batch");
  SequenceObjective o;
  o.sequences = wins(batch);
  const auto l = loses(batch);
  o.sequences.insert(o.sequences.end(), l.begin(), l.end());
  o.evaluate = [rw = std::move(ref_win), rl = std::move(ref_lose), beta](std::span<const double> lp,
                                                                        std::span<double> d) {
    const std::size_t n = rw.size();
    if (n == 0) return 0.0;
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = beta * ((lp[i] - rw[i]) - (lp[n + i] - rl[i]));
      v += neg_log_sigmoid(t);
      // d/dt of -log sigmoid(t) is -sigmoid(-t).
      const double g = -sigmoid(-t) * beta / static_cast<double>(n);
      d[i] = g;
      d[n + i] = -g;
    }
    return v / static_cast<double>(n);
  };
  return o;
}

SequenceObjective npo_objective(std::vector<Example> batch, std::vector<double> ref_logp,
                                double beta) {
  if (ref_logp.size() != batch.size())
    throw Error("unlearner.shape_mismatch", "reference log-probabilities do not match the batch");
  SequenceObjective o;
  o.sequences = std::move(batch);
  o.evaluate = [r = std::move(ref_logp), beta](std::span<const double> lp, std::span<double> d) {
    const std::size_t n = r.size();
    if (n == 0) return 0.0;
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = -beta * (lp[i] - r[i]);
      v += neg_log_sigmoid(t);
      d[i] = sigmoid(-t) * beta / static_cast<double>(n);
    }
    return v / static_cast<double>(n);
  };
  return o;
}

SequenceObjective combined_objective(double alpha, SequenceObjective forget,
                                     SequenceObjective retain) {
  SequenceObjective o;
  const std::size_t nf = forget.sequences.size();
  o.sequences = std::move(forget.sequences);
  o.sequences.insert(o.sequences.end(), retain.sequences.begin(), retain.sequences.end());
  o.evaluate = [alpha, nf, f = std::move(forget.evaluate), r = std::move(retain.evaluate)](
                   std::span<const double> lp, std::span<double> d) {
    const double vf = f(lp.subspan(0, nf), d.subspan(0, nf));
    const double vr = r(lp.subspan(nf), d.subspan(nf));
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= i < nf ? alpha : 1.0 - alpha;
    return combined_loss(alpha, vf, vr);
  };
  return o;
}

void UnlearnConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("unlearner.invalid_config", m); };
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0, 1]");
  if (!(beta > 0.0)) fail("beta must be positive");
  if (method == Method::dpo && rejection_pool.empty()) fail("DPO needs a non-empty rejection pool");
  if (early_stop.monitor != "retain_valid_lm")
    fail("unsupported early-stop monitor '" + early_stop.monitor + "'");
  train.validate();
}

nlohmann::ordered_json to_json(const UnlearnConfig& c) {
  return {{"method", to_string(c.method)},
          {"with_retain", c.with_retain},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"rejection_pool", c.rejection_pool},
          {"train", seqmodel::to_json(c.train)},
          {"early_stop",
           {{"enabled", c.early_stop.enabled},
            {"monitor", c.early_stop.monitor},
            {"patience", c.early_stop.patience},
            {"min_delta", c.early_stop.min_delta}}}};
}

UnlearnConfig unlearn_config_from_json(const nlohmann::json& j, UnlearnConfig c) {
  try {
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    c.with_retain = j.value("with_retain", c.with_retain);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    if (j.contains("rejection_pool"))
      c.rejection_pool = j.at("rejection_pool").get<std::vector<std::string>>();
    if (j.contains("train")) c.train = seqmodel::train_config_from_json(j.at("train"), c.train);
    if (j.contains("early_stop")) {
      const auto& e = j.at("early_stop");
      c.early_stop.enabled = e.value("enabled", c.early_stop.enabled);
      c.early_stop.monitor = e.value("monitor", c.early_stop.monitor);
      c.early_stop.patience = e.value("patience", c.early_stop.patience);
      c.early_stop.min_delta = e.value("min_delta", c.early_stop.min_delta);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("unlearner.invalid_config", e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["method"] = to_string(r.method);
  j["alpha"] = r.alpha;
  j["forget_loss"] = r.forget_loss;
  j["retain_loss"] = r.retain_loss ? nlohmann::ordered_json(*r.retain_loss) : nlohmann::ordered_json();
  j["combined"] = r.combined;
  j["lr"] = r.lr;
  return j;
}

UnlearnData unlearning_data(const kbgen::DatasetBundle& bundle, const seqmodel::Vocabulary& vocab) {
  UnlearnData d;
  using kbgen::QuestionKind;
  using kbgen::Split;
  for (const auto* q : bundle.select(QuestionKind::single_hop, Split::forget))
    d.forget.push_back(qa_example(vocab, q->text, q->answer));
  for (const auto* q : bundle.select(QuestionKind::single_hop, Split::retain_train))
    d.retain_train.push_back(qa_example(vocab, q->text, q->answer));
  for (const auto* q : bundle.select(QuestionKind::single_hop, Split::retain_valid))
    d.retain_valid.push_back(qa_example(vocab, q->text, q->answer));
  return d;
}

double token_mean_nll(const ModelCheckpoint& ckpt, const std::vector<Example>& items) {
  double total = 0.0;
  std::size_t tokens = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < items.size(); i += kChunk) {
    std::vector<Example> b(items.begin() + static_cast<std::ptrdiff_t>(i),
                           items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), i + kChunk)));
    for (double lp : seqmodel::sequence_logprobs(ckpt, b)) total -= lp;
    for (const auto& e : b) tokens += e.target.size();
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

UnlearnResult run_unlearning(const ModelCheckpoint& original, const UnlearnData& data,
                             const UnlearnConfig& config, const StepCallback& on_step) {
  config.validate();
  original.validate();
  if (original.tag != seqmodel::CheckpointTag::original)
    throw Error("unlearner.bad_input", std::string("expected a checkpoint tagged original, got ") +
                                           seqmodel::to_string(original.tag));
  if (data.forget.empty()) throw Error("unlearner.bad_input", "forget set is empty");
  if (config.with_retain && data.retain_train.empty())
    throw Error("unlearner.bad_input", "with_retain requires a non-empty retain_train split");

  const seqmodel::TrainConfig& tc = config.train;
  const ModelCheckpoint& ref = original;  // frozen: never written below
  UnlearnResult result;
  result.checkpoint = original;
  result.checkpoint.tag = seqmodel::CheckpointTag::unlearned;
  if (tc.max_epochs == 0) return result;

  std::vector<seqmodel::TokenSequence> rejections;
  for (const auto& r : config.rejection_pool) rejections.push_back(qa_target(original.vocab, r));

  Rng rng(tc.seed);
  const std::size_t per_epoch = (data.forget.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total = per_epoch * tc.max_epochs;
  std::vector<std::size_t> forget_order(data.forget.size()), retain_order(data.retain_train.size());
  std::iota(forget_order.begin(), forget_order.end(), 0);
  std::iota(retain_order.begin(), retain_order.end(), 0);
  std::size_t retain_cursor = retain_order.size();
  seqmodel::AdamState state;
  std::size_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    rng.shuffle(forget_order);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<Example> fb;
      for (std::size_t i = b * tc.batch_size; i < std::min(forget_order.size(), (b + 1) * tc.batch_size); ++i)
        fb.push_back(data.forget[forget_order[i]]);

      SequenceObjective forget_obj;
      switch (config.method) {
        case Method::ga:
          forget_obj = ga_objective(std::move(fb));
          break;
        case Method::npo: {
          auto r = logps(ref, fb);
          forget_obj = npo_objective(std::move(fb), std::move(r), config.beta);
          break;
        }
        case Method::dpo: {
          std::vector<PreferencePair> pairs;
          for (auto& e : fb)
            pairs.push_back({e.prompt, rejections[rng.uniform_index(rejections.size())], e.target});
          auto rw = logps(ref, wins(pairs)), rl = logps(ref, loses(pairs));
          forget_obj = dpo_objective(pairs, std::move(rw), std::move(rl), config.beta);
          break;
        }
      }
      const std::size_t n_forget_items = (config.method == Method::dpo ? forget_obj.sequences.size() / 2
                                                                       : forget_obj.sequences.size());
      // Capture the component values as the objective evaluates.
      auto fv = std::make_shared<double>(0.0);
      auto rv = std::make_shared<double>(0.0);
      auto fe = std::move(forget_obj.evaluate);
      forget_obj.evaluate = [fe, fv](std::span<const double> lp, std::span<double> d) {
        return *fv = fe(lp, d);
      };
      SequenceObjective obj;
      if (config.with_retain) {
        std::vector<Example> rb;
        while (rb.size() < n_forget_items) {
          if (retain_cursor == retain_order.size()) {
            rng.shuffle(retain_order);
            retain_cursor = 0;
          }
          rb.push_back(data.retain_train[retain_order[retain_cursor++]]);
        }
        SequenceObjective ro = retain_objective(std::move(rb));
        auto re = std::move(ro.evaluate);
        ro.evaluate = [re, rv](std::span<const double> lp, std::span<double> d) { return *rv = re(lp, d); };
        obj = combined_objective(config.alpha, std::move(forget_obj), std::move(ro));
      } else {
        obj = std::move(forget_obj);
      }

      const std::string id = "epoch " + std::to_string(epoch) + " batch " + std::to_string(b);
      seqmodel::GradientResult g;
      try {
        g = seqmodel::gradient_of_loss(result.checkpoint, obj, id);
      } catch (const Error& e) {
        if (e.code() != "seqmodel.numerical") throw;
        result.diverged = true;
        result.divergence = e.what();
        return result;
      }
      StepRecord rec{step, epoch, config.method, config.alpha, *fv, std::nullopt, g.loss, 0.0};
      if (config.with_retain) rec.retain_loss = *rv;
      seqmodel::clip_gradient(g.grad, tc.max_grad_norm);
      std::vector<float> next = result.checkpoint.params;
      rec.lr = seqmodel::adamw_step(next, g.grad, state, tc, step, total);
      if (!std::all_of(next.begin(), next.end(), [](float p) { return std::isfinite(p); })) {
        result.diverged = true;
        result.divergence = "non-finite parameters after step " + std::to_string(step) + " (" + id + ")";
        return result;
      }
      result.checkpoint.params = std::move(next);
      result.steps.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
    result.epochs_run = epoch + 1;

    if (!data.retain_valid.empty()) {
      const double m = token_mean_nll(result.checkpoint, data.retain_valid);
      result.monitor.push_back(m);
      // A negative min_delta tolerates increases of up to -min_delta.
      if (m < best - config.early_stop.min_delta) bad_epochs = 0;
      else if (epoch > 0) ++bad_epochs;
      best = std::min(best, m);
      if (config.early_stop.enabled && epoch > 0 && bad_epochs >= config.early_stop.patience) {
        result.early_stopped = epoch + 1 < tc.max_epochs;
        break;
      }
    }
  }
  return result;
}

}  // namespace munchlab::unlearner
