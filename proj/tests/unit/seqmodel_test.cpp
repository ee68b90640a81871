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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

#include "munchlab/error.hpp"
#include "munchlab/rng.hpp"

namespace munchlab::seqmodel {
namespace {

Vocabulary toy_vocab(std::size_t words) {
  std::vector<std::string> t{"<bos>", "<eos>", "<sep>", "<unk>"};
  for (std::size_t i = 0; i < words; ++i) t.push_back("w" + std::to_string(i));
  return Vocabulary(t);
}

ModelCheckpoint random_model(std::size_t words, std::uint64_t seed, double scale = 0.3,
                             Arch arch = {0, 8, 12, 2, 10, 2}) {
  Vocabulary v = toy_vocab(words);
  arch.vocab_size = v.size();
  ModelCheckpoint c = zero_checkpoint(arch, std::move(v));
  Rng rng(seed);
  for (auto& p : c.params) p = static_cast<float>(scale * rng.normal());
  return c;
}

TokenSequence random_tokens(Rng& rng, std::size_t n, std::size_t v) {
  TokenSequence s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<TokenId>(rng.uniform_index(v)));
  return s;
}

// Straightforward forward pass, recomputed from scratch for every prefix.
// Deliberately written without matrices or caching.
std::vector<double> naive_next_logprobs(const ModelCheckpoint& c, const TokenSequence& prefix) {
  const Arch& a = c.arch;
  const std::size_t E = a.embed_dim, H = a.hidden_dim, V = a.vocab_size, T = prefix.size();
  const std::size_t dh = E / a.heads;
  std::map<std::string, const float*> t;
  for (const auto& s : tensor_manifest(a)) t[s.name] = c.params.data() + s.offset;
  auto ln = [&](const std::vector<double>& x, const float* g, const float* b) {
    double m = 0, v = 0;
    for (double xi : x) m += xi;
    m /= static_cast<double>(E);
    for (double xi : x) v += (xi - m) * (xi - m);
    v /= static_cast<double>(E);
    std::vector<double> y(E);
    for (std::size_t i = 0; i < E; ++i) y[i] = (x[i] - m) / std::sqrt(v + 1e-5) * g[i] + b[i];
    return y;
  };
  auto affine = [&](const std::vector<double>& x, const float* W, const float* b, std::size_t out) {
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = b ? b[o] : 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * W[i * out + o];
      y[o] = s;
    }
    return y;
  };
  std::vector<std::vector<double>> x(T, std::vector<double>(E));
  for (std::size_t p = 0; p < T; ++p)
    for (std::size_t i = 0; i < E; ++i)
      x[p][i] = t["tok_emb"][static_cast<std::size_t>(prefix[p]) * E + i] + t["pos_emb"][p * E + i];
  for (std::size_t l = 0; l < a.layers; ++l) {
    const std::string pre = std::to_string(l) + ".";
    std::vector<std::vector<double>> qkv(T);
    for (std::size_t p = 0; p < T; ++p)
      qkv[p] = affine(ln(x[p], t[pre + "ln1.gamma"], t[pre + "ln1.beta"]), t[pre + "attn.wqkv"],
                      t[pre + "attn.bqkv"], 3 * E);
    for (std::size_t p = 0; p < T; ++p) {
      std::vector<double> att(E, 0.0);
      for (std::size_t h = 0; h < a.heads; ++h) {
        std::vector<double> s(p + 1);
        double mx = -1e300;
        for (std::size_t q = 0; q <= p; ++q) {
          double d = 0;
          for (std::size_t i = 0; i < dh; ++i) d += qkv[p][h * dh + i] * qkv[q][E + h * dh + i];
          s[q] = d / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[q]);
        }
        double z = 0;
        for (auto& v : s) z += (v = std::exp(v - mx));
        for (std::size_t q = 0; q <= p; ++q)
          for (std::size_t i = 0; i < dh; ++i) att[h * dh + i] += s[q] / z * qkv[q][2 * E + h * dh + i];
      }
      const auto o = affine(att, t[pre + "attn.wo"], t[pre + "attn.bo"], E);
      for (std::size_t i = 0; i < E; ++i) x[p][i] += o[i];
    }
    for (std::size_t p = 0; p < T; ++p) {
      auto u = affine(ln(x[p], t[pre + "ln2.gamma"], t[pre + "ln2.beta"]), t[pre + "mlp.w1"],
                      t[pre + "mlp.b1"], H);
      for (auto& v : u) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
      const auto o = affine(u, t[pre + "mlp.w2"], t[pre + "mlp.b2"], E);
      for (std::size_t i = 0; i < E; ++i) x[p][i] += o[i];
    }
  }
  const auto logits = affine(ln(x[T - 1], t["lnf.gamma"], t["lnf.beta"]), t["unembed"], nullptr, V);
  double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
  for (double l : logits) z += std::exp(l - mx);
  std::vector<double> out(V);
  for (std::size_t i = 0; i < V; ++i) out[i] = logits[i] - mx - std::log(z);
  return out;
}

TEST(Vocab, EmptyRoundTrip) {
  const Vocabulary v = Vocabulary::build({"Who employs Dalo Trinn?"});
  EXPECT_TRUE(v.tokenize("").empty());
  EXPECT_EQ(v.detokenize({}), "");
}

TEST(Vocab, InVocabularyRoundTrip) {
  const std::vector<std::string> texts{"Who employs Dalo Trinn?", "Dalo Trinn is employed by Kesh.",
                                       "Who is the mentor of Kesh? Who employs that person?"};
  const Vocabulary v = Vocabulary::build(texts);
  for (const auto& t : texts) EXPECT_EQ(v.detokenize(v.tokenize(t)), t);
  EXPECT_EQ(v.token(0), "<bos>");
  EXPECT_EQ(v.token(3), "<unk>");
}

TEST(Vocab, UnseenWordMapsToUnk) {
  const Vocabulary v = Vocabulary::build({"Who employs Dalo Trinn?"});
  const auto ids = v.tokenize("Who employs Zorbo?");
  ASSERT_EQ(ids.size(), 4u);
  EXPECT_EQ(ids[2], kUnk);
  EXPECT_NE(ids[0], kUnk);
  EXPECT_EQ(v.detokenize(ids), "Who employs <unk>?");
}

TEST(Vocab, RejectsDuplicates) {
  EXPECT_THROW(Vocabulary({"<bos>", "<eos>", "<sep>", "<unk>", "a", "a"}), Error);
  EXPECT_THROW(Vocabulary({"a", "<eos>", "<sep>", "<unk>"}), Error);
}

TEST(Forward, ZeroModelIsUniform) {
  const ModelCheckpoint c = zero_checkpoint({0, 8, 12, 2, 10, 2}, toy_vocab(6));
  const auto lp = next_token_logprobs(c, TokenSequence{4, 5, 6});
  for (double x : lp) EXPECT_NEAR(x, -std::log(10.0), 1e-6);
}

TEST(Forward, NormalizedOnRandomModels) {
  Rng rng(11);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto c = random_model(12, s, 0.5);
    const auto prefix = random_tokens(rng, 1 + rng.uniform_index(10), c.arch.vocab_size);
    const auto lp = next_token_logprobs(c, prefix);
    double z = 0;
    for (double x : lp) z += std::exp(x);
    EXPECT_NEAR(z, 1.0, 1e-6);
  }
}

TEST(Forward, MatchesNaiveOracle) {
  Rng rng(5);
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto c = random_model(9, 100 + s);
    const auto prefix = random_tokens(rng, 1 + rng.uniform_index(10), c.arch.vocab_size);
    const auto fast = next_token_logprobs(c, prefix);
    const auto slow = naive_next_logprobs(c, prefix);
    for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-4);
  }
}

TEST(Forward, ContextOverflow) {
  const auto c = random_model(4, 1);
  try {
    next_token_logprobs(c, TokenSequence(11, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "seqmodel.context_overflow");
  }
}

TEST(Nll, UniformModelFourTokens) {
  const ModelCheckpoint c = zero_checkpoint({0, 8, 12, 2, 10, 2}, toy_vocab(0));
  const auto r = sequence_nll(c, TokenSequence{0}, TokenSequence{1, 2, 3});
  EXPECT_NEAR(r.value, 3 * std::log(4.0), 1e-5);
  EXPECT_NEAR(r.value, 4.1589, 1e-4);
}

TEST(Nll, EmptyTargetFlagged) {
  const auto c = random_model(4, 1);
  const auto r = sequence_nll(c, TokenSequence{4}, TokenSequence{});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.empty_target);
}

TEST(Nll, EqualsPerTokenSum) {
  Rng rng(9);
  const auto c = random_model(10, 2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_tokens(rng, 3, c.arch.vocab_size);
    const auto target = random_tokens(rng, 4, c.arch.vocab_size);
    double manual = 0;
    TokenSequence prefix = prompt;
    for (TokenId t : target) {
      manual -= next_token_logprobs(c, prefix)[static_cast<std::size_t>(t)];
      prefix.push_back(t);
    }
    const auto r = sequence_nll(c, prompt, target);
    EXPECT_NEAR(r.value, manual, 1e-4);
    EXPECT_GE(r.value, 0.0);
  }
}

TEST(Nll, Additivity) {
  Rng rng(21);
  const auto c = random_model(10, 3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_tokens(rng, 2, c.arch.vocab_size);
    const auto a = random_tokens(rng, 3, c.arch.vocab_size);
    const auto b = random_tokens(rng, 3, c.arch.vocab_size);
    TokenSequence ab = a, pa = p;
    ab.insert(ab.end(), b.begin(), b.end());
    pa.insert(pa.end(), a.begin(), a.end());
    EXPECT_NEAR(sequence_nll(c, p, ab).value, sequence_nll(c, p, a).value + sequence_nll(c, pa, b).value,
                1e-4);
  }
}

TEST(Nll, BatchedAndContinuationAgree) {
  Rng rng(4);
  const auto c = random_model(10, 8);
  const auto prompt = random_tokens(rng, 3, c.arch.vocab_size);
  std::vector<TokenSequence> conts;
  std::vector<Example> batch;
  for (int i = 0; i < 4; ++i) {
    conts.push_back(random_tokens(rng, 1 + rng.uniform_index(4), c.arch.vocab_size));
    batch.push_back({prompt, conts.back()});
  }
  const auto a = sequence_logprobs(c, batch);
  const auto b = continuation_logprobs(c, prompt, conts);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-4);
    EXPECT_NEAR(a[i], -sequence_nll(c, prompt, conts[i]).value, 1e-4);
  }
}

TEST(Decode, AlwaysEosGivesEmpty) {
  ModelCheckpoint c = zero_checkpoint({0, 8, 12, 2, 10, 2}, toy_vocab(6));
  const auto man = tensor_manifest(c.arch);
  auto find = [&](const std::string& n) {
    return std::find_if(man.begin(), man.end(), [&](const TensorSpec& t) { return t.name == n; })->offset;
  };
  c.params[find("lnf.beta")] = 1.0f;
  c.params[find("unembed") + kEos] = 5.0f;
  EXPECT_TRUE(greedy_decode(c, TokenSequence{4, 5}, 5).empty());
}

TEST(Decode, TieGoesToLowestIndex) {
  ModelCheckpoint c = zero_checkpoint({0, 8, 12, 2, 10, 2}, toy_vocab(6));
  const auto man = tensor_manifest(c.arch);
  auto find = [&](const std::string& n) {
    return std::find_if(man.begin(), man.end(), [&](const TensorSpec& t) { return t.name == n; })->offset;
  };
  c.params[find("lnf.beta")] = 1.0f;
  c.params[find("unembed") + 7] = 5.0f;
  c.params[find("unembed") + 5] = 5.0f;
  const auto out = greedy_decode(c, TokenSequence{4}, 3);
  EXPECT_EQ(out, (TokenSequence{5, 5, 5}));
}

TEST(Decode, DeterministicAndContextBounded) {
  const auto c = random_model(10, 12, 0.6);
  const TokenSequence prompt{4, 5, 6};
  const auto a = greedy_decode(c, prompt, 20);
  EXPECT_EQ(a, greedy_decode(c, prompt, 20));
  EXPECT_LE(prompt.size() + a.size(), c.arch.context + 1);
}

std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

TEST(Gradient, MatchesCentralDifferences) {
  // Model with fewer than 5k parameters.
  Arch arch{0, 8, 12, 2, 8, 2};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto c = random_model(6, seed, 0.4, arch);
    ASSERT_LT(c.params.size(), 5000u);
    Rng rng(seed);
    std::vector<Example> ex;
    for (int i = 0; i < 3; ++i)
      ex.push_back({random_tokens(rng, 2, c.arch.vocab_size), random_tokens(rng, 3, c.arch.vocab_size)});
    const auto obj = nll_objective(ex);
    auto p = to_double(c.params);
    std::vector<double> g(p.size());
    gradient_of_loss_f64(c.arch, p, obj, g);
    std::vector<double> tmp(p.size());
    double max_rel = 0.0;
    const double h = 1e-3;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double save = p[i];
      p[i] = save + h;
      const double up = gradient_of_loss_f64(c.arch, p, obj, tmp);
      p[i] = save - h;
      const double dn = gradient_of_loss_f64(c.arch, p, obj, tmp);
      p[i] = save;
      const double fd = (up - dn) / (2 * h);
      max_rel = std::max(max_rel, std::abs(fd - g[i]) / std::max(1e-2, std::abs(fd) + std::abs(g[i])));
    }
    EXPECT_LT(max_rel, 1e-3) << "seed " << seed;

    // The single-precision path agrees with the double one.
    const auto gf = gradient_of_loss(c, obj);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      num += (gf.grad[i] - g[i]) * (gf.grad[i] - g[i]);
      den += g[i] * g[i];
    }
    EXPECT_LT(std::sqrt(num / den), 1e-4);
  }
}

TEST(Gradient, EmptyBatchIsZero) {
  const auto c = random_model(6, 1);
  const auto g = gradient_of_loss(c, nll_objective({}));
  EXPECT_EQ(g.loss, 0.0);
  for (float x : g.grad) EXPECT_EQ(x, 0.0f);
}

TEST(Gradient, NonFiniteNamesBatch) {
  auto c = random_model(6, 1);
  SequenceObjective o = nll_objective({{{4}, {5}}});
  o.evaluate = [](std::span<const double>, std::span<double> d) {
    d[0] = 1.0;
    return std::numeric_limits<double>::quiet_NaN();
  };
  try {
    gradient_of_loss(c, o, "batch-17");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "seqmodel.numerical");
    EXPECT_NE(std::string(e.what()).find("batch-17"), std::string::npos);
  }
}

TEST(AdamW, ZeroGradientIsPureDecay) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  cfg.warmup_ratio = 0.0;
  std::vector<float> p{1.5f, -2.0f};
  const std::vector<float> g{0.0f, 0.0f};
  AdamState st;
  adamw_step(p, g, st, cfg, 0, 10);
  EXPECT_FLOAT_EQ(p[0], 1.5f * (1 - 0.1f * 0.01f));
  EXPECT_FLOAT_EQ(p[1], -2.0f * (1 - 0.1f * 0.01f));
}

TEST(AdamW, WarmupSchedule) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.warmup_ratio = 0.1;
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(cfg, 0, 100), 1e-3 / 10.0);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(cfg, 4, 100), 1e-3 * 0.5);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(cfg, 9, 100), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(cfg, 50, 100), 1e-3);
}

TEST(AdamW, HandComputedStepWithMoments) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.warmup_ratio = 0.0;
  cfg.weight_decay = 0.1;
  std::vector<float> p{1.0f, -1.0f};
  const std::vector<float> g{0.5f, -0.2f};
  AdamState st{{0.1f, 0.0f}, {0.04f, 0.01f}, 1};
  adamw_step(p, g, st, cfg, 1, 10);
  // t = 2: m = 0.9 m + 0.1 g, v = 0.999 v + 0.001 g^2.
  const double m0 = 0.09 + 0.05, v0 = 0.03996 + 0.00025;
  const double m1 = -0.02, v1 = 0.00999 + 0.00004;
  const double c1 = 1 - 0.81, c2 = 1 - 0.998001;
  const double e0 = 1.0 * (1 - 0.001) - 0.01 * (m0 / c1) / (std::sqrt(v0 / c2) + 1e-8);
  const double e1 = -1.0 * (1 - 0.001) - 0.01 * (m1 / c1) / (std::sqrt(v1 / c2) + 1e-8);
  EXPECT_NEAR(p[0], e0, 1e-6);
  EXPECT_NEAR(p[1], e1, 1e-6);
  EXPECT_EQ(st.steps, 2u);
}

TEST(Fit, MemorizesSingleExample) {
  const auto init = init_checkpoint({0, 16, 32, 2, 10, 2}, toy_vocab(8), 3);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 60;
  cfg.batch_size = 4;
  const std::vector<Example> corpus(4, Example{{4, 5, 6}, {7, 8, kEos}});
  FitReport rep;
  const auto out = fit(init, corpus, cfg, &rep);
  EXPECT_EQ(out.tag, CheckpointTag::original);
  EXPECT_LT(sequence_nll(out, TokenSequence{4, 5, 6}, TokenSequence{7, 8, kEos}).value, 0.1);
  EXPECT_EQ(greedy_decode(out, TokenSequence{4, 5, 6}, 5), (TokenSequence{7, 8}));
  EXPECT_LT(rep.epoch_losses.back(), rep.epoch_losses.front());
}

TEST(Fit, ZeroEpochsUnchanged) {
  const auto init = init_checkpoint({0, 8, 12, 2, 10, 2}, toy_vocab(4), 1);
  TrainConfig cfg;
  cfg.max_epochs = 0;
  const auto out = fit(init, {{{4}, {5}}}, cfg);
  EXPECT_EQ(out.params, init.params);
}

TEST(Fit, DeterministicGivenSeed) {
  const auto init = init_checkpoint({0, 8, 12, 2, 10, 2}, toy_vocab(6), 1);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.max_epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 5;
  const std::vector<Example> corpus{{{4}, {5, 6}}, {{6}, {7}}, {{8}, {9, 4}}, {{5}, {4}}, {{7}, {8}}};
  EXPECT_EQ(fit(init, corpus, cfg).params, fit(init, corpus, cfg).params);
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  auto c = random_model(6, 4);
  c.tag = CheckpointTag::unlearned;
  c.seed = 99;
  const auto path = (std::filesystem::temp_directory_path() / "munchlab_ckpt.json").string();
  save_checkpoint(c, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.arch, c.arch);
  EXPECT_EQ(back.vocab, c.vocab);
  EXPECT_EQ(back.tag, CheckpointTag::unlearned);
  EXPECT_EQ(back.seed, 99u);
  {
    std::fstream f(path + ".bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const char junk[4] = {1, 2, 3, 4};
    f.write(junk, 4);
  }
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "seqmodel.bad_checkpoint");
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".bin");
}

TEST(Checkpoint, ValidateRejectsNonFinite) {
  auto c = random_model(6, 4);
  c.params[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(c.validate(), Error);
  c.params.pop_back();
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
}  // namespace munchlab::seqmodel
