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

#include "munchlab/evalsuite.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "munchlab/error.hpp"
#include "munchlab/qa_format.hpp"
#include "munchlab/rng.hpp"

namespace munchlab::evalsuite {
namespace {

using kbgen::QuestionKind;
using kbgen::Split;
using seqmodel::Vocabulary;

std::string expect_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

// Exhaustive LCS: the longest subset of reference words (in order) that is a
// subsequence of the prediction.
std::size_t brute_lcs(const std::vector<std::string>& p, const std::vector<std::string>& g) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << g.size()); ++mask) {
    std::size_t k = 0, len = 0;
    bool ok = true;
    for (std::size_t j = 0; j < g.size() && ok; ++j) {
      if (!(mask >> j & 1u)) continue;
      while (k < p.size() && p[k] != g[j]) ++k;
      if (k == p.size()) ok = false;
      else ++k, ++len;
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

std::string join(const std::vector<std::string>& w) {
  std::string s;
  for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
  return s;
}

TEST(RougeL, HandExamples) {
  EXPECT_DOUBLE_EQ(rouge_l_recall("a b c", "a b c").recall, 1.0);
  EXPECT_DOUBLE_EQ(rouge_l_recall("a b c", "a c").recall, 1.0);
  EXPECT_DOUBLE_EQ(rouge_l_recall("x y", "a c").recall, 0.0);
  EXPECT_DOUBLE_EQ(rouge_l_recall("c a", "a b c").recall, 1.0 / 3.0);
  const auto e = rouge_l_recall("a", "");
  EXPECT_TRUE(e.empty_reference);
  EXPECT_DOUBLE_EQ(e.recall, 0.0);
}

TEST(RougeL, MatchesBruteForceLcs) {
  Rng rng(21);
  const std::vector<std::string> words{"a", "b", "c", "d", "e"};
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::string> p, g;
    for (std::size_t i = rng.uniform_index(9); i > 0; --i) p.push_back(words[rng.uniform_index(5)]);
    for (std::size_t i = 1 + rng.uniform_index(8); i > 0; --i) g.push_back(words[rng.uniform_index(5)]);
    const double expected = static_cast<double>(brute_lcs(p, g)) / static_cast<double>(g.size());
    EXPECT_EQ(rouge_l_recall(join(p), join(g)).recall, expected) << join(p) << " | " << join(g);
  }
}

kbgen::DatasetBundle small_bundle() {
  kbgen::GenConfig c;
  c.n_entities = 40;
  c.n_single_facts = 90;
  c.n_chains = 40;
  c.seed = 7;
  c.forget_fraction = 0.1;
  return kbgen::build_dataset(c);
}

Vocabulary bundle_vocab(const kbgen::DatasetBundle& b) {
  std::vector<std::string> texts{munch::kDefaultRejection};
  for (const auto& q : b.questions) texts.push_back(q.text + " " + q.answer);
  for (const auto& r : b.config.relations) texts.push_back(r.coref_template);
  return Vocabulary::build(texts);
}

ModelCheckpoint random_model(const Vocabulary& v, std::uint64_t seed, double scale = 0.5) {
  seqmodel::Arch arch{v.size(), 16, 24, 1, 64, 2};
  auto c = seqmodel::zero_checkpoint(arch, v);
  Rng rng(seed);
  for (auto& p : c.params) p = static_cast<float>(scale * rng.normal());
  c.tag = seqmodel::CheckpointTag::original;
  return c;
}

TEST(CandidateMapTest, AllObjectsPerRelation) {
  const auto b = small_bundle();
  const auto m = candidate_map(b);
  std::size_t total = 0;
  for (const auto& [rel, objs] : m) {
    EXPECT_TRUE(std::is_sorted(objs.begin(), objs.end()));
    for (const auto& o : objs)
      EXPECT_TRUE(std::any_of(b.facts.begin(), b.facts.end(),
                              [&](const kbgen::FactTriple& f) { return f.relation == rel && f.object == o; }));
    total += objs.size();
  }
  EXPECT_GT(total, 0u);
}

// Rescores every candidate with sequence_nll, independently of the shared
// prompt cache used by probing_accuracy.
double rescoring_oracle(const ModelCheckpoint& m, const std::vector<ProbeItem>& items, const CandidateMap& cands) {
  std::map<std::string, std::pair<double, double>> per;
  for (const auto& it : items) {
    auto& [hits, total] = per[it.relation];
    total += 1;
    const auto prompt = qa_prompt(m.vocab, it.question);
    const double gold = seqmodel::sequence_nll(m, prompt, qa_target(m.vocab, it.answer)).value;
    bool top = true;
    for (const auto& o : cands.at(it.relation))
      if (o != it.answer && seqmodel::sequence_nll(m, prompt, qa_target(m.vocab, o)).value <= gold) top = false;
    hits += top ? 1 : 0;
  }
  double sum = 0;
  for (const auto& [r, ht] : per) sum += ht.first / ht.second;
  return 100.0 * sum / static_cast<double>(per.size());
}

TEST(ProbingAccuracy, MatchesRescoringOracle) {
  const auto b = small_bundle();
  const auto v = bundle_vocab(b);
  const auto cands = candidate_map(b);
  std::vector<const kbgen::QAItem*> all;
  for (const auto& q : b.questions) all.push_back(&q);
  const auto items = probe_items(b, all);
  for (std::uint64_t seed : {1u, 2u}) {
    const auto m = random_model(v, seed, 1.5);
    Rng rng(seed);
    std::vector<ProbeItem> pick;
    for (int i = 0; i < 100; ++i) pick.push_back(items[rng.uniform_index(items.size())]);
    const auto r = probing_accuracy(m, pick, cands);
    EXPECT_NEAR(r.pa, rescoring_oracle(m, pick, cands), 1e-9);
    double sum = 0;
    for (const auto& [rel, ht] : r.per_relation) sum += static_cast<double>(ht.first) / ht.second;
    EXPECT_NEAR(r.pa, 100.0 * sum / r.per_relation.size(), 1e-9);
  }
}

TEST(ProbingAccuracy, GoldMissingAndUniformModel) {
  const auto b = small_bundle();
  const auto v = bundle_vocab(b);
  auto cands = candidate_map(b);
  const auto uniform = seqmodel::zero_checkpoint(seqmodel::Arch{v.size(), 16, 24, 1, 64, 2}, v);
  const auto items = probe_items(b, b.select(QuestionKind::single_hop, Split::forget));
  ASSERT_FALSE(items.empty());
  // Equal scores for every candidate: strict ties are never top-1.
  EXPECT_DOUBLE_EQ(probing_accuracy(uniform, {items[0]}, cands).pa, 0.0);

  auto& objs = cands[items[0].relation];
  objs.erase(std::find(objs.begin(), objs.end(), items[0].answer));
  const auto r = probing_accuracy(uniform, {items[0]}, cands);
  EXPECT_EQ(r.gold_missing, std::vector<std::string>{items[0].id});

  EXPECT_NEAR(lm_loss(uniform, items), std::log(static_cast<double>(v.size())), 1e-6);
}

TEST(ProbingAccuracy, SingleCandidateIsTopOne) {
  const auto b = small_bundle();
  const auto v = bundle_vocab(b);
  const auto m = random_model(v, 3);
  const auto items = probe_items(b, b.select(QuestionKind::single_hop, Split::forget));
  CandidateMap only{{items[0].relation, {items[0].answer}}};
  EXPECT_DOUBLE_EQ(probing_accuracy(m, {items[0]}, only).pa, 100.0);
}

TEST(LmLoss, PooledPerTokenNll) {
  const auto b = small_bundle();
  const auto v = bundle_vocab(b);
  const auto m = random_model(v, 5);
  const auto items = probe_items(b, b.select(QuestionKind::multi_hop, Split::forget));
  double nll = 0, n = 0;
  for (const auto& it : items) {
    const auto t = qa_target(v, it.answer);
    nll += seqmodel::sequence_nll(m, qa_prompt(v, it.question), t).value;
    n += static_cast<double>(t.size());
  }
  EXPECT_NEAR(lm_loss(m, items), nll / n, 1e-9);
}

struct PipelineFixture : ::testing::Test {
  kbgen::DatasetBundle b = small_bundle();
  Vocabulary v = bundle_vocab(b);
  ModelCheckpoint original = random_model(v, 9);
  ModelCheckpoint unlearned = [&] {
    auto u = random_model(v, 10);
    u.tag = seqmodel::CheckpointTag::unlearned;
    return u;
  }();
  munch::ForgetMemory memory = munch::ForgetMemory::from_bundle(b);

  EvalInputs inputs(Pipeline p, std::optional<double> tau, bool gate = true) {
    EvalInputs in;
    in.bundle = &b;
    in.original = &original;
    in.evaluated = &unlearned;
    in.pipeline = p;
    in.tau = tau;
    in.memory = &memory;
    in.munch_config.use_gate = gate;
    in.method = "test";
    return in;
  }
};

TEST_F(PipelineFixture, MinusInfinityRejectsEverything) {
  const auto r = evaluate(inputs(Pipeline::munch, -std::numeric_limits<double>::infinity())).report;
  for (Split s : {Split::forget, Split::retain_test}) {
    EXPECT_DOUBLE_EQ(r.at(s, QuestionKind::multi_hop).pa, 0.0);
    EXPECT_LT(r.at(s, QuestionKind::multi_hop).rl, 5.0);
  }
}

TEST_F(PipelineFixture, PlusInfinityWithoutGateAnswersWithOriginalHops) {
  const auto in = inputs(Pipeline::munch, std::numeric_limits<double>::infinity(), false);
  const auto res = evaluate(in);
  const auto prepared = prepare_multi_hop(b, Split::forget, original, unlearned, memory, in.munch_config);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < prepared.runs.size(); ++i) {
    const auto& hop = prepared.runs[i].answers.back();
    std::string a = hop.text, g = prepared.items[i].answer;
    std::transform(a.begin(), a.end(), a.begin(), ::tolower);
    std::transform(g.begin(), g.end(), g.begin(), ::tolower);
    hits += a == g;
  }
  EXPECT_DOUBLE_EQ(res.report.at(Split::forget, QuestionKind::multi_hop).pa,
                   prepared.runs.empty() ? 0.0 : 100.0 * hits / prepared.runs.size());
  for (const auto& t : res.traces) EXPECT_EQ(t.verdict, munch::Verdict::answer);
}

TEST_F(PipelineFixture, PureAndMissingTau) {
  const auto a = evaluate(inputs(Pipeline::mello, std::nullopt));
  const auto c = evaluate(inputs(Pipeline::mello, std::nullopt));
  EXPECT_EQ(to_json(a.report).dump(), to_json(c.report).dump());
  EXPECT_EQ(tsv_rows(a.report), tsv_rows(c.report));
  EXPECT_EQ(expect_error([&] { evaluate(inputs(Pipeline::munch, std::nullopt)); }), "evalsuite.missing_tau");
}

TEST_F(PipelineFixture, LoweringTauNeverRaisesForgetPa) {
  munch::MunchConfig cfg;
  const auto prepared = prepare_multi_hop(b, Split::forget, original, unlearned, memory, cfg);
  auto scores = prepared.max_scores();
  std::sort(scores.begin(), scores.end());
  double last = std::numeric_limits<double>::infinity();
  for (auto it = scores.rbegin(); it != scores.rend(); ++it) {
    const double pa = pipeline_cell(prepared, Pipeline::munch, *it - 1e-9, memory, cfg).pa;
    EXPECT_LE(pa, last);
    last = pa;
  }
}

TEST_F(PipelineFixture, ReportLayout) {
  const auto r = evaluate(inputs(Pipeline::raw, std::nullopt)).report;
  ASSERT_EQ(r.cells.size(), 4u);
  const auto rows = tsv_rows(r);
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 4);
  EXPECT_EQ(rows.substr(0, rows.find('\n')).substr(0, 24), "test\traw\tforget\tsingle-h");
  EXPECT_TRUE(to_json(r)["tau"].is_null());
  for (const auto& c : r.cells) {
    EXPECT_GE(c.pa, 0.0);
    EXPECT_LE(c.pa, 100.0);
    EXPECT_GE(c.lm, 0.0);
  }
}

}  // namespace
}  // namespace munchlab::evalsuite
