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

#include "munchlab/munch.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

#include "munchlab/error.hpp"
#include "munchlab/rng.hpp"

namespace munchlab::munch {
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

kbgen::DatasetBundle small_bundle() {
  kbgen::GenConfig c;
  c.n_entities = 60;
  c.n_single_facts = 150;
  c.n_chains = 60;
  c.seed = 3;
  c.forget_fraction = 0.1;
  return kbgen::build_dataset(c);
}

// ------------------------------------------------------------- calibration

// Independent oracle: scan every score value and the points just around it.
double brute_force_min_error(const std::vector<double>& f, const std::vector<double>& r) {
  std::vector<double> probes{-1e9, 1e9};
  for (const auto* v : {&f, &r})
    for (double s : *v)
      if (std::isfinite(s))
        for (double d : {-1e-9, 0.0, 1e-9}) probes.push_back(s + d);
  double best = 1.0;
  for (double t : probes) {
    double miss = 0, rej = 0;
    for (double s : f) miss += s > t ? 0 : 1;
    for (double s : r) rej += s > t ? 1 : 0;
    best = std::min(best, 0.5 * (miss / f.size() + rej / r.size()));
  }
  return best;
}

TEST(Calibration, SeparableHandExample) {
  const auto c = calibrate_threshold({5, 6, 7}, {1, 2, 3});
  EXPECT_DOUBLE_EQ(c.tau, 4.0);
  EXPECT_DOUBLE_EQ(c.balanced_error, 0.0);
  EXPECT_FALSE(c.inseparable);
  EXPECT_FALSE(c.degenerate);
}

TEST(Calibration, OverlappingHandExample) {
  const auto c = calibrate_threshold({1, 4, 5}, {2, 3, 6});
  EXPECT_DOUBLE_EQ(c.tau, 3.5);
  EXPECT_NEAR(c.balanced_error, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(c.forget_miss_rate, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(c.retain_reject_rate, 1.0 / 3.0, 1e-12);
}

TEST(Calibration, MatchesBruteForceOnRandomScores) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> f, r;
    const std::size_t nf = 1 + rng.uniform_index(30), nr = 1 + rng.uniform_index(30);
    // Coarse rounding creates ties across the two lists.
    for (std::size_t i = 0; i < nf; ++i) f.push_back(std::round(4 * (rng.normal() + 1.0)) / 4);
    for (std::size_t i = 0; i < nr; ++i) r.push_back(std::round(4 * rng.normal()) / 4);
    const auto c = calibrate_threshold(f, r);
    EXPECT_NEAR(c.balanced_error, brute_force_min_error(f, r), 1e-12) << "trial " << trial;
    EXPECT_NEAR(balanced_error(f, r, c.tau), c.balanced_error, 1e-12);
  }
}

TEST(Calibration, LowestThresholdWinsTies) {
  // Midpoints 1.5, 2.5 and 3.5 give 0.25, 0.25 and 0.5.
  const auto c = calibrate_threshold({2, 4}, {1, 3});
  EXPECT_DOUBLE_EQ(c.tau, 1.5);
}

TEST(Calibration, DegenerateAndInseparable) {
  const auto d = calibrate_threshold({2, 2}, {2});
  EXPECT_TRUE(d.degenerate);
  EXPECT_DOUBLE_EQ(d.tau, 2.0);
  EXPECT_TRUE(d.inseparable);

  const auto i = calibrate_threshold({1, 2}, {1, 2});
  EXPECT_FALSE(i.degenerate);
  EXPECT_TRUE(i.inseparable);
  EXPECT_DOUBLE_EQ(i.balanced_error, 0.5);
}

TEST(Calibration, InfiniteScoresCountAsRejections) {
  const auto c = calibrate_threshold({kInfiniteScore, 5}, {1});
  EXPECT_DOUBLE_EQ(c.tau, 3.0);
  EXPECT_DOUBLE_EQ(c.balanced_error, 0.0);
  EXPECT_EQ(expect_error([] { calibrate_threshold({}, {1}); }), "munch.calibration");
}

TEST(Calibration, DensitiesIntegrateToOne) {
  Rng rng(5);
  std::vector<double> f, r;
  for (int i = 0; i < 200; ++i) f.push_back(rng.normal() + 2);
  for (int i = 0; i < 150; ++i) r.push_back(rng.normal());
  const auto c = calibrate_threshold(f, r, 50);
  ASSERT_EQ(c.density.size(), 50u);
  double fi = 0, ri = 0;
  for (const auto& b : c.density) {
    fi += b.forget_density * (b.right - b.left);
    ri += b.retain_density * (b.right - b.left);
  }
  EXPECT_NEAR(fi, 1.0, 1e-9);
  EXPECT_NEAR(ri, 1.0, 1e-9);
  const auto tsv = density_tsv(c);
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 51);
}

// --------------------------------------------------------------- retrieval

TEST(TrigramCosine, HandValues) {
  EXPECT_DOUBLE_EQ(trigram_cosine("abcd", "abce"), 0.5);
  EXPECT_DOUBLE_EQ(trigram_cosine("Who?", "who?"), 1.0);
  EXPECT_DOUBLE_EQ(trigram_cosine("abc", "xyz"), 0.0);
  EXPECT_DOUBLE_EQ(trigram_cosine("", "abc"), 0.0);
  // "aaaa" has trigram aaa twice; "aaab" has aaa and aab once each.
  EXPECT_NEAR(trigram_cosine("aaaa", "aaab"), 2.0 / (2.0 * std::sqrt(2.0)), 1e-12);
}

TEST(RetrievalGate, PicksFirstMostSimilarAndAppliesThreshold) {
  ForgetMemory m;
  m.entries = {{"Who is the mentor of Ada?", "Bo"}, {"Who is the mentor of Ada?", "Cy"},
               {"Where was Ada born?", "Rome"}};
  auto r = retrieval_gate("who is the mentor of ada?", m);
  ASSERT_TRUE(r.entry);
  EXPECT_EQ(*r.entry, 0u);
  EXPECT_TRUE(r.hit);
  r = retrieval_gate("What is the capital of Peru?", m);
  EXPECT_FALSE(r.hit);
  m.entries.clear();
  r = retrieval_gate("anything", m);
  EXPECT_FALSE(r.entry);
  EXPECT_FALSE(r.hit);
}

// ----------------------------------------------------------- decomposition

TEST(DecomposeTemplate, ResolvedHopsReproduceSingleHopQuestions) {
  const auto b = small_bundle();
  const auto& rels = b.config.relations;
  const auto idx = b.fact_index();
  std::size_t n = 0;
  for (const auto& q : b.questions) {
    if (q.kind != QuestionKind::multi_hop) continue;
    const auto dq = decompose_template(q, rels);
    ASSERT_EQ(dq.subquestions.size(), q.fact_ids.size());
    for (std::size_t i = 0; i < q.fact_ids.size(); ++i) {
      const auto& f = b.facts[idx.at(q.fact_ids[i])];
      const std::string expected = kbgen::fill_template(b.config.relation(f.relation).question_template, f.subject);
      const std::string got = i == 0 ? dq.subquestions[0] : resolve_subquestion(dq.subquestions[i], f.subject, rels);
      EXPECT_EQ(got, expected) << q.id << " hop " << i;
    }
    ++n;
  }
  EXPECT_GT(n, 0u);
}

TEST(DecomposeTemplate, RejectsMalformedItems) {
  const auto b = small_bundle();
  const auto& rels = b.config.relations;
  auto first_of = [&](QuestionKind k) {
    return *std::find_if(b.questions.begin(), b.questions.end(), [&](const kbgen::QAItem& q) { return q.kind == k; });
  };
  kbgen::QAItem single = first_of(QuestionKind::single_hop);
  EXPECT_EQ(expect_error([&] { decompose_template(single, rels); }), "munch.decomposition_invalid");
  kbgen::QAItem multi = first_of(QuestionKind::multi_hop);
  multi.fact_ids.push_back(multi.fact_ids.back());
  EXPECT_EQ(expect_error([&] { decompose_template(multi, rels); }), "munch.decomposition_invalid");
  multi = first_of(QuestionKind::multi_hop);
  multi.text += " Is this a question?";
  multi.fact_ids.push_back(multi.fact_ids.back());
  EXPECT_EQ(expect_error([&] { decompose_template(multi, rels); }), "munch.decomposition_invalid");
}

TEST(DecomposerProtocol, ParsesAndRejectsReplies) {
  EXPECT_EQ(parse_decomposer_reply(R"({"id":"m1","subquestions":["a?","b?"]})", "m1"),
            (std::vector<std::string>{"a?", "b?"}));
  EXPECT_EQ(expect_error([] { parse_decomposer_reply("not json", "m1"); }), "munch.protocol");
  EXPECT_EQ(expect_error([] { parse_decomposer_reply(R"({"id":"m2","subquestions":[]})", "m1"); }),
            "munch.protocol");
  EXPECT_EQ(expect_error([] { parse_decomposer_reply(R"({"id":"m1","subquestions":[1]})", "m1"); }),
            "munch.protocol");
  EXPECT_EQ(nlohmann::json::parse(decomposer_request("m1", "q?")),
            (nlohmann::json{{"id", "m1"}, {"question", "q?"}}));
}

TEST(DecomposerProtocol, ProcessStubMatchesTemplate) {
  const auto b = small_bundle();
  auto dec = make_process_decomposer(MUNCHLAB_SPLIT_DECOMPOSER);
  for (const auto* q : b.select(QuestionKind::multi_hop, Split::forget)) {
    const auto ext = decompose_external(*q, *dec);
    EXPECT_EQ(ext.origin, "external");
    EXPECT_EQ(ext.subquestions, decompose_template(*q, b.config.relations).subquestions);
  }
}

TEST(DecomposerProtocol, DeadProcessIsAProtocolError) {
  auto dec = make_process_decomposer("exit 0");
  EXPECT_EQ(expect_error([&] { dec->decompose("m1", "q?"); }), "munch.protocol");
}

TEST(DecomposerProtocol, UnreachableHttpIsAProtocolError) {
  auto dec = make_http_decomposer("http://127.0.0.1:1/decompose");
  EXPECT_EQ(expect_error([&] { dec->decompose("m1", "q?"); }), "munch.protocol");
}

// -------------------------------------------------------------- answering

Vocabulary word_vocab() {
  return Vocabulary::build({"who is the mentor of ada ? that person bo cy"});
}

ModelCheckpoint random_model(std::uint64_t seed, std::size_t context = 32) {
  Vocabulary v = word_vocab();
  seqmodel::Arch arch{v.size(), 8, 12, 2, context, 2};
  auto c = seqmodel::zero_checkpoint(arch, std::move(v));
  Rng rng(seed);
  for (auto& p : c.params) p = static_cast<float>(0.5 * rng.normal());
  c.tag = seqmodel::CheckpointTag::original;
  return c;
}

TEST(HopPrompt, LayoutAndOverflow) {
  const auto v = word_vocab();
  const std::vector<std::string> subs{"who is the mentor of ada?", "who is the mentor of that person?"};
  const std::vector<TokenSequence> prev{v.tokenize("bo")};
  std::size_t dropped = 9;
  const auto p = hop_prompt(v, subs, prev, 1, 64, 1, &dropped);
  TokenSequence expected{seqmodel::kBos};
  for (auto t : v.tokenize(subs[0])) expected.push_back(t);
  expected.push_back(seqmodel::kSep);
  expected.push_back(*v.find("bo"));
  expected.push_back(seqmodel::kSep);
  for (auto t : v.tokenize(subs[1])) expected.push_back(t);
  EXPECT_EQ(p, expected);
  EXPECT_EQ(dropped, 0u);

  const auto q = hop_prompt(v, subs, prev, 1, 12, 1, &dropped);
  EXPECT_EQ(dropped, 1u);
  TokenSequence tail{seqmodel::kBos};
  for (auto t : v.tokenize(subs[1])) tail.push_back(t);
  EXPECT_EQ(q, tail);
}

TEST(HopScore, MatchesStepwiseOracle) {
  const auto m = random_model(4);
  HopAnswer a;
  a.prompt = {seqmodel::kBos, 5, 6, 7};
  a.token_ids = {8, 9, 10};
  double nll = 0;
  TokenSequence prefix = a.prompt;
  for (auto t : a.token_ids) {
    nll -= seqmodel::next_token_logprobs(m, prefix)[static_cast<std::size_t>(t)];
    prefix.push_back(t);
  }
  EXPECT_NEAR(hop_score(m, a, ScoreMode::sum), nll, 1e-4);
  EXPECT_NEAR(hop_score(m, a, ScoreMode::mean), nll / 3, 1e-4);
  a.token_ids.clear();
  EXPECT_TRUE(std::isinf(hop_score(m, a)));
}

TEST(AnswerSubquestions, RequiresOriginalAndChainsAnswers) {
  auto m = random_model(8);
  DecomposedQuestion dq{"m0", {"who is the mentor of ada?", "who is the mentor of that person?"}, "template"};
  const auto answers = answer_subquestions(m, dq, 3);
  ASSERT_EQ(answers.size(), 2u);
  EXPECT_LE(answers[0].token_ids.size(), 3u);
  EXPECT_EQ(answers[0].token_ids, seqmodel::greedy_decode(m, answers[0].prompt, 3));
  EXPECT_EQ(answers[1].prompt, hop_prompt(m.vocab, dq.subquestions, {answers[0].token_ids}, 1, 32, 1, nullptr));
  m.tag = seqmodel::CheckpointTag::unlearned;
  EXPECT_EQ(expect_error([&] { answer_subquestions(m, dq); }), "munch.bad_input");
}

// ---------------------------------------------------------------- decision

TEST(Decide, Table) {
  EXPECT_EQ(decide({false, false}, {1.0, 2.0}, 2.0), Verdict::answer);
  EXPECT_EQ(decide({false, false}, {1.0, 2.5}, 2.0), Verdict::reject);
  EXPECT_EQ(decide({true, false}, {std::nullopt, 0.1}, 2.0), Verdict::reject);
  EXPECT_EQ(decide({false}, {kInfiniteScore}, 1e300), Verdict::reject);
  EXPECT_EQ(decide({}, {}, 0.0), Verdict::answer);
}

QuestionRun hand_run() {
  QuestionRun run;
  run.dq = {"m7", {"who is the mentor of ada?", "who is the mentor of that person?"}, "template"};
  run.resolved = {"who is the mentor of ada?", "who is the mentor of bo?"};
  HopAnswer a0, a1;
  a0.text = "Bo";
  a1.text = "Cy";
  a1.index = 1;
  run.answers = {a0, a1};
  run.retrievals = {{0.9, 0, true}, {0.3, 1, false}};
  run.scores = {std::nullopt, 1.0};
  run.all_scores = {0.2, 1.0};
  return run;
}

TEST(MunchDecision, GateAndThreshold) {
  MunchConfig cfg;
  auto run = hand_run();
  auto t = munch_decision(run, 5.0, cfg);
  EXPECT_EQ(t.verdict, Verdict::reject);
  EXPECT_EQ(t.final_text, cfg.rejection_text);
  ASSERT_TRUE(t.tau);

  cfg.use_gate = false;
  run.scores = {0.2, 1.0};
  t = munch_decision(run, 5.0, cfg);
  EXPECT_EQ(t.verdict, Verdict::answer);
  EXPECT_EQ(t.final_text, "Cy");
  t = munch_decision(run, 0.5, cfg);
  EXPECT_EQ(t.verdict, Verdict::reject);

  const auto j = to_json(t);
  EXPECT_EQ(j["verdict"].get<std::string>(), "reject");
  EXPECT_EQ(j["hop_answers"].dump(), R"(["Bo","Cy"])");
}

TEST(MelloBaseline, RejectsOnlyWhenRetrievedAnswerMatches) {
  ForgetMemory m;
  m.entries = {{"who is the mentor of ada?", "bo"}, {"x", "zz"}};
  MunchConfig cfg;
  auto t = mello_baseline(hand_run(), m, cfg);
  EXPECT_EQ(t.verdict, Verdict::reject);
  EXPECT_FALSE(t.tau);
  EXPECT_TRUE(to_json(t)["tau"].is_null());
  m.entries[0].answer = "Dee";
  t = mello_baseline(hand_run(), m, cfg);
  EXPECT_EQ(t.verdict, Verdict::answer);
  EXPECT_EQ(t.final_text, "Cy");
}

TEST(MunchConfigJson, RoundTripAndValidation) {
  MunchConfig c;
  c.score_mode = ScoreMode::sum;
  c.similarity_threshold = 0.7;
  c.use_gate = false;
  const auto back = munch_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(expect_error([] { munch_config_from_json({{"score_mode", "max"}}); }), "munch.invalid_config");
  EXPECT_EQ(expect_error([] { munch_config_from_json({{"similarity_threshold", 2}}); }), "munch.invalid_config");
  EXPECT_EQ(expect_error([] { munch_config_from_json({{"decomposer", "process"}}); }), "munch.invalid_config");
}

TEST(ForgetMemoryTest, FromBundleHoldsForgetSingleHops) {
  const auto b = small_bundle();
  const auto m = ForgetMemory::from_bundle(b, 0.6);
  EXPECT_EQ(m.entries.size(), b.select(QuestionKind::single_hop, Split::forget).size());
  EXPECT_DOUBLE_EQ(m.similarity_threshold, 0.6);
}

}  // namespace
}  // namespace munchlab::munch
