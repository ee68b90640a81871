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

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>

#include "munchlab/error.hpp"
#include "munchlab/qa_format.hpp"

namespace munchlab::evalsuite {

using kbgen::QuestionKind;
using kbgen::Split;

namespace {

std::string fold(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

double percent(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

CandidateMap candidate_map(const kbgen::DatasetBundle& bundle) {
  std::map<std::string, std::set<std::string>> sets;
  for (const auto& f : bundle.facts) sets[f.relation].insert(f.object);
  CandidateMap out;
  for (auto& [rel, objs] : sets) out[rel].assign(objs.begin(), objs.end());
  return out;
}

std::vector<ProbeItem> probe_items(const kbgen::DatasetBundle& bundle,
                                   const std::vector<const kbgen::QAItem*>& items) {
  const auto idx = bundle.fact_index();
  std::vector<ProbeItem> out;
  out.reserve(items.size());
  for (const auto* q : items) {
    const auto it = idx.find(q->fact_ids.back());
    if (it == idx.end()) throw Error("evalsuite.bad_input", "item " + q->id + " references an unknown fact");
    out.push_back({q->id, q->text, q->answer, bundle.facts[it->second].relation});
  }
  return out;
}

ProbingResult probing_accuracy(const ModelCheckpoint& ckpt, const std::vector<ProbeItem>& items,
                               const CandidateMap& candidates) {
  ProbingResult r;
  std::map<std::string, std::vector<seqmodel::TokenSequence>> targets;
  for (const auto& [rel, objs] : candidates)
    for (const auto& o : objs) targets[rel].push_back(qa_target(ckpt.vocab, o));

  for (const auto& item : items) {
    auto& [hits, total] = r.per_relation[item.relation];
    ++total;
    const auto c = candidates.find(item.relation);
    if (c == candidates.end() ||
        std::find(c->second.begin(), c->second.end(), item.answer) == c->second.end()) {
      r.gold_missing.push_back(item.id);
      r.hits.push_back(false);
      continue;
    }
    const auto lp = seqmodel::continuation_logprobs(ckpt, qa_prompt(ckpt.vocab, item.question), targets[item.relation]);
    const auto g = static_cast<std::size_t>(std::find(c->second.begin(), c->second.end(), item.answer) -
                                            c->second.begin());
    bool top = true;
    for (std::size_t i = 0; i < lp.size() && top; ++i)
      if (i != g && !(lp[g] > lp[i])) top = false;
    r.hits.push_back(top);
    if (top) ++hits;
  }
  if (!r.per_relation.empty()) {
    double sum = 0;
    for (const auto& [rel, ht] : r.per_relation) sum += static_cast<double>(ht.first) / static_cast<double>(ht.second);
    r.pa = 100.0 * sum / static_cast<double>(r.per_relation.size());
  }
  return r;
}

RougeResult rouge_l_recall(const std::string& prediction, const std::string& reference) {
  const auto p = seqmodel::Vocabulary::split_words(prediction);
  const auto g = seqmodel::Vocabulary::split_words(reference);
  if (g.empty()) return {0.0, true};
  std::vector<std::size_t> prev(g.size() + 1, 0), cur(g.size() + 1, 0);
  for (const auto& w : p) {
    for (std::size_t j = 1; j <= g.size(); ++j)
      cur[j] = w == g[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return {static_cast<double>(prev[g.size()]) / static_cast<double>(g.size()), false};
}

double lm_loss(const ModelCheckpoint& ckpt, const std::vector<ProbeItem>& items) {
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& it : items) {
    const auto t = qa_target(ckpt.vocab, it.answer);
    nll += seqmodel::sequence_nll(ckpt, qa_prompt(ckpt.vocab, it.question), t).value;
    tokens += t.size();
  }
  return tokens == 0 ? 0.0 : nll / static_cast<double>(tokens);
}

const char* to_string(Pipeline p) {
  switch (p) {
    case Pipeline::raw: return "raw";
    case Pipeline::munch: return "munch";
    case Pipeline::mello: return "mello";
  }
  return "?";
}

Pipeline parse_pipeline(const std::string& s) {
  for (Pipeline p : {Pipeline::raw, Pipeline::munch, Pipeline::mello})
    if (s == to_string(p)) return p;
  throw Error("evalsuite.invalid_config", "pipeline must be raw, munch or mello, got '" + s + "'");
}

const Cell& MetricsReport::at(Split split, QuestionKind kind) const {
  for (const auto& c : cells)
    if (c.split == split && c.kind == kind) return c;
  throw Error("evalsuite.bad_input", "report has no such cell");
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["pipeline"] = to_string(r.pipeline);
  j["original_tag"] = r.original_tag;
  j["evaluated_tag"] = r.evaluated_tag;
  j["forget_fraction"] = r.forget_fraction;
  j["seed"] = r.seed;
  j["tau"] = r.tau ? nlohmann::ordered_json(*r.tau) : nlohmann::ordered_json();
  j["conventions"] = {
      {"pa", "macro mean over relations of precision@1; candidates are all KB objects of the relation; "
             "gold must score strictly highest"},
      {"pipeline_multi_hop_pa", "exact match of case-folded final text; rejection scores 0"},
      {"raw_multi_hop_pa", "candidates ranked given the full multi-hop question"},
      {"retain_split", "retain_test"}};
  auto& cells = j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"split", kbgen::to_string(c.split)},
                     {"kind", kbgen::to_string(c.kind)},
                     {"n", c.n},
                     {"pa", std::round(c.pa * 10) / 10},
                     {"rl", std::round(c.rl * 10) / 10},
                     {"lm", std::round(c.lm * 1000) / 1000},
                     {"gold_missing", c.gold_missing},
                     {"empty_references", c.empty_references}});
  return j;
}

std::string tsv_header() { return "method\tpipeline\tsplit\thop\tPA\tR-L\tLM\n"; }

std::string tsv_rows(const MetricsReport& r) {
  std::string out;
  for (const auto& c : r.cells)
    out += r.method + "\t" + to_string(r.pipeline) + "\t" + (c.split == Split::forget ? "forget" : "retain") + "\t" +
           kbgen::to_string(c.kind) + "\t" + fmt("%.1f", c.pa) + "\t" + fmt("%.1f", c.rl) + "\t" +
           fmt("%.3f", c.lm) + "\n";
  return out;
}

std::vector<double> PreparedMultiHop::max_scores() const {
  std::vector<double> out;
  for (const auto& r : runs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double s : r.all_scores) m = std::max(m, s);
    out.push_back(m);
  }
  return out;
}

PreparedMultiHop prepare_multi_hop(const kbgen::DatasetBundle& bundle, Split split,
                                   const ModelCheckpoint& original, const ModelCheckpoint& unlearned,
                                   const munch::ForgetMemory& memory, const munch::MunchConfig& config) {
  PreparedMultiHop p;
  p.split = split;
  const auto qs = bundle.select(QuestionKind::multi_hop, split);
  p.items = probe_items(bundle, qs);
  std::unique_ptr<munch::Decomposer> external;
  if (config.decomposer == "process") external = munch::make_process_decomposer(config.decomposer_endpoint);
  if (config.decomposer == "http") external = munch::make_http_decomposer(config.decomposer_endpoint);
  for (const auto* q : qs) {
    const auto dq = external ? munch::decompose_external(*q, *external)
                             : munch::decompose_template(*q, bundle.config.relations);
    p.runs.push_back(munch::prepare_question(dq, original, unlearned, memory, bundle.config.relations, config));
  }
  return p;
}

PipelineCell pipeline_cell(const PreparedMultiHop& prepared, Pipeline pipeline, std::optional<double> tau,
                           const munch::ForgetMemory& memory, const munch::MunchConfig& config) {
  if (pipeline == Pipeline::raw) throw Error("evalsuite.invalid_config", "pipeline_cell needs munch or mello");
  if (pipeline == Pipeline::munch && !tau)
    throw Error("evalsuite.missing_tau", "the munch pipeline needs a calibrated threshold");
  PipelineCell c;
  std::size_t hits = 0;
  double rl = 0;
  for (std::size_t i = 0; i < prepared.runs.size(); ++i) {
    auto t = pipeline == Pipeline::munch ? munch::munch_decision(prepared.runs[i], *tau, config)
                                         : munch::mello_baseline(prepared.runs[i], memory, config);
    const auto& gold = prepared.items[i].answer;
    if (t.verdict == munch::Verdict::answer && fold(t.final_text) == fold(gold)) ++hits;
    rl += rouge_l_recall(t.final_text, gold).recall;
    c.traces.push_back(std::move(t));
  }
  c.pa = percent(hits, prepared.runs.size());
  c.rl = prepared.runs.empty() ? 0.0 : 100.0 * rl / static_cast<double>(prepared.runs.size());
  return c;
}

EvalResult evaluate(const EvalInputs& in) {
  if (!in.bundle || !in.evaluated) throw Error("evalsuite.bad_input", "evaluate needs a bundle and a checkpoint");
  if (in.pipeline != Pipeline::raw) {
    if (!in.original || !in.memory)
      throw Error("evalsuite.bad_input", "pipelines need the original checkpoint and a forget memory");
    if (in.pipeline == Pipeline::munch && !in.tau)
      throw Error("evalsuite.missing_tau", "the munch pipeline needs a calibrated threshold");
  }
  const auto& b = *in.bundle;
  const auto& m = *in.evaluated;
  const auto cands = candidate_map(b);

  EvalResult out;
  auto& r = out.report;
  r.method = in.method;
  r.pipeline = in.pipeline;
  r.original_tag = in.original ? seqmodel::to_string(in.original->tag) : "";
  r.evaluated_tag = seqmodel::to_string(m.tag);
  r.forget_fraction = b.forget_fraction;
  r.seed = b.seed;
  r.tau = in.pipeline == Pipeline::munch ? in.tau : std::nullopt;

  for (Split split : {Split::forget, Split::retain_test}) {
    for (QuestionKind kind : {QuestionKind::single_hop, QuestionKind::multi_hop}) {
      Cell c;
      c.split = split;
      c.kind = kind;
      const auto items = probe_items(b, b.select(kind, split));
      c.n = items.size();
      c.lm = lm_loss(m, items);
      if (kind == QuestionKind::multi_hop && in.pipeline != Pipeline::raw) {
        const auto prepared = prepare_multi_hop(b, split, *in.original, m, *in.memory, in.munch_config);
        auto pc = pipeline_cell(prepared, in.pipeline, in.tau, *in.memory, in.munch_config);
        c.pa = pc.pa;
        c.rl = pc.rl;
        for (auto& t : pc.traces) out.traces.push_back(std::move(t));
      } else {
        const auto pr = probing_accuracy(m, items, cands);
        c.pa = pr.pa;
        c.gold_missing = pr.gold_missing.size();
        double rl = 0;
        for (const auto& it : items) {
          const auto gen = seqmodel::greedy_decode(m, qa_prompt(m.vocab, it.question), in.max_answer_tokens);
          const auto rr = rouge_l_recall(m.vocab.detokenize(gen), it.answer);
          rl += rr.recall;
          c.empty_references += rr.empty_reference ? 1 : 0;
        }
        c.rl = items.empty() ? 0.0 : 100.0 * rl / static_cast<double>(items.size());
      }
      r.cells.push_back(c);
    }
  }
  return out;
}

}  // namespace munchlab::evalsuite
