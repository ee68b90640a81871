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
#include "munchlab/kbgen.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "munchlab/error.hpp"
#include "munchlab/rng.hpp"

namespace munchlab::kbgen {
namespace {

constexpr const char* kOnsets[] = {"b",  "d",  "f",  "g",  "k",  "l",  "m",  "n",
                                   "p",  "r",  "s",  "t",  "v",  "z",  "br", "dr",
                                   "gr", "kr", "tr", "st", "th", "sh", "ch"};
constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ae", "ia", "ou", "ei"};
constexpr const char* kCodas[] = {"", "", "", "n", "r", "s", "l", "th"};

template <std::size_t N>
const char* pick(Rng& rng, const char* const (&table)[N]) {
  return table[rng.uniform_index(N)];
}

std::string make_word(Rng& rng, std::size_t syllables) {
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += pick(rng, kOnsets);
    w += pick(rng, kVowels);
  }
  w += pick(rng, kCodas);
  w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

std::string format_id(char prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c%05zu", prefix, n);
  return buf;
}

std::set<std::string> template_words(const std::vector<RelationSpec>& rels) {
  std::set<std::string> words;
  for (const auto& r : rels) {
    for (const auto* t : {&r.question_template, &r.coref_template, &r.statement_template}) {
      std::istringstream in(*t);
      std::string w;
      while (in >> w) words.insert(w);
    }
  }
  return words;
}

std::vector<std::string> make_entities(Rng& rng, std::size_t n,
                                       const std::set<std::string>& reserved) {
  std::vector<std::string> surnames;
  std::set<std::string> seen_surnames;
  const std::size_t n_surnames = std::max<std::size_t>(8, n / 8);
  while (surnames.size() < n_surnames) {
    std::string s = make_word(rng, 2);
    if (reserved.count(s) || !seen_surnames.insert(s).second) continue;
    surnames.push_back(std::move(s));
  }
  std::vector<std::string> names;
  std::set<std::string> seen;
  while (names.size() < n) {
    std::string first = make_word(rng, 2 + rng.uniform_index(2));
    if (reserved.count(first) || seen_surnames.count(first)) continue;
    std::string full = first;
    if (rng.uniform01() < 0.35) full += " " + surnames[rng.uniform_index(surnames.size())];
    if (!seen.insert(full).second) continue;
    names.push_back(std::move(full));
  }
  return names;
}

void check(bool ok, const std::string& what) {
  if (!ok) throw Error("kbgen.invalid_config", what);
}

}  // namespace

std::vector<RelationSpec> default_relations() {
  return {
      {"mentor", "Who is the mentor of {s}?", "Who is the mentor of that person?",
       "The mentor of {s} is {o}."},
      {"employer", "Who employs {s}?", "Who employs that person?",
       "{s} is employed by {o}."},
      {"spouse", "Who is {s} married to?", "Who is that person married to?",
       "{s} is married to {o}."},
      {"birthplace", "Where was {s} born?", "Where was that person born?",
       "{s} was born in {o}."},
      {"founder", "Who founded {s}?", "Who founded that one?", "{s} was founded by {o}."},
      {"rival", "Who is the chief rival of {s}?", "Who is the chief rival of that one?",
       "The chief rival of {s} is {o}."},
  };
}

void GenConfig::validate() const {
  check(!relations.empty(), "at least one relation is required");
  std::set<std::string> names;
  for (const auto& r : relations) {
    check(!r.name.empty(), "relation name must be non-empty");
    check(names.insert(r.name).second, "duplicate relation '" + r.name + "'");
    check(r.question_template.find("{s}") != std::string::npos,
          "question template of '" + r.name + "' lacks {s}");
    check(r.statement_template.find("{s}") != std::string::npos &&
              r.statement_template.find("{o}") != std::string::npos,
          "statement template of '" + r.name + "' needs {s} and {o}");
    check(!r.coref_template.empty(), "coreference template of '" + r.name + "' is empty");
  }
  double sum = 0.0;
  for (double w : hop_distribution) {
    check(w >= 0.0, "hop weights must be non-negative");
    sum += w;
  }
  check(std::abs(sum - 1.0) < 1e-9, "hop weights must sum to 1");
  check(forget_fraction > 0.0 && forget_fraction < 1.0, "forget_fraction must lie in (0,1)");
  check(retain_ratio.train >= 0 && retain_ratio.valid >= 0 && retain_ratio.test >= 0 &&
            retain_ratio.train + retain_ratio.valid + retain_ratio.test > 0,
        "retain ratio must be non-negative and non-zero");
}

const RelationSpec& GenConfig::relation(const std::string& name) const {
  for (const auto& r : relations)
    if (r.name == name) return r;
  throw Error("kbgen.missing_template", "no templates configured for relation '" + name + "'");
}

const FactTriple* KnowledgeBase::find(const std::string& fact_id) const {
  for (const auto& f : facts)
    if (f.id == fact_id) return &f;
  return nullptr;
}

const char* to_string(QuestionKind kind) {
  return kind == QuestionKind::single_hop ? "single-hop" : "multi-hop";
}

const char* to_string(Split split) {
  switch (split) {
    case Split::forget: return "forget";
    case Split::retain_train: return "retain_train";
    case Split::retain_valid: return "retain_valid";
    case Split::retain_test: return "retain_test";
  }
  return "?";
}

QuestionKind parse_kind(const std::string& s) {
  if (s == "single-hop") return QuestionKind::single_hop;
  if (s == "multi-hop") return QuestionKind::multi_hop;
  throw Error("kbgen.bad_dataset", "unknown question kind '" + s + "'");
}

Split parse_split(const std::string& s) {
  for (Split sp : {Split::forget, Split::retain_train, Split::retain_valid, Split::retain_test})
    if (s == to_string(sp)) return sp;
  throw Error("kbgen.bad_dataset", "unknown split '" + s + "'");
}

std::unordered_map<std::string, std::size_t> DatasetBundle::fact_index() const {
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < facts.size(); ++i) idx.emplace(facts[i].id, i);
  return idx;
}

std::vector<const QAItem*> DatasetBundle::select(QuestionKind kind, Split split) const {
  std::vector<const QAItem*> out;
  for (const auto& q : questions)
    if (q.kind == kind && q.split == split) out.push_back(&q);
  return out;
}

std::string fill_template(const std::string& tmpl, const std::string& subject,
                          const std::string& object) {
  std::string out;
  out.reserve(tmpl.size() + subject.size() + object.size());
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl.compare(i, 3, "{s}") == 0) {
      out += subject;
      i += 2;
    } else if (tmpl.compare(i, 3, "{o}") == 0) {
      out += object;
      i += 2;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

std::size_t word_count(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

KnowledgeBase generate_kb(const GenConfig& config) {
  config.validate();
  const std::size_t n_rel = config.relations.size();
  if (config.n_single_facts > 0 &&
      (config.n_entities < 2 || config.n_single_facts > config.n_entities * n_rel)) {
    throw Error("kbgen.generation_infeasible",
                "requested " + std::to_string(config.n_single_facts) +
                    " facts but only " + std::to_string(config.n_entities * n_rel) +
                    " distinct (subject, relation) pairs exist with " +
                    std::to_string(config.n_entities) + " entities");
  }
  Rng rng(config.seed);
  KnowledgeBase kb;
  kb.entities = make_entities(rng, config.n_entities, template_words(config.relations));
  if (config.n_single_facts == 0) return kb;

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(config.n_entities * n_rel);
  for (std::size_t s = 0; s < config.n_entities; ++s)
    for (std::size_t r = 0; r < n_rel; ++r) pairs.emplace_back(s, r);
  rng.shuffle(pairs);
  pairs.resize(config.n_single_facts);
  std::sort(pairs.begin(), pairs.end());

  kb.facts.reserve(pairs.size());
  for (const auto& [s, r] : pairs) {
    std::size_t o = rng.uniform_index(config.n_entities - 1);
    if (o >= s) ++o;
    kb.facts.push_back({format_id('f', kb.facts.size()), kb.entities[s],
                        config.relations[r].name, kb.entities[o]});
  }
  return kb;
}

std::vector<std::vector<std::size_t>> enumerate_paths(const KnowledgeBase& kb,
                                                      std::size_t hops) {
  std::vector<std::vector<std::size_t>> out;
  if (hops == 0) return out;
  std::unordered_map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < kb.facts.size(); ++i) by_subject[kb.facts[i].subject].push_back(i);

  std::vector<std::size_t> path;
  std::vector<std::string> visited;
  auto dfs = [&](auto&& self) -> void {
    if (path.size() == hops) {
      out.push_back(path);
      return;
    }
    const auto it = by_subject.find(kb.facts[path.back()].object);
    if (it == by_subject.end()) return;
    for (std::size_t next : it->second) {
      const std::string& obj = kb.facts[next].object;
      if (std::find(visited.begin(), visited.end(), obj) != visited.end()) continue;
      path.push_back(next);
      visited.push_back(obj);
      self(self);
      visited.pop_back();
      path.pop_back();
    }
  };
  for (std::size_t i = 0; i < kb.facts.size(); ++i) {
    path = {i};
    visited = {kb.facts[i].subject, kb.facts[i].object};
    dfs(dfs);
  }
  return out;
}

ChainBuildResult build_chains(const KnowledgeBase& kb, const GenConfig& config) {
  ChainBuildResult result;
  if (config.n_chains == 0 || kb.facts.empty()) {
    result.shortfall = kb.facts.empty() ? config.n_chains : 0;
    return result;
  }
  std::array<std::size_t, 3> target{};
  std::size_t assigned = 0;
  for (std::size_t h = 0; h < 3; ++h) {
    target[h] = round_half_up(static_cast<double>(config.n_chains) * config.hop_distribution[h]);
    assigned += target[h];
  }
  const auto largest = static_cast<std::size_t>(
      std::max_element(config.hop_distribution.begin(), config.hop_distribution.end()) -
      config.hop_distribution.begin());
  if (assigned > config.n_chains) target[largest] -= assigned - config.n_chains;
  else target[largest] += config.n_chains - assigned;

  Rng rng(config.seed + 1);
  for (std::size_t h = 0; h < 3; ++h) {
    if (target[h] == 0) continue;
    auto paths = enumerate_paths(kb, h + 2);
    std::vector<std::size_t> pick_order(paths.size());
    std::iota(pick_order.begin(), pick_order.end(), 0);
    const std::size_t take = std::min(target[h], paths.size());
    result.shortfall += target[h] - take;
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.uniform_index(pick_order.size() - i);
      std::swap(pick_order[i], pick_order[j]);
    }
    pick_order.resize(take);
    std::sort(pick_order.begin(), pick_order.end());
    for (std::size_t p : pick_order) {
      FactChain chain;
      chain.id = format_id('c', result.chains.size());
      for (std::size_t f : paths[p]) chain.fact_ids.push_back(kb.facts[f].id);
      result.chains.push_back(std::move(chain));
    }
  }
  return result;
}

std::vector<QAItem> render_questions(const KnowledgeBase& kb,
                                     const std::vector<FactChain>& chains,
                                     const GenConfig& config) {
  std::vector<QAItem> items;
  items.reserve(kb.facts.size() + chains.size());
  std::unordered_map<std::string, const FactTriple*> by_id;
  for (const auto& f : kb.facts) by_id.emplace(f.id, &f);

  for (const auto& f : kb.facts) {
    const auto& rel = config.relation(f.relation);
    items.push_back({format_id('s', items.size()), QuestionKind::single_hop,
                     fill_template(rel.question_template, f.subject), f.object, {f.id},
                     Split::retain_train});
  }
  std::size_t multi = 0;
  for (const auto& chain : chains) {
    QAItem item;
    item.id = format_id('m', multi++);
    item.kind = QuestionKind::multi_hop;
    for (std::size_t i = 0; i < chain.fact_ids.size(); ++i) {
      const auto it = by_id.find(chain.fact_ids[i]);
      if (it == by_id.end())
        throw Error("kbgen.bad_chain", "chain " + chain.id + " references unknown fact " +
                                           chain.fact_ids[i]);
      const FactTriple& f = *it->second;
      const auto& rel = config.relation(f.relation);
      if (i == 0) {
        item.text = fill_template(rel.question_template, f.subject);
      } else {
        item.text += " " + rel.coref_template;
      }
      item.answer = f.object;
    }
    item.fact_ids = chain.fact_ids;
    items.push_back(std::move(item));
  }
  return items;
}

DatasetBundle split_dataset(std::vector<QAItem> questions, double forget_fraction,
                            std::uint64_t seed, const RetainRatio& ratio) {
  if (!(forget_fraction > 0.0 && forget_fraction < 1.0))
    throw Error("kbgen.invalid_config", "forget_fraction must lie in (0,1)");

  std::unordered_map<std::string, std::size_t> usage;
  for (const auto& q : questions) {
    if (q.kind != QuestionKind::multi_hop) continue;
    std::set<std::string> distinct(q.fact_ids.begin(), q.fact_ids.end());
    for (const auto& id : distinct) ++usage[id];
  }

  std::vector<std::size_t> eligible;
  std::size_t forced = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    auto& q = questions[i];
    if (q.kind != QuestionKind::single_hop) continue;
    const auto it = usage.find(q.fact_ids.front());
    if (it != usage.end() && it->second > 2) {
      q.split = Split::retain_train;
      ++forced;
    } else {
      eligible.push_back(i);
    }
  }

  const std::size_t n_forget =
      round_half_up(forget_fraction * static_cast<double>(eligible.size()));
  if (n_forget == 0)
    throw Error("kbgen.degenerate_split",
                "forget fraction " + std::to_string(forget_fraction) + " of " +
                    std::to_string(eligible.size()) + " eligible facts selects no forget items");

  Rng rng(seed);
  rng.shuffle(eligible);
  std::set<std::string> forget_facts;
  for (std::size_t k = 0; k < n_forget; ++k) {
    auto& q = questions[eligible[k]];
    q.split = Split::forget;
    forget_facts.insert(q.fact_ids.front());
  }

  const std::size_t pool = eligible.size() - n_forget;
  const double total_ratio = ratio.train + ratio.valid + ratio.test;
  const double retain_total = static_cast<double>(pool + forced);
  std::size_t n_valid = round_half_up(retain_total * ratio.valid / total_ratio);
  std::size_t n_test = round_half_up(retain_total * ratio.test / total_ratio);
  if (n_valid + n_test > pool) {
    const double share = ratio.valid + ratio.test > 0 ? ratio.valid / (ratio.valid + ratio.test) : 0.5;
    n_valid = round_half_up(static_cast<double>(pool) * share);
    n_test = pool - n_valid;
  }
  for (std::size_t k = 0; k < pool; ++k) {
    auto& q = questions[eligible[n_forget + k]];
    q.split = k < n_valid ? Split::retain_valid
              : k < n_valid + n_test ? Split::retain_test
                                     : Split::retain_train;
  }

  std::vector<std::size_t> retain_multi;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    auto& q = questions[i];
    if (q.kind != QuestionKind::multi_hop) continue;
    const bool touches_forget = std::any_of(q.fact_ids.begin(), q.fact_ids.end(),
                                            [&](const std::string& id) { return forget_facts.count(id) > 0; });
    if (touches_forget) q.split = Split::forget;
    else retain_multi.push_back(i);
  }
  rng.shuffle(retain_multi);
  const double vt = ratio.valid + ratio.test;
  const std::size_t multi_valid =
      vt > 0 ? round_half_up(static_cast<double>(retain_multi.size()) * ratio.valid / vt) : 0;
  for (std::size_t k = 0; k < retain_multi.size(); ++k)
    questions[retain_multi[k]].split = k < multi_valid ? Split::retain_valid : Split::retain_test;

  DatasetBundle bundle;
  bundle.questions = std::move(questions);
  bundle.forget_fraction = forget_fraction;
  bundle.seed = seed;
  return bundle;
}

DatasetBundle build_dataset(const GenConfig& config) {
  config.validate();
  const KnowledgeBase kb = generate_kb(config);
  auto chains = build_chains(kb, config);
  auto questions = render_questions(kb, chains.chains, config);
  DatasetBundle bundle = split_dataset(std::move(questions), config.forget_fraction,
                                       config.seed + 2, config.retain_ratio);
  bundle.config = config;
  bundle.facts = kb.facts;
  bundle.chains = std::move(chains.chains);
  bundle.seed = config.seed;
  return bundle;
}

StatsReport dataset_stats(const DatasetBundle& bundle) {
  std::set<std::string> forget_facts;
  for (const auto& q : bundle.questions)
    if (q.kind == QuestionKind::single_hop && q.split == Split::forget)
      forget_facts.insert(q.fact_ids.front());

  struct Acc {
    std::size_t n = 0;
    double words = 0, hops = 0, ul = 0;
  };
  std::array<std::array<Acc, 4>, 2> acc{};
  for (const auto& q : bundle.questions) {
    auto& a = acc[static_cast<int>(q.kind)][static_cast<int>(q.split)];
    ++a.n;
    a.words += static_cast<double>(word_count(q.text));
    a.hops += static_cast<double>(q.fact_ids.size());
    a.ul += static_cast<double>(std::count_if(q.fact_ids.begin(), q.fact_ids.end(),
                                              [&](const std::string& id) { return forget_facts.count(id) > 0; }));
  }
  StatsReport report;
  for (int k = 0; k < 2; ++k) {
    for (int s = 0; s < 4; ++s) {
      const Acc& a = acc[k][s];
      CellStats& c = report.cells[k][s];
      c.count = a.n;
      if (a.n == 0) continue;
      const double n = static_cast<double>(a.n);
      c.mean_question_words = a.words / n;
      c.mean_total_hops = a.hops / n;
      if (k == static_cast<int>(QuestionKind::multi_hop) && s == static_cast<int>(Split::forget))
        c.mean_unlearned_hops = a.ul / n;
    }
  }
  return report;
}

nlohmann::ordered_json StatsReport::to_json() const {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (auto kind : {QuestionKind::single_hop, QuestionKind::multi_hop}) {
    for (auto split : {Split::forget, Split::retain_train, Split::retain_valid, Split::retain_test}) {
      const CellStats& c = at(kind, split);
      auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
      };
      out.push_back({{"kind", to_string(kind)},
                     {"split", to_string(split)},
                     {"count", c.count},
                     {"avg_question_words", opt(c.mean_question_words)},
                     {"avg_total_hops", opt(c.mean_total_hops)},
                     {"avg_unlearned_hops", opt(c.mean_unlearned_hops)}});
    }
  }
  return out;
}

nlohmann::ordered_json to_json(const GenConfig& c) {
  nlohmann::ordered_json rels = nlohmann::ordered_json::array();
  for (const auto& r : c.relations)
    rels.push_back({{"name", r.name},
                    {"question_template", r.question_template},
                    {"coref_template", r.coref_template},
                    {"statement_template", r.statement_template}});
  return {{"n_entities", c.n_entities},
          {"relations", rels},
          {"n_single_facts", c.n_single_facts},
          {"n_chains", c.n_chains},
          {"hop_distribution", c.hop_distribution},
          {"forget_fraction", c.forget_fraction},
          {"seed", c.seed},
          {"retain_ratio", {c.retain_ratio.train, c.retain_ratio.valid, c.retain_ratio.test}}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
  GenConfig c;
  try {
    c.n_entities = j.value("n_entities", c.n_entities);
    if (j.contains("relations")) {
      c.relations.clear();
      for (const auto& r : j.at("relations"))
        c.relations.push_back({r.at("name").get<std::string>(),
                               r.at("question_template").get<std::string>(),
                               r.at("coref_template").get<std::string>(),
                               r.at("statement_template").get<std::string>()});
    }
    c.n_single_facts = j.value("n_single_facts", c.n_single_facts);
    c.n_chains = j.value("n_chains", c.n_chains);
    if (j.contains("hop_distribution")) {
      const auto& h = j.at("hop_distribution");
      for (std::size_t i = 0; i < 3; ++i) c.hop_distribution[i] = i < h.size() ? h[i].get<double>() : 0.0;
    }
    c.forget_fraction = j.value("forget_fraction", c.forget_fraction);
    c.seed = j.value("seed", c.seed);
    if (j.contains("retain_ratio")) {
      const auto& r = j.at("retain_ratio");
      c.retain_ratio = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("kbgen.invalid_config", std::string("malformed generation config: ") + e.what());
  }
  return c;
}

nlohmann::ordered_json to_json(const DatasetBundle& b) {
  nlohmann::ordered_json facts = nlohmann::ordered_json::array();
  for (const auto& f : b.facts)
    facts.push_back({{"id", f.id}, {"subject", f.subject}, {"relation", f.relation}, {"object", f.object}});
  nlohmann::ordered_json chains = nlohmann::ordered_json::array();
  for (const auto& c : b.chains) chains.push_back({{"id", c.id}, {"fact_ids", c.fact_ids}});
  nlohmann::ordered_json questions = nlohmann::ordered_json::array();
  for (const auto& q : b.questions)
    questions.push_back({{"id", q.id},
                         {"kind", to_string(q.kind)},
                         {"text", q.text},
                         {"answer", q.answer},
                         {"fact_ids", q.fact_ids},
                         {"split", to_string(q.split)}});
  nlohmann::ordered_json config = to_json(b.config);
  config["forget_fraction"] = b.forget_fraction;
  config["seed"] = b.seed;
  return {{"version", 1}, {"config", config}, {"facts", facts}, {"chains", chains}, {"questions", questions}};
}

DatasetBundle bundle_from_json(const nlohmann::json& j) {
  DatasetBundle b;
  try {
    if (j.at("version").get<int>() != 1)
      throw Error("kbgen.bad_dataset", "unsupported dataset version");
    b.config = gen_config_from_json(j.at("config"));
    b.forget_fraction = b.config.forget_fraction;
    b.seed = b.config.seed;
    for (const auto& f : j.at("facts"))
      b.facts.push_back({f.at("id"), f.at("subject"), f.at("relation"), f.at("object")});
    for (const auto& c : j.at("chains"))
      b.chains.push_back({c.at("id"), c.at("fact_ids").get<std::vector<std::string>>()});
    for (const auto& q : j.at("questions"))
      b.questions.push_back({q.at("id"), parse_kind(q.at("kind")), q.at("text"), q.at("answer"),
                             q.at("fact_ids").get<std::vector<std::string>>(),
                             parse_split(q.at("split"))});
  } catch (const nlohmann::json::exception& e) {
    throw Error("kbgen.bad_dataset", std::string("malformed dataset file: ") + e.what());
  }
  return b;
}

std::string serialize(const DatasetBundle& bundle) { return to_json(bundle).dump(2) + "\n"; }

DatasetBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("kbgen.io", "cannot open dataset '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("kbgen.bad_dataset", "dataset '" + path + "' is not valid JSON: " + e.what());
  }
  return bundle_from_json(j);
}

void save_bundle(const DatasetBundle& bundle, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("kbgen.io", "cannot write dataset '" + path + "'");
  out << serialize(bundle);
}

}  // namespace munchlab::kbgen
