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

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "httplib.h"
#include "munchlab/error.hpp"
#include "munchlab/qa_format.hpp"

namespace munchlab::munch {
namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

// Splits after every '?' and trims the pieces.
std::vector<std::string> split_questions(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    cur += c;
    if (c == '?') {
      out.push_back(trim(cur));
      cur.clear();
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

// True when text matches tmpl with {s} bound to a non-empty string.
bool matches_subject_template(const std::string& tmpl, const std::string& text) {
  const auto pos = tmpl.find("{s}");
  if (pos == std::string::npos) return tmpl == text;
  const std::string pre = tmpl.substr(0, pos), post = tmpl.substr(pos + 3);
  return text.size() > pre.size() + post.size() && text.compare(0, pre.size(), pre) == 0 &&
         text.compare(text.size() - post.size(), post.size(), post) == 0;
}

}  // namespace

// ------------------------------------------------------------ decomposition

DecomposedQuestion decompose_template(const kbgen::QAItem& item,
                                      const std::vector<kbgen::RelationSpec>& relations) {
  if (item.kind != kbgen::QuestionKind::multi_hop)
    throw Error("munch.decomposition_invalid", "item " + item.id + " is not a multi-hop question");
  DecomposedQuestion dq{item.id, split_questions(item.text), "template"};
  if (dq.subquestions.empty())
    throw Error("munch.decomposition_invalid", "item " + item.id + " has no question text");
  const bool head_ok = std::any_of(relations.begin(), relations.end(), [&](const kbgen::RelationSpec& r) {
    return matches_subject_template(r.question_template, dq.subquestions[0]);
  });
  if (!head_ok)
    throw Error("munch.decomposition_invalid",
                "item " + item.id + ": '" + dq.subquestions[0] + "' matches no question template");
  for (std::size_t i = 1; i < dq.subquestions.size(); ++i) {
    const bool ok = std::any_of(relations.begin(), relations.end(), [&](const kbgen::RelationSpec& r) {
      return r.coref_template == dq.subquestions[i];
    });
    if (!ok)
      throw Error("munch.decomposition_invalid",
                  "item " + item.id + ": '" + dq.subquestions[i] + "' matches no coreference template");
  }
  validate_decomposition(dq, item);
  return dq;
}

void validate_decomposition(const DecomposedQuestion& dq, const kbgen::QAItem& item) {
  if (dq.subquestions.size() != item.fact_ids.size())
    throw Error("munch.decomposition_invalid",
                "item " + item.id + ": " + std::to_string(dq.subquestions.size()) +
                    " subquestions for a " + std::to_string(item.fact_ids.size()) + "-hop chain");
  for (const auto& s : dq.subquestions)
    if (trim(s).empty()) throw Error("munch.decomposition_invalid", "item " + item.id + ": empty subquestion");
}

std::string decomposer_request(const std::string& id, const std::string& question) {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["question"] = question;
  return j.dump();
}

std::vector<std::string> parse_decomposer_reply(const std::string& line, const std::string& expected_id) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw Error("munch.protocol", "decomposer reply is not JSON: '" + line + "'");
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("subquestions") ||
      !j["subquestions"].is_array())
    throw Error("munch.protocol", "decomposer reply lacks id/subquestions: '" + line + "'");
  if (j["id"].get<std::string>() != expected_id)
    throw Error("munch.protocol", "decomposer replied for id '" + j["id"].get<std::string>() +
                                      "' while '" + expected_id + "' was pending");
  std::vector<std::string> out;
  for (const auto& s : j["subquestions"]) {
    if (!s.is_string()) throw Error("munch.protocol", "subquestions must be strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

namespace {

class ProcessDecomposer : public Decomposer {
 public:
  explicit ProcessDecomposer(const std::string& command) {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0)
      throw Error("munch.protocol", "cannot create pipes for decomposer");
    pid_ = fork();
    if (pid_ < 0) throw Error("munch.protocol", "cannot fork decomposer");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    out_ = fdopen(to_child[1], "w");
    in_ = fdopen(from_child[0], "r");
    signal(SIGPIPE, SIG_IGN);
  }

  ~ProcessDecomposer() override {
    if (out_) fclose(out_);
    if (in_) fclose(in_);
    if (pid_ > 0) waitpid(pid_, nullptr, 0);
  }

  std::vector<std::string> decompose(const std::string& id, const std::string& question) override {
    const std::string req = decomposer_request(id, question) + "\n";
    if (std::fputs(req.c_str(), out_) < 0 || std::fflush(out_) != 0)
      throw Error("munch.protocol", "decomposer process closed its input");
    std::string line;
    int c;
    while ((c = std::fgetc(in_)) != EOF && c != '\n') line += static_cast<char>(c);
    if (line.empty() && c == EOF) throw Error("munch.protocol", "decomposer process exited without replying");
    return parse_decomposer_reply(line, id);
  }

 private:
  pid_t pid_ = -1;
  FILE* out_ = nullptr;
  FILE* in_ = nullptr;
};

class HttpDecomposer : public Decomposer {
 public:
  explicit HttpDecomposer(const std::string& url) {
    // scheme://host[:port]/path
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error("munch.protocol", "bad decomposer URL '" + url + "'");
    const auto path_start = url.find('/', scheme_end + 3);
    base_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  }

  std::vector<std::string> decompose(const std::string& id, const std::string& question) override {
    httplib::Client cli(base_);
    auto res = cli.Post(path_, decomposer_request(id, question), "application/json");
    if (!res) throw Error("munch.protocol", "HTTP decomposer at " + base_ + path_ + " is unreachable");
    if (res->status != 200)
      throw Error("munch.protocol", "HTTP decomposer returned status " + std::to_string(res->status));
    return parse_decomposer_reply(trim(res->body), id);
  }

 private:
  std::string base_, path_;
};

}  // namespace

std::unique_ptr<Decomposer> make_process_decomposer(const std::string& command) {
  return std::make_unique<ProcessDecomposer>(command);
}

std::unique_ptr<Decomposer> make_http_decomposer(const std::string& url) {
  return std::make_unique<HttpDecomposer>(url);
}

DecomposedQuestion decompose_external(const kbgen::QAItem& item, Decomposer& decomposer) {
  DecomposedQuestion dq{item.id, decomposer.decompose(item.id, item.text), "external"};
  validate_decomposition(dq, item);
  return dq;
}

// ---------------------------------------------------------------- answering

TokenSequence hop_prompt(const seqmodel::Vocabulary& vocab, const std::vector<std::string>& subquestions,
                         const std::vector<TokenSequence>& previous_answers, std::size_t hop,
                         std::size_t context, std::size_t reserve, std::size_t* dropped) {
  std::size_t first = 0;
  while (true) {
    TokenSequence p{seqmodel::kBos};
    for (std::size_t i = first; i <= hop; ++i) {
      const auto q = vocab.tokenize(subquestions[i]);
      p.insert(p.end(), q.begin(), q.end());
      if (i < hop) {
        p.push_back(seqmodel::kSep);
        p.insert(p.end(), previous_answers[i].begin(), previous_answers[i].end());
        p.push_back(seqmodel::kSep);
      }
    }
    if (p.size() + reserve <= context || first == hop) {
      if (dropped) *dropped = first;
      if (p.size() > context) p.erase(p.begin() + 1, p.begin() + 1 + static_cast<std::ptrdiff_t>(p.size() - context));
      return p;
    }
    ++first;
  }
}

std::vector<HopAnswer> answer_subquestions(const ModelCheckpoint& original, const DecomposedQuestion& dq,
                                           std::size_t max_answer_tokens) {
  if (original.tag != seqmodel::CheckpointTag::original)
    throw Error("munch.bad_input", std::string("hop answers must come from the original checkpoint, got ") +
                                       seqmodel::to_string(original.tag));
  std::vector<HopAnswer> out;
  std::vector<TokenSequence> prev;
  for (std::size_t i = 0; i < dq.subquestions.size(); ++i) {
    HopAnswer a;
    a.index = i;
    a.prompt = hop_prompt(original.vocab, dq.subquestions, prev, i, original.arch.context, 1, &a.dropped_hops);
    const std::size_t room = original.arch.context - std::min(original.arch.context, a.prompt.size() - 1);
    a.token_ids = seqmodel::greedy_decode(original, a.prompt, std::min(max_answer_tokens, room));
    a.text = original.vocab.detokenize(a.token_ids);
    prev.push_back(a.token_ids);
    out.push_back(std::move(a));
  }
  return out;
}

const char* to_string(ScoreMode m) { return m == ScoreMode::mean ? "mean" : "sum"; }

ScoreMode parse_score_mode(const std::string& s) {
  if (s == "mean") return ScoreMode::mean;
  if (s == "sum") return ScoreMode::sum;
  throw Error("munch.invalid_config", "score mode must be 'mean' or 'sum', got '" + s + "'");
}

double hop_score(const ModelCheckpoint& unlearned, const HopAnswer& answer, ScoreMode mode) {
  if (answer.token_ids.empty()) return kInfiniteScore;
  const double nll = seqmodel::sequence_nll(unlearned, answer.prompt, answer.token_ids).value;
  return mode == ScoreMode::mean ? nll / static_cast<double>(answer.token_ids.size()) : nll;
}

std::vector<double> uncertainty_scores(const ModelCheckpoint& unlearned, const std::vector<HopAnswer>& answers,
                                       ScoreMode mode) {
  std::vector<double> s;
  for (const auto& a : answers) s.push_back(hop_score(unlearned, a, mode));
  return s;
}

// -------------------------------------------------------------- calibration

double balanced_error(const std::vector<double>& forget, const std::vector<double>& retain, double tau) {
  const double miss = static_cast<double>(std::count_if(forget.begin(), forget.end(), [&](double s) { return !(s > tau); }));
  const double fr = static_cast<double>(std::count_if(retain.begin(), retain.end(), [&](double s) { return s > tau; }));
  return 0.5 * (miss / static_cast<double>(forget.size()) + fr / static_cast<double>(retain.size()));
}

Calibration calibrate_threshold(const std::vector<double>& forget_scores,
                                const std::vector<double>& retain_scores, std::size_t bins) {
  if (forget_scores.empty() || retain_scores.empty())
    throw Error("munch.calibration", "calibration needs non-empty forget and retain score lists");
  std::vector<double> pooled;
  for (double s : forget_scores)
    if (std::isfinite(s)) pooled.push_back(s);
  for (double s : retain_scores)
    if (std::isfinite(s)) pooled.push_back(s);
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

  Calibration c;
  if (pooled.size() <= 1) {
    c.degenerate = true;
    c.tau = pooled.empty() ? 0.0 : pooled[0];
    c.balanced_error = balanced_error(forget_scores, retain_scores, c.tau);
  } else {
    c.balanced_error = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < pooled.size(); ++i) {
      const double mid = 0.5 * (pooled[i] + pooled[i + 1]);
      const double e = balanced_error(forget_scores, retain_scores, mid);
      if (e < c.balanced_error) {
        c.balanced_error = e;
        c.tau = mid;
      }
    }
  }
  c.forget_miss_rate = static_cast<double>(std::count_if(forget_scores.begin(), forget_scores.end(),
                                                         [&](double s) { return !(s > c.tau); })) /
                       static_cast<double>(forget_scores.size());
  c.retain_reject_rate = static_cast<double>(std::count_if(retain_scores.begin(), retain_scores.end(),
                                                           [&](double s) { return s > c.tau; })) /
                         static_cast<double>(retain_scores.size());
  c.inseparable = c.balanced_error >= 0.5;

  if (!pooled.empty() && bins > 0) {
    const double lo = pooled.front(), hi = pooled.back();
    const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
    c.density.resize(bins);
    for (std::size_t b = 0; b < bins; ++b) {
      c.density[b].left = lo + width * static_cast<double>(b);
      c.density[b].right = b + 1 == bins && hi > lo ? hi : lo + width * static_cast<double>(b + 1);
    }
    auto fill = [&](const std::vector<double>& scores, bool forget) {
      std::size_t n = 0;
      for (double s : scores)
        if (std::isfinite(s)) ++n;
      if (n == 0) return;
      for (double s : scores) {
        if (!std::isfinite(s)) continue;
        auto b = static_cast<std::size_t>(std::floor((s - lo) / width));
        b = std::min(b, bins - 1);
        (forget ? c.density[b].forget_density : c.density[b].retain_density) +=
            1.0 / (static_cast<double>(n) * width);
      }
    };
    fill(forget_scores, true);
    fill(retain_scores, false);
  }
  return c;
}

nlohmann::ordered_json to_json(const Calibration& c) {
  nlohmann::ordered_json j;
  j["tau"] = c.tau;
  j["balanced_error"] = c.balanced_error;
  j["forget_miss_rate"] = c.forget_miss_rate;
  j["retain_reject_rate"] = c.retain_reject_rate;
  j["degenerate"] = c.degenerate;
  j["inseparable"] = c.inseparable;
  return j;
}

std::string density_tsv(const Calibration& c) {
  std::ostringstream out;
  out << "bin_left\tbin_right\tforget_density\tretain_density\n";
  char buf[128];
  for (const auto& b : c.density) {
    std::snprintf(buf, sizeof(buf), "%.6f\t%.6f\t%.6f\t%.6f\n", b.left, b.right, b.forget_density,
                  b.retain_density);
    out << buf;
  }
  return out.str();
}

// ----------------------------------------------------------------- retrieval

double trigram_cosine(const std::string& a, const std::string& b) {
  auto grams = [](const std::string& s) {
    std::map<std::string, double> g;
    const std::string l = lower(s);
    if (l.empty()) return g;
    if (l.size() < 3) {
      g[l] += 1.0;
      return g;
    }
    for (std::size_t i = 0; i + 3 <= l.size(); ++i) g[l.substr(i, 3)] += 1.0;
    return g;
  };
  const auto ga = grams(a), gb = grams(b);
  if (ga.empty() || gb.empty()) return 0.0;
  double dot = 0, na = 0, nb = 0;
  for (const auto& [k, v] : ga) {
    na += v * v;
    const auto it = gb.find(k);
    if (it != gb.end()) dot += v * it->second;
  }
  for (const auto& [k, v] : gb) nb += v * v;
  return dot / std::sqrt(na * nb);
}

ForgetMemory ForgetMemory::from_bundle(const kbgen::DatasetBundle& bundle, double threshold) {
  ForgetMemory m;
  m.similarity_threshold = threshold;
  for (const auto* q : bundle.select(kbgen::QuestionKind::single_hop, kbgen::Split::forget))
    m.entries.push_back({q->text, q->answer});
  return m;
}

Retrieval retrieval_gate(const std::string& subquestion, const ForgetMemory& memory) {
  Retrieval r;
  for (std::size_t i = 0; i < memory.entries.size(); ++i) {
    const double s = memory.similarity(subquestion, memory.entries[i].question);
    if (!r.entry || s > r.similarity) {
      r.similarity = s;
      r.entry = i;
    }
  }
  r.hit = r.entry.has_value() && r.similarity >= memory.similarity_threshold;
  return r;
}

std::string resolve_subquestion(const std::string& subquestion, const std::string& previous_answer,
                                const std::vector<kbgen::RelationSpec>& relations) {
  for (const auto& r : relations)
    if (r.coref_template == subquestion) return kbgen::fill_template(r.question_template, previous_answer);
  return subquestion;
}

// ------------------------------------------------------------------ decision

const char* to_string(Verdict v) { return v == Verdict::answer ? "answer" : "reject"; }

Verdict decide(const std::vector<bool>& gate_hits, const std::vector<std::optional<double>>& scores, double tau) {
  for (bool h : gate_hits)
    if (h) return Verdict::reject;
  for (const auto& s : scores)
    if (s && *s > tau) return Verdict::reject;
  return Verdict::answer;
}

nlohmann::ordered_json to_json(const DecisionTrace& t) {
  nlohmann::ordered_json j;
  j["question_id"] = t.question_id;
  j["subquestions"] = t.subquestions;
  j["resolved_subquestions"] = t.resolved_subquestions;
  j["hop_answers"] = t.hop_answers;
  auto& sc = j["scores"] = nlohmann::ordered_json::array();
  for (const auto& s : t.scores) {
    if (!s) sc.push_back(nullptr);
    else if (std::isinf(*s)) sc.push_back("inf");
    else sc.push_back(*s);
  }
  j["gate_hits"] = t.gate_hits;
  j["similarities"] = t.similarities;
  j["tau"] = t.tau ? nlohmann::ordered_json(*t.tau) : nlohmann::ordered_json();
  j["verdict"] = to_string(t.verdict);
  j["final_text"] = t.final_text;
  j["dropped_hops"] = t.dropped_hops;
  return j;
}

nlohmann::ordered_json to_json(const MunchConfig& c) {
  return {{"score_mode", to_string(c.score_mode)},
          {"similarity_threshold", c.similarity_threshold},
          {"rejection_text", c.rejection_text},
          {"max_answer_tokens", c.max_answer_tokens},
          {"use_gate", c.use_gate},
          {"decomposer", c.decomposer},
          {"decomposer_endpoint", c.decomposer_endpoint}};
}

MunchConfig munch_config_from_json(const nlohmann::json& j, MunchConfig c) {
  try {
    if (j.contains("score_mode")) c.score_mode = parse_score_mode(j.at("score_mode").get<std::string>());
    c.similarity_threshold = j.value("similarity_threshold", c.similarity_threshold);
    c.rejection_text = j.value("rejection_text", c.rejection_text);
    c.max_answer_tokens = j.value("max_answer_tokens", c.max_answer_tokens);
    c.use_gate = j.value("use_gate", c.use_gate);
    c.decomposer = j.value("decomposer", c.decomposer);
    c.decomposer_endpoint = j.value("decomposer_endpoint", c.decomposer_endpoint);
  } catch (const nlohmann::json::exception& e) {
    throw Error("munch.invalid_config", e.what());
  }
  if (!(c.similarity_threshold >= 0.0 && c.similarity_threshold <= 1.0))
    throw Error("munch.invalid_config", "similarity_threshold must lie in [0, 1]");
  if (c.decomposer != "template" && c.decomposer != "process" && c.decomposer != "http")
    throw Error("munch.invalid_config", "decomposer must be template, process or http");
  if (c.decomposer != "template" && c.decomposer_endpoint.empty())
    throw Error("munch.invalid_config", "external decomposer needs decomposer_endpoint");
  return c;
}

QuestionRun prepare_question(const DecomposedQuestion& dq, const ModelCheckpoint& original,
                             const ModelCheckpoint& unlearned, const ForgetMemory& memory,
                             const std::vector<kbgen::RelationSpec>& relations, const MunchConfig& config) {
  QuestionRun run;
  run.dq = dq;
  run.answers = answer_subquestions(original, dq, config.max_answer_tokens);
  for (std::size_t i = 0; i < dq.subquestions.size(); ++i) {
    run.resolved.push_back(i == 0 ? dq.subquestions[0]
                                  : resolve_subquestion(dq.subquestions[i], run.answers[i - 1].text, relations));
    run.retrievals.push_back(retrieval_gate(run.resolved.back(), memory));
    const double s = hop_score(unlearned, run.answers[i], config.score_mode);
    run.all_scores.push_back(s);
    const bool gated = config.use_gate && run.retrievals.back().hit;
    run.scores.push_back(gated ? std::nullopt : std::optional<double>(s));
  }
  return run;
}

namespace {

DecisionTrace base_trace(const QuestionRun& run) {
  DecisionTrace t;
  t.question_id = run.dq.source_id;
  t.subquestions = run.dq.subquestions;
  t.resolved_subquestions = run.resolved;
  for (const auto& a : run.answers) {
    t.hop_answers.push_back(a.text);
    t.dropped_hops = std::max(t.dropped_hops, a.dropped_hops);
  }
  for (const auto& r : run.retrievals) t.similarities.push_back(r.similarity);
  return t;
}

}  // namespace

DecisionTrace munch_decision(const QuestionRun& run, double tau, const MunchConfig& config) {
  DecisionTrace t = base_trace(run);
  for (const auto& r : run.retrievals) t.gate_hits.push_back(config.use_gate && r.hit);
  t.scores = run.scores;
  t.tau = tau;
  t.verdict = decide(t.gate_hits, t.scores, tau);
  t.final_text = t.verdict == Verdict::reject ? config.rejection_text
                 : run.answers.empty()        ? std::string()
                                              : run.answers.back().text;
  return t;
}

DecisionTrace mello_baseline(const QuestionRun& run, const ForgetMemory& memory, const MunchConfig& config) {
  DecisionTrace t = base_trace(run);
  t.verdict = Verdict::answer;
  for (std::size_t i = 0; i < run.answers.size(); ++i) {
    const auto& r = run.retrievals[i];
    const bool same = r.entry && lower(run.answers[i].text) == lower(memory.entries[*r.entry].answer);
    t.gate_hits.push_back(same);
    t.scores.push_back(std::nullopt);
    if (same) t.verdict = Verdict::reject;
  }
  t.final_text = t.verdict == Verdict::reject ? config.rejection_text
                 : run.answers.empty()        ? std::string()
                                              : run.answers.back().text;
  return t;
}

}  // namespace munchlab::munch
