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

#include "munchlab/experiment.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "munchlab/error.hpp"
#include "munchlab/qa_format.hpp"
#include "munchlab/rng.hpp"

namespace munchlab::experiment {

namespace fs = std::filesystem;
using kbgen::QuestionKind;
using kbgen::Split;
using seqmodel::Example;
using seqmodel::TokenSequence;

namespace {

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void append(TokenSequence& a, const TokenSequence& b) { a.insert(a.end(), b.begin(), b.end()); }

nlohmann::ordered_json arch_json(const seqmodel::Arch& a) {
  return {{"embed_dim", a.embed_dim}, {"hidden_dim", a.hidden_dim}, {"layers", a.layers},
          {"context", a.context},     {"heads", a.heads}};
}

}  // namespace

std::string Paths::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() ? p : (fs::path(run_dir) / path).string();
}

void ExperimentConfig::validate() const {
  gen.validate();
  pretrain.validate();
  unlearn.validate();
  for (double f : forget_fractions)
    if (!(f > 0.0 && f < 1.0)) throw Error("experiment.invalid_config", "sweep fractions must lie in (0,1)");
  if (seeds.empty()) throw Error("experiment.invalid_config", "at least one seed is required");
  if (paths.run_dir.empty()) throw Error("experiment.invalid_config", "paths.run_dir is empty");
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      c.paths.run_dir = p.value("run_dir", c.paths.run_dir);
      c.paths.dataset = p.value("dataset", c.paths.dataset);
      c.paths.original = p.value("original", c.paths.original);
      c.paths.unlearned = p.value("unlearned", c.paths.unlearned);
      c.paths.tau = p.value("tau", c.paths.tau);
      c.paths.traces = p.value("traces", c.paths.traces);
      c.paths.reports = p.value("reports", c.paths.reports);
      c.paths.sweep = p.value("sweep", c.paths.sweep);
    }
    if (j.contains("gen")) c.gen = kbgen::gen_config_from_json(j.at("gen"));
    if (j.contains("arch")) {
      const auto& a = j.at("arch");
      c.arch.embed_dim = a.value("embed_dim", c.arch.embed_dim);
      c.arch.hidden_dim = a.value("hidden_dim", c.arch.hidden_dim);
      c.arch.layers = a.value("layers", c.arch.layers);
      c.arch.context = a.value("context", c.arch.context);
      c.arch.heads = a.value("heads", c.arch.heads);
    }
    if (j.contains("pretrain")) c.pretrain = seqmodel::train_config_from_json(j.at("pretrain"), c.pretrain);
    c.coref_contexts = j.value("coref_contexts", c.coref_contexts);
    c.init_seed = j.value("init_seed", c.init_seed);
    if (j.contains("unlearn")) c.unlearn = unlearner::unlearn_config_from_json(j.at("unlearn"), c.unlearn);
    if (j.contains("munch")) c.munch = munch::munch_config_from_json(j.at("munch"), c.munch);
    if (j.contains("forget_fractions")) c.forget_fractions = j.at("forget_fractions").get<std::vector<double>>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("sweep_methods")) {
      c.sweep_methods.clear();
      for (const auto& m : j.at("sweep_methods")) c.sweep_methods.push_back(unlearner::parse_method(m.get<std::string>()));
    }
    if (j.contains("similarity_sweep")) c.similarity_sweep = j.at("similarity_sweep").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("experiment.invalid_config", std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["paths"] = {{"run_dir", c.paths.run_dir},     {"dataset", c.paths.dataset}, {"original", c.paths.original},
                {"unlearned", c.paths.unlearned}, {"tau", c.paths.tau},         {"traces", c.paths.traces},
                {"reports", c.paths.reports},     {"sweep", c.paths.sweep}};
  j["gen"] = kbgen::to_json(c.gen);
  j["arch"] = arch_json(c.arch);
  j["pretrain"] = seqmodel::to_json(c.pretrain);
  j["coref_contexts"] = c.coref_contexts;
  j["init_seed"] = c.init_seed;
  j["unlearn"] = unlearner::to_json(c.unlearn);
  j["munch"] = munch::to_json(c.munch);
  j["forget_fractions"] = c.forget_fractions;
  j["seeds"] = c.seeds;
  auto& m = j["sweep_methods"] = nlohmann::ordered_json::array();
  for (auto x : c.sweep_methods) m.push_back(unlearner::to_string(x));
  j["similarity_sweep"] = c.similarity_sweep;
  return j;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("experiment.missing_config", "cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("experiment.invalid_config", "config '" + path + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

// ------------------------------------------------------------------ corpus

seqmodel::Vocabulary corpus_vocabulary(const kbgen::DatasetBundle& bundle, const ExperimentConfig& config) {
  std::vector<std::string> texts;
  for (const auto& q : bundle.questions) {
    texts.push_back(q.text);
    texts.push_back(q.answer);
  }
  for (const auto& f : bundle.facts) {
    const auto& rel = bundle.config.relation(f.relation);
    texts.push_back(kbgen::fill_template(rel.statement_template, f.subject, f.object));
    texts.push_back(f.subject);
  }
  for (const auto& r : bundle.config.relations) texts.push_back(r.coref_template);
  for (const auto& r : config.unlearn.rejection_pool) texts.push_back(r);
  texts.push_back(config.munch.rejection_text);
  return seqmodel::Vocabulary::build(texts);
}

std::vector<Example> pretraining_corpus(const kbgen::DatasetBundle& bundle, const seqmodel::Vocabulary& vocab,
                                        std::size_t coref_contexts, std::uint64_t seed) {
  const auto& facts = bundle.facts;
  std::map<std::string, std::vector<std::size_t>> by_object;
  for (std::size_t i = 0; i < facts.size(); ++i) by_object[facts[i].object].push_back(i);
  std::set<std::pair<std::string, std::string>> chain_pairs;
  for (const auto& ch : bundle.chains)
    for (std::size_t k = 0; k + 1 < ch.fact_ids.size(); ++k) chain_pairs.insert({ch.fact_ids[k], ch.fact_ids[k + 1]});

  auto question = [&](std::size_t i) {
    return kbgen::fill_template(bundle.config.relation(facts[i].relation).question_template, facts[i].subject);
  };
  auto coref = [&](std::size_t i) { return bundle.config.relation(facts[i].relation).coref_template; };
  // Facts whose object is the subject of fact i, excluding pairs that some
  // chain uses, so no chain is ever seen hop by hop.
  auto antecedents = [&](std::size_t i) {
    std::vector<std::size_t> out;
    const auto it = by_object.find(facts[i].subject);
    if (it == by_object.end()) return out;
    for (std::size_t g : it->second)
      if (!chain_pairs.count({facts[g].id, facts[i].id})) out.push_back(g);
    return out;
  };
  auto exchange = [&](std::size_t g) {
    TokenSequence t = vocab.tokenize(question(g));
    t.push_back(seqmodel::kSep);
    append(t, vocab.tokenize(facts[g].object));
    t.push_back(seqmodel::kSep);
    return t;
  };

  std::vector<Example> corpus;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const auto& f = facts[i];
    const auto target = qa_target(vocab, f.object);
    corpus.push_back({qa_prompt(vocab, question(i)), target});

    const auto& stmt = bundle.config.relation(f.relation).statement_template;
    const auto cut = stmt.find("{o}");
    corpus.push_back({qa_prompt(vocab, kbgen::fill_template(stmt.substr(0, cut), f.subject)), target});

    Rng rng(seed + i);
    const auto gs = antecedents(i);
    for (std::size_t k = 0; k < coref_contexts; ++k) {
      TokenSequence p{seqmodel::kBos};
      if (gs.empty()) {
        append(p, vocab.tokenize(f.subject));
        p.push_back(seqmodel::kSep);
      } else {
        const std::size_t g = gs[rng.uniform_index(gs.size())];
        TokenSequence ctx = exchange(g);
        if (k % 2 == 1) {
          const auto hs = antecedents(g);
          if (!hs.empty()) {
            ctx = exchange(hs[rng.uniform_index(hs.size())]);
            append(ctx, vocab.tokenize(coref(g)));
            ctx.push_back(seqmodel::kSep);
            append(ctx, vocab.tokenize(facts[g].object));
            ctx.push_back(seqmodel::kSep);
          }
        }
        append(p, ctx);
      }
      append(p, vocab.tokenize(coref(i)));
      corpus.push_back({std::move(p), target});
    }
  }
  for (const auto& q : bundle.questions)
    if (q.kind == QuestionKind::multi_hop) corpus.push_back(qa_example(vocab, q.text, q.answer));
  return corpus;
}

seqmodel::ModelCheckpoint pretrain(const ExperimentConfig& config, const kbgen::DatasetBundle& bundle,
                                   const Log& log) {
  auto vocab = corpus_vocabulary(bundle, config);
  const auto corpus = pretraining_corpus(bundle, vocab, config.coref_contexts, config.pretrain.seed);
  seqmodel::Arch arch = config.arch;
  arch.vocab_size = vocab.size();
  say(log, "pretraining on " + std::to_string(corpus.size()) + " examples, vocabulary " +
               std::to_string(vocab.size()));
  const auto init = seqmodel::init_checkpoint(arch, std::move(vocab), config.init_seed);
  return seqmodel::fit(init, corpus, config.pretrain, nullptr, [&](std::size_t epoch, double loss) {
    say(log, "epoch " + std::to_string(epoch) + " loss " + fmt("%.4f", loss));
  });
}

kbgen::DatasetBundle resplit(const kbgen::DatasetBundle& base, double forget_fraction, std::uint64_t seed) {
  auto b = kbgen::split_dataset(base.questions, forget_fraction, seed, base.config.retain_ratio);
  b.config = base.config;
  b.config.forget_fraction = forget_fraction;
  b.facts = base.facts;
  b.chains = base.chains;
  b.seed = seed;
  return b;
}

unlearner::UnlearnResult unlearn(const ExperimentConfig& config, const kbgen::DatasetBundle& bundle,
                                 const seqmodel::ModelCheckpoint& original, const Log& log) {
  const auto data = unlearner::unlearning_data(bundle, original.vocab);
  say(log, std::string("unlearning with ") + method_label(config.unlearn.method, config.unlearn.with_retain) + " on " +
               std::to_string(data.forget.size()) + " forget items");
  auto r = unlearner::run_unlearning(original, data, config.unlearn);
  for (std::size_t e = 0; e < r.monitor.size(); ++e)
    say(log, "epoch " + std::to_string(e) + " retain_valid lm " + fmt("%.4f", r.monitor[e]));
  if (r.early_stopped) say(log, "early stopped after " + std::to_string(r.epochs_run) + " epochs");
  if (r.diverged) say(log, "diverged: " + r.divergence);
  return r;
}

// ------------------------------------------------------------- calibration

CalibrationRun calibrate(const ExperimentConfig& config, const kbgen::DatasetBundle& bundle,
                         const seqmodel::ModelCheckpoint& original, const seqmodel::ModelCheckpoint& unlearned) {
  const auto memory = munch::ForgetMemory::from_bundle(bundle, config.munch.similarity_threshold);
  const auto f = evalsuite::prepare_multi_hop(bundle, Split::forget, original, unlearned, memory, config.munch);
  const auto r = evalsuite::prepare_multi_hop(bundle, Split::retain_valid, original, unlearned, memory, config.munch);
  CalibrationRun c;
  c.forget_scores = f.max_scores();
  c.retain_scores = r.max_scores();
  c.calibration = munch::calibrate_threshold(c.forget_scores, c.retain_scores);
  c.score_mode = munch::to_string(config.munch.score_mode);
  auto rate = [](const evalsuite::PreparedMultiHop& p, double t) {
    if (p.runs.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& run : p.runs)
      n += std::any_of(run.retrievals.begin(), run.retrievals.end(),
                       [&](const munch::Retrieval& x) { return x.entry && x.similarity >= t; });
    return static_cast<double>(n) / static_cast<double>(p.runs.size());
  };
  for (double t : config.similarity_sweep) c.gate_rates.push_back({t, rate(f, t), rate(r, t)});
  return c;
}

nlohmann::ordered_json to_json(const CalibrationRun& c) {
  auto j = munch::to_json(c.calibration);
  j["score_mode"] = c.score_mode;
  j["n_forget"] = c.forget_scores.size();
  j["n_retain_valid"] = c.retain_scores.size();
  auto& g = j["gate_rates"] = nlohmann::ordered_json::array();
  for (const auto& r : c.gate_rates)
    g.push_back({{"similarity_threshold", r.threshold}, {"forget_rate", r.forget_rate}, {"retain_valid_rate", r.retain_rate}});
  return j;
}

double read_tau(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("experiment.missing_tau", "no calibration artifact at '" + path + "'; run calibrate first");
  try {
    const auto j = nlohmann::json::parse(in);
    return j.at("tau").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("experiment.missing_tau", "calibration artifact '" + path + "' has no tau: " + e.what());
  }
}

// -------------------------------------------------------------------- sweep

std::string method_label(unlearner::Method m, bool with_retain) {
  std::string s = unlearner::to_string(m);
  std::transform(s.begin(), s.end(), s.begin(), ::toupper);
  return with_retain ? s + "+RT" : s;
}

namespace {

struct AggKey {
  double fraction;
  std::string method;
  std::string pipeline;
};

}  // namespace

std::string per_seed_tsv(const std::vector<SweepRow>& rows) {
  std::string out = "seed\tforget_fraction\t" + evalsuite::tsv_header();
  for (const auto& r : rows) {
    std::istringstream lines(evalsuite::tsv_rows(r.report));
    for (std::string line; std::getline(lines, line);)
      out += std::to_string(r.seed) + "\t" + fmt("%.2f", r.forget_fraction) + "\t" + line + "\n";
  }
  return out;
}

std::string aggregate_tsv(const std::vector<SweepRow>& rows) {
  // Keys in first-seen order so the layout follows the sweep loop.
  std::vector<AggKey> keys;
  std::vector<std::vector<const evalsuite::MetricsReport*>> groups;
  for (const auto& r : rows) {
    const std::string pipe = evalsuite::to_string(r.report.pipeline);
    std::size_t k = 0;
    while (k < keys.size() && !(keys[k].fraction == r.forget_fraction && keys[k].method == r.report.method &&
                                keys[k].pipeline == pipe))
      ++k;
    if (k == keys.size()) {
      keys.push_back({r.forget_fraction, r.report.method, pipe});
      groups.emplace_back();
    }
    groups[k].push_back(&r.report);
  }
  std::string out = "forget_fraction\tmethod\tpipeline\tseeds";
  const std::pair<Split, const char*> splits[] = {{Split::forget, "forget"}, {Split::retain_test, "retain"}};
  const std::pair<QuestionKind, const char*> kinds[] = {{QuestionKind::single_hop, "single"},
                                                        {QuestionKind::multi_hop, "multi"}};
  for (const char* metric : {"PA", "RL"})
    for (const auto& [s, sn] : splits)
      for (const auto& [k, kn] : kinds) out += std::string("\t") + sn + "_" + kn + "_" + metric;
  out += "\n";
  for (std::size_t g = 0; g < keys.size(); ++g) {
    out += fmt("%.2f", keys[g].fraction) + "\t" + keys[g].method + "\t" + keys[g].pipeline + "\t" +
           std::to_string(groups[g].size());
    for (int metric = 0; metric < 2; ++metric)
      for (const auto& [s, sn] : splits)
        for (const auto& [k, kn] : kinds) {
          double sum = 0;
          for (const auto* rep : groups[g]) {
            const auto& c = rep->at(s, k);
            sum += metric == 0 ? c.pa : c.rl;
          }
          out += "\t" + fmt("%.1f", sum / static_cast<double>(groups[g].size()));
        }
    out += "\n";
  }
  return out;
}

SweepResult sweep(const ExperimentConfig& config, const kbgen::DatasetBundle& base,
                  const seqmodel::ModelCheckpoint& original, const std::string& out_dir, const Log& log) {
  SweepResult res;
  for (std::uint64_t seed : config.seeds) {
    for (double fraction : config.forget_fractions) {
      const auto bundle = resplit(base, fraction, seed);
      const std::string dir = (fs::path(out_dir) / ("seed-" + std::to_string(seed)) / ("fraction-" + fmt("%.2f", fraction))).string();
      say(log, "seed " + std::to_string(seed) + " fraction " + fmt("%.2f", fraction));

      auto record = [&](evalsuite::EvalResult r, const std::string& sub) {
        write_text(dir + "/" + sub + "/report-" + evalsuite::to_string(r.report.pipeline) + ".json",
                   to_json(r.report).dump(2) + "\n");
        res.rows.push_back({seed, fraction, std::move(r.report)});
      };

      evalsuite::EvalInputs in;
      in.bundle = &bundle;
      in.original = &original;
      in.evaluated = &original;
      in.method = "Original";
      in.munch_config = config.munch;
      record(evalsuite::evaluate(in), "original");

      const auto memory = munch::ForgetMemory::from_bundle(bundle, config.munch.similarity_threshold);
      for (auto method : config.sweep_methods) {
        ExperimentConfig c = config;
        c.unlearn.method = method;
        c.unlearn.with_retain = true;
        c.unlearn.train.seed = seed;
        const auto label = method_label(method, true);
        const auto ul = unlearn(c, bundle, original, log);
        const std::string sub = label;
        write_text(dir + "/" + sub + "/unlearn.json",
                   nlohmann::ordered_json{{"epochs_run", ul.epochs_run},
                                          {"early_stopped", ul.early_stopped},
                                          {"diverged", ul.diverged},
                                          {"monitor", ul.monitor}}
                           .dump(2) +
                       "\n");
        in.evaluated = &ul.checkpoint;
        in.method = label;
        in.pipeline = evalsuite::Pipeline::raw;
        in.tau.reset();
        in.memory = &memory;
        record(evalsuite::evaluate(in), sub);

        const auto cal = calibrate(c, bundle, original, ul.checkpoint);
        write_text(dir + "/" + sub + "/calibration.json", to_json(cal).dump(2) + "\n");
        in.pipeline = evalsuite::Pipeline::munch;
        in.tau = cal.calibration.tau;
        record(evalsuite::evaluate(in), sub);
        in.pipeline = evalsuite::Pipeline::mello;
        in.tau.reset();
        record(evalsuite::evaluate(in), sub);
      }
    }
  }
  res.per_seed_tsv = per_seed_tsv(res.rows);
  res.aggregate_tsv = aggregate_tsv(res.rows);
  write_text(out_dir + "/per_seed.tsv", res.per_seed_tsv);
  write_text(out_dir + "/aggregate.tsv", res.aggregate_tsv);
  return res;
}

// ---------------------------------------------------------------- artifacts

void write_text(const std::string& path, const std::string& content) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("experiment.io", "cannot write '" + path + "'");
  out << content;
  if (!out) throw Error("experiment.io", "write to '" + path + "' failed");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("experiment.io", "cannot read '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::uint32_t file_crc32(const std::string& path) {
  const auto data = read_text(path);
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

void write_manifest(const std::string& run_dir) {
  std::vector<std::string> files;
  if (fs::exists(run_dir))
    for (const auto& e : fs::recursive_directory_iterator(run_dir))
      if (e.is_regular_file()) {
        const auto rel = fs::relative(e.path(), run_dir).generic_string();
        if (rel != "manifest.json") files.push_back(rel);
      }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json j;
  auto& arr = j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& f : files) {
    const auto full = (fs::path(run_dir) / f).string();
    char crc[16];
    std::snprintf(crc, sizeof(crc), "%08x", file_crc32(full));
    arr.push_back({{"path", f}, {"bytes", fs::file_size(full)}, {"crc32", crc}});
  }
  write_text((fs::path(run_dir) / "manifest.json").string(), j.dump(2) + "\n");
}

}  // namespace munchlab::experiment
