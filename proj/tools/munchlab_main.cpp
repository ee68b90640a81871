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

// munchlab: command-line driver for the unlearning experiments.
//
//   munchlab gen-data  --config c.json [--out dataset.json]
//   munchlab train     --config c.json
//   munchlab unlearn   --config c.json --method npo --no-retain
//   munchlab calibrate --config c.json
//   munchlab run-munch --config c.json [--pipeline mello]
//   munchlab eval      --config c.json --pipeline munch
//   munchlab report    --config c.json
//   munchlab sweep     --config c.json
//
// Failures print {"error": <code>, "message": ...} on stderr.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "munchlab/error.hpp"
#include "munchlab/evalsuite.hpp"
#include "munchlab/experiment.hpp"
#include "munchlab/kbgen.hpp"
#include "munchlab/munch.hpp"
#include "munchlab/seqmodel.hpp"
#include "munchlab/unlearner.hpp"

namespace fs = std::filesystem;
using namespace munchlab;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string method;
  std::optional<bool> retain;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<double> forget_fraction;
  std::string pipeline = "raw";
  std::string tau_file;
  std::optional<std::uint64_t> seed;
  std::string checkpoint = "unlearned";
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

const std::string& with_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  return path;
}

// Flags beat MUNCHLAB_SEED, which beats the config file.
experiment::ExperimentConfig load(const Flags& f) {
  auto c = experiment::load_experiment_config(f.config);
  std::optional<std::uint64_t> seed = f.seed;
  if (!seed) {
    if (const char* env = std::getenv("MUNCHLAB_SEED")) {
      try {
        std::size_t used = 0;
        seed = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw Error("cli.invalid_seed", std::string("MUNCHLAB_SEED must be an integer, got '") + env + "'");
      }
    }
  }
  if (seed) {
    c.gen.seed = *seed;
    c.pretrain.seed = *seed;
    c.init_seed = *seed;
    c.unlearn.train.seed = *seed;
    for (std::size_t i = 0; i < c.seeds.size(); ++i) c.seeds[i] = *seed + i;
  }
  if (!f.method.empty()) c.unlearn.method = unlearner::parse_method(f.method);
  if (f.retain) c.unlearn.with_retain = *f.retain;
  if (f.alpha) c.unlearn.alpha = *f.alpha;
  if (f.beta) c.unlearn.beta = *f.beta;
  if (f.forget_fraction) {
    c.gen.forget_fraction = *f.forget_fraction;
    c.forget_fractions = {*f.forget_fraction};
  }
  c.validate();
  return c;
}

std::string out_or(const Flags& f, const experiment::ExperimentConfig& c, const std::string& configured) {
  return f.out.empty() ? c.paths.resolve(configured) : f.out;
}

kbgen::DatasetBundle dataset(const experiment::ExperimentConfig& c) {
  const auto path = c.paths.resolve(c.paths.dataset);
  if (!fs::exists(path)) throw Error("cli.missing_artifact", "no dataset at '" + path + "'; run gen-data first");
  return kbgen::load_bundle(path);
}

seqmodel::ModelCheckpoint checkpoint(const std::string& path, const char* producer) {
  if (!fs::exists(path))
    throw Error("cli.missing_artifact", "no checkpoint at '" + path + "'; run " + producer + " first");
  return seqmodel::load_checkpoint(path);
}

std::string tau_path(const Flags& f, const experiment::ExperimentConfig& c) {
  return f.tau_file.empty() ? c.paths.resolve(c.paths.tau) : f.tau_file;
}

int gen_data(const Flags& f) {
  const auto c = load(f);
  const auto bundle = kbgen::build_dataset(c.gen);
  kbgen::save_bundle(bundle, with_parent(out_or(f, c, c.paths.dataset)));
  std::cout << kbgen::dataset_stats(bundle).to_json().dump(2) << "\n";
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

int train(const Flags& f) {
  const auto c = load(f);
  const auto ckpt = experiment::pretrain(c, dataset(c), log_line);
  seqmodel::save_checkpoint(ckpt, with_parent(out_or(f, c, c.paths.original)));
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

int unlearn(const Flags& f) {
  const auto c = load(f);
  const auto original = checkpoint(c.paths.resolve(c.paths.original), "train");
  const auto r = experiment::unlearn(c, dataset(c), original, log_line);
  const auto out = out_or(f, c, c.paths.unlearned);
  seqmodel::save_checkpoint(r.checkpoint, with_parent(out));
  std::string steps;
  for (const auto& s : r.steps) steps += unlearner::to_json(s).dump() + "\n";
  experiment::write_text(out + ".steps.jsonl", steps);
  experiment::write_text(out + ".summary.json",
                         nlohmann::ordered_json{{"config", unlearner::to_json(c.unlearn)},
                                                {"epochs_run", r.epochs_run},
                                                {"early_stopped", r.early_stopped},
                                                {"diverged", r.diverged},
                                                {"divergence", r.divergence},
                                                {"retain_valid_lm", r.monitor}}
                                 .dump(2) +
                             "\n");
  experiment::write_manifest(c.paths.run_dir);
  return r.diverged ? 3 : 0;
}

int calibrate(const Flags& f) {
  const auto c = load(f);
  const auto bundle = dataset(c);
  const auto original = checkpoint(c.paths.resolve(c.paths.original), "train");
  const auto unlearned = checkpoint(c.paths.resolve(c.paths.unlearned), "unlearn");
  const auto cal = experiment::calibrate(c, bundle, original, unlearned);
  const auto out = f.out.empty() ? tau_path(f, c) : f.out;
  experiment::write_text(out, experiment::to_json(cal).dump(2) + "\n");
  experiment::write_text(fs::path(out).replace_extension(".density.tsv").string(), munch::density_tsv(cal.calibration));
  std::cout << experiment::to_json(cal).dump(2) << "\n";
  if (cal.calibration.inseparable) log_line("warning: score distributions are inseparable");
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

evalsuite::EvalResult run_eval(const Flags& f, const experiment::ExperimentConfig& c, evalsuite::Pipeline pipeline,
                               const kbgen::DatasetBundle& bundle, const seqmodel::ModelCheckpoint& original,
                               const seqmodel::ModelCheckpoint& evaluated, const munch::ForgetMemory& memory) {
  evalsuite::EvalInputs in;
  in.bundle = &bundle;
  in.original = &original;
  in.evaluated = &evaluated;
  in.pipeline = pipeline;
  in.memory = &memory;
  in.munch_config = c.munch;
  in.method = &evaluated == &original ? "Original" : experiment::method_label(c.unlearn.method, c.unlearn.with_retain);
  if (pipeline == evalsuite::Pipeline::munch) in.tau = experiment::read_tau(tau_path(f, c));
  return evalsuite::evaluate(in);
}

std::string traces_jsonl(const std::vector<munch::DecisionTrace>& traces) {
  std::string s;
  for (const auto& t : traces) s += munch::to_json(t).dump() + "\n";
  return s;
}

int run_munch(const Flags& f) {
  const auto c = load(f);
  const auto pipeline = f.pipeline == "raw" ? evalsuite::Pipeline::munch : evalsuite::parse_pipeline(f.pipeline);
  const auto bundle = dataset(c);
  const auto original = checkpoint(c.paths.resolve(c.paths.original), "train");
  const auto unlearned = checkpoint(c.paths.resolve(c.paths.unlearned), "unlearn");
  const auto memory = munch::ForgetMemory::from_bundle(bundle, c.munch.similarity_threshold);
  std::optional<double> tau;
  if (pipeline == evalsuite::Pipeline::munch) tau = experiment::read_tau(tau_path(f, c));
  std::vector<munch::DecisionTrace> traces;
  for (auto split : {kbgen::Split::forget, kbgen::Split::retain_test}) {
    const auto p = evalsuite::prepare_multi_hop(bundle, split, original, unlearned, memory, c.munch);
    auto cell = evalsuite::pipeline_cell(p, pipeline, tau, memory, c.munch);
    log_line(std::string(kbgen::to_string(split)) + " multi-hop exact-match PA " + std::to_string(cell.pa));
    for (auto& t : cell.traces) traces.push_back(std::move(t));
  }
  experiment::write_text(out_or(f, c, c.paths.traces), traces_jsonl(traces));
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

int eval(const Flags& f) {
  const auto c = load(f);
  const auto pipeline = evalsuite::parse_pipeline(f.pipeline);
  if (pipeline == evalsuite::Pipeline::munch) experiment::read_tau(tau_path(f, c));
  const auto bundle = dataset(c);
  const auto original = checkpoint(c.paths.resolve(c.paths.original), "train");
  const auto memory = munch::ForgetMemory::from_bundle(bundle, c.munch.similarity_threshold);
  std::optional<seqmodel::ModelCheckpoint> unlearned;
  if (f.checkpoint == "unlearned") unlearned = checkpoint(c.paths.resolve(c.paths.unlearned), "unlearn");
  else if (f.checkpoint != "original")
    throw Error("cli.usage", "--checkpoint must be original or unlearned");
  const auto r = run_eval(f, c, pipeline, bundle, original, unlearned ? *unlearned : original, memory);
  const auto dir = out_or(f, c, c.paths.reports);
  const std::string stem = dir + "/report-" + (unlearned ? "unlearned" : "original") + "-" + f.pipeline;
  experiment::write_text(stem + ".json", evalsuite::to_json(r.report).dump(2) + "\n");
  experiment::write_text(stem + ".tsv", evalsuite::tsv_header() + evalsuite::tsv_rows(r.report));
  if (!r.traces.empty()) experiment::write_text(stem + ".traces.jsonl", traces_jsonl(r.traces));
  std::cout << evalsuite::tsv_header() << evalsuite::tsv_rows(r.report);
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

// Collects every report JSON under the reports directory into one table.
int report(const Flags& f) {
  const auto c = load(f);
  const auto dir = c.paths.resolve(c.paths.reports);
  if (!fs::exists(dir)) throw Error("cli.missing_artifact", "no reports under '" + dir + "'; run eval first");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("report-", 0) == 0 && e.path().extension() == ".json") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  std::string table = evalsuite::tsv_header();
  for (const auto& path : files) {
    const auto j = nlohmann::json::parse(experiment::read_text(path));
    for (const auto& cell : j.at("cells")) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s\t%s\t%s\t%s\t%.1f\t%.1f\t%.3f\n", j.at("method").get<std::string>().c_str(),
                    j.at("pipeline").get<std::string>().c_str(),
                    cell.at("split").get<std::string>() == "forget" ? "forget" : "retain",
                    cell.at("kind").get<std::string>().c_str(), cell.at("pa").get<double>(),
                    cell.at("rl").get<double>(), cell.at("lm").get<double>());
      table += buf;
    }
  }
  experiment::write_text(f.out.empty() ? dir + "/table.tsv" : f.out, table);
  std::cout << table;
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

int sweep(const Flags& f) {
  const auto c = load(f);
  const auto data_path = c.paths.resolve(c.paths.dataset);
  kbgen::DatasetBundle base;
  if (fs::exists(data_path)) {
    base = kbgen::load_bundle(data_path);
  } else {
    base = kbgen::build_dataset(c.gen);
    kbgen::save_bundle(base, with_parent(data_path));
  }
  const auto orig_path = c.paths.resolve(c.paths.original);
  seqmodel::ModelCheckpoint original;
  if (fs::exists(orig_path)) {
    original = seqmodel::load_checkpoint(orig_path);
  } else {
    original = experiment::pretrain(c, base, log_line);
    seqmodel::save_checkpoint(original, with_parent(orig_path));
  }
  const auto r = experiment::sweep(c, base, original, out_or(f, c, c.paths.sweep), log_line);
  std::cout << r.aggregate_tsv;
  experiment::write_manifest(c.paths.run_dir);
  return 0;
}

int fail(const std::string& code, const std::string& message, int status) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << std::endl;
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"munchlab: multi-hop unlearning experiments"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "experiment config JSON")->required();
    s->add_option("--out", f.out, "primary output path");
    s->add_option("--seed", f.seed, "seed override");
    s->add_option("--forget-fraction", f.forget_fraction, "forget fraction override");
    s->add_option("--method", f.method, "ga, dpo or npo")->check(CLI::IsMember({"ga", "dpo", "npo"}));
    s->add_flag_function("--retain,!--no-retain", [&](std::int64_t n) { f.retain = n > 0; }, "add the retain loss");
    s->add_option("--alpha", f.alpha, "forget loss weight");
    s->add_option("--beta", f.beta, "DPO/NPO inverse temperature");
    s->add_option("--pipeline", f.pipeline, "raw, munch or mello")->check(CLI::IsMember({"raw", "munch", "mello"}));
    s->add_option("--tau-file", f.tau_file, "calibration artifact");
    return s;
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const Flags&);
  };
  const Cmd cmds[] = {{"gen-data", "generate the synthetic dataset", gen_data},
                      {"train", "pretrain the original model", train},
                      {"unlearn", "unlearn the forget set", unlearn},
                      {"calibrate", "choose the uncertainty threshold", calibrate},
                      {"run-munch", "run the pipeline on multi-hop questions", run_munch},
                      {"eval", "compute metrics for one checkpoint and pipeline", eval},
                      {"report", "collect reports into one table", report},
                      {"sweep", "forget-fraction x method sweep", sweep}};
  int (*chosen)(const Flags&) = nullptr;
  for (const auto& c : cmds) {
    auto* s = common(app.add_subcommand(c.name, c.help));
    if (std::string(c.name) == "eval")
      s->add_option("--checkpoint", f.checkpoint, "original or unlearned")
          ->check(CLI::IsMember({"original", "unlearned"}));
    s->callback([&chosen, run = c.run] { chosen = run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("cli.usage", e.what(), 2);
  }
  try {
    return chosen(f);
  } catch (const Error& e) {
    return fail(e.code(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("cli.internal", e.what(), 1);
  }
}
