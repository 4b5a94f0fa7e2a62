// SPDX-License-Identifier: Apache-2.0
//
// s2meta command-line driver. Every subcommand resolves a RunConfig from
// (defaults, --config file, --set overrides, dedicated flags), writes it to
// <out>/config.json, then runs one pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2meta/config.hpp"
#include "s2meta/eval.hpp"
#include "s2meta/meta.hpp"
#include "s2meta/recnet.hpp"
#include "s2meta/tasks.hpp"

namespace fs = std::filesystem;
using namespace s2meta;
using config::ConfigError;
using config::RunConfig;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string interactions;
  std::string user_embeddings;
  std::string item_embeddings;
  std::string checkpoint;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool reads_data) {
  cmd->add_option("--config", a.config_file, "JSON file of dotted keys");
  cmd->add_option("--set", a.sets, "Override one key, KEY=VALUE (repeatable)");
  cmd->add_option("--seed", a.seed, "run.seed");
  cmd->add_option("--out", a.out, "Output directory (paths.out_dir)");
  cmd->add_flag("--quiet", a.quiet, "No progress on stderr");
  if (reads_data) {
    cmd->add_option("--data", a.data,
                    "Directory written by gen-synth (interactions.csv, users.emb, items.emb)");
    cmd->add_option("--interactions", a.interactions, "paths.interactions");
    cmd->add_option("--user-emb", a.user_embeddings, "paths.user_embeddings");
    cmd->add_option("--item-emb", a.item_embeddings, "paths.item_embeddings");
  }
}

RunConfig resolve(const CommonArgs& a) {
  RunConfig cfg = a.config_file.empty() ? RunConfig{} : config::load_file(a.config_file);
  for (const std::string& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set " + kv + ": expected KEY=VALUE");
    }
    config::set_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (!a.data.empty()) {
    const fs::path d(a.data);
    cfg.interactions = (d / "interactions.csv").string();
    cfg.user_embeddings = (d / "users.emb").string();
    cfg.item_embeddings = (d / "items.emb").string();
  }
  if (!a.interactions.empty()) cfg.interactions = a.interactions;
  if (!a.user_embeddings.empty()) cfg.user_embeddings = a.user_embeddings;
  if (!a.item_embeddings.empty()) cfg.item_embeddings = a.item_embeddings;
  if (!a.checkpoint.empty()) cfg.checkpoint = a.checkpoint;
  if (cfg.out_dir.empty()) cfg.out_dir = ".";
  cfg.validate();
  return cfg;
}

void require(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string(key) + ": required by this subcommand");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", config::to_json(cfg).dump(2) + "\n");
  return dir;
}

struct Data {
  recnet::EmbeddingTable table;
  tasks::MetaSplit split;
};

tasks::MetaSplit split_tasks(const RunConfig& cfg, const tasks::InteractionLog& log, bool quiet) {
  tasks::BuildResult built = tasks::build_tasks(log, cfg.task_options());
  if (!quiet) {
    for (const std::string& w : built.warnings) std::cerr << "warning: " << w << "\n";
  }
  if (built.tasks.size() < 2) {
    throw std::runtime_error("only " + std::to_string(built.tasks.size()) +
                             " scenario(s) pass the task filters (tasks.min_items, "
                             "tasks.max_items, tasks.shots); at least 2 are needed");
  }
  return tasks::split_meta(std::move(built.tasks), cfg.test_fraction, cfg.seed);
}

Data load_data(const RunConfig& cfg, bool quiet) {
  require(cfg.interactions, "paths.interactions");
  require(cfg.user_embeddings, "paths.user_embeddings");
  require(cfg.item_embeddings, "paths.item_embeddings");
  const tasks::InteractionLog log = tasks::load_interactions_csv(cfg.interactions);
  Data d;
  d.table = recnet::read_embeddings(cfg.user_embeddings, cfg.item_embeddings);
  if (d.table.num_users() < log.num_users || d.table.num_items() < log.num_items) {
    throw std::runtime_error("embedding tables are smaller than the interaction id range");
  }
  d.split = split_tasks(cfg, log, quiet);
  return d;
}

nlohmann::ordered_json params_json(const recnet::RecommenderParams& p) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["arch"] = recnet::to_string(p.layout.arch);
  j["dim"] = p.layout.dim;
  j["hidden"] = p.layout.hidden;
  const auto groups = p.layout.groups();
  j["groups"] = nlohmann::ordered_json::array();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    j["groups"].push_back({{"name", groups[g].name},
                           {"shape", p.tensors[g].shape},
                           {"values", p.tensors[g].values}});
  }
  return j;
}

const tasks::ScenarioTask& find_task(const tasks::MetaSplit& split, Id scenario) {
  for (const auto* set : {&split.meta_test, &split.meta_train}) {
    for (const tasks::ScenarioTask& t : *set) {
      if (t.scenario == scenario) return t;
    }
  }
  throw std::runtime_error("scenario " + std::to_string(scenario) + " has no task");
}

eval::HarnessOptions harness(const RunConfig& cfg, std::size_t dim, bool quiet) {
  eval::HarnessOptions h;
  h.train_episode = cfg.episode();
  h.eval_episode = cfg.adapt_episode();
  h.train = cfg.train_options();
  h.layout = cfg.layout(dim);
  h.n_list = cfg.n_list;
  if (!quiet) {
    h.progress = [](const std::string& label, std::uint64_t seed) {
      std::cerr << label << " seed " << seed << " done\n";
    };
  }
  return h;
}

void write_results(const fs::path& dir, eval::ResultsTable& table) {
  eval::summarize(table);
  write_text(dir / "results.csv", eval::results_csv(table));
  write_text(dir / "results.json", eval::results_json(table));
}

void append_item_pop(eval::ResultsTable& table, const Data& d, const RunConfig& cfg) {
  eval::ResultsTable pop = eval::item_pop_table(d.split.meta_test, cfg.n_list);
  table.rows.insert(table.rows.end(), pop.rows.begin(), pop.rows.end());
}

// ---------------------------------------------------------------------------

void cmd_gen_synth(RunConfig cfg, bool quiet) {
  const fs::path dir = prepare_out(cfg);
  tasks::SyntheticFamily fam = tasks::gen_synthetic_family(cfg.synthetic_options());
  tasks::write_interactions_csv(dir / "interactions.csv", fam.log);
  recnet::write_embeddings(dir / "users.emb", dir / "items.emb", fam.table);
  tasks::BuildResult built = tasks::build_tasks(fam.log, cfg.task_options());
  tasks::MetaSplit split;
  if (built.tasks.size() >= 2) {
    split = tasks::split_meta(std::move(built.tasks), cfg.test_fraction, cfg.seed);
  } else {
    if (!quiet) {
      std::cerr << "warning: " << built.tasks.size()
                << " scenario(s) pass the task filters; manifest lists them without a split\n";
    }
    split.meta_train = std::move(built.tasks);
  }
  write_text(dir / "tasks.json", tasks::task_manifest_json(split));
  if (!quiet) {
    std::cerr << fam.log.records.size() << " interactions, " << fam.log.num_users << " users, "
              << fam.log.num_items << " items -> " << dir.string() << "\n";
  }
}

void cmd_pretrain(RunConfig cfg, bool quiet) {
  require(cfg.interactions, "paths.interactions");
  const fs::path dir = prepare_out(cfg);
  const tasks::InteractionLog log = tasks::load_interactions_csv(cfg.interactions);
  recnet::MfOptions mf = cfg.mf_options();
  mf.num_users = log.num_users;
  mf.num_items = log.num_items;
  const auto pairs = log.user_item_pairs();
  const recnet::EmbeddingTable table = recnet::mf_pretrain(pairs, mf);
  recnet::write_embeddings(dir / "users.emb", dir / "items.emb", table);
  if (!quiet) std::cerr << "embeddings " << table.num_users() << "x" << table.dim() << "\n";
}

void cmd_meta_train(RunConfig cfg, const std::string& resume, bool quiet) {
  const Data d = load_data(cfg, quiet);
  const fs::path dir = prepare_out(cfg);
  meta::MetaParams init;
  if (!resume.empty()) {
    init = meta::load_checkpoint(fs::path(resume));
    if (init.layout.dim != d.table.dim()) {
      throw std::runtime_error("checkpoint dimension does not match the embeddings");
    }
  } else {
    Rng rng(cfg.seed);
    init = meta::MetaParams::initialize(cfg.layout(d.table.dim()), rng);
  }
  std::ofstream log(dir / "meta_train.jsonl", std::ios::binary);
  const std::size_t every = std::max<std::size_t>(1, cfg.iterations / 20);
  auto on_step = [&](const meta::MetaLogEntry& e) {
    nlohmann::ordered_json j{{"iteration", e.iteration},
                             {"scenario", e.scenario},
                             {"stop_step", e.stop_step},
                             {"test_loss", e.test_loss}};
    log << j.dump() << "\n";
    if (!quiet && (e.iteration + 1) % every == 0) {
      std::cerr << "iteration " << e.iteration + 1 << "/" << cfg.iterations << " T "
                << e.stop_step << " test loss " << e.test_loss << "\n";
    }
  };
  meta::MetaTrainResult r = meta::meta_train(std::move(init), d.split.meta_train, d.table,
                                             cfg.episode(), cfg.train_options(), on_step);
  log.close();
  if (!log) throw std::runtime_error("cannot write meta_train.jsonl");
  meta::save_checkpoint(dir / "checkpoint.s2m", r.meta);
  write_text(dir / "tasks.json", tasks::task_manifest_json(d.split));
}

void cmd_adapt(RunConfig cfg, Id scenario, bool quiet) {
  require(cfg.checkpoint, "paths.checkpoint");
  const Data d = load_data(cfg, quiet);
  const fs::path dir = prepare_out(cfg);
  const meta::MetaParams m = meta::load_checkpoint(fs::path(cfg.checkpoint));
  const tasks::ScenarioTask& task = find_task(d.split, scenario);
  const meta::AdaptResult r = meta::adapt(m, task, d.table, cfg.adapt_episode());
  write_text(dir / "recommender.json", params_json(r.params).dump() + "\n");
  write_text(dir / "trace.jsonl", meta::trace_jsonl(r.trace, m.groups));
  if (!quiet) std::cerr << "scenario " << scenario << " stopped after " << r.trace.stop_step << "\n";
}

void cmd_evaluate(RunConfig cfg, bool quiet) {
  require(cfg.checkpoint, "paths.checkpoint");
  const Data d = load_data(cfg, quiet);
  const fs::path dir = prepare_out(cfg);
  const meta::MetaParams m = meta::load_checkpoint(fs::path(cfg.checkpoint));
  const auto& test = d.split.meta_test;
  std::vector<eval::RecallByN> recall(test.size());
  eval::parallel_for(test.size(), eval::worker_count(), [&](std::size_t k) {
    const meta::AdaptResult r = meta::adapt(m, test[k], d.table, cfg.adapt_episode());
    recall[k] = eval::evaluate_scenario(r.params, d.table, test[k], cfg.n_list);
  });
  eval::ResultsTable table;
  for (std::size_t k = 0; k < test.size(); ++k) {
    for (const auto& [n, value] : recall[k]) {
      table.rows.push_back({"s2meta", cfg.seed, test[k].scenario, n, value});
    }
  }
  append_item_pop(table, d, cfg);
  write_results(dir, table);
  if (!quiet) {
    for (const eval::Summary& s : table.summaries) {
      std::cerr << s.variant << " Recall@" << s.n << " " << s.mean << "\n";
    }
  }
}

void cmd_ablate(RunConfig cfg, bool quiet) {
  const Data d = load_data(cfg, quiet);
  const fs::path dir = prepare_out(cfg);
  std::vector<eval::VariantSpec> variants = eval::default_variants();
  for (eval::VariantSpec& v : variants) {
    v.fixed_lr = cfg.fixed_lr;
    v.fixed_steps = cfg.fixed_steps;
  }
  eval::ResultsTable table =
      eval::run_ablation(variants, d.split.meta_train, d.split.meta_test, d.table, cfg.seeds,
                         harness(cfg, d.table.dim(), quiet));
  append_item_pop(table, d, cfg);
  write_results(dir, table);
}

void cmd_compare_arch(RunConfig cfg, bool quiet) {
  const Data d = load_data(cfg, quiet);
  const fs::path dir = prepare_out(cfg);
  const std::vector<recnet::Architecture> archs{recnet::Architecture::interaction,
                                                recnet::Architecture::mapping};
  eval::ResultsTable table =
      eval::compare_architectures(archs, d.split.meta_train, d.split.meta_test, d.table,
                                  cfg.seeds, harness(cfg, d.table.dim(), quiet));
  append_item_pop(table, d, cfg);
  write_results(dir, table);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"s2meta: scenario-specific meta learning for few-shot recommendation"};
  app.require_subcommand(1);
  bool list_keys = false;
  app.add_flag("--list-keys", list_keys, "Print every configuration key and exit");

  CommonArgs a;
  std::optional<std::size_t> scenarios;
  std::optional<std::size_t> iterations;
  std::string resume;
  Id scenario = 0;

  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic scenario family");
  add_common(gen, a, false);
  gen->add_option("--scenarios", scenarios, "synth.scenarios");

  auto* pre = app.add_subcommand("pretrain-embeddings", "Matrix-factorization embeddings");
  add_common(pre, a, false);
  pre->add_option("--interactions", a.interactions, "paths.interactions");

  auto* train = app.add_subcommand("meta-train", "Meta-train and save a checkpoint");
  add_common(train, a, true);
  train->add_option("--iterations", iterations, "meta.iterations");
  train->add_option("--resume", resume, "Start from this checkpoint instead of a fresh init");

  auto* adapt = app.add_subcommand("adapt", "Adapt to one scenario's support set");
  add_common(adapt, a, true);
  adapt->add_option("--checkpoint", a.checkpoint, "paths.checkpoint");
  adapt->add_option("--scenario", scenario, "Scenario id")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Adapt to every meta-test scenario, score recall");
  add_common(evaluate, a, true);
  evaluate->add_option("--checkpoint", a.checkpoint, "paths.checkpoint");

  auto* ablate = app.add_subcommand("ablate", "Complete vs RandInit, FixedLr, FixedStep");
  add_common(ablate, a, true);
  auto* arch = app.add_subcommand("compare-arch", "Interaction vs mapping recommenders");
  add_common(arch, a, true);

  // --list-keys works without a subcommand.
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--list-keys") {
      for (const config::FieldInfo& f : config::fields()) {
        std::cout << f.key << "\t" << f.doc << "\n";
      }
      return 0;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    RunConfig cfg = resolve(a);
    if (scenarios) cfg.synth_scenarios = *scenarios;
    if (iterations) cfg.iterations = *iterations;
    cfg.validate();
    if (gen->parsed()) cmd_gen_synth(cfg, a.quiet);
    else if (pre->parsed()) cmd_pretrain(cfg, a.quiet);
    else if (train->parsed()) cmd_meta_train(cfg, resume, a.quiet);
    else if (adapt->parsed()) cmd_adapt(cfg, scenario, a.quiet);
    else if (evaluate->parsed()) cmd_evaluate(cfg, a.quiet);
    else if (ablate->parsed()) cmd_ablate(cfg, a.quiet);
    else if (arch->parsed()) cmd_compare_arch(cfg, a.quiet);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
