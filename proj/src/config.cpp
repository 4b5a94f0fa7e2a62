// SPDX-License-Identifier: Apache-2.0

#include "s2meta/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>

namespace s2meta::config {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(meta::StopMode mode) {
  return mode == meta::StopMode::stochastic ? "stochastic" : "threshold";
}

meta::StopMode parse_stop_mode(const std::string& name) {
  if (name == "stochastic") return meta::StopMode::stochastic;
  if (name == "threshold") return meta::StopMode::threshold;
  throw std::invalid_argument("unknown stop mode '" + name + "' (expected stochastic|threshold)");
}

namespace {

struct Field {
  std::string key;
  std::string doc;
  std::function<void(RunConfig&, const json&)> set;
  std::function<ordered_json(const RunConfig&)> get;
};

[[noreturn]] void fail(const std::string& key, const std::string& what) {
  throw ConfigError(key + ": " + what);
}

std::size_t as_count(const std::string& key, const json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return v.get<std::size_t>();
  fail(key, "expected a non-negative integer, got " + v.dump());
}

double as_real(const std::string& key, const json& v) {
  if (!v.is_number()) fail(key, "expected a number, got " + v.dump());
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(key, "must be finite");
  return x;
}

std::string as_text(const std::string& key, const json& v) {
  if (!v.is_string()) fail(key, "expected a string, got " + v.dump());
  return v.get<std::string>();
}

template <typename Parse>
auto as_enum(const std::string& key, const json& v, Parse parse) {
  const std::string s = as_text(key, v);
  try {
    return parse(s);
  } catch (const std::invalid_argument& e) {
    fail(key, e.what());
  }
}

Field count(std::string key, std::string doc, std::size_t RunConfig::*m) {
  return {key, std::move(doc),
          [key, m](RunConfig& c, const json& v) { c.*m = as_count(key, v); },
          [m](const RunConfig& c) { return ordered_json(c.*m); }};
}

Field real(std::string key, std::string doc, double RunConfig::*m) {
  return {key, std::move(doc), [key, m](RunConfig& c, const json& v) { c.*m = as_real(key, v); },
          [m](const RunConfig& c) { return ordered_json(c.*m); }};
}

Field text(std::string key, std::string doc, std::string RunConfig::*m) {
  return {key, std::move(doc), [key, m](RunConfig& c, const json& v) { c.*m = as_text(key, v); },
          [m](const RunConfig& c) { return ordered_json(c.*m); }};
}

Field stop_mode(std::string key, std::string doc, meta::StopMode RunConfig::*m) {
  return {key, std::move(doc),
          [key, m](RunConfig& c, const json& v) { c.*m = as_enum(key, v, parse_stop_mode); },
          [m](const RunConfig& c) { return ordered_json(to_string(c.*m)); }};
}

const std::vector<Field>& table() {
  static const std::vector<Field> t = {
      count("synth.scenarios", "number of synthetic scenarios (20)", &RunConfig::synth_scenarios),
      count("synth.users", "users shared by every scenario (40)", &RunConfig::synth_users),
      count("synth.items_per", "items owned by each scenario (30)", &RunConfig::synth_items_per),
      count("synth.dim", "latent and embedding width (16)", &RunConfig::synth_dim),
      real("synth.noise", "stddev of the interaction logit noise (0.5)", &RunConfig::synth_noise),
      real("synth.embedding_noise", "stddev of noise added to latents for embeddings (0.1)",
           &RunConfig::synth_embedding_noise),
      real("synth.scenario_scale", "stddev of the scenario latents (1.0)",
           &RunConfig::synth_scenario_scale),
      count("tasks.shots", "support interactions per scenario (64)", &RunConfig::shots),
      count("tasks.min_items", "smallest kept scenario item count (100)", &RunConfig::min_items),
      count("tasks.max_items", "largest kept scenario item count (1000)", &RunConfig::max_items),
      count("tasks.neg_per_pos", "query negatives per query positive (4)",
            &RunConfig::neg_per_pos),
      real("tasks.test_fraction", "share of scenarios held out for meta-test (0.2)",
           &RunConfig::test_fraction),
      {"model.arch", "recommender architecture: interaction|mapping (interaction)",
       [](RunConfig& c, const json& v) {
         c.arch = as_enum("model.arch", v, recnet::parse_architecture);
       },
       [](const RunConfig& c) { return ordered_json(recnet::to_string(c.arch)); }},
      count("model.layers", "hidden layers, halving in width (3)", &RunConfig::layers),
      count("mf.dim", "embedding width for pretraining (128)", &RunConfig::mf_dim),
      count("mf.epochs", "pretraining epochs (50)", &RunConfig::mf_epochs),
      real("mf.learning_rate", "pretraining SGD step (0.05)", &RunConfig::mf_learning_rate),
      real("mf.reg", "pretraining L2 coefficient (1e-4)", &RunConfig::mf_reg),
      real("mf.init_scale", "stddev of the initial embeddings (0.1)", &RunConfig::mf_init_scale),
      count("episode.t_max", "maximum updates per episode (50)", &RunConfig::t_max),
      count("episode.batch_size", "training triples per step N (32)", &RunConfig::batch_size),
      stop_mode("episode.stop_mode", "meta-training stop rule: stochastic|threshold (stochastic)",
                &RunConfig::stop_mode),
      real("episode.threshold", "stop threshold for threshold mode (0.5)", &RunConfig::threshold),
      {"episode.variant", "complete|rand_init|fixed_lr|fixed_step (complete)",
       [](RunConfig& c, const json& v) {
         c.variant = as_enum("episode.variant", v, meta::parse_variant);
       },
       [](const RunConfig& c) { return ordered_json(meta::to_string(c.variant)); }},
      real("episode.fixed_lr", "SGD rate of the fixed_lr variant (0.01)", &RunConfig::fixed_lr),
      count("episode.fixed_steps", "updates of the fixed_step variant (20)",
            &RunConfig::fixed_steps),
      stop_mode("adapt.stop_mode", "stop rule when adapting: stochastic|threshold (threshold)",
                &RunConfig::adapt_stop_mode),
      real("adapt.threshold", "stop threshold when adapting (0.5)", &RunConfig::adapt_threshold),
      real("meta.learning_rate", "meta SGD step (1e-4)", &RunConfig::meta_learning_rate),
      real("meta.weight_decay", "meta weight decay (1e-5)", &RunConfig::meta_weight_decay),
      count("meta.iterations", "meta-training steps K (2000)", &RunConfig::iterations),
      {"meta.stop_reward", "stop-controller coefficient: reward_to_go|listing (reward_to_go)",
       [](RunConfig& c, const json& v) {
         c.stop_reward = as_enum("meta.stop_reward", v, meta::parse_stop_reward);
       },
       [](const RunConfig& c) { return ordered_json(meta::to_string(c.stop_reward)); }},
      count("meta.test_cap", "query triples used for test losses (2048)", &RunConfig::test_cap),
      {"eval.n_list", "cut-offs N for Recall@N ([10, 20, 50])",
       [](RunConfig& c, const json& v) {
         if (!v.is_array() || v.empty()) fail("eval.n_list", "expected a non-empty array");
         std::vector<std::size_t> out;
         for (const json& e : v) out.push_back(as_count("eval.n_list", e));
         c.n_list = std::move(out);
       },
       [](const RunConfig& c) { return ordered_json(c.n_list); }},
      {"run.seeds", "seeds for ablation and architecture runs ([0, 1, 2, 3, 4])",
       [](RunConfig& c, const json& v) {
         if (!v.is_array() || v.empty()) fail("run.seeds", "expected a non-empty array");
         std::vector<std::uint64_t> out;
         for (const json& e : v) out.push_back(as_count("run.seeds", e));
         c.seeds = std::move(out);
       },
       [](const RunConfig& c) { return ordered_json(c.seeds); }},
      {"run.seed", "seed of single runs (0)",
       [](RunConfig& c, const json& v) { c.seed = as_count("run.seed", v); },
       [](const RunConfig& c) { return ordered_json(c.seed); }},
      text("paths.interactions", "interaction CSV", &RunConfig::interactions),
      text("paths.user_embeddings", "user embedding file", &RunConfig::user_embeddings),
      text("paths.item_embeddings", "item embedding file", &RunConfig::item_embeddings),
      text("paths.checkpoint", "meta-learner checkpoint", &RunConfig::checkpoint),
      text("paths.out_dir", "output directory", &RunConfig::out_dir),
  };
  return t;
}

const Field& find(const std::string& key) {
  for (const Field& f : table()) {
    if (f.key == key) return f;
  }
  throw ConfigError(key + ": unknown configuration key");
}

}  // namespace

std::vector<FieldInfo> fields() {
  std::vector<FieldInfo> out;
  for (const Field& f : table()) out.push_back({f.key, f.doc});
  return out;
}

void apply_json(RunConfig& cfg, const json& doc) {
  if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& [key, value] : doc.items()) find(key).set(cfg, value);
}

void set_value(RunConfig& cfg, const std::string& key, const std::string& text) {
  const Field& f = find(key);
  json v = json::parse(text, nullptr, false);
  if (v.is_discarded() || v.is_object()) v = text;  // bare words are strings
  f.set(cfg, v);
}

RunConfig load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
  RunConfig cfg;
  apply_json(cfg, doc);
  return cfg;
}

ordered_json to_json(const RunConfig& cfg) {
  ordered_json out = ordered_json::object();
  for (const Field& f : table()) out[f.key] = f.get(cfg);
  return out;
}

void RunConfig::validate() const {
  auto positive = [](const char* key, std::size_t v) {
    if (v == 0) fail(key, "must be >= 1");
  };
  positive("synth.scenarios", synth_scenarios);
  positive("synth.users", synth_users);
  positive("synth.items_per", synth_items_per);
  positive("synth.dim", synth_dim);
  if (synth_noise < 0.0) fail("synth.noise", "must be >= 0");
  if (synth_embedding_noise < 0.0) fail("synth.embedding_noise", "must be >= 0");
  if (synth_scenario_scale < 0.0) fail("synth.scenario_scale", "must be >= 0");
  positive("tasks.shots", shots);
  if (min_items > max_items) fail("tasks.min_items", "exceeds tasks.max_items");
  positive("tasks.neg_per_pos", neg_per_pos);
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("tasks.test_fraction", "must lie in (0, 1)");
  positive("model.layers", layers);
  positive("mf.dim", mf_dim);
  if (!(mf_learning_rate > 0.0)) fail("mf.learning_rate", "must be positive");
  if (mf_reg < 0.0) fail("mf.reg", "must be >= 0");
  positive("episode.t_max", t_max);
  positive("episode.batch_size", batch_size);
  if (!(threshold > 0.0 && threshold < 1.0)) fail("episode.threshold", "must lie in (0, 1)");
  if (!(fixed_lr > 0.0)) fail("episode.fixed_lr", "must be positive");
  if (fixed_steps == 0 || fixed_steps > t_max) {
    fail("episode.fixed_steps", "must lie in [1, episode.t_max]");
  }
  if (!(adapt_threshold > 0.0 && adapt_threshold < 1.0)) {
    fail("adapt.threshold", "must lie in (0, 1)");
  }
  if (!(meta_learning_rate > 0.0)) fail("meta.learning_rate", "must be positive");
  if (meta_weight_decay < 0.0) fail("meta.weight_decay", "must be >= 0");
  positive("meta.test_cap", test_cap);
  for (std::size_t n : n_list) positive("eval.n_list", n);
  if (n_list.empty()) fail("eval.n_list", "must not be empty");
  if (seeds.empty()) fail("run.seeds", "must not be empty");
}

meta::EpisodeConfig RunConfig::episode() const {
  meta::EpisodeConfig e;
  e.t_max = t_max;
  e.batch_size = batch_size;
  e.stop_mode = stop_mode;
  e.threshold = threshold;
  e.variant = variant;
  e.fixed_lr = fixed_lr;
  e.fixed_steps = fixed_steps;
  e.seed = seed;
  return e;
}

meta::EpisodeConfig RunConfig::adapt_episode() const {
  meta::EpisodeConfig e = episode();
  e.stop_mode = adapt_stop_mode;
  e.threshold = adapt_threshold;
  return e;
}

meta::MetaTrainOptions RunConfig::train_options() const {
  meta::MetaTrainOptions o;
  o.iterations = iterations;
  o.seed = seed;
  o.optimizer.learning_rate = meta_learning_rate;
  o.optimizer.weight_decay = meta_weight_decay;
  o.optimizer.stop_reward = stop_reward;
  o.test_cap = test_cap;
  return o;
}

tasks::TaskOptions RunConfig::task_options() const {
  tasks::TaskOptions o;
  o.shots = shots;
  o.min_items = min_items;
  o.max_items = max_items;
  o.neg_per_pos = neg_per_pos;
  o.seed = seed;
  return o;
}

tasks::SyntheticOptions RunConfig::synthetic_options() const {
  tasks::SyntheticOptions o;
  o.n_scenarios = synth_scenarios;
  o.users_per = synth_users;
  o.items_per = synth_items_per;
  o.d_latent = synth_dim;
  o.noise = synth_noise;
  o.embedding_noise = synth_embedding_noise;
  o.scenario_scale = synth_scenario_scale;
  o.seed = seed;
  return o;
}

recnet::MfOptions RunConfig::mf_options() const {
  recnet::MfOptions o;
  o.dim = mf_dim;
  o.epochs = mf_epochs;
  o.learning_rate = mf_learning_rate;
  o.reg = mf_reg;
  o.init_scale = mf_init_scale;
  o.seed = seed;
  return o;
}

recnet::Layout RunConfig::layout(std::size_t dim) const {
  return recnet::Layout::halving(arch, dim, layers);
}

}  // namespace s2meta::config
