// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: every tunable of a pipeline run under a flat dotted key
// ("episode.t_max", "meta.learning_rate", ...). Files are JSON objects of
// such keys; unknown keys are rejected.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2meta/meta.hpp"
#include "s2meta/recnet.hpp"
#include "s2meta/tasks.hpp"

namespace s2meta::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // synthetic family
  std::size_t synth_scenarios = 20;
  std::size_t synth_users = 40;
  std::size_t synth_items_per = 30;
  std::size_t synth_dim = 16;
  double synth_noise = 0.5;
  double synth_embedding_noise = 0.1;
  double synth_scenario_scale = 1.0;

  // task construction
  std::size_t shots = 64;
  std::size_t min_items = 100;
  std::size_t max_items = 1000;
  std::size_t neg_per_pos = 4;
  double test_fraction = 0.2;

  // recommender
  recnet::Architecture arch = recnet::Architecture::interaction;
  std::size_t layers = 3;

  // embedding pretraining
  std::size_t mf_dim = 128;
  std::size_t mf_epochs = 50;
  double mf_learning_rate = 0.05;
  double mf_reg = 1e-4;
  double mf_init_scale = 0.1;

  // episodes
  std::size_t t_max = 50;
  std::size_t batch_size = 32;
  meta::StopMode stop_mode = meta::StopMode::stochastic;
  double threshold = 0.5;
  meta::Variant variant = meta::Variant::complete;
  double fixed_lr = 0.01;
  std::size_t fixed_steps = 20;
  meta::StopMode adapt_stop_mode = meta::StopMode::threshold;
  double adapt_threshold = 0.5;

  // meta-training
  double meta_learning_rate = 1e-4;
  double meta_weight_decay = 1e-5;
  std::size_t iterations = 2000;
  meta::StopReward stop_reward = meta::StopReward::reward_to_go;
  std::size_t test_cap = 2048;

  // evaluation
  std::vector<std::size_t> n_list{10, 20, 50};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  std::uint64_t seed = 0;

  // paths ("" = unset)
  std::string interactions;
  std::string user_embeddings;
  std::string item_embeddings;
  std::string checkpoint;
  std::string out_dir;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  meta::EpisodeConfig episode() const;
  /// Episode settings for adaptation and evaluation.
  meta::EpisodeConfig adapt_episode() const;
  meta::MetaTrainOptions train_options() const;
  tasks::TaskOptions task_options() const;
  tasks::SyntheticOptions synthetic_options() const;
  recnet::MfOptions mf_options() const;
  recnet::Layout layout(std::size_t dim) const;
};

struct FieldInfo {
  std::string key;
  std::string doc;
};

/// Every key with its documentation, in snapshot order.
std::vector<FieldInfo> fields();

/// Applies a flat JSON object. Unknown keys and wrong types raise ConfigError
/// naming the key.
void apply_json(RunConfig& cfg, const nlohmann::json& doc);
/// Sets one key from its textual form ("0.5", "threshold", "[10,20]").
void set_value(RunConfig& cfg, const std::string& key, const std::string& text);

RunConfig load_file(const std::filesystem::path& path);
/// Resolved configuration as a flat, ordered JSON object.
nlohmann::ordered_json to_json(const RunConfig& cfg);

const char* to_string(meta::StopMode mode);
meta::StopMode parse_stop_mode(const std::string& name);

}  // namespace s2meta::config
