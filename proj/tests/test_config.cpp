// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "s2meta/config.hpp"

using namespace s2meta;
using config::ConfigError;
using config::RunConfig;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("defaults validate") {
  const RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.t_max == 50);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.shots == 64);
  CHECK(cfg.meta_learning_rate == 1e-4);
  CHECK(cfg.meta_weight_decay == 1e-5);
  CHECK(cfg.n_list == std::vector<std::size_t>{10, 20, 50});
}

TEST_CASE("every key is listed once and round-trips") {
  std::set<std::string> keys;
  for (const auto& f : config::fields()) {
    CHECK(keys.insert(f.key).second);
    CHECK_FALSE(f.doc.empty());
  }
  RunConfig cfg;
  cfg.t_max = 7;
  cfg.fixed_steps = 3;
  cfg.arch = recnet::Architecture::mapping;
  cfg.stop_reward = meta::StopReward::listing;
  cfg.n_list = {5};
  cfg.seeds = {9, 8};
  cfg.out_dir = "somewhere";
  const auto j = config::to_json(cfg);
  CHECK(j.size() == keys.size());
  RunConfig back;
  config::apply_json(back, nlohmann::json::parse(j.dump()));
  CHECK(config::to_json(back) == j);
}

TEST_CASE("set_value parses text") {
  RunConfig cfg;
  config::set_value(cfg, "episode.t_max", "12");
  config::set_value(cfg, "episode.threshold", "0.25");
  config::set_value(cfg, "episode.stop_mode", "threshold");
  config::set_value(cfg, "episode.variant", "fixed_lr");
  config::set_value(cfg, "model.arch", "mapping");
  config::set_value(cfg, "eval.n_list", "[1,2]");
  config::set_value(cfg, "paths.out_dir", "out/run");
  CHECK(cfg.t_max == 12);
  CHECK(cfg.threshold == 0.25);
  CHECK(cfg.stop_mode == meta::StopMode::threshold);
  CHECK(cfg.variant == meta::Variant::fixed_lr);
  CHECK(cfg.arch == recnet::Architecture::mapping);
  CHECK(cfg.n_list == std::vector<std::size_t>{1, 2});
  CHECK(cfg.out_dir == "out/run");
}

TEST_CASE("errors name the key") {
  RunConfig cfg;
  CHECK(error_of([&] { config::set_value(cfg, "episode.treshold", "0.5"); })
            .find("episode.treshold") != std::string::npos);
  CHECK(error_of([&] { config::set_value(cfg, "episode.t_max", "-3"); }).find("episode.t_max") !=
        std::string::npos);
  CHECK(error_of([&] { config::set_value(cfg, "episode.t_max", "ten"); }).find("episode.t_max") !=
        std::string::npos);
  CHECK(error_of([&] { config::set_value(cfg, "episode.variant", "best"); })
            .find("episode.variant") != std::string::npos);
  CHECK(error_of([&] { config::set_value(cfg, "meta.learning_rate", "\"x\""); })
            .find("meta.learning_rate") != std::string::npos);
  CHECK_THROWS_AS(config::apply_json(cfg, nlohmann::json::array()), ConfigError);
}

TEST_CASE("validate messages") {
  auto message = [](auto edit) {
    RunConfig cfg;
    edit(cfg);
    return error_of([&] { cfg.validate(); });
  };
  CHECK(message([](RunConfig& c) { c.threshold = 2.0; }) == "episode.threshold: must lie in (0, 1)");
  CHECK(message([](RunConfig& c) { c.fixed_steps = 60; }) ==
        "episode.fixed_steps: must lie in [1, episode.t_max]");
  CHECK(message([](RunConfig& c) { c.t_max = 0; }).rfind("episode.t_max", 0) == 0);
  CHECK(message([](RunConfig& c) { c.test_fraction = 1.0; }).rfind("tasks.test_fraction", 0) == 0);
  CHECK(message([](RunConfig& c) { c.n_list.clear(); }).rfind("eval.n_list", 0) == 0);
  CHECK(message([](RunConfig& c) { c.min_items = 5000; }).rfind("tasks.min_items", 0) == 0);
  CHECK(message([](RunConfig& c) { c.iterations = 0; }).empty());
}

TEST_CASE("conversions carry the settings") {
  RunConfig cfg;
  cfg.seed = 42;
  cfg.t_max = 9;
  cfg.fixed_steps = 4;
  cfg.adapt_threshold = 0.3;
  cfg.meta_learning_rate = 0.2;
  cfg.shots = 16;
  cfg.synth_scenario_scale = 2.0;
  const meta::EpisodeConfig e = cfg.episode();
  CHECK(e.t_max == 9);
  CHECK(e.fixed_steps == 4);
  CHECK(e.seed == 42);
  const meta::EpisodeConfig a = cfg.adapt_episode();
  CHECK(a.stop_mode == meta::StopMode::threshold);
  CHECK(a.threshold == 0.3);
  CHECK(cfg.train_options().optimizer.learning_rate == 0.2);
  CHECK(cfg.train_options().seed == 42);
  CHECK(cfg.task_options().shots == 16);
  CHECK(cfg.task_options().seed == 42);
  CHECK(cfg.synthetic_options().scenario_scale == 2.0);
  CHECK(cfg.layout(8).dim == 8);
  CHECK(cfg.layout(8).hidden.size() == cfg.layers);
}

TEST_CASE("load_file") {
  const auto dir = std::filesystem::temp_directory_path();
  const auto good = dir / "s2meta_cfg_good.json";
  std::ofstream(good) << R"({"episode.t_max": 11, "tasks.min_items": 1})";
  const RunConfig cfg = config::load_file(good);
  CHECK(cfg.t_max == 11);
  CHECK(cfg.min_items == 1);

  const auto bad = dir / "s2meta_cfg_bad.json";
  std::ofstream(bad) << "{not json";
  CHECK_THROWS_AS(config::load_file(bad), ConfigError);
  const auto unknown = dir / "s2meta_cfg_unknown.json";
  std::ofstream(unknown) << R"({"episode.tmax": 11})";
  CHECK_THROWS_WITH_AS(config::load_file(unknown), doctest::Contains("episode.tmax"), ConfigError);
  CHECK_THROWS_AS(config::load_file(dir / "s2meta_cfg_missing.json"), ConfigError);
}
