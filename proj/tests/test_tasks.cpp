// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "s2meta/tasks.hpp"

using namespace s2meta;
using tasks::Interaction;
using tasks::InteractionLog;
using tasks::ScenarioTask;
using tasks::TaskOptions;

namespace {

std::filesystem::path write_csv(const std::string& name, const std::string& body) {
  const auto p = std::filesystem::temp_directory_path() / ("s2meta_tasks_" + name);
  std::ofstream(p) << body;
  return p;
}

std::string error_of(const std::filesystem::path& p) {
  try {
    tasks::load_interactions_csv(p);
  } catch (const tasks::CsvError& e) {
    return e.what();
  }
  return {};
}

// Scenario 0: users 0..4 each like items 0..1 (10 positives) out of items 0..5.
InteractionLog ten_positive_log() {
  InteractionLog log;
  for (Id u = 0; u < 5; ++u) {
    log.records.push_back({0, u, 0});
    log.records.push_back({0, u, 1});
  }
  // other items of the scenario, liked only by user 0
  for (Id i = 2; i < 6; ++i) log.records.push_back({0, 0, i});
  log.normalize();
  return log;
}

// Positives of (user) in a scenario, straight from the log.
std::set<std::pair<Id, Id>> positives(const InteractionLog& log, Id scenario) {
  std::set<std::pair<Id, Id>> out;
  for (const Interaction& r : log.records) {
    if (r.scenario == scenario) out.insert({r.user, r.item});
  }
  return out;
}

InteractionLog random_log(std::size_t scenarios, std::size_t users, std::size_t items_per,
                          double density, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution keep(density);
  InteractionLog log;
  for (Id c = 0; c < scenarios; ++c) {
    for (Id u = 0; u < users; ++u) {
      for (Id k = 0; k < items_per; ++k) {
        if (keep(rng)) log.records.push_back({c, u, static_cast<Id>(c * items_per + k)});
      }
    }
  }
  log.normalize();
  return log;
}

}  // namespace

TEST_CASE("csv ingestion deduplicates") {
  const auto p = write_csv("dup.csv", "scenario_id,user_id,item_id\n0,1,2\n0,1,2\n1,3,4\n");
  const InteractionLog log = tasks::load_interactions_csv(p);
  CHECK(log.records.size() == 2);
  CHECK(log.duplicates_dropped == 1);
  CHECK(log.num_users == 4);
  CHECK(log.num_items == 5);
  CHECK(log.scenario_ids() == std::vector<Id>{0, 1});
}

TEST_CASE("csv errors carry line numbers") {
  CHECK(error_of(write_csv("alpha.csv", "scenario_id,user_id,item_id\na,b,c\n")).find(":2:") !=
        std::string::npos);
  CHECK(error_of(write_csv("neg.csv", "scenario_id,user_id,item_id\n0,1,2\n0,-1,2\n"))
            .find(":3:") != std::string::npos);
  CHECK(error_of(write_csv("fields.csv", "scenario_id,user_id,item_id\n0,1\n")).find(":2:") !=
        std::string::npos);
  CHECK(error_of(write_csv("header.csv", "0,1,2\n")).find(":1:") != std::string::npos);
  CHECK(error_of(write_csv("body.csv", "scenario_id,user_id,item_id\n")).find("no interaction") !=
        std::string::npos);
  CHECK_FALSE(error_of(write_csv("empty.csv", "")).empty());
  CHECK_FALSE(error_of("/nonexistent/s2meta.csv").empty());
}

TEST_CASE("csv round-trip") {
  const InteractionLog log = random_log(3, 5, 4, 0.5, 1);
  const auto p = std::filesystem::temp_directory_path() / "s2meta_tasks_roundtrip.csv";
  tasks::write_interactions_csv(p, log);
  const InteractionLog back = tasks::load_interactions_csv(p);
  CHECK(back.records == log.records);
}

TEST_CASE("support and query sizes") {
  const InteractionLog log = ten_positive_log();
  // 14 positives in total; pick 4 of them as support
  TaskOptions o;
  o.shots = 4;
  o.min_items = 1;
  o.neg_per_pos = 2;
  const auto built = tasks::build_tasks(log, o);
  REQUIRE(built.tasks.size() == 1);
  const ScenarioTask& t = built.tasks[0];
  CHECK(t.support.size() == 4);
  CHECK(t.query_positives.size() == 10);
  CHECK(t.candidate_items == std::vector<Id>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("ten positives with four shots leave six query positives and twelve valid triples") {
  InteractionLog log;
  for (Id u = 0; u < 5; ++u) {
    log.records.push_back({0, u, 0});
    log.records.push_back({0, u, 1});
  }
  log.records.push_back({1, 0, 2});  // lone positive: excluded
  log.normalize();
  TaskOptions o;
  o.shots = 4;
  o.min_items = 1;
  o.neg_per_pos = 2;
  // scenario 0 has items {0, 1}; every user likes both, so negatives are impossible
  auto built = tasks::build_tasks(log, o);
  REQUIRE(built.tasks.size() == 1);
  CHECK(built.warnings.size() == 1);
  CHECK(built.tasks[0].support.size() == 4);
  CHECK(built.tasks[0].query_positives.size() == 6);
  CHECK(built.tasks[0].query.empty());

  // user 9 likes items 10..13 only, so every user now has negatives
  for (Id i = 10; i < 14; ++i) log.records.push_back({0, 9, i});
  log.normalize();
  o.shots = 8;  // 14 positives -> 6 query positives
  built = tasks::build_tasks(log, o);
  const ScenarioTask& t = built.tasks[0];
  REQUIRE(t.query_positives.size() == 6);
  const auto H = positives(log, 0);
  CHECK(t.query.size() == 12);
  for (const recnet::TrainTriple& q : t.query) {
    CHECK(H.count({q.user, q.pos_item}) == 1);
    CHECK(H.count({q.user, q.neg_item}) == 0);
    CHECK(std::binary_search(t.candidate_items.begin(), t.candidate_items.end(), q.neg_item));
  }
}

TEST_CASE("task invariants hold on random logs") {
  const InteractionLog log = random_log(12, 15, 20, 0.3, 7);
  TaskOptions o;
  o.shots = 16;
  o.min_items = 15;
  o.max_items = 20;
  o.neg_per_pos = 3;
  o.seed = 5;
  const auto built = tasks::build_tasks(log, o);
  REQUIRE(!built.tasks.empty());
  for (const ScenarioTask& t : built.tasks) {
    CAPTURE(t.scenario);
    const auto H = positives(log, t.scenario);
    CHECK(t.candidate_items.size() >= o.min_items);
    CHECK(t.candidate_items.size() <= o.max_items);
    CHECK(t.support.size() == o.shots);
    CHECK(t.support.size() + t.query_positives.size() == H.size());
    std::set<std::pair<Id, Id>> support;
    for (const auto& s : t.support) support.insert({s.user, s.item});
    for (const auto& q : t.query_positives) CHECK(support.count({q.user, q.item}) == 0);
    for (const recnet::TrainTriple& q : t.query) {
      CHECK(support.count({q.user, q.pos_item}) == 0);
      CHECK(H.count({q.user, q.neg_item}) == 0);
    }
  }
  CHECK(tasks::build_tasks(log, o).tasks == built.tasks);
  TaskOptions other = o;
  other.seed = 6;
  CHECK_FALSE(tasks::build_tasks(log, other).tasks == built.tasks);
}

TEST_CASE("item-count filter and shot shortfall") {
  const InteractionLog log = random_log(4, 10, 8, 0.5, 3);
  TaskOptions o;
  o.shots = 4;
  o.min_items = 9;
  CHECK(tasks::build_tasks(log, o).tasks.empty());
  o.min_items = 1;
  o.max_items = 7;
  CHECK(tasks::build_tasks(log, o).tasks.size() <= 4);
  o.max_items = 1000;
  o.shots = 1000;
  const auto built = tasks::build_tasks(log, o);
  CHECK(built.tasks.empty());
  CHECK(built.warnings.size() == 4);
  o.shots = 0;
  CHECK_THROWS_AS(tasks::build_tasks(log, o), std::invalid_argument);
  o.shots = 1;
  o.min_items = 10;
  o.max_items = 5;
  CHECK_THROWS_AS(tasks::build_tasks(log, o), std::invalid_argument);
}

TEST_CASE("meta split") {
  const InteractionLog log = random_log(10, 10, 6, 0.6, 11);
  TaskOptions o;
  o.shots = 4;
  o.min_items = 1;
  auto built = tasks::build_tasks(log, o);
  REQUIRE(built.tasks.size() == 10);
  const auto split = tasks::split_meta(built.tasks, 0.3, 99);
  CHECK(split.meta_train.size() == 7);
  CHECK(split.meta_test.size() == 3);
  std::set<Id> train_ids;
  for (const auto& t : split.meta_train) train_ids.insert(t.scenario);
  for (const auto& t : split.meta_test) CHECK(train_ids.count(t.scenario) == 0);
  const auto again = tasks::split_meta(built.tasks, 0.3, 99);
  CHECK(again.meta_train == split.meta_train);
  CHECK(again.meta_test == split.meta_test);
  CHECK_THROWS_AS(tasks::split_meta({built.tasks[0]}, 0.3, 1), std::invalid_argument);
  CHECK_THROWS_AS(tasks::split_meta(built.tasks, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(tasks::split_meta(built.tasks, 1.0, 1), std::invalid_argument);
  // the per-user index survives the split
  const ScenarioTask& t = split.meta_test[0];
  CHECK(t.in_support(t.support[0].user, t.support[0].item));

  const auto manifest = nlohmann::json::parse(tasks::task_manifest_json(split));
  CHECK(manifest["meta_train"].size() == 7);
  CHECK(manifest["meta_test"][0]["scenario"] == t.scenario);
  CHECK(manifest["meta_test"][0]["support"] == 4);
}

TEST_CASE("sample_batch") {
  const InteractionLog log = random_log(3, 12, 15, 0.4, 21);
  TaskOptions o;
  o.shots = 16;
  o.min_items = 1;
  const auto built = tasks::build_tasks(log, o);
  REQUIRE(!built.tasks.empty());
  const ScenarioTask& t = built.tasks[0];
  std::set<std::pair<Id, Id>> support;
  for (const auto& s : t.support) support.insert({s.user, s.item});

  Rng rng(1);
  CHECK(tasks::sample_batch(t, 5, rng).size() == 5);
  for (int k = 0; k < 1000; ++k) {
    for (const recnet::TrainTriple& b : tasks::sample_batch(t, 16, rng)) {
      CHECK(support.count({b.user, b.pos_item}) == 1);
      CHECK(support.count({b.user, b.neg_item}) == 0);
    }
  }
  Rng a(77), b(77);
  CHECK(tasks::sample_batch(t, 32, a) == tasks::sample_batch(t, 32, b));
}

TEST_CASE("sample_batch falls back to the catalogue when the scenario is exhausted") {
  ScenarioTask t;
  t.scenario = 0;
  t.support = {{0, 0}, {0, 1}};
  t.candidate_items = {0, 1};
  t.catalogue_size = 5;
  t.index();
  Rng rng(3);
  std::set<Id> seen;
  for (int k = 0; k < 200; ++k) {
    for (const recnet::TrainTriple& b : tasks::sample_batch(t, 4, rng)) {
      CHECK(b.neg_item >= 2);
      CHECK(b.neg_item < 5);
      seen.insert(b.neg_item);
    }
  }
  CHECK(seen == std::set<Id>{2, 3, 4});
  t.catalogue_size = 2;
  CHECK_THROWS(tasks::sample_batch(t, 1, rng));
  t.support.clear();
  t.index();
  CHECK_THROWS_AS(tasks::sample_batch(t, 1, rng), std::invalid_argument);
}

TEST_CASE("noise-free generator follows the sign of the aligned latents") {
  // d = 2, scale 10: aligned pairs have logit +70.7, anti-aligned -70.7.
  tasks::SyntheticLatents lat;
  const double s = 10.0;
  lat.users = ad::Tensor::matrix({{s, 0}, {0, s}, {-s, 0}});
  lat.items = ad::Tensor::matrix({{s, -s}, {-s, s}, {s, s}});
  lat.scenarios = ad::Tensor::matrix({{0, 0}});
  lat.scenario_items = {{0, 1, 2}};
  Rng rng(5);
  const auto rows = tasks::sample_scenario_interactions(lat, 0, 0.0, rng);
  std::set<std::pair<Id, Id>> got;
  for (const Interaction& r : rows) got.insert({r.user, r.item});
  std::set<std::pair<Id, Id>> expected;
  for (Id u = 0; u < 3; ++u) {
    for (Id i = 0; i < 3; ++i) {
      const double dot = lat.users.at(u, 0) * lat.items.at(i, 0) + lat.users.at(u, 1) * lat.items.at(i, 1);
      if (dot > 0) expected.insert({u, i});
    }
  }
  CHECK(got == expected);
}

TEST_CASE("generator interaction rate matches the logistic rule") {
  // one user, one item: <u + c, i>/sqrt(2) = 1
  tasks::SyntheticLatents lat;
  lat.users = ad::Tensor::matrix({{0.7, 0.3}});
  lat.scenarios = ad::Tensor::matrix({{0.3, -0.3}});
  lat.items = ad::Tensor::matrix({{std::sqrt(2.0), 0.0}});
  lat.scenario_items = {{0}};
  Rng rng(9);
  const int n = 20000;
  int hits = 0;
  for (int k = 0; k < n; ++k) hits += tasks::sample_scenario_interactions(lat, 0, 0.0, rng).size();
  const double p = 1.0 / (1.0 + std::exp(-1.0));
  const double se = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(hits / double(n) - p) < 4 * se);
}

TEST_CASE("synthetic family") {
  tasks::SyntheticOptions o;
  o.n_scenarios = 5;
  o.users_per = 8;
  o.items_per = 6;
  o.d_latent = 4;
  o.seed = 12;
  const auto a = tasks::gen_synthetic_family(o);
  const auto b = tasks::gen_synthetic_family(o);
  CHECK(a.log.records == b.log.records);
  CHECK(a.table == b.table);
  CHECK(a.log.scenario_ids().size() == 5);
  CHECK(a.table.num_users() == 8);
  CHECK(a.table.num_items() == 30);
  CHECK(a.table.dim() == 4);
  for (const Interaction& r : a.log.records) {
    CHECK(r.item / 6 == r.scenario);
  }
  o.seed = 13;
  CHECK_FALSE(tasks::gen_synthetic_family(o).log.records == a.log.records);

  o.n_scenarios = 1;
  CHECK(tasks::gen_synthetic_family(o).log.scenario_ids() == std::vector<Id>{0});

  o.embedding_noise = 0.0;
  const auto exact = tasks::gen_synthetic_family(o);
  CHECK(exact.table.users == exact.latents.users);
  CHECK(exact.table.items == exact.latents.items);

  o.scenario_scale = 0.0;
  CHECK(tasks::gen_synthetic_family(o).latents.scenarios.values ==
        std::vector<double>(o.d_latent, 0.0));

  o.users_per = 0;
  CHECK_THROWS_AS(tasks::gen_synthetic_family(o), std::invalid_argument);
  o.users_per = 8;
  o.noise = -1.0;
  CHECK_THROWS_AS(tasks::gen_synthetic_family(o), std::invalid_argument);
}
