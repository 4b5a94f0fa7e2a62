// SPDX-License-Identifier: Apache-2.0
//
// Scenario data: interaction logs, per-scenario support/query tasks,
// meta-train/meta-test splits, training-batch sampling and a synthetic
// scenario-family generator.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "s2meta/recnet.hpp"

namespace s2meta::tasks {

using recnet::TrainTriple;

struct Interaction {
  Id scenario = 0;
  Id user = 0;
  Id item = 0;
  friend auto operator<=>(const Interaction&, const Interaction&) = default;
};

struct UserItem {
  Id user = 0;
  Id item = 0;
  friend auto operator<=>(const UserItem&, const UserItem&) = default;
};

/// Deduplicated interaction records with their id universes.
struct InteractionLog {
  std::vector<Interaction> records;
  /// max id + 1 over the records unless set larger explicitly
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  /// Exact duplicates removed by the last normalize().
  std::size_t duplicates_dropped = 0;

  /// Sorts, removes exact duplicates and refreshes the id universes.
  /// Returns the number of duplicates dropped.
  std::size_t normalize();
  std::vector<Id> scenario_ids() const;
  std::vector<std::pair<Id, Id>> user_item_pairs() const;
};

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Header "scenario_id,user_id,item_id" then one row per interaction.
InteractionLog load_interactions_csv(const std::filesystem::path& path);
void write_interactions_csv(const std::filesystem::path& path, const InteractionLog& log);

struct ScenarioTask {
  Id scenario = 0;
  std::vector<UserItem> support;
  std::vector<TrainTriple> query;
  /// Distinct (user, item) positives held out of the support set.
  std::vector<UserItem> query_positives;
  /// Items of this scenario, ascending.
  std::vector<Id> candidate_items;
  /// Size of the global item catalogue (fallback negative pool).
  std::size_t catalogue_size = 0;

  /// Rebuilds the per-user support index; call after editing `support`.
  void index();
  /// Ascending support items of `user` (empty when the user has none).
  std::span<const Id> support_items(Id user) const;
  bool in_support(Id user, Id item) const;

  friend bool operator==(const ScenarioTask& a, const ScenarioTask& b) {
    return a.scenario == b.scenario && a.support == b.support && a.query == b.query &&
           a.query_positives == b.query_positives && a.candidate_items == b.candidate_items &&
           a.catalogue_size == b.catalogue_size;
  }

 private:
  std::unordered_map<Id, std::vector<Id>> support_by_user_;
};

struct TaskOptions {
  std::size_t shots = 64;
  std::size_t min_items = 100;
  std::size_t max_items = 1000;
  std::size_t neg_per_pos = 4;
  std::uint64_t seed = 0;
};

struct BuildResult {
  std::vector<ScenarioTask> tasks;
  std::vector<std::string> warnings;
};

/// One task per scenario whose item count lies in [min_items, max_items] and
/// that has at least `shots` positives, in ascending scenario order. Each
/// scenario draws from its own generator seeded by (seed, scenario id).
BuildResult build_tasks(const InteractionLog& log, const TaskOptions& options);

struct MetaSplit {
  std::vector<ScenarioTask> meta_train;
  std::vector<ScenarioTask> meta_test;
};

/// Seeded shuffle, then the last round(test_fraction * n) tasks (at least one,
/// at most n - 1) go to meta-test.
MetaSplit split_meta(std::vector<ScenarioTask> tasks, double test_fraction, std::uint64_t seed);

/// N training triples: positives drawn with replacement from the support set,
/// negatives drawn uniformly from the scenario's items excluding the user's
/// support positives (100 attempts, then uniformly from every non-positive
/// item of the global catalogue).
std::vector<TrainTriple> sample_batch(const ScenarioTask& task, std::size_t n, Rng& rng);

// ---------------------------------------------------------------------------
// Synthetic scenario families.

/// Ground-truth latent factors. Every user is shared by all scenarios; each
/// scenario owns a contiguous block of items.
struct SyntheticLatents {
  ad::Tensor users;      // [m × d]
  ad::Tensor items;      // [n × d]
  ad::Tensor scenarios;  // [C × d]
  /// Items owned by each scenario.
  std::vector<std::vector<Id>> scenario_items;
};

struct SyntheticOptions {
  std::size_t n_scenarios = 20;
  std::size_t users_per = 40;
  std::size_t items_per = 30;
  std::size_t d_latent = 16;
  /// Stddev of the logit noise ε.
  double noise = 0.5;
  /// Stddev of the Gaussian noise added to latents to form embedding tables.
  double embedding_noise = 0.1;
  /// Stddev of the scenario latents (users and items are standard normal).
  double scenario_scale = 1.0;
  std::uint64_t seed = 0;
};

struct SyntheticFamily {
  InteractionLog log;
  recnet::EmbeddingTable table;
  SyntheticLatents latents;
};

/// Interaction (c, u, i) occurs with probability
/// σ(<u + c, i> / sqrt(d) + ε), ε ~ Normal(0, noise²), for every user u and
/// every item i of scenario c.
std::vector<Interaction> sample_scenario_interactions(const SyntheticLatents& latents, Id scenario,
                                                      double noise, Rng& rng);

/// Draws latents, samples interactions and derives noisy embedding tables.
/// A scenario with no interactions is redrawn up to 10 times.
SyntheticFamily gen_synthetic_family(const SyntheticOptions& options);

// ---------------------------------------------------------------------------

/// Task-manifest JSON: scenario ids with support/query sizes per split.
std::string task_manifest_json(const MetaSplit& split);

}  // namespace s2meta::tasks
