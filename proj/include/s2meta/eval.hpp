// SPDX-License-Identifier: Apache-2.0
//
// Ranking metrics, the ItemPop baseline, and the ablation / architecture
// comparison harnesses.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "s2meta/meta.hpp"
#include "s2meta/recnet.hpp"
#include "s2meta/tasks.hpp"

namespace s2meta::eval {

/// Items by descending score; equal scores by ascending item id.
struct RankedList {
  Id user = 0;
  std::vector<Id> items;
  std::vector<double> scores;
};

/// Orders (item, score) pairs with the tie rule.
RankedList make_ranked(Id user, std::vector<Id> items, std::vector<double> scores);

RankedList rank_items(const recnet::RecommenderParams& params, const recnet::EmbeddingTable& table,
                      Id user, std::span<const Id> candidates, std::span<const Id> exclude);

/// |top-N ∩ relevant| / |relevant|. Duplicate relevant ids count once.
double recall_at_n(const RankedList& ranked, std::span<const Id> relevant, std::size_t n);

/// Scenario items by descending support count, ties by ascending id. Items
/// absent from the support set follow with count 0.
RankedList item_pop(const tasks::ScenarioTask& task);

/// Per-N recall, user-averaged over users with at least one query positive.
using RecallByN = std::map<std::size_t, double>;

/// Scores one user's candidates. `exclude` is the user's support positives.
using Ranker = std::function<RankedList(Id user, std::span<const Id> candidates,
                                        std::span<const Id> exclude)>;

RecallByN evaluate_scenario(const Ranker& ranker, const tasks::ScenarioTask& task,
                            std::span<const std::size_t> n_list);
RecallByN evaluate_scenario(const recnet::RecommenderParams& params,
                            const recnet::EmbeddingTable& table, const tasks::ScenarioTask& task,
                            std::span<const std::size_t> n_list);
/// ItemPop served to every user, with the user's support positives removed.
RecallByN evaluate_item_pop(const tasks::ScenarioTask& task, std::span<const std::size_t> n_list);

/// Worker count from S2META_THREADS (unset or 0 = hardware concurrency).
std::size_t worker_count();

/// Runs f(0..n-1) on up to `workers` threads. Each index writes its own slot,
/// so the caller reduces in index order.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& f);

// ---------------------------------------------------------------------------
// Harnesses

struct ResultRow {
  std::string variant;
  std::uint64_t seed = 0;
  Id scenario = 0;
  std::size_t n = 0;
  double recall = 0.0;
};

struct Summary {
  std::string variant;
  std::size_t n = 0;
  /// Scenario-averaged recall per seed, in seed order.
  std::vector<double> per_seed;
  double mean = 0.0;
  /// Sample standard deviation over seeds (0 for one seed).
  double stddev = 0.0;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
  std::vector<Summary> summaries;

  /// Summary for (variant, N); throws when absent.
  const Summary& summary(const std::string& variant, std::size_t n) const;
};

struct HarnessOptions {
  meta::EpisodeConfig train_episode;
  meta::EpisodeConfig eval_episode;
  meta::MetaTrainOptions train;
  meta::InitOptions init;
  recnet::Layout layout;
  std::vector<std::size_t> n_list{10, 20, 50};
  std::size_t workers = 0;  // 0 = worker_count()
  /// Called after each (row label, seed) finishes.
  std::function<void(const std::string& label, std::uint64_t seed)> progress;
};

/// Ablation variant with its variant-specific settings.
struct VariantSpec {
  meta::Variant variant = meta::Variant::complete;
  double fixed_lr = 0.01;
  std::size_t fixed_steps = 20;
};

std::vector<VariantSpec> default_variants();

/// Meta-trains each variant per seed on `train_tasks` (seeded by the run
/// seed), adapts to every `test_tasks` scenario and records recall.
ResultsTable run_ablation(std::span<const VariantSpec> variants,
                          std::span<const tasks::ScenarioTask> train_tasks,
                          std::span<const tasks::ScenarioTask> test_tasks,
                          const recnet::EmbeddingTable& table, std::span<const std::uint64_t> seeds,
                          const HarnessOptions& options);

/// The complete meta learner trained with each architecture in turn.
ResultsTable compare_architectures(std::span<const recnet::Architecture> architectures,
                                   std::span<const tasks::ScenarioTask> train_tasks,
                                   std::span<const tasks::ScenarioTask> test_tasks,
                                   const recnet::EmbeddingTable& table,
                                   std::span<const std::uint64_t> seeds,
                                   const HarnessOptions& options);

/// ItemPop rows under variant name "item_pop" (seed-independent, one seed 0).
ResultsTable item_pop_table(std::span<const tasks::ScenarioTask> test_tasks,
                            std::span<const std::size_t> n_list);

/// Rebuilds summaries from rows (scenario-averaged per seed, then mean/std).
void summarize(ResultsTable& table);

inline constexpr int kResultsSchemaVersion = 1;

/// "variant,seed,scenario,N,recall" then one line per row.
std::string results_csv(const ResultsTable& table);
/// Aggregated summary with schema version and aggregation note.
std::string results_json(const ResultsTable& table);

}  // namespace s2meta::eval
