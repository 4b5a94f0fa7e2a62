// SPDX-License-Identifier: Apache-2.0

#include "s2meta/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace s2meta::eval {

RankedList make_ranked(Id user, std::vector<Id> items, std::vector<double> scores) {
  if (items.size() != scores.size()) {
    throw std::invalid_argument("make_ranked: items and scores differ in length");
  }
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return items[a] < items[b];
  });
  RankedList out;
  out.user = user;
  out.items.reserve(items.size());
  out.scores.reserve(items.size());
  for (std::size_t k : order) {
    out.items.push_back(items[k]);
    out.scores.push_back(scores[k]);
  }
  return out;
}

namespace {

std::vector<Id> remaining_candidates(std::span<const Id> candidates, std::span<const Id> exclude) {
  std::vector<Id> ex(exclude.begin(), exclude.end());
  std::sort(ex.begin(), ex.end());
  std::vector<Id> out;
  out.reserve(candidates.size());
  for (Id i : candidates) {
    if (!std::binary_search(ex.begin(), ex.end(), i)) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace

RankedList rank_items(const recnet::RecommenderParams& params, const recnet::EmbeddingTable& table,
                      Id user, std::span<const Id> candidates, std::span<const Id> exclude) {
  std::vector<Id> items = remaining_candidates(candidates, exclude);
  if (items.empty()) {
    throw std::invalid_argument("rank_items: no candidates left for user " + std::to_string(user) +
                                " after exclusion");
  }
  std::vector<double> scores = recnet::score_items(params, table, user, items);
  return make_ranked(user, std::move(items), std::move(scores));
}

double recall_at_n(const RankedList& ranked, std::span<const Id> relevant, std::size_t n) {
  if (n == 0) throw std::invalid_argument("recall_at_n: N must be >= 1");
  std::vector<Id> rel(relevant.begin(), relevant.end());
  std::sort(rel.begin(), rel.end());
  rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
  if (rel.empty()) throw std::invalid_argument("recall_at_n: empty relevant set");
  const std::size_t top = std::min(n, ranked.items.size());
  std::size_t hits = 0;
  for (std::size_t k = 0; k < top; ++k) {
    if (std::binary_search(rel.begin(), rel.end(), ranked.items[k])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

RankedList item_pop(const tasks::ScenarioTask& task) {
  std::map<Id, std::size_t> counts;
  for (Id i : task.candidate_items) counts[i] = 0;
  for (const tasks::UserItem& p : task.support) ++counts[p.item];
  std::vector<Id> items;
  std::vector<double> scores;
  for (const auto& [item, count] : counts) {
    items.push_back(item);
    scores.push_back(static_cast<double>(count));
  }
  return make_ranked(0, std::move(items), std::move(scores));
}

RecallByN evaluate_scenario(const Ranker& ranker, const tasks::ScenarioTask& task,
                            std::span<const std::size_t> n_list) {
  if (n_list.empty()) throw std::invalid_argument("evaluate_scenario: empty N list");
  for (std::size_t n : n_list) {
    if (n == 0) throw std::invalid_argument("evaluate_scenario: N must be >= 1");
  }
  std::map<Id, std::vector<Id>> relevant;
  for (const tasks::UserItem& p : task.query_positives) relevant[p.user].push_back(p.item);
  if (relevant.empty()) {
    throw std::invalid_argument("evaluate_scenario: scenario " + std::to_string(task.scenario) +
                                " has no user with a query positive");
  }
  RecallByN sums;
  for (std::size_t n : n_list) sums[n] = 0.0;
  for (const auto& [user, items] : relevant) {
    const RankedList ranked = ranker(user, task.candidate_items, task.support_items(user));
    for (std::size_t n : n_list) sums[n] += recall_at_n(ranked, items, n);
  }
  for (auto& [n, s] : sums) s /= static_cast<double>(relevant.size());
  return sums;
}

RecallByN evaluate_scenario(const recnet::RecommenderParams& params,
                            const recnet::EmbeddingTable& table, const tasks::ScenarioTask& task,
                            std::span<const std::size_t> n_list) {
  if (params.layout.arch == recnet::Architecture::mapping) {
    // item towers are shared by every user of the scenario
    std::map<Id, std::vector<double>> towers;
    for (Id i : task.candidate_items) towers.emplace(i, recnet::item_tower(params, table, i));
    return evaluate_scenario(
        [&](Id user, std::span<const Id> candidates, std::span<const Id> exclude) {
          std::vector<Id> items = remaining_candidates(candidates, exclude);
          if (items.empty()) {
            throw std::invalid_argument("rank_items: no candidates left for user " +
                                        std::to_string(user) + " after exclusion");
          }
          const std::vector<double> zu = recnet::user_tower(params, table, user);
          std::vector<double> scores;
          scores.reserve(items.size());
          for (Id i : items) scores.push_back(dot(zu, towers.at(i)));
          return make_ranked(user, std::move(items), std::move(scores));
        },
        task, n_list);
  }
  return evaluate_scenario(
      [&](Id user, std::span<const Id> candidates, std::span<const Id> exclude) {
        return rank_items(params, table, user, candidates, exclude);
      },
      task, n_list);
}

RecallByN evaluate_item_pop(const tasks::ScenarioTask& task, std::span<const std::size_t> n_list) {
  const RankedList pop = item_pop(task);
  return evaluate_scenario(
      [&](Id user, std::span<const Id>, std::span<const Id> exclude) {
        RankedList out;
        out.user = user;
        for (std::size_t k = 0; k < pop.items.size(); ++k) {
          if (std::find(exclude.begin(), exclude.end(), pop.items[k]) != exclude.end()) continue;
          out.items.push_back(pop.items[k]);
          out.scores.push_back(pop.scores[k]);
        }
        return out;
      },
      task, n_list);
}

std::size_t worker_count() {
  std::size_t n = 0;
  if (const char* env = std::getenv("S2META_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<std::size_t>(v);
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& f) {
  if (workers == 0) workers = worker_count();
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t k = 0; k < n; ++k) f(k);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto loop = [&] {
    for (;;) {
      std::size_t k;
      {
        std::lock_guard lock(mu);
        if (next >= n || error) return;
        k = next++;
      }
      try {
        f(k);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------

const Summary& ResultsTable::summary(const std::string& variant, std::size_t n) const {
  for (const Summary& s : summaries) {
    if (s.variant == variant && s.n == n) return s;
  }
  throw std::out_of_range("no summary for variant " + variant + " at N=" + std::to_string(n));
}

std::vector<VariantSpec> default_variants() {
  return {{meta::Variant::complete},
          {meta::Variant::rand_init},
          {meta::Variant::fixed_lr, 0.01, 20},
          {meta::Variant::fixed_step, 0.01, 20}};
}

void summarize(ResultsTable& table) {
  // (variant, n) -> seed -> (sum, count), in first-appearance order
  std::vector<std::pair<std::string, std::size_t>> keys;
  std::map<std::pair<std::string, std::size_t>, std::map<std::uint64_t, std::pair<double, std::size_t>>>
      acc;
  std::map<std::pair<std::string, std::size_t>, std::vector<std::uint64_t>> seed_order;
  for (const ResultRow& r : table.rows) {
    const auto key = std::make_pair(r.variant, r.n);
    if (!acc.contains(key)) keys.push_back(key);
    auto& per_seed = acc[key];
    if (!per_seed.contains(r.seed)) seed_order[key].push_back(r.seed);
    auto& [sum, count] = per_seed[r.seed];
    sum += r.recall;
    ++count;
  }
  table.summaries.clear();
  for (const auto& key : keys) {
    Summary s;
    s.variant = key.first;
    s.n = key.second;
    for (std::uint64_t seed : seed_order[key]) {
      const auto& [sum, count] = acc[key][seed];
      s.per_seed.push_back(sum / static_cast<double>(count));
    }
    const double k = static_cast<double>(s.per_seed.size());
    s.mean = std::accumulate(s.per_seed.begin(), s.per_seed.end(), 0.0) / k;
    if (s.per_seed.size() > 1) {
      double ss = 0.0;
      for (double v : s.per_seed) ss += (v - s.mean) * (v - s.mean);
      s.stddev = std::sqrt(ss / (k - 1.0));
    }
    table.summaries.push_back(std::move(s));
  }
}

namespace {

struct Job {
  std::string label;
  std::uint64_t seed;
  meta::EpisodeConfig train_cfg;
  meta::EpisodeConfig eval_cfg;
  recnet::Layout layout;
};

ResultsTable run_jobs(const std::vector<Job>& jobs, std::span<const tasks::ScenarioTask> train_tasks,
                      std::span<const tasks::ScenarioTask> test_tasks,
                      const recnet::EmbeddingTable& table, const HarnessOptions& options) {
  if (train_tasks.empty() || test_tasks.empty()) {
    throw std::invalid_argument("harness: empty meta-train or meta-test set");
  }
  std::vector<std::vector<ResultRow>> per_job(jobs.size());
  std::mutex progress_mu;
  parallel_for(jobs.size(), options.workers, [&](std::size_t k) {
    const Job& job = jobs[k];
    Rng init_rng(job.seed);
    meta::MetaParams m = meta::MetaParams::initialize(job.layout, init_rng, options.init);
    meta::MetaTrainOptions train = options.train;
    train.seed = job.seed;
    m = meta::meta_train(std::move(m), train_tasks, table, job.train_cfg, train).meta;
    for (const tasks::ScenarioTask& task : test_tasks) {
      meta::EpisodeConfig cfg = job.eval_cfg;
      cfg.seed = job.seed;
      const meta::AdaptResult adapted = meta::adapt(m, task, table, cfg);
      const RecallByN recall = evaluate_scenario(adapted.params, table, task, options.n_list);
      for (const auto& [n, r] : recall) {
        per_job[k].push_back({job.label, job.seed, task.scenario, n, r});
      }
    }
    if (options.progress) {
      std::lock_guard lock(progress_mu);
      options.progress(job.label, job.seed);
    }
  });
  ResultsTable out;
  for (auto& rows : per_job) out.rows.insert(out.rows.end(), rows.begin(), rows.end());
  summarize(out);
  return out;
}

meta::EpisodeConfig with_variant(meta::EpisodeConfig cfg, const VariantSpec& v) {
  cfg.variant = v.variant;
  cfg.fixed_lr = v.fixed_lr;
  cfg.fixed_steps = v.fixed_steps;
  return cfg;
}

}  // namespace

ResultsTable run_ablation(std::span<const VariantSpec> variants,
                          std::span<const tasks::ScenarioTask> train_tasks,
                          std::span<const tasks::ScenarioTask> test_tasks,
                          const recnet::EmbeddingTable& table, std::span<const std::uint64_t> seeds,
                          const HarnessOptions& options) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: need at least one seed");
  if (variants.empty()) throw std::invalid_argument("run_ablation: need at least one variant");
  std::vector<Job> jobs;
  for (const VariantSpec& v : variants) {
    for (std::uint64_t seed : seeds) {
      jobs.push_back({meta::to_string(v.variant), seed, with_variant(options.train_episode, v),
                      with_variant(options.eval_episode, v), options.layout});
    }
  }
  return run_jobs(jobs, train_tasks, test_tasks, table, options);
}

ResultsTable compare_architectures(std::span<const recnet::Architecture> architectures,
                                   std::span<const tasks::ScenarioTask> train_tasks,
                                   std::span<const tasks::ScenarioTask> test_tasks,
                                   const recnet::EmbeddingTable& table,
                                   std::span<const std::uint64_t> seeds,
                                   const HarnessOptions& options) {
  if (seeds.empty()) throw std::invalid_argument("compare_architectures: need at least one seed");
  if (architectures.empty()) {
    throw std::invalid_argument("compare_architectures: need at least one architecture");
  }
  std::vector<Job> jobs;
  for (recnet::Architecture arch : architectures) {
    const std::size_t layers = options.layout.hidden.empty() ? 3 : options.layout.hidden.size();
    const recnet::Layout layout = recnet::Layout::halving(arch, table.dim(), layers);
    for (std::uint64_t seed : seeds) {
      jobs.push_back({recnet::to_string(arch), seed, options.train_episode, options.eval_episode,
                      layout});
    }
  }
  return run_jobs(jobs, train_tasks, test_tasks, table, options);
}

ResultsTable item_pop_table(std::span<const tasks::ScenarioTask> test_tasks,
                            std::span<const std::size_t> n_list) {
  ResultsTable out;
  for (const tasks::ScenarioTask& task : test_tasks) {
    for (const auto& [n, r] : evaluate_item_pop(task, n_list)) {
      out.rows.push_back({"item_pop", 0, task.scenario, n, r});
    }
  }
  summarize(out);
  return out;
}

std::string results_csv(const ResultsTable& table) {
  std::ostringstream out;
  out.precision(17);
  out << "variant,seed,scenario,N,recall\n";
  for (const ResultRow& r : table.rows) {
    out << r.variant << ',' << r.seed << ',' << r.scenario << ',' << r.n << ',' << r.recall << '\n';
  }
  return out.str();
}

std::string results_json(const ResultsTable& table) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kResultsSchemaVersion;
  doc["aggregation"] =
      "recall averaged over users with at least one query positive, then over scenarios with "
      "equal weight, then mean and sample stddev over seeds";
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const Summary& s : table.summaries) {
    rows.push_back({{"variant", s.variant},
                    {"N", s.n},
                    {"mean", s.mean},
                    {"std", s.stddev},
                    {"per_seed", s.per_seed}});
  }
  doc["summaries"] = std::move(rows);
  return doc.dump(2);
}

}  // namespace s2meta::eval
