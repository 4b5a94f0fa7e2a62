// SPDX-License-Identifier: Apache-2.0

#include "s2meta/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace s2meta::tasks {

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

bool parse_id(const std::string& field, Id& out) {
  const std::string t = trim(field);
  if (t.empty()) return false;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

Rng scenario_rng(std::uint64_t seed, Id scenario) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(scenario)};
  return Rng(seq);
}

}  // namespace

std::size_t InteractionLog::normalize() {
  std::sort(records.begin(), records.end());
  const auto before = records.size();
  records.erase(std::unique(records.begin(), records.end()), records.end());
  duplicates_dropped = before - records.size();
  for (const Interaction& r : records) {
    num_users = std::max<std::size_t>(num_users, std::size_t{r.user} + 1);
    num_items = std::max<std::size_t>(num_items, std::size_t{r.item} + 1);
  }
  return duplicates_dropped;
}

std::vector<Id> InteractionLog::scenario_ids() const {
  std::set<Id> ids;
  for (const Interaction& r : records) ids.insert(r.scenario);
  return {ids.begin(), ids.end()};
}

std::vector<std::pair<Id, Id>> InteractionLog::user_item_pairs() const {
  std::vector<std::pair<Id, Id>> out;
  out.reserve(records.size());
  for (const Interaction& r : records) out.emplace_back(r.user, r.item);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

InteractionLog load_interactions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open interaction file " + path.string());
  const std::string where = path.string() + ":";
  std::string line;
  if (!std::getline(in, line)) throw CsvError(where + "1: empty file, expected header");
  if (trim(line) != "scenario_id,user_id,item_id") {
    throw CsvError(where + "1: expected header 'scenario_id,user_id,item_id', got '" + trim(line) +
                   "'");
  }
  InteractionLog log;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 3) {
      throw CsvError(where + std::to_string(line_no) + ": expected 3 fields, got " +
                     std::to_string(fields.size()));
    }
    Interaction r;
    if (!parse_id(fields[0], r.scenario) || !parse_id(fields[1], r.user) ||
        !parse_id(fields[2], r.item)) {
      throw CsvError(where + std::to_string(line_no) + ": ids must be non-negative integers in '" +
                     trim(line) + "'");
    }
    log.records.push_back(r);
  }
  if (log.records.empty()) throw CsvError(where + " no interaction rows after header");
  log.normalize();
  return log;
}

void write_interactions_csv(const std::filesystem::path& path, const InteractionLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "scenario_id,user_id,item_id\n";
  for (const Interaction& r : log.records) {
    out << r.scenario << ',' << r.user << ',' << r.item << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

void ScenarioTask::index() {
  support_by_user_.clear();
  for (const UserItem& p : support) support_by_user_[p.user].push_back(p.item);
  for (auto& [user, items] : support_by_user_) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
  }
}

std::span<const Id> ScenarioTask::support_items(Id user) const {
  const auto it = support_by_user_.find(user);
  if (it == support_by_user_.end()) return {};
  return it->second;
}

bool ScenarioTask::in_support(Id user, Id item) const {
  const auto items = support_items(user);
  return std::binary_search(items.begin(), items.end(), item);
}

BuildResult build_tasks(const InteractionLog& log, const TaskOptions& options) {
  if (options.shots < 1) throw std::invalid_argument("build_tasks: shots must be >= 1");
  if (options.min_items > options.max_items) {
    throw std::invalid_argument("build_tasks: min_items exceeds max_items");
  }
  std::map<Id, std::vector<UserItem>> by_scenario;
  for (const Interaction& r : log.records) by_scenario[r.scenario].push_back({r.user, r.item});

  BuildResult result;
  for (auto& [scenario, pairs] : by_scenario) {
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    std::vector<Id> items;
    for (const UserItem& p : pairs) items.push_back(p.item);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    if (items.size() < options.min_items || items.size() > options.max_items) continue;
    if (pairs.size() <= options.shots) {
      result.warnings.push_back("scenario " + std::to_string(scenario) + " has " +
                                std::to_string(pairs.size()) + " positives, needs more than " +
                                std::to_string(options.shots) + "; excluded");
      continue;
    }

    Rng rng = scenario_rng(options.seed, scenario);
    std::vector<UserItem> shuffled = pairs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);

    ScenarioTask task;
    task.scenario = scenario;
    task.candidate_items = items;
    task.catalogue_size = std::max(log.num_items, std::size_t{items.back()} + 1);
    task.support.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(options.shots));
    task.query_positives.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(options.shots),
                                shuffled.end());
    std::sort(task.support.begin(), task.support.end());
    std::sort(task.query_positives.begin(), task.query_positives.end());
    task.index();

    // Negatives avoid every positive of the user in this scenario.
    std::map<Id, std::vector<Id>> allowed;
    for (const UserItem& q : task.query_positives) {
      if (allowed.count(q.user)) continue;
      std::vector<Id> pos;
      for (const UserItem& p : pairs) {
        if (p.user == q.user) pos.push_back(p.item);
      }
      std::vector<Id>& a = allowed[q.user];
      std::set_difference(items.begin(), items.end(), pos.begin(), pos.end(),
                          std::back_inserter(a));
    }
    for (const UserItem& q : task.query_positives) {
      const std::vector<Id>& a = allowed[q.user];
      if (a.empty()) continue;
      std::uniform_int_distribution<std::size_t> pick(0, a.size() - 1);
      for (std::size_t k = 0; k < options.neg_per_pos; ++k) {
        task.query.push_back({q.user, q.item, a[pick(rng)]});
      }
    }
    result.tasks.push_back(std::move(task));
  }
  return result;
}

MetaSplit split_meta(std::vector<ScenarioTask> tasks, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_meta: test_fraction must lie in (0, 1)");
  }
  if (tasks.size() < 2) throw std::invalid_argument("split_meta: need at least 2 tasks");
  Rng rng(seed);
  std::shuffle(tasks.begin(), tasks.end(), rng);
  const auto n = tasks.size();
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  MetaSplit split;
  for (std::size_t k = 0; k < n; ++k) {
    (k < n - n_test ? split.meta_train : split.meta_test).push_back(std::move(tasks[k]));
  }
  for (auto* part : {&split.meta_train, &split.meta_test}) {
    for (ScenarioTask& t : *part) t.index();
  }
  return split;
}

std::vector<TrainTriple> sample_batch(const ScenarioTask& task, std::size_t n, Rng& rng) {
  if (task.support.empty()) throw std::invalid_argument("sample_batch: empty support set");
  if (task.candidate_items.empty()) throw std::invalid_argument("sample_batch: no candidate items");
  std::uniform_int_distribution<std::size_t> pick_pos(0, task.support.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_cand(0, task.candidate_items.size() - 1);
  std::vector<TrainTriple> batch;
  batch.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const UserItem& p = task.support[pick_pos(rng)];
    Id neg = task.candidate_items[pick_cand(rng)];
    int attempts = 1;
    while (task.in_support(p.user, neg) && attempts < 100) {
      neg = task.candidate_items[pick_cand(rng)];
      ++attempts;
    }
    if (task.in_support(p.user, neg)) {
      const auto positives = task.support_items(p.user);
      const std::size_t free = task.catalogue_size - positives.size();
      if (task.catalogue_size <= positives.size()) {
        throw std::runtime_error("sample_batch: user " + std::to_string(p.user) +
                                 " has no non-positive item in the catalogue");
      }
      // k-th non-positive id in ascending order
      std::size_t k_free = std::uniform_int_distribution<std::size_t>(0, free - 1)(rng);
      Id candidate = 0;
      for (Id id = 0; id < task.catalogue_size; ++id) {
        if (std::binary_search(positives.begin(), positives.end(), id)) continue;
        if (k_free-- == 0) {
          candidate = id;
          break;
        }
      }
      neg = candidate;
    }
    batch.push_back({p.user, p.item, neg});
  }
  return batch;
}

// ---------------------------------------------------------------------------

std::vector<Interaction> sample_scenario_interactions(const SyntheticLatents& latents, Id scenario,
                                                      double noise, Rng& rng) {
  const std::size_t d = latents.users.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::normal_distribution<double> eps(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<Interaction> out;
  std::vector<double> shifted(d);
  for (Id u = 0; u < latents.users.rows(); ++u) {
    for (std::size_t c = 0; c < d; ++c) {
      shifted[c] = latents.users.at(u, c) + latents.scenarios.at(scenario, c);
    }
    for (Id item : latents.scenario_items.at(scenario)) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += shifted[c] * latents.items.at(item, c);
      const double logit = dot * inv_sqrt_d + (noise > 0.0 ? noise * eps(rng) : 0.0);
      if (coin(rng) < ad::stable_sigmoid(logit)) out.push_back({scenario, u, item});
    }
  }
  return out;
}

SyntheticFamily gen_synthetic_family(const SyntheticOptions& options) {
  if (options.n_scenarios < 1 || options.users_per < 1 || options.items_per < 1 ||
      options.d_latent < 1) {
    throw std::invalid_argument("gen_synthetic_family: all counts must be >= 1");
  }
  if (!(options.scenario_scale >= 0.0) || !(options.noise >= 0.0) ||
      !(options.embedding_noise >= 0.0)) {
    throw std::invalid_argument("gen_synthetic_family: scales and noise levels must be >= 0");
  }
  const std::size_t m = options.users_per;
  const std::size_t n = options.n_scenarios * options.items_per;
  const std::size_t d = options.d_latent;
  Rng rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](std::size_t rows) {
    ad::Tensor t({rows, d}, 0.0);
    for (double& v : t.values) v = normal(rng);
    return t;
  };

  SyntheticFamily family;
  SyntheticLatents& lat = family.latents;
  lat.users = draw(m);
  lat.items = draw(n);
  lat.scenarios = draw(options.n_scenarios);
  for (double& v : lat.scenarios.values) v *= options.scenario_scale;
  for (std::size_t c = 0; c < options.n_scenarios; ++c) {
    std::vector<Id> block(options.items_per);
    std::iota(block.begin(), block.end(), static_cast<Id>(c * options.items_per));
    lat.scenario_items.push_back(std::move(block));
  }

  for (Id c = 0; c < options.n_scenarios; ++c) {
    std::vector<Interaction> rows = sample_scenario_interactions(lat, c, options.noise, rng);
    for (int retry = 0; rows.empty() && retry < 10; ++retry) {
      for (std::size_t k = 0; k < d; ++k) lat.scenarios.at(c, k) = options.scenario_scale * normal(rng);
      rows = sample_scenario_interactions(lat, c, options.noise, rng);
    }
    if (rows.empty()) {
      throw std::runtime_error("gen_synthetic_family: scenario " + std::to_string(c) +
                               " has no interactions after 10 redraws");
    }
    family.log.records.insert(family.log.records.end(), rows.begin(), rows.end());
  }
  family.log.num_users = m;
  family.log.num_items = n;
  family.log.normalize();

  std::normal_distribution<double> jitter(0.0, options.embedding_noise);
  auto noisy = [&](const ad::Tensor& t) {
    ad::Tensor out = t;
    if (options.embedding_noise > 0.0) {
      for (double& v : out.values) v += jitter(rng);
    }
    return out;
  };
  family.table = recnet::EmbeddingTable(noisy(lat.users), noisy(lat.items));
  return family;
}

std::string task_manifest_json(const MetaSplit& split) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = 1;
  auto list = [](const std::vector<ScenarioTask>& tasks) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const ScenarioTask& t : tasks) {
      arr.push_back({{"scenario", t.scenario},
                     {"support", t.support.size()},
                     {"query_positives", t.query_positives.size()},
                     {"query_triples", t.query.size()},
                     {"candidate_items", t.candidate_items.size()}});
    }
    return arr;
  };
  doc["meta_train"] = list(split.meta_train);
  doc["meta_test"] = list(split.meta_test);
  return doc.dump(2);
}

}  // namespace s2meta::tasks
