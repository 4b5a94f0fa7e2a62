// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include <nlohmann/json.hpp>

#include "s2meta/meta.hpp"
#include "support/gradcheck.hpp"
#include "support/meta_cases.hpp"
#include "support/model_cases.hpp"

using namespace s2meta;
using namespace s2meta::testing;
using meta::EpisodeConfig;
using meta::MetaParams;
using meta::Variant;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string checkpoint_bytes(const MetaParams& m) {
  std::ostringstream out;
  meta::save_checkpoint(out, m);
  return out.str();
}

bool table_bytes_equal(const recnet::EmbeddingTable& a, const recnet::EmbeddingTable& b) {
  return a.users.shape == b.users.shape && a.items.shape == b.items.shape &&
         std::memcmp(a.users.values.data(), b.users.values.data(),
                     a.users.size() * sizeof(double)) == 0 &&
         std::memcmp(a.items.values.data(), b.items.values.data(),
                     a.items.size() * sizeof(double)) == 0;
}

struct World {
  SmallWorld w = small_world(3);
  recnet::Layout layout = recnet::Layout::halving(recnet::Architecture::interaction, 4, 2);
  MetaParams meta;
  World() {
    Rng rng(11);
    meta = MetaParams::initialize(layout, rng);
  }
  const tasks::ScenarioTask& task() const { return w.tasks.at(0); }
  const recnet::EmbeddingTable& table() const { return w.family.table; }
};

}  // namespace

TEST_CASE("controller gradients match finite differences") {
  TestRng rng(2024);
  for (int k = 0; k < 10; ++k) {
    const ControllerCase u = update_controller_case(rng);
    const GradCheck gu = check_gradients(u.f, u.inputs);
    CHECK_MESSAGE(gu.worst_rel <= 1e-4, gu.where);
    const ControllerCase s = stop_controller_case(rng);
    const GradCheck gs = check_gradients(s.f, s.inputs);
    CHECK_MESSAGE(gs.worst_rel <= 1e-4, gs.where);
  }
}

TEST_CASE("initial gates follow the biases") {
  Rng rng(1);
  const MetaParams m = MetaParams::initialize(std::vector<recnet::GroupSpec>{{"w", {5}, 5}}, rng);
  const ad::Tensor zero({5, meta::kUpdateHidden}, 0.0);
  const std::vector<double> grad{0.1, -0.2, 0.3, 1e-6, -4.0};
  const meta::GateOutput g =
      meta::update_gates(m.update[0], zero, zero, grad, 0.7, m.init[0].values);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(g.beta.values[i] == doctest::Approx(sigmoid(5.0)).epsilon(1e-3));
    CHECK(g.alpha.values[i] == doctest::Approx(sigmoid(-5.0)).epsilon(2e-2));
  }
  const ad::Tensor zs({1, meta::kStopHidden}, 0.0);
  const meta::StopOutput s = meta::stop_probability(m.stop, zs, zs, 0.7, 1.3);
  CHECK(s.p == doctest::Approx(sigmoid(-4.0)).epsilon(2e-2));
  CHECK(s.h.shape == ad::Shape{1, meta::kStopHidden});
}

TEST_CASE("plain and tape controller steps agree") {
  TestRng rng(5);
  const ControllerCase c = update_controller_case(rng);
  meta::UpdateControllerParams p;
  p.lstm.w_x = c.inputs[0];
  p.lstm.w_h = c.inputs[1];
  p.lstm.b = c.inputs[2];
  p.w_forget = c.inputs[3];
  p.b_forget = c.inputs[4];
  p.w_input = c.inputs[5];
  p.b_input = c.inputs[6];
  const std::size_t n = c.inputs[7].rows();
  std::vector<double> grad(n, 0.25), theta(c.inputs[9].values.begin(), c.inputs[9].values.end());
  const meta::GateOutput plain = meta::update_gates(p, c.inputs[7], c.inputs[8], grad, 0.4, theta);
  ad::Tape tape;
  std::vector<ad::Var> ctrl;
  for (std::size_t k = 0; k < 7; ++k) ctrl.push_back(tape.constant(c.inputs[k]));
  const meta::GateVars v = meta::update_gates(tape, ctrl, tape.constant(c.inputs[7]),
                                              tape.constant(c.inputs[8]), grad, 0.4,
                                              tape.constant(c.inputs[9]));
  CHECK(plain.alpha == v.alpha.value());
  CHECK(plain.beta == v.beta.value());
  CHECK(plain.h == v.h.value());
  CHECK(plain.c == v.c.value());
}

TEST_CASE("apply_update") {
  const ad::Tensor out = meta::apply_update(ad::Tensor::vector({1, 2}), ad::Tensor::vector({0.5, -1}),
                                            ad::Tensor::vector({0.1, 0.2}),
                                            ad::Tensor::vector({0.9, 1.0}));
  CHECK(out.values[0] == doctest::Approx(0.85));
  CHECK(out.values[1] == doctest::Approx(2.2));
  CHECK_THROWS(meta::apply_update(ad::Tensor::vector({1, 2}), ad::Tensor::vector({1}),
                                  ad::Tensor::vector({1, 2}), ad::Tensor::vector({1, 2})));
}

TEST_CASE("fixed_lr trajectory equals plain SGD bitwise") {
  for (const auto arch : {recnet::Architecture::interaction, recnet::Architecture::mapping}) {
    World w;
    w.layout = recnet::Layout::halving(arch, 4, 2);
    Rng init(4);
    w.meta = MetaParams::initialize(w.layout, init);
    EpisodeConfig cfg;
    cfg.variant = Variant::fixed_lr;
    cfg.fixed_lr = 0.05;
    cfg.t_max = 10;
    cfg.batch_size = 8;
    cfg.stop_mode = meta::StopMode::threshold;
    const meta::ScenarioProblem problem(w.task(), w.table(), w.layout, cfg.batch_size);
    meta::EpisodeRecording rec;
    Rng rng(99);
    const meta::EpisodeResult r = meta::run_episode(w.meta, problem, cfg, rng, &rec);
    REQUIRE(r.trace.stop_step == 10);
    Rng oracle_rng(99);
    const auto oracle = sgd_oracle({w.layout, w.meta.init}, w.task(), w.table(), 8, 0.05, 10,
                                   oracle_rng);
    REQUIRE(r.trace.params_at_step.size() == oracle.size());
    for (std::size_t t = 0; t < oracle.size(); ++t) {
      CAPTURE(t);
      CHECK(bitwise_equal(r.trace.params_at_step[t], oracle[t]));
    }
    for (const meta::StepRecord& s : r.trace.steps) {
      for (const meta::GateSummary& g : s.gates) {
        CHECK(g.mean_alpha == 0.05);
        CHECK(g.mean_beta == 1.0);
      }
    }
  }
}

TEST_CASE("first-order meta-gradient matches whole-pipeline finite differences") {
  TestRng rng(31);
  for (int k = 0; k < 20; ++k) {
    const MetaGradCheck c = meta_gradient_case(rng);
    CHECK_MESSAGE(c.worst_rel <= 1e-3, c.where);
    CHECK(c.worst_abs <= 1e-8);
  }
}

TEST_CASE("stop-controller estimator is unbiased on the two-step bandit") {
  const StopBandit bandit = stop_bandit(-0.4);
  CHECK(bandit.losses[0] > bandit.losses[1]);
  const BanditEstimate e =
      estimate_stop_gradient(bandit, 10000, meta::StopReward::reward_to_go, 17);
  CHECK(std::abs(e.mean - bandit.expected_gradient()) <= 3 * e.stderr_);

  // the listing's coefficient has its own, different expectation
  const BanditEstimate l = estimate_stop_gradient(bandit, 10000, meta::StopReward::listing, 18);
  CHECK(std::abs(l.mean - bandit.listing_expectation()) <= 3 * l.stderr_);
  CHECK(std::abs(bandit.listing_expectation() - bandit.expected_gradient()) > 10 * l.stderr_);
}

TEST_CASE("stop-controller gradient of a single episode") {
  // T = 2 with constant logits b: Σ_j (L2 − L_{j-1}) · (−p)
  StopBandit b = stop_bandit(-30.0);
  meta::EpisodeRecording rec;
  Rng rng(0);
  const meta::EpisodeResult r = meta::run_episode(b.meta, b.problem, b.cfg, rng, &rec);
  REQUIRE(r.trace.stop_step == 2);
  const std::vector<double> L{3.0, 2.0, 1.5};
  const meta::StopControllerParams g = meta::stop_controller_gradient(rec, r.trace, L);
  const double p = sigmoid(-30.0);
  CHECK(g.b_stop.values[0] == doctest::Approx(-p * ((1.5 - 3.0) + (1.5 - 2.0))));
  const meta::StopControllerParams gl =
      meta::stop_controller_gradient(rec, r.trace, L, meta::StopReward::listing);
  CHECK(gl.b_stop.values[0] == doctest::Approx(-p * (1.5 - 2.0)));
  CHECK_THROWS_AS(meta::stop_controller_gradient(rec, r.trace, std::vector<double>{1, 2}),
                  std::invalid_argument);
}

TEST_CASE("compute_returns") {
  const std::vector<double> q = meta::compute_returns(std::vector<double>{3.0, 2.0, 1.5});
  CHECK(q == std::vector<double>{1.5, 0.5});
  CHECK_THROWS_AS(meta::compute_returns(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("fixed_step runs exactly S updates") {
  World w;
  EpisodeConfig cfg;
  cfg.variant = Variant::fixed_step;
  cfg.fixed_steps = 2;
  cfg.t_max = 10;
  cfg.batch_size = 4;
  w.meta.stop.b_stop.values[0] = 40.0;  // controller would stop immediately
  const meta::ScenarioProblem problem(w.task(), w.table(), w.layout, 4);
  Rng rng(1);
  const meta::EpisodeResult r = meta::run_episode(w.meta, problem, cfg, rng);
  CHECK(r.trace.steps.size() == 2);
  CHECK(r.trace.stop_step == 2);
  for (const auto& s : r.trace.steps) {
    CHECK_FALSE(s.stopped);
    CHECK(s.stop_prob > 0.99);
  }
}

TEST_CASE("threshold mode") {
  World w;
  EpisodeConfig cfg;
  cfg.stop_mode = meta::StopMode::threshold;
  cfg.threshold = 0.5;
  cfg.t_max = 7;
  cfg.batch_size = 4;
  const meta::ScenarioProblem problem(w.task(), w.table(), w.layout, 4);
  Rng rng(1);
  // p ≈ 0.018 never reaches 0.5
  meta::EpisodeResult r = meta::run_episode(w.meta, problem, cfg, rng);
  CHECK(r.trace.stop_step == 7);
  CHECK(r.trace.steps.size() == 7);
  // below every p: stop before the first update
  cfg.threshold = 0.001;
  r = meta::run_episode(w.meta, problem, cfg, rng);
  CHECK(r.trace.stop_step == 0);
  REQUIRE(r.trace.steps.size() == 1);
  CHECK(r.trace.steps[0].stopped);
  CHECK(r.trace.steps[0].gates.empty());
}

TEST_CASE("episode contracts on random configurations") {
  World w;
  const recnet::EmbeddingTable before = w.table();
  TestRng rng(8);
  for (int k = 0; k < 200; ++k) {
    EpisodeConfig cfg;
    cfg.variant = static_cast<Variant>(rng() % 4);
    cfg.t_max = dim(rng, 1, 8);
    cfg.fixed_steps = dim(rng, 1, cfg.t_max);
    cfg.batch_size = dim(rng, 1, 6);
    cfg.stop_mode = rng() % 2 ? meta::StopMode::threshold : meta::StopMode::stochastic;
    cfg.threshold = 0.01;
    w.meta.stop.b_stop.values[0] = std::uniform_real_distribution<double>(-5, 1)(rng);
    const auto& task = w.w.tasks[rng() % w.w.tasks.size()];
    const meta::ScenarioProblem problem(task, w.table(), w.layout, cfg.batch_size);
    Rng erng(rng());
    const meta::EpisodeResult r = meta::run_episode(w.meta, problem, cfg, erng);
    const auto& tr = r.trace;
    CHECK(tr.stop_step <= cfg.t_max);
    if (cfg.variant == Variant::fixed_step) CHECK(tr.stop_step == cfg.fixed_steps);
    const bool stopped = !tr.steps.empty() && tr.steps.back().stopped;
    CHECK(tr.steps.size() == tr.stop_step + (stopped ? 1 : 0));
    for (const auto& s : tr.steps) {
      CHECK(s.stop_prob > 0.0);
      CHECK(s.stop_prob < 1.0);
      if (cfg.uses_update_controllers()) {
        for (const auto& g : s.gates) {
          CHECK(g.min_alpha > 0.0);
          CHECK(g.max_alpha < 1.0);
          CHECK(g.min_beta > 0.0);
          CHECK(g.max_beta < 1.0);
          CHECK(g.min_alpha <= g.mean_alpha);
          CHECK(g.mean_alpha <= g.max_alpha);
        }
      }
    }
  }
  CHECK(table_bytes_equal(before, w.table()));
}

TEST_CASE("episode errors") {
  World w;
  EpisodeConfig cfg;
  tasks::ScenarioTask empty = w.task();
  empty.support.clear();
  empty.index();
  CHECK_THROWS_AS(meta::adapt(w.meta, empty, w.table(), cfg), std::invalid_argument);

  QuadraticProblem q = random_quadratic(2, *std::make_unique<TestRng>(1));
  Rng rng(0);
  CHECK_THROWS_AS(meta::run_episode(w.meta, q, cfg, rng), std::invalid_argument);

  q.m[0] = std::numeric_limits<double>::infinity();
  const MetaParams mq = MetaParams::initialize(q.groups(), rng);
  try {
    meta::run_episode(mq, q, cfg, rng);
    FAIL("expected an aborted episode");
  } catch (const meta::EpisodeAborted& e) {
    CHECK(e.trace().steps.size() == 1);
    CHECK(e.trace().stop_step == 0);
  }

  cfg.t_max = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.t_max = 5;
  cfg.variant = Variant::fixed_step;
  cfg.fixed_steps = 6;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.variant = Variant::complete;
  cfg.stop_mode = meta::StopMode::threshold;
  cfg.threshold = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("variant names") {
  for (const Variant v : {Variant::complete, Variant::rand_init, Variant::fixed_lr, Variant::fixed_step}) {
    CHECK(meta::parse_variant(meta::to_string(v)) == v);
  }
  CHECK_THROWS(meta::parse_variant("fixed"));
  CHECK(meta::parse_stop_reward("listing") == meta::StopReward::listing);
  CHECK_THROWS(meta::parse_stop_reward("other"));
}

TEST_CASE("variants train their own components") {
  World w;
  const meta::ScenarioProblem problem(w.task(), w.table(), w.layout, 4);
  meta::MetaOptimizer opt;
  EpisodeConfig cfg;
  cfg.t_max = 3;
  cfg.batch_size = 4;
  cfg.stop_mode = meta::StopMode::threshold;
  struct Expect { Variant v; bool init, update, stop; };
  for (const Expect e : {Expect{Variant::complete, true, true, true},
                         Expect{Variant::rand_init, false, true, true},
                         Expect{Variant::fixed_lr, true, false, true},
                         Expect{Variant::fixed_step, true, true, false}}) {
    CAPTURE(meta::to_string(e.v));
    cfg.variant = e.v;
    cfg.fixed_steps = 3;
    MetaParams m = w.meta;
    Rng rng(3);
    const meta::StepSummary s = meta::meta_train_step(m, problem, cfg, opt, rng);
    CHECK(s.gradients.has_init == e.init);
    CHECK(s.gradients.has_update == e.update);
    CHECK(s.gradients.has_stop == e.stop);
    CHECK((m.init == w.meta.init) == !e.init);
    CHECK((m.stop.b_stop == w.meta.stop.b_stop) == !e.stop);
  }
}

TEST_CASE("meta update rule") {
  World w;
  const meta::ScenarioProblem problem(w.task(), w.table(), w.layout, 4);
  EpisodeConfig cfg;
  cfg.t_max = 3;
  cfg.batch_size = 4;
  meta::MetaOptimizer zero;
  zero.learning_rate = 0.0;
  zero.weight_decay = 0.0;
  MetaParams probe = w.meta;
  Rng r1(5);
  const meta::StepSummary g = meta::meta_train_step(probe, problem, cfg, zero, r1);
  CHECK(probe == w.meta);

  meta::MetaOptimizer opt;
  opt.learning_rate = 0.1;
  opt.weight_decay = 0.01;
  MetaParams stepped = w.meta;
  Rng r2(5);
  meta::meta_train_step(stepped, problem, cfg, opt, r2);
  for (std::size_t k = 0; k < w.meta.init.size(); ++k) {
    for (std::size_t i = 0; i < w.meta.init[k].size(); ++i) {
      const double x = w.meta.init[k].values[i];
      const double expect = x - 0.1 * (g.gradients.init[k].values[i] + 0.01 * x);
      CHECK(stepped.init[k].values[i] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  const double bs = w.meta.stop.b_stop.values[0];
  CHECK(stepped.stop.b_stop.values[0] ==
        doctest::Approx(bs - 0.1 * (g.gradients.stop.b_stop.values[0] + 0.01 * bs)).epsilon(1e-12));
}

TEST_CASE("determinism and untouched tables") {
  World w;
  const recnet::EmbeddingTable before = w.table();
  EpisodeConfig cfg;
  cfg.t_max = 4;
  cfg.batch_size = 4;
  meta::MetaTrainOptions opt;
  opt.iterations = 15;
  opt.seed = 6;
  opt.optimizer.learning_rate = 0.05;
  const auto a = meta::meta_train(w.meta, w.w.tasks, w.table(), cfg, opt);
  const auto b = meta::meta_train(w.meta, w.w.tasks, w.table(), cfg, opt);
  CHECK(a.log == b.log);
  CHECK(checkpoint_bytes(a.meta) == checkpoint_bytes(b.meta));
  opt.seed = 7;
  CHECK_FALSE(meta::meta_train(w.meta, w.w.tasks, w.table(), cfg, opt).log == a.log);

  const auto x = meta::adapt(a.meta, w.task(), w.table(), cfg);
  const auto y = meta::adapt(a.meta, w.task(), w.table(), cfg);
  CHECK(x.trace == y.trace);
  CHECK(meta::trace_jsonl(x.trace, a.meta.groups) == meta::trace_jsonl(y.trace, a.meta.groups));
  CHECK(table_bytes_equal(before, w.table()));
}

TEST_CASE("checkpoint round-trip") {
  World w;
  const std::string bytes = checkpoint_bytes(w.meta);
  CHECK(bytes.substr(0, 6) == "S2META");
  std::istringstream in(bytes);
  const MetaParams back = meta::load_checkpoint(in);
  CHECK(checkpoint_bytes(back) == bytes);
  CHECK(back == w.meta);
  CHECK(back.layout.arch == w.layout.arch);
  CHECK(back.layout.hidden == w.layout.hidden);

  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream bad_magic(bad);
  CHECK_THROWS_WITH(meta::load_checkpoint(bad_magic), doctest::Contains("magic"));
  bad = bytes;
  bad[6] = 9;
  std::istringstream bad_version(bad);
  CHECK_THROWS_WITH(meta::load_checkpoint(bad_version), doctest::Contains("version"));
  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH(meta::load_checkpoint(truncated), doctest::Contains("truncated"));

  const auto path = std::filesystem::temp_directory_path() / "s2meta_test.s2m";
  meta::save_checkpoint(path, w.meta);
  CHECK(meta::load_checkpoint(path) == w.meta);
}

TEST_CASE("trace export") {
  World w;
  EpisodeConfig cfg;
  cfg.t_max = 3;
  cfg.batch_size = 4;
  cfg.stop_mode = meta::StopMode::threshold;
  const auto a = meta::adapt(w.meta, w.task(), w.table(), cfg);
  std::istringstream lines(meta::trace_jsonl(a.trace, w.meta.groups));
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == ++count);
    for (const char* key : {"train_loss", "grad_norm", "stop_prob", "stopped", "gates"}) {
      CHECK(j.contains(key));
    }
    CHECK(j["gates"].size() == w.meta.groups.size());
    CHECK(j["gates"][w.meta.groups[0].name].contains("alpha"));
    CHECK(j["gates"][w.meta.groups[0].name].contains("beta"));
  }
  CHECK(count == 3);
}
