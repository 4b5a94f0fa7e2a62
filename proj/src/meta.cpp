// SPDX-License-Identifier: Apache-2.0

#include "s2meta/meta.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace s2meta::meta {

namespace {

using ad::Tensor;
using ad::Var;

struct LstmVars {
  Var w_x, w_h, b;
};

struct UpdateVars {
  LstmVars lstm;
  Var w_forget, b_forget, w_input, b_input;
};

struct StopVars {
  LstmVars lstm;
  Var w_stop, b_stop;
};

Tensor uniform_tensor(ad::Shape shape, double range, Rng& rng) {
  std::uniform_real_distribution<double> dist(-range, range);
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.values) v = dist(rng);
  return t;
}

LstmParams random_lstm(std::size_t inputs, std::size_t hidden, double range, Rng& rng) {
  LstmParams p;
  p.w_x = uniform_tensor({inputs, 4 * hidden}, range, rng);
  p.w_h = uniform_tensor({hidden, 4 * hidden}, range, rng);
  p.b = Tensor({4 * hidden}, 0.0);
  return p;
}

LstmVars bind_lstm(ad::Tape& tape, const LstmParams& p, bool grad) {
  return {tape.leaf(p.w_x, grad), tape.leaf(p.w_h, grad), tape.leaf(p.b, grad)};
}

UpdateVars bind_update(ad::Tape& tape, const UpdateControllerParams& p, bool grad) {
  return {bind_lstm(tape, p.lstm, grad), tape.leaf(p.w_forget, grad), tape.leaf(p.b_forget, grad),
          tape.leaf(p.w_input, grad), tape.leaf(p.b_input, grad)};
}

StopVars bind_stop(ad::Tape& tape, const StopControllerParams& p, bool grad) {
  return {bind_lstm(tape, p.lstm, grad), tape.leaf(p.w_stop, grad), tape.leaf(p.b_stop, grad)};
}

std::vector<Var> flatten(const UpdateVars& v) {
  return {v.lstm.w_x, v.lstm.w_h, v.lstm.b, v.w_forget, v.b_forget, v.w_input, v.b_input};
}

std::vector<Var> flatten(const StopVars& v) {
  return {v.lstm.w_x, v.lstm.w_h, v.lstm.b, v.w_stop, v.b_stop};
}

// Two preprocessed features per value, as a constant [n × 2] block.
Tensor preprocessed_block(std::span<const double> values) {
  Tensor out({values.size(), 2}, 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto [a, b] = ad::preprocess_value(values[i], kPreprocessP);
    out.values[2 * i] = a;
    out.values[2 * i + 1] = b;
  }
  return out;
}

Tensor broadcast_preprocessed(double x, std::size_t n) {
  const auto [a, b] = ad::preprocess_value(x, kPreprocessP);
  Tensor out({n, 2}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    out.values[2 * i] = a;
    out.values[2 * i + 1] = b;
  }
  return out;
}

// Coordinate-wise update-controller step. `theta` may carry gradient; grad
// and loss are constants.
GateVars gate_step(ad::Tape& tape, const UpdateVars& ctrl, const Var& h, const Var& c,
                   std::span<const double> grad, double loss, const Var& theta) {
  const std::size_t n = grad.size();
  if (theta.size() != n || h.value().rows() != n || c.value().rows() != n) {
    throw ad::ShapeError("update_gates: state has " + std::to_string(h.value().rows()) +
                         " rows, gradient " + std::to_string(n) + ", parameter " +
                         std::to_string(theta.size()));
  }
  const Var x = ad::concat({tape.constant(preprocessed_block(grad)),
                            tape.constant(broadcast_preprocessed(loss, n)),
                            ad::preprocess(theta, kPreprocessP)});
  const Var out = ad::lstm_cell(x, h, c, ctrl.lstm.w_x, ctrl.lstm.w_h, ctrl.lstm.b);
  const std::size_t H = h.value().cols();
  GateVars g;
  g.h = ad::slice_cols(out, 0, H);
  g.c = ad::slice_cols(out, H, H);
  g.beta = ad::sigmoid(ad::add_bias(ad::matmul(g.h, ctrl.w_forget), ctrl.b_forget));
  g.alpha = ad::sigmoid(ad::add_bias(ad::matmul(g.h, ctrl.w_input), ctrl.b_input));
  return g;
}

StopVarsOut stop_step(ad::Tape& tape, const StopVars& ctrl, const Var& h, const Var& c,
                      double loss, double grad_norm) {
  Tensor x({1, kStopInputs}, 0.0);
  const auto [l0, l1] = ad::preprocess_value(loss, kPreprocessP);
  const auto [g0, g1] = ad::preprocess_value(grad_norm, kPreprocessP);
  x.values = {l0, l1, g0, g1};
  const Var out = ad::lstm_cell(tape.constant(std::move(x)), h, c, ctrl.lstm.w_x, ctrl.lstm.w_h,
                                ctrl.lstm.b);
  const std::size_t H = h.value().cols();
  StopVarsOut s;
  s.h = ad::slice_cols(out, 0, H);
  s.c = ad::slice_cols(out, H, H);
  s.logit = ad::add_bias(ad::matmul(s.h, ctrl.w_stop), ctrl.b_stop);
  return s;
}

double mean_of(const Tensor& t) {
  return std::accumulate(t.values.begin(), t.values.end(), 0.0) / static_cast<double>(t.size());
}

bool finite_params(const ParamSet& p) {
  return std::all_of(p.begin(), p.end(), [](const Tensor& t) { return t.all_finite(); });
}

void sgd_update(Tensor& param, const Tensor* grad, double lr, double wd) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = (grad ? grad->values[i] : 0.0) + wd * param.values[i];
    param.values[i] -= lr * g;
  }
}

UpdateControllerParams update_from(std::span<const Tensor> t) {
  UpdateControllerParams p;
  p.lstm = {t[0], t[1], t[2]};
  p.w_forget = t[3];
  p.b_forget = t[4];
  p.w_input = t[5];
  p.b_input = t[6];
  return p;
}

StopControllerParams stop_from(std::span<const Tensor> t) {
  StopControllerParams p;
  p.lstm = {t[0], t[1], t[2]};
  p.w_stop = t[3];
  p.b_stop = t[4];
  return p;
}

std::vector<Tensor*> tensors_of(UpdateControllerParams& p) {
  return {&p.lstm.w_x, &p.lstm.w_h, &p.lstm.b, &p.w_forget, &p.b_forget, &p.w_input, &p.b_input};
}

std::vector<Tensor*> tensors_of(StopControllerParams& p) {
  return {&p.lstm.w_x, &p.lstm.w_h, &p.lstm.b, &p.w_stop, &p.b_stop};
}

}  // namespace

// ---------------------------------------------------------------------------

LstmParams LstmParams::zeros(std::size_t inputs, std::size_t hidden) {
  return {Tensor({inputs, 4 * hidden}, 0.0), Tensor({hidden, 4 * hidden}, 0.0),
          Tensor({4 * hidden}, 0.0)};
}

UpdateControllerParams UpdateControllerParams::zeros() {
  return {LstmParams::zeros(kUpdateInputs, kUpdateHidden), Tensor({kUpdateHidden, 1}, 0.0),
          Tensor({1}, 0.0), Tensor({kUpdateHidden, 1}, 0.0), Tensor({1}, 0.0)};
}

StopControllerParams StopControllerParams::zeros() {
  return {LstmParams::zeros(kStopInputs, kStopHidden), Tensor({kStopHidden, 1}, 0.0),
          Tensor({1}, 0.0)};
}

MetaParams MetaParams::initialize(const recnet::Layout& layout, Rng& rng,
                                  const InitOptions& options) {
  MetaParams m = initialize(layout.groups(), rng, options);
  m.layout = layout;
  return m;
}

MetaParams MetaParams::initialize(std::vector<GroupSpec> groups, Rng& rng,
                                  const InitOptions& options) {
  MetaParams m;
  m.groups = std::move(groups);
  for (const GroupSpec& g : m.groups) {
    m.init.push_back(
        uniform_tensor(g.shape, 1.0 / std::sqrt(static_cast<double>(g.fan_in)), rng));
  }
  const double r = options.controller_weight_range;
  for (std::size_t k = 0; k < m.groups.size(); ++k) {
    UpdateControllerParams u;
    u.lstm = random_lstm(kUpdateInputs, kUpdateHidden, r, rng);
    u.w_forget = uniform_tensor({kUpdateHidden, 1}, r, rng);
    u.b_forget = Tensor({1}, options.forget_bias);
    u.w_input = uniform_tensor({kUpdateHidden, 1}, r, rng);
    u.b_input = Tensor({1}, options.input_bias);
    m.update.push_back(std::move(u));
  }
  m.stop.lstm = random_lstm(kStopInputs, kStopHidden, r, rng);
  m.stop.w_stop = uniform_tensor({kStopHidden, 1}, r, rng);
  m.stop.b_stop = Tensor({1}, options.stop_bias);
  return m;
}

void MetaParams::validate() const {
  if (init.size() != groups.size()) {
    throw std::invalid_argument("meta params: " + std::to_string(init.size()) +
                                " init tensors for " + std::to_string(groups.size()) + " groups");
  }
  if (update.size() != groups.size()) {
    throw std::invalid_argument("meta params: " + std::to_string(update.size()) +
                                " update controllers for " + std::to_string(groups.size()) +
                                " groups");
  }
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (init[k].shape != groups[k].shape) {
      throw std::invalid_argument("meta params: init group " + groups[k].name + " has shape " +
                                  ad::to_string(init[k].shape));
    }
    const UpdateControllerParams ref = UpdateControllerParams::zeros();
    const auto& u = update[k];
    if (u.lstm.w_x.shape != ref.lstm.w_x.shape || u.lstm.w_h.shape != ref.lstm.w_h.shape ||
        u.lstm.b.shape != ref.lstm.b.shape || u.w_forget.shape != ref.w_forget.shape ||
        u.b_forget.shape != ref.b_forget.shape || u.w_input.shape != ref.w_input.shape ||
        u.b_input.shape != ref.b_input.shape) {
      throw std::invalid_argument("meta params: update controller " + std::to_string(k) +
                                  " is mis-shaped");
    }
  }
  const StopControllerParams ref = StopControllerParams::zeros();
  if (stop.lstm.w_x.shape != ref.lstm.w_x.shape || stop.lstm.w_h.shape != ref.lstm.w_h.shape ||
      stop.lstm.b.shape != ref.lstm.b.shape || stop.w_stop.shape != ref.w_stop.shape ||
      stop.b_stop.shape != ref.b_stop.shape) {
    throw std::invalid_argument("meta params: stop controller is mis-shaped");
  }
}

void MetaParams::for_each_tensor(const std::function<void(Tensor&)>& f) {
  for (Tensor& t : init) f(t);
  for (UpdateControllerParams& u : update) {
    for (Tensor* t : tensors_of(u)) f(*t);
  }
  for (Tensor* t : tensors_of(stop)) f(*t);
}

void MetaParams::for_each_tensor(const std::function<void(const Tensor&)>& f) const {
  const_cast<MetaParams*>(this)->for_each_tensor([&](Tensor& t) { f(t); });
}

bool operator==(const MetaParams& a, const MetaParams& b) {
  if (!(a.layout == b.layout) || a.groups.size() != b.groups.size()) return false;
  for (std::size_t k = 0; k < a.groups.size(); ++k) {
    if (a.groups[k].name != b.groups[k].name || a.groups[k].shape != b.groups[k].shape ||
        a.groups[k].fan_in != b.groups[k].fan_in) {
      return false;
    }
  }
  std::vector<const Tensor*> ta, tb;
  a.for_each_tensor([&](const Tensor& t) { ta.push_back(&t); });
  b.for_each_tensor([&](const Tensor& t) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    if (!(*ta[k] == *tb[k])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

GateOutput update_gates(const UpdateControllerParams& ctrl, const Tensor& state_h,
                        const Tensor& state_c, std::span<const double> grad, double loss,
                        std::span<const double> param) {
  if (param.size() != grad.size()) {
    throw ad::ShapeError("update_gates: gradient has " + std::to_string(grad.size()) +
                         " coordinates, parameter " + std::to_string(param.size()));
  }
  ad::Tape tape;
  const UpdateVars vars = bind_update(tape, ctrl, false);
  const Var theta =
      tape.constant(Tensor({param.size()}, std::vector<double>(param.begin(), param.end())));
  const GateVars g = gate_step(tape, vars, tape.constant(state_h), tape.constant(state_c), grad,
                               loss, theta);
  return {g.alpha.value(), g.beta.value(), g.h.value(), g.c.value()};
}

StopOutput stop_probability(const StopControllerParams& ctrl, const Tensor& state_h,
                            const Tensor& state_c, double loss, double grad_norm) {
  ad::Tape tape;
  const StopVars vars = bind_stop(tape, ctrl, false);
  const StopVarsOut s =
      stop_step(tape, vars, tape.constant(state_h), tape.constant(state_c), loss, grad_norm);
  return {ad::stable_sigmoid(s.logit.value().item()), s.h.value(), s.c.value()};
}

GateVars update_gates(ad::Tape& tape, std::span<const Var> ctrl, const Var& h, const Var& c,
                      std::span<const double> grad, double loss, const Var& theta) {
  if (ctrl.size() != 7) throw std::invalid_argument("update_gates: expected 7 controller tensors");
  const UpdateVars v{{ctrl[0], ctrl[1], ctrl[2]}, ctrl[3], ctrl[4], ctrl[5], ctrl[6]};
  return gate_step(tape, v, h, c, grad, loss, theta);
}

StopVarsOut stop_logit(ad::Tape& tape, std::span<const Var> ctrl, const Var& h, const Var& c,
                       double loss, double grad_norm) {
  if (ctrl.size() != 5) throw std::invalid_argument("stop_logit: expected 5 controller tensors");
  const StopVars v{{ctrl[0], ctrl[1], ctrl[2]}, ctrl[3], ctrl[4]};
  return stop_step(tape, v, h, c, loss, grad_norm);
}

Tensor apply_update(const Tensor& theta, const Tensor& grad, const Tensor& alpha,
                    const Tensor& beta) {
  if (grad.shape != theta.shape || alpha.shape != theta.shape || beta.shape != theta.shape) {
    throw ad::ShapeError("apply_update: shapes theta" + ad::to_string(theta.shape) + " grad" +
                         ad::to_string(grad.shape) + " alpha" + ad::to_string(alpha.shape) +
                         " beta" + ad::to_string(beta.shape) + " differ");
  }
  Tensor out(theta.shape, 0.0);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    out.values[i] = beta.values[i] * theta.values[i] - alpha.values[i] * grad.values[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

ScenarioProblem::ScenarioProblem(const tasks::ScenarioTask& task,
                                 const recnet::EmbeddingTable& table, recnet::Layout layout,
                                 std::size_t batch_size, std::size_t test_cap)
    : task_(&task), table_(&table), layout_(std::move(layout)), batch_size_(batch_size) {
  if (layout_.dim != table.dim()) {
    throw std::invalid_argument("scenario problem: layout dimension " +
                                std::to_string(layout_.dim) + " differs from embedding width " +
                                std::to_string(table.dim()));
  }
  if (batch_size_ == 0) throw std::invalid_argument("scenario problem: batch size must be >= 1");
  if (task.query.size() <= test_cap) {
    test_ = task.query;
  } else {
    std::vector<std::size_t> idx(task.query.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(0x5eedULL ^ task.scenario);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(test_cap);
    std::sort(idx.begin(), idx.end());
    for (std::size_t k : idx) test_.push_back(task.query[k]);
  }
  std::map<std::pair<Id, Id>, std::size_t> pair_index;
  auto index_of = [&](Id u, Id i) {
    const auto [it, inserted] = pair_index.try_emplace({u, i}, pair_users_.size());
    if (inserted) {
      pair_users_.push_back(u);
      pair_items_.push_back(i);
    }
    return it->second;
  };
  for (const recnet::TrainTriple& t : test_) {
    pos_pair_.push_back(index_of(t.user, t.pos_item));
    neg_pair_.push_back(index_of(t.user, t.neg_item));
  }
}

std::vector<GroupSpec> ScenarioProblem::groups() const { return layout_.groups(); }

recnet::RecommenderParams ScenarioProblem::wrap(std::span<const Tensor> theta) const {
  return {layout_, ParamSet(theta.begin(), theta.end())};
}

BatchStats ScenarioProblem::train_stats(std::span<const Tensor> theta, Rng& rng) const {
  const auto batch = tasks::sample_batch(*task_, batch_size_, rng);
  auto [loss, grads] = recnet::batch_loss_and_grad(wrap(theta), *table_, batch);
  return {loss, std::move(grads)};
}

ad::Var ScenarioProblem::test_loss(ad::Tape& tape, std::span<const ad::Var> theta) const {
  if (test_.empty()) throw std::invalid_argument("scenario problem: task has no query triples");
  return recnet::batch_loss(tape, theta, layout_, *table_, test_);
}

double ScenarioProblem::test_loss_value(std::span<const Tensor> theta) const {
  if (test_.empty()) throw std::invalid_argument("scenario problem: task has no query triples");
  const std::vector<double> s = recnet::score_pairs(wrap(theta), *table_, pair_users_, pair_items_);
  double total = 0.0;
  for (std::size_t k = 0; k < test_.size(); ++k) {
    total += recnet::hinge_loss(s[pos_pair_[k]], s[neg_pair_[k]]);
  }
  return total / static_cast<double>(test_.size());
}

ParamSet ScenarioProblem::random_init(Rng& rng) const {
  return recnet::RecommenderParams::random(layout_, rng).tensors;
}

// ---------------------------------------------------------------------------

const char* to_string(Variant v) {
  switch (v) {
    case Variant::complete: return "complete";
    case Variant::rand_init: return "rand_init";
    case Variant::fixed_lr: return "fixed_lr";
    case Variant::fixed_step: return "fixed_step";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::complete, Variant::rand_init, Variant::fixed_lr, Variant::fixed_step}) {
    if (name == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected complete|rand_init|fixed_lr|fixed_step)");
}

const char* to_string(StopReward r) {
  return r == StopReward::reward_to_go ? "reward_to_go" : "listing";
}

StopReward parse_stop_reward(const std::string& name) {
  if (name == "reward_to_go") return StopReward::reward_to_go;
  if (name == "listing") return StopReward::listing;
  throw std::invalid_argument("unknown stop reward '" + name + "' (expected reward_to_go|listing)");
}

void EpisodeConfig::validate() const {
  if (t_max == 0) throw std::invalid_argument("episode: t_max must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("episode: batch_size must be >= 1");
  if (stop_mode == StopMode::threshold && !(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("episode: threshold must lie in (0, 1)");
  }
  if (variant == Variant::fixed_step && (fixed_steps == 0 || fixed_steps > t_max)) {
    throw std::invalid_argument("episode: fixed_steps must lie in [1, t_max]");
  }
  if (variant == Variant::fixed_lr && !(fixed_lr > 0.0)) {
    throw std::invalid_argument("episode: fixed_lr must be positive");
  }
}

bool EpisodeConfig::uses_update_controllers() const {
  return variant != Variant::fixed_lr && !forced_gates.has_value();
}

EpisodeResult run_episode(const MetaParams& meta, const InnerProblem& problem,
                          const EpisodeConfig& cfg, Rng& rng, EpisodeRecording* recording) {
  cfg.validate();
  meta.validate();
  const std::vector<GroupSpec> groups = problem.groups();
  if (groups.size() != meta.groups.size()) {
    throw std::invalid_argument("run_episode: problem has " + std::to_string(groups.size()) +
                                " parameter groups, meta learner " +
                                std::to_string(meta.groups.size()));
  }
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].shape != meta.groups[k].shape) {
      throw std::invalid_argument("run_episode: group " + groups[k].name + " shape mismatch");
    }
  }

  std::unique_ptr<ad::Tape> local;
  ad::Tape* tape = nullptr;
  if (recording) {
    tape = recording->tape.get();
  } else {
    local = std::make_unique<ad::Tape>();
    tape = local.get();
  }
  const bool rec = recording != nullptr;
  const bool use_update = cfg.uses_update_controllers();
  const bool use_stop = cfg.uses_stop_controller();

  // θ^(0)
  std::vector<Var> theta;
  if (cfg.learns_init()) {
    for (const Tensor& t : meta.init) theta.push_back(tape->leaf(t, rec));
  } else {
    for (Tensor& t : problem.random_init(rng)) theta.push_back(tape->constant(std::move(t)));
  }
  std::vector<UpdateVars> update;
  for (const UpdateControllerParams& u : meta.update) {
    update.push_back(bind_update(*tape, u, rec && use_update));
  }
  const StopVars stop = bind_stop(*tape, meta.stop, rec && use_stop);
  if (recording) {
    recording->init = cfg.learns_init() ? theta : std::vector<Var>{};
    recording->update.clear();
    for (const UpdateVars& u : update) recording->update.push_back(flatten(u));
    recording->stop = flatten(stop);
    recording->stop_logits.clear();
  }

  std::vector<Var> h, c;
  for (const GroupSpec& g : groups) {
    h.push_back(tape->constant(Tensor({g.size(), kUpdateHidden}, 0.0)));
    c.push_back(tape->constant(Tensor({g.size(), kUpdateHidden}, 0.0)));
  }
  Var hs = tape->constant(Tensor({1, kStopHidden}, 0.0));
  Var cs = tape->constant(Tensor({1, kStopHidden}, 0.0));

  auto values_of = [](const std::vector<Var>& vars) {
    ParamSet out;
    out.reserve(vars.size());
    for (const Var& v : vars) out.push_back(v.value());
    return out;
  };

  EpisodeTrace trace;
  ParamSet current = values_of(theta);
  if (rec) trace.params_at_step.push_back(current);
  const std::size_t horizon = cfg.variant == Variant::fixed_step ? cfg.fixed_steps : cfg.t_max;
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  for (std::size_t t = 1; t <= horizon; ++t) {
    BatchStats stats = problem.train_stats(current, rng);
    double sq = 0.0;
    bool finite = std::isfinite(stats.loss);
    for (const Tensor& g : stats.grads) {
      for (double v : g.values) sq += v * v;
      finite = finite && g.all_finite();
    }
    const double grad_norm = std::sqrt(sq);

    StepRecord record;
    record.step = t;
    record.train_loss = stats.loss;
    record.grad_norm = grad_norm;
    if (!finite || !std::isfinite(grad_norm)) {
      trace.steps.push_back(record);
      trace.stop_step = t - 1;
      throw EpisodeAborted("episode aborted at step " + std::to_string(t) +
                               ": non-finite training loss or gradient",
                           std::move(trace));
    }

    const StopVarsOut s = stop_step(*tape, stop, hs, cs, stats.loss, grad_norm);
    hs = s.h;
    cs = s.c;
    const double p = ad::stable_sigmoid(s.logit.value().item());
    record.stop_prob = p;
    if (recording) recording->stop_logits.push_back(s.logit);

    bool stop_now = false;
    if (use_stop) {
      if (cfg.stop_mode == StopMode::stochastic) {
        stop_now = coin(rng) < p;
      } else {
        stop_now = p >= cfg.threshold;
      }
    }
    if (stop_now) {
      record.stopped = true;
      trace.steps.push_back(std::move(record));
      break;
    }

    for (std::size_t k = 0; k < theta.size(); ++k) {
      const Tensor& grad = stats.grads[k];
      const Var g_const = tape->constant(grad);
      GateSummary summary;
      if (cfg.variant == Variant::fixed_lr) {
        theta[k] = ad::sub(theta[k], ad::scale(g_const, cfg.fixed_lr));
        summary = {cfg.fixed_lr, 1.0, cfg.fixed_lr, cfg.fixed_lr, 1.0, 1.0};
      } else if (cfg.forced_gates) {
        const ForcedGates fg = *cfg.forced_gates;
        theta[k] = ad::sub(ad::scale(theta[k], fg.beta), ad::scale(g_const, fg.alpha));
        summary = {fg.alpha, fg.beta, fg.alpha, fg.alpha, fg.beta, fg.beta};
      } else {
        const GateVars gv = gate_step(*tape, update[k], h[k], c[k], grad.values, stats.loss,
                                      theta[k]);
        h[k] = gv.h;
        c[k] = gv.c;
        const ad::Shape& shape = grad.shape;
        const Var beta = ad::reshape(gv.beta, shape);
        const Var alpha = ad::reshape(gv.alpha, shape);
        theta[k] = ad::sub(ad::elementwise_mul(beta, theta[k]), ad::elementwise_mul(alpha, g_const));
        const auto& a = gv.alpha.value().values;
        const auto& b = gv.beta.value().values;
        const auto [a_lo, a_hi] = std::minmax_element(a.begin(), a.end());
        const auto [b_lo, b_hi] = std::minmax_element(b.begin(), b.end());
        summary = {mean_of(gv.alpha.value()), mean_of(gv.beta.value()), *a_lo, *a_hi, *b_lo, *b_hi};
      }
      record.gates.push_back(summary);
    }
    current = values_of(theta);
    trace.stop_step = t;
    trace.steps.push_back(std::move(record));
    if (rec) trace.params_at_step.push_back(current);
    if (!finite_params(current)) {
      throw EpisodeAborted("episode aborted at step " + std::to_string(t) +
                               ": non-finite parameters after update",
                           std::move(trace));
    }
  }

  if (recording) recording->final_theta = theta;
  return {std::move(current), std::move(trace)};
}

std::vector<double> compute_returns(std::span<const double> test_losses) {
  if (test_losses.size() < 2) {
    throw std::invalid_argument("compute_returns: need losses for θ^(0) … θ^(T) with T >= 1");
  }
  const double final_loss = test_losses.back();
  std::vector<double> q;
  q.reserve(test_losses.size() - 1);
  for (std::size_t t = 1; t < test_losses.size(); ++t) q.push_back(test_losses[t - 1] - final_loss);
  return q;
}

StopControllerParams stop_controller_gradient(const EpisodeRecording& recording,
                                              const EpisodeTrace& trace,
                                              std::span<const double> test_losses,
                                              StopReward reward) {
  const std::size_t T = trace.stop_step;
  if (test_losses.size() != T + 1) {
    throw std::invalid_argument("stop_controller_gradient: " + std::to_string(test_losses.size()) +
                                " test losses for an episode of " + std::to_string(T) +
                                " updates (need T + 1)");
  }
  if (recording.stop_logits.size() < T || recording.stop.size() != 5) {
    throw std::invalid_argument("stop_controller_gradient: recording does not cover the trace");
  }
  StopControllerParams out = StopControllerParams::zeros();
  if (T == 0) return out;
  const double final_loss = test_losses[T];
  Var total;
  for (std::size_t j = 1; j <= T; ++j) {
    const double coef = reward == StopReward::listing ? final_loss - test_losses[j]
                                                      : final_loss - test_losses[j - 1];
    const Var term = ad::scale(ad::log1m_sigmoid(recording.stop_logits[j - 1]), coef);
    total = total.valid() ? ad::add(total, term) : term;
  }
  const ad::Gradients grads = recording.tape->backward(ad::sum(total));
  std::vector<Tensor> g;
  for (const Var& v : recording.stop) g.push_back(grads.wrt(v));
  return stop_from(g);
}

// ---------------------------------------------------------------------------

StepSummary meta_train_step(MetaParams& meta, const InnerProblem& problem,
                            const EpisodeConfig& cfg, const MetaOptimizer& opt, Rng& rng) {
  EpisodeRecording recording;
  EpisodeResult result = run_episode(meta, problem, cfg, rng, &recording);
  const std::size_t T = result.trace.stop_step;

  StepSummary summary;
  summary.stop_step = T;
  // intermediate losses only feed the stop-controller gradient
  if (cfg.uses_stop_controller()) {
    summary.test_losses.reserve(T + 1);
    for (const ParamSet& snapshot : result.trace.params_at_step) {
      summary.test_losses.push_back(problem.test_loss_value(snapshot));
    }
  } else {
    summary.test_losses.push_back(problem.test_loss_value(result.trace.params_at_step.back()));
  }
  summary.test_loss = summary.test_losses.back();

  MetaGradients& grads = summary.gradients;
  const bool train_init = cfg.learns_init() && T > 0;
  const bool train_update = cfg.uses_update_controllers() && T > 0;
  if (train_init || train_update) {
    const Var loss = problem.test_loss(*recording.tape, recording.final_theta);
    const ad::Gradients g = recording.tape->backward(loss);
    if (train_init) {
      for (const Var& v : recording.init) grads.init.push_back(g.wrt(v));
      grads.has_init = true;
    }
    if (train_update) {
      for (const auto& vars : recording.update) {
        std::vector<Tensor> ts;
        for (const Var& v : vars) ts.push_back(g.wrt(v));
        grads.update.push_back(update_from(ts));
      }
      grads.has_update = true;
    }
  }
  if (cfg.uses_stop_controller()) {
    grads.stop =
        stop_controller_gradient(recording, result.trace, summary.test_losses, opt.stop_reward);
    grads.has_stop = true;
  }

  const double lr = opt.learning_rate;
  const double wd = opt.weight_decay;
  if (grads.has_init) {
    for (std::size_t k = 0; k < meta.init.size(); ++k) sgd_update(meta.init[k], &grads.init[k], lr, wd);
  }
  if (grads.has_update) {
    for (std::size_t k = 0; k < meta.update.size(); ++k) {
      auto params = tensors_of(meta.update[k]);
      auto gs = tensors_of(grads.update[k]);
      for (std::size_t i = 0; i < params.size(); ++i) sgd_update(*params[i], gs[i], lr, wd);
    }
  }
  if (grads.has_stop) {
    auto params = tensors_of(meta.stop);
    auto gs = tensors_of(grads.stop);
    for (std::size_t i = 0; i < params.size(); ++i) sgd_update(*params[i], gs[i], lr, wd);
  }
  summary.trace = std::move(result.trace);
  summary.trace.params_at_step.clear();
  return summary;
}

MetaTrainResult meta_train(MetaParams meta, std::span<const tasks::ScenarioTask> train_tasks,
                           const recnet::EmbeddingTable& table, const EpisodeConfig& cfg,
                           const MetaTrainOptions& options, const MetaTrainCallback& on_step) {
  if (train_tasks.empty()) throw std::invalid_argument("meta_train: empty meta-training set");
  std::vector<ScenarioProblem> problems;
  problems.reserve(train_tasks.size());
  for (const tasks::ScenarioTask& t : train_tasks) {
    problems.emplace_back(t, table, meta.layout, cfg.batch_size, options.test_cap);
  }
  Rng master(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train_tasks.size() - 1);
  MetaTrainResult result;
  for (std::size_t k = 0; k < options.iterations; ++k) {
    const std::size_t idx = pick(master);
    Rng episode_rng(master());
    const StepSummary s = meta_train_step(meta, problems[idx], cfg, options.optimizer, episode_rng);
    MetaLogEntry entry{k, train_tasks[idx].scenario, s.stop_step, s.test_loss};
    if (on_step) on_step(entry);
    result.log.push_back(entry);
  }
  result.meta = std::move(meta);
  return result;
}

AdaptResult adapt(const MetaParams& meta, const tasks::ScenarioTask& task,
                  const recnet::EmbeddingTable& table, const EpisodeConfig& cfg) {
  if (task.support.empty()) throw std::invalid_argument("adapt: empty support set");
  const ScenarioProblem problem(task, table, meta.layout, cfg.batch_size);
  Rng rng(cfg.seed ^ (std::uint64_t{task.scenario} << 32));
  EpisodeResult r = run_episode(meta, problem, cfg, rng);
  return {recnet::RecommenderParams{meta.layout, std::move(r.theta)}, std::move(r.trace)};
}

double mean_adapted_test_loss(const MetaParams& meta, std::span<const tasks::ScenarioTask> probe,
                              const recnet::EmbeddingTable& table, const EpisodeConfig& cfg,
                              std::size_t test_cap) {
  if (probe.empty()) throw std::invalid_argument("mean_adapted_test_loss: empty probe set");
  double total = 0.0;
  for (const tasks::ScenarioTask& task : probe) {
    const ScenarioProblem problem(task, table, meta.layout, cfg.batch_size, test_cap);
    const AdaptResult a = adapt(meta, task, table, cfg);
    total += problem.test_loss_value(a.params.tensors);
  }
  return total / static_cast<double>(probe.size());
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

constexpr char kMagic[6] = {'S', '2', 'M', 'E', 'T', 'A'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_array(std::ostream& out, const Tensor& t) {
  put<std::uint64_t>(out, t.size());
  out.write(reinterpret_cast<const char*>(t.values.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void get_array(std::istream& in, Tensor& t) {
  const auto n = get<std::uint64_t>(in);
  if (n != t.size()) {
    throw std::runtime_error("checkpoint: array of " + std::to_string(n) +
                             " values where shape " + ad::to_string(t.shape) + " expects " +
                             std::to_string(t.size()));
  }
  in.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated array");
}

}  // namespace

void save_checkpoint(std::ostream& out, const MetaParams& meta) {
  meta.validate();
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  // architecture descriptor
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.layout.arch));
  put<std::uint64_t>(out, meta.layout.dim);
  put<std::uint64_t>(out, meta.layout.hidden.size());
  for (std::size_t w : meta.layout.hidden) put<std::uint64_t>(out, w);
  put<std::uint64_t>(out, kUpdateHidden);
  put<std::uint64_t>(out, kStopHidden);
  put<std::uint64_t>(out, meta.groups.size());
  for (const GroupSpec& g : meta.groups) {
    put<std::uint64_t>(out, g.name.size());
    out.write(g.name.data(), static_cast<std::streamsize>(g.name.size()));
    put<std::uint64_t>(out, g.fan_in);
    put<std::uint64_t>(out, g.shape.size());
    for (std::size_t s : g.shape) put<std::uint64_t>(out, s);
  }
  meta.for_each_tensor([&](const Tensor& t) { put_array(out, t); });
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

MetaParams load_checkpoint(std::istream& in) {
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic (not an S2META file)");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  MetaParams meta;
  const auto arch = get<std::uint32_t>(in);
  if (arch > 1) throw std::runtime_error("checkpoint: unknown architecture code");
  meta.layout.arch = static_cast<recnet::Architecture>(arch);
  meta.layout.dim = get<std::uint64_t>(in);
  const auto layers = get<std::uint64_t>(in);
  if (layers > 1024) throw std::runtime_error("checkpoint: implausible layer count");
  for (std::uint64_t l = 0; l < layers; ++l) meta.layout.hidden.push_back(get<std::uint64_t>(in));
  if (get<std::uint64_t>(in) != kUpdateHidden || get<std::uint64_t>(in) != kStopHidden) {
    throw std::runtime_error("checkpoint: controller hidden sizes differ from this build");
  }
  const auto n_groups = get<std::uint64_t>(in);
  if (n_groups > 4096) throw std::runtime_error("checkpoint: implausible group count");
  for (std::uint64_t k = 0; k < n_groups; ++k) {
    GroupSpec g;
    const auto len = get<std::uint64_t>(in);
    if (len > 256) throw std::runtime_error("checkpoint: implausible group name");
    g.name.resize(len);
    in.read(g.name.data(), static_cast<std::streamsize>(len));
    g.fan_in = get<std::uint64_t>(in);
    const auto rank = get<std::uint64_t>(in);
    if (rank < 1 || rank > 2) throw std::runtime_error("checkpoint: bad group rank");
    for (std::uint64_t r = 0; r < rank; ++r) g.shape.push_back(get<std::uint64_t>(in));
    meta.groups.push_back(std::move(g));
  }
  for (const GroupSpec& g : meta.groups) meta.init.emplace_back(g.shape, 0.0);
  meta.update.assign(meta.groups.size(), UpdateControllerParams::zeros());
  meta.stop = StopControllerParams::zeros();
  meta.for_each_tensor([&](Tensor& t) { get_array(in, t); });
  meta.validate();
  return meta;
}

void save_checkpoint(const std::filesystem::path& path, const MetaParams& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_checkpoint(out, meta);
}

MetaParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

std::string trace_jsonl(const EpisodeTrace& trace, std::span<const GroupSpec> groups) {
  std::string out;
  for (const StepRecord& s : trace.steps) {
    nlohmann::ordered_json line;
    line["step"] = s.step;
    line["train_loss"] = s.train_loss;
    line["grad_norm"] = s.grad_norm;
    line["stop_prob"] = s.stop_prob;
    line["stopped"] = s.stopped;
    nlohmann::ordered_json gates = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < s.gates.size() && k < groups.size(); ++k) {
      gates[groups[k].name] = {{"alpha", s.gates[k].mean_alpha}, {"beta", s.gates[k].mean_beta}};
    }
    line["gates"] = std::move(gates);
    out += line.dump();
    out += '\n';
  }
  return out;
}

}  // namespace s2meta::meta
