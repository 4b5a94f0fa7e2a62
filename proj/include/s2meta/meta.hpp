// SPDX-License-Identifier: Apache-2.0
//
// Sequential meta learner: a shared initialization for the recommender,
// coordinate-wise LSTM update controllers (one per parameter group) that
// emit input/forget gates, and an LSTM stop controller that emits a per-step
// stop probability. Meta-training uses first-order meta-gradients for the
// initialization and update controllers and REINFORCE for the stop
// controller.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2meta/autodiff.hpp"
#include "s2meta/recnet.hpp"
#include "s2meta/tasks.hpp"

namespace s2meta::meta {

using recnet::GroupSpec;
using ParamSet = std::vector<ad::Tensor>;

inline constexpr std::size_t kUpdateHidden = 16;
inline constexpr std::size_t kStopHidden = 18;
/// (grad, loss, param), two features each after preprocessing
inline constexpr std::size_t kUpdateInputs = 6;
/// (loss, grad norm), two features each after preprocessing
inline constexpr std::size_t kStopInputs = 4;
inline constexpr double kPreprocessP = 10.0;

struct LstmParams {
  ad::Tensor w_x;  // [in × 4H], gate order (i, f, g, o)
  ad::Tensor w_h;  // [H × 4H]
  ad::Tensor b;    // [4H]

  static LstmParams zeros(std::size_t inputs, std::size_t hidden);
};

struct UpdateControllerParams {
  LstmParams lstm;
  ad::Tensor w_forget;  // [H × 1]
  ad::Tensor b_forget;  // [1]
  ad::Tensor w_input;   // [H × 1]
  ad::Tensor b_input;   // [1]

  static UpdateControllerParams zeros();
};

struct StopControllerParams {
  LstmParams lstm;
  ad::Tensor w_stop;  // [H × 1]
  ad::Tensor b_stop;  // [1]

  static StopControllerParams zeros();
};

struct InitOptions {
  double controller_weight_range = 0.01;
  double forget_bias = 5.0;
  double input_bias = -5.0;
  double stop_bias = -4.0;
};

/// ω = {ω_R, ω_u, ω_s}.
struct MetaParams {
  recnet::Layout layout;
  /// Parameter groups of the learner; equal to layout.groups() for the
  /// recommender.
  std::vector<GroupSpec> groups;
  ParamSet init;
  std::vector<UpdateControllerParams> update;
  StopControllerParams stop;

  static MetaParams initialize(const recnet::Layout& layout, Rng& rng,
                               const InitOptions& options = {});
  /// For learners that are not a recommender (e.g. surrogate losses).
  static MetaParams initialize(std::vector<GroupSpec> groups, Rng& rng,
                               const InitOptions& options = {});

  void validate() const;

  /// Visits every tensor in checkpoint order: ω_R groups, then per update
  /// controller (w_x, w_h, b, w_forget, b_forget, w_input, b_input), then the
  /// stop controller (w_x, w_h, b, w_stop, b_stop).
  void for_each_tensor(const std::function<void(ad::Tensor&)>& f);
  void for_each_tensor(const std::function<void(const ad::Tensor&)>& f) const;

  friend bool operator==(const MetaParams& a, const MetaParams& b);
};

// ---------------------------------------------------------------------------
// Controllers (single forward step, no tape needed by callers)

struct GateOutput {
  ad::Tensor alpha;  // [n × 1]
  ad::Tensor beta;   // [n × 1]
  ad::Tensor h;      // [n × H]
  ad::Tensor c;      // [n × H]
};

/// One update-controller step for a group of n coordinates. `state_h` and
/// `state_c` are [n × 16]; grad and param hold n values.
GateOutput update_gates(const UpdateControllerParams& ctrl, const ad::Tensor& state_h,
                        const ad::Tensor& state_c, std::span<const double> grad, double loss,
                        std::span<const double> param);

struct StopOutput {
  double p = 0.5;
  ad::Tensor h;  // [1 × 18]
  ad::Tensor c;
};

StopOutput stop_probability(const StopControllerParams& ctrl, const ad::Tensor& state_h,
                            const ad::Tensor& state_c, double loss, double grad_norm);

/// Tape-level forms of the two controller steps, differentiable in every
/// Var argument. Update controller tensors in checkpoint order: w_x, w_h, b,
/// w_forget, b_forget, w_input, b_input. Stop controller: w_x, w_h, b,
/// w_stop, b_stop.
struct GateVars {
  ad::Var alpha, beta, h, c;  // alpha/beta: [n × 1]
};

/// `grad` and `loss` enter as constants; `theta` may carry gradient.
GateVars update_gates(ad::Tape& tape, std::span<const ad::Var> ctrl, const ad::Var& h,
                      const ad::Var& c, std::span<const double> grad, double loss,
                      const ad::Var& theta);

struct StopVarsOut {
  ad::Var logit, h, c;  // logit: [1 × 1]
};

StopVarsOut stop_logit(ad::Tape& tape, std::span<const ad::Var> ctrl, const ad::Var& h,
                       const ad::Var& c, double loss, double grad_norm);

/// β ⊙ θ − α ⊙ ∇
ad::Tensor apply_update(const ad::Tensor& theta, const ad::Tensor& grad, const ad::Tensor& alpha,
                        const ad::Tensor& beta);

// ---------------------------------------------------------------------------
// Inner learning problems

struct BatchStats {
  double loss = 0.0;
  ParamSet grads;
};

/// What an episode learns on: a sampled training objective, a held-out test
/// objective and a random initializer.
class InnerProblem {
 public:
  virtual ~InnerProblem() = default;
  virtual std::vector<GroupSpec> groups() const = 0;
  /// Samples one training batch and returns its loss and gradient at theta.
  virtual BatchStats train_stats(std::span<const ad::Tensor> theta, Rng& rng) const = 0;
  /// Differentiable held-out loss.
  virtual ad::Var test_loss(ad::Tape& tape, std::span<const ad::Var> theta) const = 0;
  virtual double test_loss_value(std::span<const ad::Tensor> theta) const = 0;
  virtual ParamSet random_init(Rng& rng) const = 0;
};

/// Scenario-specific learning of the recommender on one task.
class ScenarioProblem final : public InnerProblem {
 public:
  /// Query triples beyond `test_cap` are replaced by a fixed subsample seeded
  /// by the scenario id.
  ScenarioProblem(const tasks::ScenarioTask& task, const recnet::EmbeddingTable& table,
                  recnet::Layout layout, std::size_t batch_size, std::size_t test_cap = 2048);

  std::vector<GroupSpec> groups() const override;
  BatchStats train_stats(std::span<const ad::Tensor> theta, Rng& rng) const override;
  ad::Var test_loss(ad::Tape& tape, std::span<const ad::Var> theta) const override;
  double test_loss_value(std::span<const ad::Tensor> theta) const override;
  ParamSet random_init(Rng& rng) const override;

  const tasks::ScenarioTask& task() const { return *task_; }
  const recnet::Layout& layout() const { return layout_; }
  std::span<const recnet::TrainTriple> test_triples() const { return test_; }

 private:
  recnet::RecommenderParams wrap(std::span<const ad::Tensor> theta) const;

  const tasks::ScenarioTask* task_;
  const recnet::EmbeddingTable* table_;
  recnet::Layout layout_;
  std::size_t batch_size_;
  std::vector<recnet::TrainTriple> test_;
  // distinct (user, item) pairs of test_, and each triple's pair indices
  std::vector<Id> pair_users_;
  std::vector<Id> pair_items_;
  std::vector<std::size_t> pos_pair_;
  std::vector<std::size_t> neg_pair_;
};

// ---------------------------------------------------------------------------
// Episodes

enum class StopMode { stochastic, threshold };
enum class Variant { complete, rand_init, fixed_lr, fixed_step };

const char* to_string(Variant v);
Variant parse_variant(const std::string& name);

/// Constant gates replacing the update controllers (diagnostics and oracle
/// tests).
struct ForcedGates {
  double alpha = 0.0;
  double beta = 1.0;
};

struct EpisodeConfig {
  std::size_t t_max = 50;
  std::size_t batch_size = 32;
  StopMode stop_mode = StopMode::stochastic;
  double threshold = 0.5;
  Variant variant = Variant::complete;
  double fixed_lr = 0.01;
  std::size_t fixed_steps = 20;
  std::uint64_t seed = 0;
  std::optional<ForcedGates> forced_gates;

  void validate() const;
  bool uses_update_controllers() const;
  bool uses_stop_controller() const { return variant != Variant::fixed_step; }
  bool learns_init() const { return variant != Variant::rand_init; }
};

struct GateSummary {
  double mean_alpha = 0.0;
  double mean_beta = 0.0;
  double min_alpha = 0.0;
  double max_alpha = 0.0;
  double min_beta = 0.0;
  double max_beta = 0.0;
  friend bool operator==(const GateSummary&, const GateSummary&) = default;
};

struct StepRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double grad_norm = 0.0;
  double stop_prob = 0.0;
  bool stopped = false;
  /// One entry per parameter group; empty when the step stopped.
  std::vector<GateSummary> gates;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EpisodeTrace {
  std::vector<StepRecord> steps;
  /// Number of parameter updates performed (T).
  std::size_t stop_step = 0;
  /// θ^(0) … θ^(T); filled only when the episode is recorded for training.
  std::vector<ParamSet> params_at_step;

  friend bool operator==(const EpisodeTrace&, const EpisodeTrace&) = default;
};

/// Raised when the training loss or gradient turns non-finite.
class EpisodeAborted : public std::runtime_error {
 public:
  EpisodeAborted(const std::string& what, EpisodeTrace trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const EpisodeTrace& trace() const { return trace_; }

 private:
  EpisodeTrace trace_;
};

/// Differentiable record of an episode, kept for meta-training.
struct EpisodeRecording {
  std::unique_ptr<ad::Tape> tape = std::make_unique<ad::Tape>();
  std::vector<ad::Var> init;
  /// Per update controller: w_x, w_h, b, w_forget, b_forget, w_input, b_input.
  std::vector<std::vector<ad::Var>> update;
  /// w_x, w_h, b, w_stop, b_stop.
  std::vector<ad::Var> stop;
  std::vector<ad::Var> final_theta;
  /// Stop logit of each evaluated step, in order.
  std::vector<ad::Var> stop_logits;
};

struct EpisodeResult {
  ParamSet theta;
  EpisodeTrace trace;
};

/// One scenario-specific learning episode. When `recording` is non-null the
/// episode is built on its tape with ω as differentiable leaves and per-step
/// parameter snapshots are kept.
EpisodeResult run_episode(const MetaParams& meta, const InnerProblem& problem,
                          const EpisodeConfig& cfg, Rng& rng,
                          EpisodeRecording* recording = nullptr);

/// Q^(t) = L(θ^(t-1)) − L(θ^(T)) for t = 1..T.
std::vector<double> compute_returns(std::span<const double> test_losses);

/// How the REINFORCE coefficient of step j is formed.
enum class StopReward {
  /// L^test − L(θ^(j-1)) = −Q^(j): the loss after stopping at j minus the
  /// final loss. Unbiased for ∇ E[L^test].
  reward_to_go,
  /// L^test − L(θ^(j)): the loss after the continue decision is acted on.
  /// Biased for ∇ E[L^test].
  listing,
};

const char* to_string(StopReward r);
StopReward parse_stop_reward(const std::string& name);

/// Σ_j coef_j ∇_{ω_s} ln(1 − p^(j)) over the T continue decisions of a
/// recorded episode, shaped like StopControllerParams.
StopControllerParams stop_controller_gradient(const EpisodeRecording& recording,
                                              const EpisodeTrace& trace,
                                              std::span<const double> test_losses,
                                              StopReward reward = StopReward::reward_to_go);

// ---------------------------------------------------------------------------
// Meta-training

struct MetaOptimizer {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  StopReward stop_reward = StopReward::reward_to_go;
};

struct MetaGradients {
  ParamSet init;
  std::vector<UpdateControllerParams> update;
  StopControllerParams stop;
  bool has_init = false;
  bool has_update = false;
  bool has_stop = false;
};

struct StepSummary {
  std::size_t stop_step = 0;
  double test_loss = 0.0;
  /// L(θ^(0)) … L(θ^(T)); only L(θ^(T)) when the stop controller is unused.
  std::vector<double> test_losses;
  MetaGradients gradients;
  EpisodeTrace trace;
};

/// Runs one recorded episode, computes the first-order meta-gradient of
/// L^test for ω_R and ω_u and the REINFORCE gradient for ω_s, and applies
/// ω ← ω − lr (g + λ ω) to every component the variant trains.
StepSummary meta_train_step(MetaParams& meta, const InnerProblem& problem,
                            const EpisodeConfig& cfg, const MetaOptimizer& opt, Rng& rng);

struct MetaTrainOptions {
  std::size_t iterations = 2000;  // K
  std::uint64_t seed = 0;
  MetaOptimizer optimizer;
  std::size_t test_cap = 2048;
};

struct MetaLogEntry {
  std::size_t iteration = 0;
  Id scenario = 0;
  std::size_t stop_step = 0;
  double test_loss = 0.0;
  friend bool operator==(const MetaLogEntry&, const MetaLogEntry&) = default;
};

struct MetaTrainResult {
  MetaParams meta;
  std::vector<MetaLogEntry> log;
};

using MetaTrainCallback = std::function<void(const MetaLogEntry&)>;

/// K meta-training steps over uniformly sampled tasks.
MetaTrainResult meta_train(MetaParams meta, std::span<const tasks::ScenarioTask> train_tasks,
                           const recnet::EmbeddingTable& table, const EpisodeConfig& cfg,
                           const MetaTrainOptions& options,
                           const MetaTrainCallback& on_step = {});

/// Deterministic adaptation to a new scenario's support set.
struct AdaptResult {
  recnet::RecommenderParams params;
  EpisodeTrace trace;
};

AdaptResult adapt(const MetaParams& meta, const tasks::ScenarioTask& task,
                  const recnet::EmbeddingTable& table, const EpisodeConfig& cfg);

/// Mean held-out loss after adaptation over `probe` tasks.
double mean_adapted_test_loss(const MetaParams& meta, std::span<const tasks::ScenarioTask> probe,
                              const recnet::EmbeddingTable& table, const EpisodeConfig& cfg,
                              std::size_t test_cap = 2048);

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(std::ostream& out, const MetaParams& meta);
MetaParams load_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const MetaParams& meta);
MetaParams load_checkpoint(const std::filesystem::path& path);

/// One JSON object per step: step, train_loss, grad_norm, stop_prob, stopped,
/// gates {group: {alpha, beta}}.
std::string trace_jsonl(const EpisodeTrace& trace, std::span<const GroupSpec> groups);

}  // namespace s2meta::meta
