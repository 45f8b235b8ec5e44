#pragma once

// Group-relative policy optimization over the concept-mixed policy, the
// supervised warm start that produces the base policy, and pass@1 evaluation.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "scm/mixing.hpp"
#include "scm/model.hpp"
#include "scm/reward.hpp"
#include "scm/rollout.hpp"
#include "scm/tasks.hpp"

namespace scm {

struct GroupAdvantages {
  std::vector<double> rewards;
  std::vector<double> advantages;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  double eps_std = 1e-8;
};

// A_k = (r_k - mean) / (std + eps_std); all zeros when every reward is equal.
GroupAdvantages compute_advantages(std::span<const double> rewards, double eps_std = 1e-8);

struct ScoredGroup {
  TaskInstance task;
  RolloutGroup group;
  std::vector<RewardBreakdown> rewards;
  GroupAdvantages advantages;
};

ScoredGroup score_group(const TaskInstance& task, RolloutGroup group, const Vocab& vocab, double eps_std = 1e-8,
                        FormatRule rule = FormatRule::Lax);

enum class RatioLevel {
  Token,     // rho_t per generated token, sequence advantage broadcast
  Sequence,  // one rho per rollout from summed log-probabilities
};

struct LossOptions {
  double clip_eps = 0.2;
  MixingMode mode = MixingMode::Scm;
  double temperature = 0.6;
  RatioLevel ratio = RatioLevel::Token;
};

struct LossStats {
  double clip_fraction = 0.0;  // share of ratios where the clipped branch is active
  std::size_t tokens = 0;
};

// -mean over groups and rollouts of the per-rollout token-mean of
// min(rho A, clip(rho, 1 - eps, 1 + eps) A).
Tensor grpo_loss(const ModelParams& params, std::span<const ScoredGroup> groups, const LossOptions& options,
                 LossStats* stats = nullptr);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig config);

  // Applies one update from the current gradients; tensors that never
  // received a gradient count as zero. Throws NumericError on non-finite grads.
  void step();
  void zero_grad();

  int steps_taken() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig config_;
  int t_ = 0;
};

struct PretrainConfig {
  int epochs = 3;
  double lr = 1e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double format_threshold = 0.9;
};

struct PretrainResult {
  ModelParams params;
  std::vector<double> epoch_losses;  // mean per-token loss seen during each epoch
  double heldout_format = 0.0;
  double heldout_accuracy = 0.0;
  bool reached_threshold = false;
};

// Next-token cross-entropy on the completion tokens of each rendered exemplar.
// Falling short of the held-out format threshold is reported, not thrown.
PretrainResult pretrain_supervised(ModelParams params, std::span<const TaskInstance> corpus,
                                   const PretrainConfig& config, std::span<const TaskInstance> heldout = {},
                                   const DecodeControls& heldout_controls = {});

struct TrainConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  double lr = 1e-4;
  int prompts_per_batch = 8;
  int inner_epochs = 1;
  int total_steps = 200;
  std::uint64_t seed = 0;
  MixingMode mode = MixingMode::Scm;
  double eps_std = 1e-8;
  RatioLevel ratio = RatioLevel::Token;
  FormatRule format_rule = FormatRule::Lax;
  DecodeControls controls;
  unsigned threads = 1;

  void validate() const;
};

struct StepMetrics {
  int step = 0;
  double mean_reward = 0.0;
  double mean_accuracy = 0.0;
  double mean_format = 0.0;
  double loss = 0.0;
  double clip_fraction = 0.0;
  double entropy = 0.0;
  double mean_abs_advantage = 0.0;
};

std::string metrics_json_line(const StepMetrics& m);

struct TrainResult {
  ModelParams params;
  std::vector<StepMetrics> metrics;
};

struct TrainCallbacks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(int step, const ScoredGroup&)> on_group;
};

// No value network and no KL term: the loss is the clipped surrogate alone.
TrainResult train_rl(ModelParams params, std::span<const TaskInstance> tasks, const TrainConfig& config,
                     const TrainCallbacks& callbacks = {});

struct EvalReport {
  std::size_t count = 0;
  double accuracy = 0.0;  // pass@1
  double mean_reward = 0.0;
  double mean_format = 0.0;
};

// Task i decodes with seed derive_seed({controls.seed, i}).
EvalReport evaluate(const ModelParams& params, std::span<const TaskInstance> tasks, const DecodeControls& controls,
                    MixingMode mode, FormatRule rule = FormatRule::Lax);

}  // namespace scm
