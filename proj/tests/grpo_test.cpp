#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "scm/errors.hpp"
#include "scm/grpo.hpp"
#include "support.hpp"

using namespace scm;

namespace {

ModelParams toy_model(std::uint64_t seed, double factor = 8.0) {
  TransformerConfig c;
  c.vocab_size = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_seq_len = 24;
  auto p = init_params(c, seed);
  for (auto& t : p.tensors()) {
    for (auto& v : t.mutable_values()) v *= factor;
  }
  return p;
}

DecodeControls toy_controls(std::uint64_t seed, double temperature = 1.0) {
  DecodeControls c;
  c.temperature = temperature;
  c.top_k = 0;
  c.top_p = 1.0;
  c.max_new_tokens = 6;
  c.seed = seed;
  c.eos_token = 7;
  return c;
}

ScoredGroup toy_group(const ModelParams& params, const std::vector<int>& prompt, std::vector<double> rewards,
                      MixingMode mode, std::uint64_t seed, double temperature = 1.0) {
  ScoredGroup g;
  g.group = sample_group(params, prompt, static_cast<int>(rewards.size()), toy_controls(seed, temperature), mode,
                         seed);
  g.rewards.resize(rewards.size());
  g.advantages = compute_advantages(rewards);
  return g;
}

std::vector<ScoredGroup> toy_batch(const ModelParams& params, MixingMode mode, double temperature = 1.0) {
  return {toy_group(params, {0, 3, 5}, {2.0, 0.0, 1.25, 1.0}, mode, 1, temperature),
          toy_group(params, {1, 2}, {0.0, 1.0, 0.5}, mode, 2, temperature)};
}

std::vector<int> full_sequence(const RolloutRecord& r) {
  std::vector<int> s = r.prompt;
  s.insert(s.end(), r.tokens.begin(), r.tokens.end());
  return s;
}

// Reference objectives assembled directly from teacher-forced log-probs.
enum class Reference { PolicyGradient, Unclipped };

Tensor reference_loss(const ModelParams& params, const std::vector<ScoredGroup>& groups, const LossOptions& o,
                      Reference kind) {
  std::vector<Tensor> terms;
  for (const auto& g : groups) {
    const double k = static_cast<double>(g.group.records.size());
    for (std::size_t i = 0; i < g.group.records.size(); ++i) {
      const auto& r = g.group.records[i];
      const auto seq = full_sequence(r);
      const Tensor logp = mixed_forward_logprobs(params, seq, r.prompt.size(), o.mode, o.temperature);
      Tensor per_token = logp;
      if (kind == Reference::Unclipped) {
        per_token = ad::exp(ad::sub(logp, Tensor::from({r.tokens.size()}, r.old_logprobs)));
      }
      terms.push_back(ad::reshape(ad::scale(ad::mean(per_token), g.advantages.advantages[i] / k), {1}));
    }
  }
  return ad::scale(ad::sum(ad::concat(terms)), -1.0 / static_cast<double>(groups.size()));
}

std::vector<double> gradient_of(ModelParams& params, const std::function<Tensor()>& loss) {
  params.zero_grad();
  ad::backward(loss());
  std::vector<double> g;
  for (const auto& t : params.tensors()) {
    if (t.has_grad()) {
      g.insert(g.end(), t.grad().begin(), t.grad().end());
    } else {
      g.insert(g.end(), t.size(), 0.0);
    }
  }
  params.zero_grad();
  return g;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / scale;
}

void perturb(ModelParams& params, std::uint64_t seed, double size) {
  Rng rng(seed);
  for (auto& t : params.tensors()) {
    for (auto& v : t.mutable_values()) v += size * (2.0 * uniform01(rng) - 1.0);
  }
}

// One group, one rollout with a single generated token whose ratio is set.
std::vector<ScoredGroup> single_token_group(const ModelParams& params, double ratio, double advantage) {
  RolloutRecord r;
  r.prompt = {0, 4};
  r.tokens = {3};
  const auto seq = full_sequence(r);
  const double logp = mixed_forward_logprobs(params, seq, 2, MixingMode::Scm, 1.0)[0];
  r.old_logprobs = {logp - std::log(ratio)};
  ScoredGroup g;
  g.group.prompt = r.prompt;
  g.group.records = {r};
  g.advantages.advantages = {advantage};
  return {g};
}

}  // namespace

TEST(Advantages, Examples) {
  const auto a = compute_advantages(std::vector<double>{2.0, 0.0}, 1e-8);
  EXPECT_NEAR(a.advantages[0], 1.0 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(a.advantages[1], -1.0 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(a.mean, 1.0);
  EXPECT_EQ(a.std, 1.0);

  const auto flat = compute_advantages(std::vector<double>(8, 1.0));
  for (double x : flat.advantages) EXPECT_EQ(x, 0.0);

  const auto three = compute_advantages(std::vector<double>{2.0, 1.0, 0.0});
  EXPECT_NEAR(three.advantages[0], 1.2247, 1e-4);
  EXPECT_NEAR(three.advantages[1], 0.0, 1e-12);
  EXPECT_NEAR(three.advantages[2], -1.2247, 1e-4);
  EXPECT_NEAR(three.advantages[0], 1.0 / std::sqrt(2.0 / 3.0), 1e-6);
}

TEST(Advantages, RejectsGroupsSmallerThanTwo) {
  EXPECT_THROW(compute_advantages(std::vector<double>{1.0}), ContractError);
  EXPECT_THROW(compute_advantages(std::vector<double>{}), ContractError);
}

TEST(Advantages, NormalizationProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = uniform_int(rng, 2, 16);
    std::vector<double> r(k);
    for (auto& x : r) x = 0.25 * static_cast<double>(uniform_int(rng, 0, 8));
    const auto a = compute_advantages(r);
    if (a.std == 0.0) continue;
    const double mean = std::accumulate(a.advantages.begin(), a.advantages.end(), 0.0) / k;
    double var = 0.0;
    for (double x : a.advantages) var += (x - mean) * (x - mean) / k;
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_LT(std::abs(std::sqrt(var) * (1.0 + a.eps_std / a.std) - 1.0), 1e-6);
  }
}

TEST(GrpoLoss, ClipBranches) {
  const auto params = toy_model(5);
  struct Case {
    double ratio, advantage, loss;
  };
  for (const Case& c : {Case{1.5, 1.0, -1.2}, Case{0.5, -1.0, 0.8}, Case{1.5, -1.0, 1.5}, Case{0.5, 1.0, -0.5},
                        Case{1.1, 1.0, -1.1}}) {
    const auto groups = single_token_group(params, c.ratio, c.advantage);
    LossStats stats;
    const Tensor loss = grpo_loss(params, groups, LossOptions{0.2, MixingMode::Scm, 1.0}, &stats);
    EXPECT_NEAR(loss.item(), c.loss, 1e-6) << "ratio " << c.ratio << " A " << c.advantage;
    const bool clipped = (c.advantage > 0 && c.ratio > 1.2) || (c.advantage < 0 && c.ratio < 0.8);
    EXPECT_EQ(stats.clip_fraction, clipped ? 1.0 : 0.0);
  }
}

TEST(GrpoLoss, ClippedBranchHasZeroGradient) {
  auto params = toy_model(6);
  const auto groups = single_token_group(params, 1.5, 1.0);
  const auto g = gradient_of(params, [&] { return grpo_loss(params, groups, LossOptions{0.2, MixingMode::Scm, 1.0}); });
  for (double x : g) EXPECT_EQ(x, 0.0);
}

TEST(GrpoLoss, RatioOneReducesToPolicyGradient) {
  for (auto mode : {MixingMode::Scm, MixingMode::NoMix, MixingMode::NoHiddenFusion}) {
    auto params = toy_model(7);
    const auto groups = toy_batch(params, mode);
    const LossOptions o{0.2, mode, 1.0};
    double expected = 0.0;
    for (const auto& g : groups) {
      for (double a : g.advantages.advantages) expected -= a / g.advantages.advantages.size() / groups.size();
    }
    EXPECT_NEAR(grpo_loss(params, groups, o).item(), expected, 1e-12);
    const auto ours = gradient_of(params, [&] { return grpo_loss(params, groups, o); });
    const auto pg = gradient_of(params, [&] { return reference_loss(params, groups, o, Reference::PolicyGradient); });
    EXPECT_LT(max_rel_diff(ours, pg), 1e-9) << to_string(mode);
  }
}

TEST(GrpoLoss, ClipIsInertNearOldPolicy) {
  auto params = toy_model(8);
  const auto groups = toy_batch(params, MixingMode::Scm);
  perturb(params, 9, 1e-4);
  const LossOptions o{0.2, MixingMode::Scm, 1.0};
  LossStats stats;
  const double value = grpo_loss(params, groups, o, &stats).item();
  EXPECT_EQ(stats.clip_fraction, 0.0);
  EXPECT_NEAR(value, reference_loss(params, groups, o, Reference::Unclipped).item(), 1e-12);
  bool moved = false;
  for (const auto& g : groups) {
    for (const auto& r : g.group.records) {
      const auto lp = mixed_forward_logprobs(params, full_sequence(r), r.prompt.size(), o.mode, 1.0);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        const double rho = std::exp(lp[t] - r.old_logprobs[t]);
        EXPECT_LT(std::abs(rho - 1.0), 0.2);
        moved = moved || std::abs(rho - 1.0) > 1e-6;
      }
    }
  }
  EXPECT_TRUE(moved);
  const auto ours = gradient_of(params, [&] { return grpo_loss(params, groups, o); });
  const auto unclipped =
      gradient_of(params, [&] { return reference_loss(params, groups, o, Reference::Unclipped); });
  EXPECT_LT(max_rel_diff(ours, unclipped), 1e-9);
}

TEST(GrpoLoss, StepFollowsTheSignOfTheAdvantage) {
  auto params = toy_model(10);
  const std::vector<int> prompt = {0, 3, 5};
  const auto groups = std::vector<ScoredGroup>{toy_group(params, prompt, {2.0, 0.0, 1.0, 0.0}, MixingMode::Scm, 3)};
  const LossOptions o{0.2, MixingMode::Scm, 1.0};
  const auto seq_logp = [&](const RolloutRecord& r) {
    ad::NoGradGuard guard;
    return ad::sum(mixed_forward_logprobs(params, full_sequence(r), r.prompt.size(), o.mode, 1.0)).item();
  };
  const auto& g = groups[0];
  std::vector<double> before;
  for (const auto& r : g.group.records) before.push_back(seq_logp(r));

  params.zero_grad();
  ad::backward(grpo_loss(params, groups, o));
  for (auto& t : params.tensors()) {
    if (!t.has_grad()) continue;
    const std::vector<double> grad(t.grad().begin(), t.grad().end());
    auto v = t.mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= 1e-4 * grad[j];
  }
  double pos = 0.0, neg = 0.0;
  for (std::size_t k = 0; k < g.group.records.size(); ++k) {
    const double delta = seq_logp(g.group.records[k]) - before[k];
    if (g.advantages.advantages[k] > 0) pos += delta;
    if (g.advantages.advantages[k] < 0) neg += delta;
  }
  EXPECT_GT(pos, 0.0);
  EXPECT_LT(neg, 0.0);
}

TEST(GrpoLoss, ZeroVarianceGroupContributesNoGradient) {
  auto params = toy_model(11);
  const auto groups = std::vector<ScoredGroup>{toy_group(params, {0, 1}, {1.0, 1.0, 1.0}, MixingMode::Scm, 4)};
  perturb(params, 12, 1e-2);
  const LossOptions o{0.2, MixingMode::Scm, 1.0};
  EXPECT_EQ(grpo_loss(params, groups, o).item(), 0.0);
  const auto g = gradient_of(params, [&] { return grpo_loss(params, groups, o); });
  for (double x : g) EXPECT_EQ(x, 0.0);
}

TEST(GrpoLoss, GradientMatchesFiniteDifferences) {
  for (auto ratio : {RatioLevel::Token, RatioLevel::Sequence}) {
    auto params = toy_model(13);
    const auto groups = toy_batch(params, MixingMode::Scm);
    perturb(params, 14, 5e-2);
    const LossOptions o{0.2, MixingMode::Scm, 1.0, ratio};
    params.zero_grad();
    ad::backward(grpo_loss(params, groups, o));
    const auto f = [&] {
      ad::NoGradGuard guard;
      return grpo_loss(params, groups, o).item();
    };
    Rng rng(15);
    auto named = params.named_tensors();
    int checked = 0;
    for (int attempt = 0; attempt < 200 && checked < 12; ++attempt) {
      auto& [name, t] = named[uniform_int(rng, 0, static_cast<long>(named.size()) - 1)];
      const std::size_t j = uniform_int(rng, 0, static_cast<long>(t.size()) - 1);
      const double analytic = t.has_grad() ? t.grad()[j] : 0.0;
      const double numeric = testutil::central_difference(f, t, j);
      if (std::abs(numeric) < 1e-7 && std::abs(analytic) < 1e-7) continue;
      EXPECT_LT(testutil::rel_err(analytic, numeric), 1e-3) << name << "[" << j << "]";
      ++checked;
    }
    EXPECT_GE(checked, 10);
  }
}

TEST(GrpoLoss, SequenceRatioAtOldPolicyEqualsTokenRatio) {
  auto params = toy_model(16);
  const auto groups = toy_batch(params, MixingMode::Scm);
  const double token = grpo_loss(params, groups, LossOptions{0.2, MixingMode::Scm, 1.0, RatioLevel::Token}).item();
  const double seq = grpo_loss(params, groups, LossOptions{0.2, MixingMode::Scm, 1.0, RatioLevel::Sequence}).item();
  EXPECT_NEAR(token, seq, 1e-12);
}

TEST(GrpoLoss, RejectsMissingLogProbsAndBadClip) {
  auto params = toy_model(17);
  auto groups = toy_batch(params, MixingMode::Scm);
  EXPECT_THROW(grpo_loss(params, groups, LossOptions{0.0, MixingMode::Scm, 1.0}), ContractError);
  EXPECT_THROW(grpo_loss(params, groups, LossOptions{1.0, MixingMode::Scm, 1.0}), ContractError);
  groups[0].group.records[1].old_logprobs.pop_back();
  EXPECT_THROW(grpo_loss(params, groups, LossOptions{}), ContractError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  AdamOptimizer opt({x}, AdamConfig{.lr = 0.1});
  opt.step();
  opt.step();
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], -2.0);
  EXPECT_EQ(x[2], 0.5);
  EXPECT_EQ(opt.steps_taken(), 2);
}

TEST(Adam, QuadraticBowlConverges) {
  const std::vector<double> center = {3.0, -1.5, 0.25, 2.0};
  Tensor x = Tensor::from({4}, {0.0, 0.0, 0.0, 0.0}, true);
  const Tensor c = Tensor::from({4}, center);
  AdamOptimizer opt({x}, AdamConfig{.lr = 0.1});
  for (int step = 0; step < 500; ++step) {
    opt.zero_grad();
    const Tensor d = ad::sub(x, c);
    ad::backward(ad::sum(ad::mul(d, d)));
    opt.step();
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x[i], center[i], 1e-6);
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  const auto run = [] {
    auto params = toy_model(18);
    const auto groups = toy_batch(params, MixingMode::Scm);
    AdamOptimizer opt(params.tensors(), AdamConfig{});
    for (int i = 0; i < 3; ++i) {
      opt.zero_grad();
      ad::backward(grpo_loss(params, groups, LossOptions{0.2, MixingMode::Scm, 1.0}));
      opt.step();
    }
    return serialize_checkpoint(params);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, NonFiniteGradientAborts) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  AdamOptimizer opt({x}, AdamConfig{});
  ad::backward(ad::sum(ad::scale(x, std::numeric_limits<double>::infinity())));
  EXPECT_THROW(opt.step(), NumericError);
}

TEST(Pretrain, LossDecreasesOverTheFirstThreeEpochs) {
  const auto corpus = make_splits(Tier::OneDigit, 2000, 0, 0).train;
  PretrainConfig cfg;
  cfg.epochs = 3;
  const auto result = pretrain_supervised(init_params(TransformerConfig{}, 0), corpus, cfg);
  ASSERT_EQ(result.epoch_losses.size(), 3u);
  EXPECT_LT(result.epoch_losses[1], result.epoch_losses[0]);
  EXPECT_LT(result.epoch_losses[2], result.epoch_losses[1]);
}

TEST(Pretrain, MemorizesASingleExemplar) {
  const std::vector<TaskInstance> corpus = {gen_task(5, Tier::TwoDigit)};
  PretrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 1;
  const auto result = pretrain_supervised(init_params(TransformerConfig{}, 1), corpus, cfg);
  EXPECT_LT(result.epoch_losses.back(), 0.05);
}

TEST(Pretrain, PerfectMemorizationEvaluatesToFullAccuracy) {
  const auto corpus = make_splits(Tier::OneDigit, 4, 0, 7).train;
  PretrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 4;
  DecodeControls greedy;
  greedy.top_k = 1;
  const auto result = pretrain_supervised(init_params(TransformerConfig{}, 2), corpus, cfg, corpus, greedy);
  EXPECT_EQ(result.heldout_format, 1.0);
  EXPECT_EQ(result.heldout_accuracy, 1.0);
  EXPECT_TRUE(result.reached_threshold);
  const auto report = evaluate(result.params, corpus, greedy, MixingMode::NoMix);
  EXPECT_EQ(report.accuracy, 1.0);
  EXPECT_EQ(report.mean_reward, 2.0);
}

TEST(TrainRl, MetricsPerStepAndDeterminism) {
  TransformerConfig small;
  small.d_model = 16;
  small.n_heads = 2;
  const auto tasks = make_splits(Tier::OneDigit, 20, 0, 3).train;
  TrainConfig cfg;
  cfg.total_steps = 3;
  cfg.prompts_per_batch = 2;
  cfg.group_size = 4;
  cfg.controls.max_new_tokens = 24;
  cfg.controls.temperature = 1.0;
  std::vector<int> groups_seen;
  TrainCallbacks callbacks;
  callbacks.on_group = [&](int step, const ScoredGroup&) { groups_seen.push_back(step); };
  const auto a = train_rl(init_params(small, 4), tasks, cfg, callbacks);
  const auto b = train_rl(init_params(small, 4), tasks, cfg);
  EXPECT_EQ(a.metrics.size(), 3u);
  EXPECT_EQ(groups_seen, (std::vector<int>{0, 0, 1, 1, 2, 2}));
  EXPECT_EQ(serialize_checkpoint(a.params), serialize_checkpoint(b.params));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(metrics_json_line(a.metrics[i]), metrics_json_line(b.metrics[i]));
    EXPECT_EQ(a.metrics[i].step, static_cast<int>(i));
    EXPECT_GE(a.metrics[i].mean_reward, 0.0);
    EXPECT_LE(a.metrics[i].mean_reward, 2.0);
  }
}

TEST(TrainRl, ModesDifferOnlyThroughThePolicy) {
  TransformerConfig small;
  small.d_model = 16;
  small.n_heads = 2;
  const auto tasks = make_splits(Tier::OneDigit, 20, 0, 3).train;
  TrainConfig cfg;
  cfg.total_steps = 2;
  cfg.prompts_per_batch = 2;
  cfg.group_size = 4;
  cfg.controls.max_new_tokens = 24;
  cfg.controls.temperature = 1.0;
  cfg.mode = MixingMode::NoMix;
  const auto plain = train_rl(init_params(small, 5), tasks, cfg);
  cfg.mode = MixingMode::NoHiddenFusion;
  const auto fusion_off = train_rl(init_params(small, 5), tasks, cfg);
  EXPECT_EQ(serialize_checkpoint(plain.params), serialize_checkpoint(fusion_off.params));
  cfg.mode = MixingMode::Scm;
  const auto mixed = train_rl(init_params(small, 5), tasks, cfg);
  EXPECT_NE(serialize_checkpoint(plain.params), serialize_checkpoint(mixed.params));
}

TEST(TrainRl, ConfigValidation) {
  TrainConfig cfg;
  cfg.group_size = 1;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.clip_eps = 1.0;
  EXPECT_THROW(cfg.validate(), ContractError);
  const std::vector<TaskInstance> none;
  EXPECT_THROW(train_rl(init_params(TransformerConfig{}, 0), none, TrainConfig{}), ContractError);
}

TEST(Evaluate, AccuracyIsAFractionAndEmptyInputThrows) {
  const auto tasks = make_splits(Tier::OneDigit, 0, 10, 3).eval;
  const auto report = evaluate(init_params(TransformerConfig{}, 6), tasks, DecodeControls{}, MixingMode::Scm);
  EXPECT_EQ(report.count, 10u);
  EXPECT_GE(report.accuracy, 0.0);
  EXPECT_LE(report.accuracy, 1.0);
  EXPECT_THROW(evaluate(init_params(TransformerConfig{}, 6), std::vector<TaskInstance>{}, DecodeControls{},
                        MixingMode::Scm),
               ContractError);
}

TEST(Metrics, JsonLineKeys) {
  StepMetrics m;
  m.step = 4;
  m.mean_reward = 1.5;
  EXPECT_EQ(metrics_json_line(m),
            "{\"step\":4,\"mean_reward\":1.5,\"mean_acc\":0.0,\"mean_fmt\":0.0,\"loss\":0.0,"
            "\"clip_fraction\":0.0,\"entropy\":0.0,\"mean_abs_adv\":0.0}");
}
