#include "scm/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "scm/errors.hpp"

namespace scm {

GroupAdvantages compute_advantages(std::span<const double> rewards, double eps_std) {
  if (rewards.size() < 2) throw ContractError("compute_advantages: group needs at least 2 rewards");
  GroupAdvantages out;
  out.rewards.assign(rewards.begin(), rewards.end());
  out.eps_std = eps_std;
  const double n = static_cast<double>(rewards.size());
  out.mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - out.mean) * (r - out.mean);
  out.std = std::sqrt(var / n);
  out.advantages.assign(rewards.size(), 0.0);
  const bool all_equal = std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; });
  if (!all_equal) {
    for (std::size_t k = 0; k < rewards.size(); ++k) {
      out.advantages[k] = (rewards[k] - out.mean) / (out.std + eps_std);
    }
  }
  return out;
}

ScoredGroup score_group(const TaskInstance& task, RolloutGroup group, const Vocab& vocab, double eps_std,
                        FormatRule rule) {
  ScoredGroup out;
  out.task = task;
  std::vector<double> totals;
  for (const auto& r : group.records) {
    out.rewards.push_back(score(r, vocab, task.gold, rule));
    totals.push_back(out.rewards.back().total);
  }
  out.group = std::move(group);
  out.advantages = compute_advantages(totals, eps_std);
  return out;
}

Tensor grpo_loss(const ModelParams& params, std::span<const ScoredGroup> groups, const LossOptions& options,
                 LossStats* stats) {
  if (!(options.clip_eps > 0.0 && options.clip_eps < 1.0)) throw ContractError("clip_eps must lie in (0, 1)");
  if (groups.empty()) throw ContractError("grpo_loss: no groups");
  const double lo = 1.0 - options.clip_eps;
  const double hi = 1.0 + options.clip_eps;

  std::vector<Tensor> group_terms;
  std::size_t clipped = 0, ratios = 0, tokens = 0;
  for (const auto& g : groups) {
    const auto& records = g.group.records;
    if (g.advantages.advantages.size() != records.size()) {
      throw ContractError("grpo_loss: advantages missing for a group");
    }
    std::vector<Tensor> rollout_terms;
    for (std::size_t k = 0; k < records.size(); ++k) {
      const auto& rec = records[k];
      if (rec.tokens.empty() || rec.old_logprobs.size() != rec.tokens.size()) {
        throw ContractError("grpo_loss: rollout without per-step old log-probabilities");
      }
      tokens += rec.tokens.size();
      const double adv = g.advantages.advantages[k];
      if (adv == 0.0) {
        // contributes exactly zero value and gradient
        ratios += options.ratio == RatioLevel::Token ? rec.tokens.size() : 1;
        continue;
      }
      std::vector<int> sequence = rec.prompt;
      sequence.insert(sequence.end(), rec.tokens.begin(), rec.tokens.end());
      const Tensor logp =
          mixed_forward_logprobs(params, sequence, rec.prompt.size(), options.mode, options.temperature);
      const std::size_t n = rec.tokens.size();
      Tensor log_ratio;
      if (options.ratio == RatioLevel::Token) {
        log_ratio = ad::sub(logp, Tensor::from({n}, rec.old_logprobs));
      } else {
        const double old_sum = std::accumulate(rec.old_logprobs.begin(), rec.old_logprobs.end(), 0.0);
        log_ratio = ad::sub(ad::reshape(ad::sum(logp), {1}), Tensor::from({1}, {old_sum}));
      }
      const Tensor ratio = ad::exp(log_ratio);
      const Tensor objective =
          ad::minimum(ad::scale(ratio, adv), ad::scale(ad::clamp(ratio, lo, hi), adv));
      for (double rho : ratio.values()) {
        ++ratios;
        if ((adv > 0.0 && rho > hi) || (adv < 0.0 && rho < lo)) ++clipped;
      }
      rollout_terms.push_back(ad::scale(ad::mean(objective), 1.0 / static_cast<double>(records.size())));
    }
    if (!rollout_terms.empty()) group_terms.push_back(ad::sum(ad::concat(rollout_terms)));
  }
  if (stats) {
    stats->clip_fraction = ratios ? static_cast<double>(clipped) / static_cast<double>(ratios) : 0.0;
    stats->tokens = tokens;
  }
  if (group_terms.empty()) return Tensor::scalar(0.0);
  return ad::scale(ad::sum(ad::concat(group_terms)), -1.0 / static_cast<double>(groups.size()));
}

// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (double g : params_[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam: non-finite gradient in parameter tensor " + std::to_string(i) + " of shape " +
                           ad::shape_str(params_[i].shape()));
      }
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, t_);
  const double c2 = 1.0 - std::pow(config_.beta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto values = params_[i].mutable_values();
    const auto grad = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      values[j] -= config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------------------

namespace {

struct Exemplar {
  std::vector<int> tokens;
  std::size_t prompt_len = 0;
};

Exemplar encode_exemplar(const TaskInstance& task, const Vocab& vocab) {
  Exemplar e;
  e.prompt_len = vocab.encode(prompt_text(task)).size();
  e.tokens = vocab.encode(render_exemplar(task));
  return e;
}

}  // namespace

PretrainResult pretrain_supervised(ModelParams params, std::span<const TaskInstance> corpus,
                                   const PretrainConfig& config, std::span<const TaskInstance> heldout,
                                   const DecodeControls& heldout_controls) {
  if (corpus.empty()) throw ContractError("pretrain: empty corpus");
  if (config.batch_size <= 0 || config.epochs < 0) throw ContractError("pretrain: bad batch size or epochs");
  const Vocab& vocab = Vocab::standard();
  std::vector<Exemplar> data;
  for (const auto& t : corpus) data.push_back(encode_exemplar(t, vocab));

  AdamOptimizer opt(params.tensors(), AdamConfig{.lr = config.lr});
  Rng rng(derive_seed({config.seed, 0x9e7}));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  PretrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with the platform-independent integer draw
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[uniform_int(rng, 0, static_cast<long>(i) - 1)]);
    }
    double token_loss = 0.0;
    std::size_t token_count = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> picked;
      for (std::size_t b = start; b < end; ++b) {
        const auto& ex = data[order[b]];
        const std::span<const int> toks = ex.tokens;
        const Tensor h = hidden_states(params, toks.first(toks.size() - 1));
        const std::size_t from = ex.prompt_len - 1;
        const Tensor logits = project_to_vocab(params, ad::slice_rows(h, from, toks.size() - 1 - from));
        picked.push_back(ad::pick(ad::log_softmax(logits, 1.0), toks.subspan(ex.prompt_len)));
      }
      const Tensor all = ad::concat(picked);
      const Tensor loss = ad::scale(ad::mean(all), -1.0);
      if (!std::isfinite(loss.item())) throw NumericError("pretrain: non-finite loss");
      opt.zero_grad();
      ad::backward(loss);
      opt.step();
      token_loss += loss.item() * static_cast<double>(all.size());
      token_count += all.size();
    }
    result.epoch_losses.push_back(token_loss / static_cast<double>(token_count));
  }
  if (!heldout.empty()) {
    const EvalReport report = evaluate(params, heldout, heldout_controls, MixingMode::NoMix);
    result.heldout_format = report.mean_format;
    result.heldout_accuracy = report.accuracy;
    result.reached_threshold = report.mean_format >= config.format_threshold;
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (group_size < 2) throw ContractError("group_size must be >= 2");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ContractError("clip_eps must lie in (0, 1)");
  if (prompts_per_batch <= 0 || inner_epochs <= 0 || total_steps < 0) {
    throw ContractError("prompts_per_batch and inner_epochs must be positive");
  }
  if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
}

std::string metrics_json_line(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mean_reward"] = m.mean_reward;
  j["mean_acc"] = m.mean_accuracy;
  j["mean_fmt"] = m.mean_format;
  j["loss"] = m.loss;
  j["clip_fraction"] = m.clip_fraction;
  j["entropy"] = m.entropy;
  j["mean_abs_adv"] = m.mean_abs_advantage;
  return j.dump();
}

TrainResult train_rl(ModelParams params, std::span<const TaskInstance> tasks, const TrainConfig& config,
                     const TrainCallbacks& callbacks) {
  config.validate();
  if (tasks.empty()) throw ContractError("train_rl: empty task stream");
  const Vocab& vocab = Vocab::standard();
  AdamOptimizer opt(params.tensors(), AdamConfig{.lr = config.lr});
  const LossOptions loss_options{config.clip_eps, config.mode, config.controls.temperature, config.ratio};

  TrainResult result;
  for (int step = 0; step < config.total_steps; ++step) {
    // Rollouts come from the current parameters, which act as theta_old.
    std::vector<ScoredGroup> groups;
    for (int g = 0; g < config.prompts_per_batch; ++g) {
      const std::uint64_t prompt_index = static_cast<std::uint64_t>(step) * config.prompts_per_batch + g;
      Rng pick_rng(derive_seed({config.seed, 0x7a5c, prompt_index}));
      const auto& task = tasks[uniform_int(pick_rng, 0, static_cast<long>(tasks.size()) - 1)];
      const auto prompt = vocab.encode(prompt_text(task));
      DecodeControls controls = config.controls;
      controls.seed = config.seed;
      auto group = sample_group(params, prompt, config.group_size, controls, config.mode, prompt_index, config.threads);
      groups.push_back(score_group(task, std::move(group), vocab, config.eps_std, config.format_rule));
      if (callbacks.on_group) callbacks.on_group(step, groups.back());
    }

    StepMetrics m;
    m.step = step;
    double entropy_sum = 0.0;
    std::size_t entropy_count = 0, rollouts = 0;
    for (const auto& g : groups) {
      for (std::size_t k = 0; k < g.rewards.size(); ++k) {
        m.mean_reward += g.rewards[k].total;
        m.mean_accuracy += g.rewards[k].accuracy;
        m.mean_format += g.rewards[k].format;
        m.mean_abs_advantage += std::abs(g.advantages.advantages[k]);
        ++rollouts;
        for (double e : g.group.records[k].entropies) {
          entropy_sum += e;
          ++entropy_count;
        }
      }
    }
    m.mean_reward /= static_cast<double>(rollouts);
    m.mean_accuracy /= static_cast<double>(rollouts);
    m.mean_format /= static_cast<double>(rollouts);
    m.mean_abs_advantage /= static_cast<double>(rollouts);
    m.entropy = entropy_count ? entropy_sum / static_cast<double>(entropy_count) : 0.0;

    for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
      LossStats stats;
      const Tensor loss = grpo_loss(params, groups, loss_options, &stats);
      if (!std::isfinite(loss.item())) {
        throw NumericError("train_rl: non-finite loss at step " + std::to_string(step));
      }
      opt.zero_grad();
      ad::backward(loss);
      opt.step();
      if (epoch == 0) {
        m.loss = loss.item();
        m.clip_fraction = stats.clip_fraction;
      }
    }
    result.metrics.push_back(m);
    if (callbacks.on_step) callbacks.on_step(m);
  }
  result.params = std::move(params);
  return result;
}

EvalReport evaluate(const ModelParams& params, std::span<const TaskInstance> tasks, const DecodeControls& controls,
                    MixingMode mode, FormatRule rule) {
  if (tasks.empty()) throw ContractError("evaluate: empty task list");
  const Vocab& vocab = Vocab::standard();
  EvalReport report;
  report.count = tasks.size();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    DecodeControls c = controls;
    c.seed = derive_seed({controls.seed, i});
    const auto prompt = vocab.encode(prompt_text(tasks[i]));
    const RolloutRecord rec = generate(params, prompt, c, mode);
    const RewardBreakdown r = score(rec, vocab, tasks[i].gold, rule);
    report.accuracy += r.accuracy;
    report.mean_reward += r.total;
    report.mean_format += r.format;
  }
  const double n = static_cast<double>(tasks.size());
  report.accuracy /= n;
  report.mean_reward /= n;
  report.mean_format /= n;
  return report;
}

}  // namespace scm
