#include "scm/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "scm/errors.hpp"
#include "scm/reward.hpp"

namespace scm {

std::vector<int> filter_support(std::span<const double> q, int top_k, double top_p) {
  if (q.empty()) throw ContractError("filter_support: empty distribution");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("top_p must lie in (0, 1]");
  std::vector<int> order(q.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return q[a] > q[b]; });
  const std::size_t k = top_k > 0 ? std::min<std::size_t>(top_k, q.size()) : q.size();
  order.resize(k);

  double kept_mass = 0.0;
  for (int id : order) kept_mass += q[id];
  if (kept_mass <= 0.0) {
    order.resize(1);
    return order;
  }
  double cumulative = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cumulative += q[order[keep]] / kept_mass;
    ++keep;
    if (cumulative >= top_p) break;
  }
  order.resize(keep);
  return order;
}

int sample_filtered(std::span<const double> q, const DecodeControls& controls, Rng& rng) {
  const auto support = filter_support(q, controls.top_k, controls.top_p);
  double mass = 0.0;
  for (int id : support) mass += q[id];
  const double u = uniform01(rng) * mass;
  double cumulative = 0.0;
  for (int id : support) {
    cumulative += q[id];
    if (u < cumulative) return id;
  }
  return support.back();
}

RolloutRecord generate(const ModelParams& params, std::span<const int> prompt, const DecodeControls& controls,
                       MixingMode mode) {
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  if (controls.max_new_tokens <= 0) throw ContractError("generate: max_new_tokens must be positive");
  if (prompt.size() + controls.max_new_tokens > static_cast<std::size_t>(params.config.max_seq_len)) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                      std::to_string(controls.max_new_tokens) + " new tokens exceeds max_seq_len " +
                      std::to_string(params.config.max_seq_len));
  }
  ad::NoGradGuard no_grad;
  Rng rng(controls.seed);
  RolloutRecord record;
  record.prompt.assign(prompt.begin(), prompt.end());
  record.mode = mode;
  record.seed = controls.seed;

  std::vector<int> context = record.prompt;
  const std::size_t d = params.config.d_model;
  for (int step = 0; step < controls.max_new_tokens; ++step) {
    const Tensor h = hidden_states(params, context);
    const auto last = h.values().subspan((context.size() - 1) * d, d);
    const MixedStep mixed = mix_step(last, params, mode, controls.temperature);
    const int token = sample_filtered(mixed.q, controls, rng);

    double entropy = 0.0;
    for (std::size_t i = 0; i < mixed.q.size(); ++i) {
      if (mixed.q[i] > 0.0) entropy -= mixed.q[i] * mixed.log_q[i];
    }
    record.tokens.push_back(token);
    record.old_logprobs.push_back(mixed.log_q[token]);
    record.entropies.push_back(entropy);
    context.push_back(token);
    if (token == controls.eos_token) {
      record.terminated_by = Termination::Eos;
      return record;
    }
  }
  record.terminated_by = Termination::Length;
  return record;
}

RolloutGroup sample_group(const ModelParams& params, std::span<const int> prompt, int group_size,
                          const DecodeControls& controls, MixingMode mode, std::uint64_t prompt_index,
                          unsigned threads) {
  if (group_size < 2) throw ContractError("sample_group: group size must be >= 2");
  RolloutGroup group;
  group.prompt.assign(prompt.begin(), prompt.end());
  group.records.resize(group_size);
  auto run = [&](int k) {
    DecodeControls c = controls;
    c.seed = derive_seed({controls.seed, prompt_index, static_cast<std::uint64_t>(k)});
    group.records[k] = generate(params, prompt, c, mode);
  };
  threads = std::max(1u, std::min<unsigned>(threads, group_size));
  if (threads == 1) {
    for (int k = 0; k < group_size; ++k) run(k);
    return group;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (int k = static_cast<int>(w); k < group_size; k += static_cast<int>(threads)) run(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return group;
}

std::string completion_text(const RolloutRecord& record, const Vocab& vocab) {
  std::span<const int> ids = record.tokens;
  if (!ids.empty() && ids.back() == vocab.eos()) ids = ids.first(ids.size() - 1);
  return vocab.decode(ids);
}

std::string rollout_json_line(const RolloutRecord& record, const Vocab& vocab,
                              const std::optional<RewardBreakdown>& reward) {
  nlohmann::ordered_json j;
  j["prompt"] = vocab.decode(record.prompt);
  j["generation"] = completion_text(record, vocab);
  j["mode"] = std::string(to_string(record.mode));
  j["seed"] = record.seed;
  j["terminated_by"] = record.terminated_by == Termination::Eos ? "eos" : "length";
  j["logprob"] = std::accumulate(record.old_logprobs.begin(), record.old_logprobs.end(), 0.0);
  if (reward) {
    j["r_acc"] = reward->accuracy;
    j["r_fmt"] = reward->format;
    j["reward"] = reward->total;
  }
  return j.dump();
}

}  // namespace scm
