#pragma once

// Autoregressive sampling under the concept-mixed policy.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scm/mixing.hpp"
#include "scm/model.hpp"
#include "scm/rng.hpp"
#include "scm/tasks.hpp"

namespace scm {

struct RewardBreakdown;

struct DecodeControls {
  double temperature = 0.6;
  int top_k = 30;  // 0 disables; clamped to |V|
  double top_p = 0.95;
  int max_new_tokens = 48;
  std::uint64_t seed = 0;
  int eos_token = Vocab::standard().eos();
};

enum class Termination { Eos, Length };

struct RolloutRecord {
  std::vector<int> prompt;
  std::vector<int> tokens;           // generated y
  std::vector<double> old_logprobs;  // log q(y_t) under the unfiltered enhanced distribution
  std::vector<double> entropies;     // entropy of q at each step
  Termination terminated_by = Termination::Length;
  MixingMode mode = MixingMode::Scm;
  std::uint64_t seed = 0;

  bool operator==(const RolloutRecord&) const = default;
};

struct RolloutGroup {
  std::vector<int> prompt;
  std::vector<RolloutRecord> records;
};

// Token ids that survive top-k then top-p, in decreasing probability (ties by
// id). Top-p keeps the shortest prefix whose renormalized mass reaches top_p.
std::vector<int> filter_support(std::span<const double> q, int top_k, double top_p);

// Draws one token from q restricted to filter_support and renormalized.
int sample_filtered(std::span<const double> q, const DecodeControls& controls, Rng& rng);

RolloutRecord generate(const ModelParams& params, std::span<const int> prompt, const DecodeControls& controls,
                       MixingMode mode);

// Rollout k uses seed derive_seed({controls.seed, prompt_index, k}). Records
// come back ordered by k regardless of `threads`.
RolloutGroup sample_group(const ModelParams& params, std::span<const int> prompt, int group_size,
                          const DecodeControls& controls, MixingMode mode, std::uint64_t prompt_index = 0,
                          unsigned threads = 1);

// Generated text without the trailing eos marker.
std::string completion_text(const RolloutRecord& record, const Vocab& vocab);

// One JSON object per rollout for debug dumps.
std::string rollout_json_line(const RolloutRecord& record, const Vocab& vocab,
                              const std::optional<RewardBreakdown>& reward);

}  // namespace scm
