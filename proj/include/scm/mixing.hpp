#pragma once

// Soft concept mixing.
//
// At each decoding position the step distribution p = softmax(h W_out / T)
// weights every token embedding into a soft concept vector se = sum_i p_i e(x_i).
// In SCM mode the vector is added to the hidden state, h' = h + se, and the
// sampling distribution is recomputed from h' through the same output head.

#include <span>
#include <string_view>
#include <vector>

#include "scm/model.hpp"

namespace scm {

enum class MixingMode {
  Scm,             // h' = h + se, sample from q(h')
  NoMix,           // plain policy, se = 0, q = p
  NoHiddenFusion,  // se computed but not added, q = p
};

std::string_view to_string(MixingMode mode);
// Accepts "scm", "grpo"/"no-mix", "no-hidden-fusion".
MixingMode parse_mixing_mode(std::string_view text);

struct MixedStep {
  std::vector<double> p;        // step distribution from h
  std::vector<double> se;       // soft concept vector
  std::vector<double> h_prime;  // enhanced hidden state
  std::vector<double> q;        // enhanced sampling distribution
  std::vector<double> log_q;
};

// p: [V] or [n, V] rows of probabilities; embeddings: [V, d]. Returns [d] or [n, d].
Tensor soft_concept_vector(const Tensor& p, const Tensor& embeddings);

MixedStep mix_step(std::span<const double> h, const ModelParams& params, MixingMode mode,
                   double temperature);

// log q for hidden rows h [n, d], differentiable; [n, V].
Tensor mixed_log_probs(const ModelParams& params, const Tensor& hidden, MixingMode mode, double temperature);

// Teacher-forced log q(y_t | y_<t) of every token after the first `prompt_len`
// tokens; shape [tokens.size() - prompt_len].
Tensor mixed_forward_logprobs(const ModelParams& params, std::span<const int> tokens,
                              std::size_t prompt_len, MixingMode mode, double temperature);

}  // namespace scm
