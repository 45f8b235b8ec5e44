#include "scm/mixing.hpp"

#include <cmath>

#include "scm/errors.hpp"

namespace scm {

std::string_view to_string(MixingMode mode) {
  switch (mode) {
    case MixingMode::Scm: return "scm";
    case MixingMode::NoMix: return "grpo";
    case MixingMode::NoHiddenFusion: return "no-hidden-fusion";
  }
  return "?";
}

MixingMode parse_mixing_mode(std::string_view text) {
  if (text == "scm") return MixingMode::Scm;
  if (text == "grpo" || text == "no-mix") return MixingMode::NoMix;
  if (text == "no-hidden-fusion") return MixingMode::NoHiddenFusion;
  throw ConfigError("unknown mixing mode '" + std::string(text) + "' (scm, grpo, no-hidden-fusion)");
}

Tensor soft_concept_vector(const Tensor& p, const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw DimensionError("soft_concept_vector: embeddings must be [V, d]");
  const std::size_t v = embeddings.dim(0);
  if (p.rank() < 1 || p.rank() > 2 || p.shape().back() != v) {
    throw DimensionError("soft_concept_vector: distribution " + ad::shape_str(p.shape()) +
                         " does not match vocabulary of " + std::to_string(v));
  }
  const std::size_t rows = p.size() / v;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      const double x = p[r * v + i];
      if (!(x >= 0.0)) throw ContractError("soft_concept_vector: negative or NaN probability");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw ContractError("soft_concept_vector: probabilities sum to " + std::to_string(total));
    }
  }
  if (p.rank() == 1) {
    const Tensor row = ad::reshape(p, {1, v});
    return ad::reshape(ad::matmul(row, embeddings), {embeddings.dim(1)});
  }
  return ad::matmul(p, embeddings);
}

namespace {

struct MixedRows {
  Tensor p;
  Tensor se;
  Tensor h_prime;
  Tensor logits;  // from h'
};

MixedRows mix_rows(const ModelParams& params, const Tensor& hidden, MixingMode mode, double temperature,
                   bool need_se) {
  MixedRows out;
  const Tensor base_logits = project_to_vocab(params, hidden);
  if (mode == MixingMode::NoMix) {
    out.h_prime = hidden;
    out.logits = base_logits;
    return out;
  }
  out.p = ad::softmax(base_logits, temperature);
  if (mode == MixingMode::NoHiddenFusion) {
    if (need_se) out.se = soft_concept_vector(out.p, params.token_embedding);
    out.h_prime = hidden;
    out.logits = base_logits;
    return out;
  }
  out.se = soft_concept_vector(out.p, params.token_embedding);
  out.h_prime = ad::add(hidden, out.se);
  out.logits = project_to_vocab(params, out.h_prime);
  return out;
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

MixedStep mix_step(std::span<const double> h, const ModelParams& params, MixingMode mode, double temperature) {
  const std::size_t d = params.config.d_model;
  if (h.size() != d) throw DimensionError("mix_step: hidden state of size " + std::to_string(h.size()));
  for (double x : h) {
    if (!std::isfinite(x)) throw NumericError("mix_step: non-finite hidden state");
  }
  ad::NoGradGuard no_grad;
  const Tensor hidden = Tensor::from({1, d}, {h.begin(), h.end()});
  const MixedRows rows = mix_rows(params, hidden, mode, temperature, true);

  MixedStep step;
  const Tensor q = ad::softmax(rows.logits, temperature);
  step.q = to_vec(q);
  step.p = rows.p.defined() ? to_vec(rows.p) : step.q;
  step.se = rows.se.defined() ? to_vec(rows.se) : std::vector<double>(d, 0.0);
  step.h_prime = to_vec(rows.h_prime);
  step.log_q = to_vec(ad::log_softmax(rows.logits, temperature));
  return step;
}

Tensor mixed_log_probs(const ModelParams& params, const Tensor& hidden, MixingMode mode, double temperature) {
  const MixedRows rows = mix_rows(params, hidden, mode, temperature, false);
  return ad::log_softmax(rows.logits, temperature);
}

Tensor mixed_forward_logprobs(const ModelParams& params, std::span<const int> tokens, std::size_t prompt_len,
                              MixingMode mode, double temperature) {
  if (prompt_len == 0 || prompt_len >= tokens.size()) {
    throw ContractError("mixed_forward_logprobs: need a nonempty prompt and at least one generated token");
  }
  const auto inputs = tokens.first(tokens.size() - 1);
  const Tensor h = hidden_states(params, inputs);
  const std::size_t n = tokens.size() - prompt_len;
  const Tensor logq = mixed_log_probs(params, ad::slice_rows(h, prompt_len - 1, n), mode, temperature);
  return ad::pick(logq, tokens.subspan(prompt_len));
}

}  // namespace scm
