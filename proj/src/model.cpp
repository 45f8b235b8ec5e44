#include "scm/model.hpp"

#include <cmath>

#include "scm/errors.hpp"
#include "scm/rng.hpp"

namespace scm {

namespace {

constexpr double kInitStd = 0.02;

class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  // Box-Muller on our own uniform draws so weights match across standard libraries.
  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform01(rng_);
    const double u2 = uniform01(rng_);
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  Rng rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

Tensor normal(NormalSampler& sampler, ad::Shape shape) {
  std::vector<double> v(ad::shape_size(shape));
  for (auto& x : v) x = kInitStd * sampler.next();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor constant(ad::Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

}  // namespace

void TransformerConfig::validate() const {
  if (vocab_size < 8) throw ContractError("vocab_size must be >= 8");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0) {
    throw ContractError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto p = "block" + std::to_string(l) + ".";
    const auto& b = blocks[l];
    out.emplace_back(p + "ln1_gain", b.ln1_gain);
    out.emplace_back(p + "ln1_bias", b.ln1_bias);
    out.emplace_back(p + "attn_qkv", b.attn_qkv);
    out.emplace_back(p + "attn_qkv_bias", b.attn_qkv_bias);
    out.emplace_back(p + "attn_out", b.attn_out);
    out.emplace_back(p + "attn_out_bias", b.attn_out_bias);
    out.emplace_back(p + "ln2_gain", b.ln2_gain);
    out.emplace_back(p + "ln2_bias", b.ln2_bias);
    out.emplace_back(p + "mlp_in", b.mlp_in);
    out.emplace_back(p + "mlp_in_bias", b.mlp_in_bias);
    out.emplace_back(p + "mlp_out", b.mlp_out);
    out.emplace_back(p + "mlp_out_bias", b.mlp_out_bias);
  }
  out.emplace_back("final_gain", final_gain);
  out.emplace_back("final_bias", final_bias);
  if (!config.tie_embeddings) out.emplace_back("output_head", output_head);
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

void ModelParams::zero_grad() {
  for (auto t : tensors()) t.zero_grad();
}

ModelParams ModelParams::clone() const {
  auto copy = [](const Tensor& t) { return t.defined() ? t.clone(true) : Tensor(); };
  ModelParams out;
  out.config = config;
  out.token_embedding = copy(token_embedding);
  out.position_embedding = copy(position_embedding);
  for (const auto& b : blocks) {
    out.blocks.push_back({copy(b.ln1_gain), copy(b.ln1_bias), copy(b.attn_qkv), copy(b.attn_qkv_bias),
                          copy(b.attn_out), copy(b.attn_out_bias), copy(b.ln2_gain), copy(b.ln2_bias),
                          copy(b.mlp_in), copy(b.mlp_in_bias), copy(b.mlp_out), copy(b.mlp_out_bias)});
  }
  out.final_gain = copy(final_gain);
  out.final_bias = copy(final_bias);
  out.output_head = copy(output_head);
  return out;
}

std::size_t expected_parameter_count(const TransformerConfig& c) {
  const std::size_t v = c.vocab_size, d = c.d_model, s = c.max_seq_len, l = c.n_layers;
  // per block: 2 layer norms (4d), qkv (3d^2 + 3d), out (d^2 + d), mlp (8d^2 + 5d)
  const std::size_t per_block = 12 * d * d + 13 * d;
  return v * d + s * d + l * per_block + 2 * d + (c.tie_embeddings ? 0 : d * v);
}

ModelParams init_params(const TransformerConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.d_model, s = config.max_seq_len;
  NormalSampler sampler(seed);
  ModelParams p;
  p.config = config;
  p.token_embedding = normal(sampler, {v, d});
  p.position_embedding = normal(sampler, {s, d});
  for (int l = 0; l < config.n_layers; ++l) {
    BlockParams b;
    b.ln1_gain = constant({d}, 1.0);
    b.ln1_bias = constant({d}, 0.0);
    b.attn_qkv = normal(sampler, {d, 3 * d});
    b.attn_qkv_bias = constant({3 * d}, 0.0);
    b.attn_out = normal(sampler, {d, d});
    b.attn_out_bias = constant({d}, 0.0);
    b.ln2_gain = constant({d}, 1.0);
    b.ln2_bias = constant({d}, 0.0);
    b.mlp_in = normal(sampler, {d, 4 * d});
    b.mlp_in_bias = constant({4 * d}, 0.0);
    b.mlp_out = normal(sampler, {4 * d, d});
    b.mlp_out_bias = constant({d}, 0.0);
    p.blocks.push_back(std::move(b));
  }
  p.final_gain = constant({d}, 1.0);
  p.final_bias = constant({d}, 0.0);
  if (!config.tie_embeddings) p.output_head = normal(sampler, {d, v});
  return p;
}

namespace {

void check_tokens(const ModelParams& params, std::span<const int> tokens) {
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(params.config.max_seq_len)) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(params.config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= params.config.vocab_size) {
      throw ContractError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                          " outside vocabulary of " + std::to_string(params.config.vocab_size));
    }
  }
}

Tensor attention(const BlockParams& b, const Tensor& x, int n_heads) {
  const std::size_t d = x.dim(1);
  const std::size_t hd = d / static_cast<std::size_t>(n_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor qkv = ad::add_rowwise(ad::matmul(x, b.attn_qkv), b.attn_qkv_bias);
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    const Tensor q = ad::slice_cols(qkv, h * hd, hd);
    const Tensor k = ad::slice_cols(qkv, d + h * hd, hd);
    const Tensor v = ad::slice_cols(qkv, 2 * d + h * hd, hd);
    const Tensor weights = ad::causal_softmax(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    heads.push_back(ad::matmul(weights, v));
  }
  return ad::add_rowwise(ad::matmul(ad::concat_cols(heads), b.attn_out), b.attn_out_bias);
}

}  // namespace

Tensor hidden_states(const ModelParams& params, std::span<const int> tokens, std::vector<Tensor>* layers) {
  check_tokens(params, tokens);
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  Tensor x = ad::add(ad::embedding(params.token_embedding, tokens),
                     ad::embedding(params.position_embedding, positions));
  if (layers) layers->push_back(x);
  for (const auto& b : params.blocks) {
    x = ad::add(x, attention(b, ad::layer_norm(x, b.ln1_gain, b.ln1_bias), params.config.n_heads));
    const Tensor m = ad::layer_norm(x, b.ln2_gain, b.ln2_bias);
    const Tensor up = ad::gelu(ad::add_rowwise(ad::matmul(m, b.mlp_in), b.mlp_in_bias));
    x = ad::add(x, ad::add_rowwise(ad::matmul(up, b.mlp_out), b.mlp_out_bias));
    if (layers) layers->push_back(x);
  }
  return ad::layer_norm(x, params.final_gain, params.final_bias);
}

Tensor project_to_vocab(const ModelParams& params, const Tensor& hidden) {
  if (params.config.tie_embeddings) return ad::matmul_nt(hidden, params.token_embedding);
  return ad::matmul(hidden, params.output_head);
}

ForwardTrace forward(const ModelParams& params, std::span<const int> tokens, bool capture_layers) {
  ForwardTrace trace;
  trace.hidden = hidden_states(params, tokens, capture_layers ? &trace.layers : nullptr);
  trace.logits = project_to_vocab(params, trace.hidden);
  return trace;
}

Tensor next_token_loss(const ModelParams& params, std::span<const int> tokens, std::size_t start) {
  if (tokens.size() < 2 || start + 1 >= tokens.size()) {
    throw ContractError("next_token_loss: need at least one target after position " + std::to_string(start));
  }
  const auto inputs = tokens.first(tokens.size() - 1);
  const Tensor h = hidden_states(params, inputs);
  const std::size_t n = inputs.size() - start;
  const Tensor logits = project_to_vocab(params, ad::slice_rows(h, start, n));
  const Tensor logp = ad::log_softmax(logits, 1.0);
  return ad::scale(ad::mean(ad::pick(logp, tokens.subspan(start + 1))), -1.0);
}

}  // namespace scm
