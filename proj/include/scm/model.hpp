#pragma once

// Decoder-only transformer (pre-layer-norm, learned absolute positions).

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scm/autodiff.hpp"

namespace scm {

using ad::Tensor;

struct TransformerConfig {
  int vocab_size = 24;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 64;
  bool tie_embeddings = true;

  // Throws ContractError on an invalid combination.
  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor attn_qkv, attn_qkv_bias;  // [d, 3d], [3d]
  Tensor attn_out, attn_out_bias;  // [d, d], [d]
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_in, mlp_in_bias;    // [d, 4d], [4d]
  Tensor mlp_out, mlp_out_bias;  // [4d, d], [d]
};

struct ModelParams {
  TransformerConfig config;
  Tensor token_embedding;     // E, [V, d]; row i is e(x_i)
  Tensor position_embedding;  // [max_seq_len, d]
  std::vector<BlockParams> blocks;
  Tensor final_gain, final_bias;
  Tensor output_head;  // [d, V]; undefined when embeddings are tied

  // Stable, checkpoint-ordered list of every learnable tensor.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;
  void zero_grad();

  // Deep copy with independent storage.
  ModelParams clone() const;
};

std::size_t expected_parameter_count(const TransformerConfig& config);

ModelParams init_params(const TransformerConfig& config, std::uint64_t seed);

struct ForwardTrace {
  std::vector<Tensor> layers;  // n_layers + 1 residual states, [T, d], when captured
  Tensor hidden;               // final pre-logit states h, [T, d]
  Tensor logits;               // [T, V]
};

ForwardTrace forward(const ModelParams& params, std::span<const int> tokens,
                     bool capture_layers = false);

// Final pre-logit hidden states only (no output projection).
Tensor hidden_states(const ModelParams& params, std::span<const int> tokens,
                     std::vector<Tensor>* layers = nullptr);

// h [n, d] -> logits [n, V] through the (possibly tied) output head.
Tensor project_to_vocab(const ModelParams& params, const Tensor& hidden);

// Mean next-token cross-entropy over targets tokens[start+1 ..]; positions
// before `start` are context only.
Tensor next_token_loss(const ModelParams& params, std::span<const int> tokens, std::size_t start = 0);

// Checkpoint persistence: "SCMCKPT1" magic, config as key=value lines, then
// named tensors (name, rank, dims, little-endian float64 data).
std::string serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace scm
