#pragma once

#include "actdistill/ops.hpp"
#include "actdistill/world.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace actdistill {

struct BackboneConfig {
  std::size_t layers = 6;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ffn_width = 128;
  std::size_t capsule_dim = 32;
  std::size_t token_dim = 16;
  std::size_t instruction_dim = static_cast<std::size_t>(kInstructionDim);
  std::uint64_t seed = 1;

  void validate() const;
};

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;
using ConstParamVisitor = std::function<void(const std::string&, const Tensor&)>;

/// Pre-norm Transformer block parameters.
struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;

  void visit(const std::string& prefix, const ParamVisitor& f);
  void visit(const std::string& prefix, const ConstParamVisitor& f) const;
};

/// Two-layer perceptron to a 7-DoF action, with optional dropout after the
/// hidden ReLU.
struct ActionHead {
  Tensor w1, b1, w2, b2;

  static ActionHead init(std::size_t in, std::size_t hidden, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
  void visit(const std::string& prefix, const ConstParamVisitor& f) const;
};

/// Toy VLA policy: linear encoders, L fused layers, native action head.
struct Backbone {
  BackboneConfig config;
  Tensor enc_v_w, enc_v_b, enc_l_w, enc_l_b;
  std::vector<LayerParams> layers;
  ActionHead head;

  static Backbone init(const BackboneConfig& cfg);

  void visit(const ParamVisitor& f);
  void visit(const ConstParamVisitor& f) const;
  std::vector<Tensor*> parameters();
  void set_requires_grad(bool on);
  std::uint64_t parameter_hash() const;
};

/// Kaiming-uniform-equivalent linear init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor kaiming_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor bias_uniform(std::size_t fan_in, std::size_t n, Rng& rng);

struct EncoderOutputs {
  Var visual;    // [N_v, d]
  Var language;  // [1, d]
};

/// x W + b over rows.
Var linear(const Var& x, const Tensor& w, const Tensor& b);

EncoderOutputs encode(Tape& tape, const Backbone& model, const Matrix& visual,
                      const RowVector& instruction);

/// h_0 = [v_e; l_e].
Var initial_state(const EncoderOutputs& enc);

/// Multi-head self-attention of one block applied to already-normalized rows,
/// before the output projection when `project` is false.
Var self_attention(const Var& x_norm, const LayerParams& p, std::size_t heads, bool project = true);

/// One pre-norm residual block: x + attn(LN(x)) then + ffn(LN(x)).
Var apply_layer(const Var& x, const LayerParams& p, std::size_t heads);

/// Per-layer states h_1..h_L.
std::vector<Var> forward_all_layers(const Backbone& model, const EncoderOutputs& enc);

/// relu(x W1 + b1) -> dropout -> W2 + b2 on a single row.
Var apply_head(const ActionHead& head, const Var& x, double dropout = 0.0, Rng* rng = nullptr,
               bool train = false);

/// Mean-pooled rows through the two-layer head.
Var native_action_head(const ActionHead& head, const Var& h, double dropout = 0.0,
                       Rng* rng = nullptr, bool train = false);

/// Forward pass without recording; returns the native action prediction.
ActionVector predict_native(const Backbone& model, const Episode& e);

}  // namespace actdistill
