#include "actdistill/backbone.hpp"

#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"

#include <cmath>

namespace actdistill {

void BackboneConfig::validate() const {
  if (layers < 2) throw ConfigError("backbone.layers must be >= 2");
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ConfigError("backbone.width must be a positive multiple of backbone.heads");
  }
  if (ffn_width == 0) throw ConfigError("backbone.ffn_width must be positive");
  if (capsule_dim == 0 || capsule_dim > width) {
    throw ConfigError("backbone.capsule_dim must be in [1, backbone.width]");
  }
  if (token_dim == 0 || instruction_dim == 0) throw ConfigError("backbone input dims must be positive");
}

Tensor kaiming_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor bias_uniform(std::size_t fan_in, std::size_t n, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t({n});
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

namespace {

Tensor ones(std::size_t n) { return Tensor({n}, Matrix::Ones(1, static_cast<Index>(n))); }

template <typename Self, typename F>
void visit_layer(Self& p, const std::string& prefix, const F& f) {
  f(prefix + "ln1_gain", p.ln1_gain);
  f(prefix + "ln1_bias", p.ln1_bias);
  f(prefix + "wq", p.wq);
  f(prefix + "wk", p.wk);
  f(prefix + "wv", p.wv);
  f(prefix + "wo", p.wo);
  f(prefix + "ln2_gain", p.ln2_gain);
  f(prefix + "ln2_bias", p.ln2_bias);
  f(prefix + "w1", p.w1);
  f(prefix + "b1", p.b1);
  f(prefix + "w2", p.w2);
  f(prefix + "b2", p.b2);
}

template <typename Self, typename F>
void visit_head(Self& h, const std::string& prefix, const F& f) {
  f(prefix + "w1", h.w1);
  f(prefix + "b1", h.b1);
  f(prefix + "w2", h.w2);
  f(prefix + "b2", h.b2);
}

template <typename Self, typename F>
void visit_backbone(Self& m, const F& f) {
  f("backbone/enc_v/w", m.enc_v_w);
  f("backbone/enc_v/b", m.enc_v_b);
  f("backbone/enc_l/w", m.enc_l_w);
  f("backbone/enc_l/b", m.enc_l_b);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    m.layers[i].visit("backbone/layer" + std::to_string(i) + "/", f);
  }
  m.head.visit("backbone/head/", f);
}

}  // namespace

void LayerParams::visit(const std::string& prefix, const ParamVisitor& f) { visit_layer(*this, prefix, f); }
void LayerParams::visit(const std::string& prefix, const ConstParamVisitor& f) const {
  visit_layer(*this, prefix, f);
}

ActionHead ActionHead::init(std::size_t in, std::size_t hidden, Rng& rng) {
  ActionHead h;
  h.w1 = kaiming_uniform(in, hidden, rng);
  h.b1 = bias_uniform(in, hidden, rng);
  h.w2 = kaiming_uniform(hidden, static_cast<std::size_t>(kActionDim), rng);
  h.b2 = bias_uniform(hidden, static_cast<std::size_t>(kActionDim), rng);
  return h;
}

void ActionHead::visit(const std::string& prefix, const ParamVisitor& f) { visit_head(*this, prefix, f); }
void ActionHead::visit(const std::string& prefix, const ConstParamVisitor& f) const {
  visit_head(*this, prefix, f);
}

Backbone Backbone::init(const BackboneConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0xB0));
  Backbone m;
  m.config = cfg;
  const std::size_t d = cfg.width;
  m.enc_v_w = kaiming_uniform(cfg.token_dim, d, rng);
  m.enc_v_b = bias_uniform(cfg.token_dim, d, rng);
  m.enc_l_w = kaiming_uniform(cfg.instruction_dim, d, rng);
  m.enc_l_b = bias_uniform(cfg.instruction_dim, d, rng);
  m.layers.resize(cfg.layers);
  for (LayerParams& p : m.layers) {
    p.ln1_gain = ones(d);
    p.ln1_bias = Tensor({d});
    p.wq = kaiming_uniform(d, d, rng);
    p.wk = kaiming_uniform(d, d, rng);
    p.wv = kaiming_uniform(d, d, rng);
    p.wo = kaiming_uniform(d, d, rng);
    p.ln2_gain = ones(d);
    p.ln2_bias = Tensor({d});
    p.w1 = kaiming_uniform(d, cfg.ffn_width, rng);
    p.b1 = bias_uniform(d, cfg.ffn_width, rng);
    p.w2 = kaiming_uniform(cfg.ffn_width, d, rng);
    p.b2 = bias_uniform(cfg.ffn_width, d, rng);
  }
  m.head = ActionHead::init(d, d, rng);
  return m;
}

void Backbone::visit(const ParamVisitor& f) { visit_backbone(*this, f); }
void Backbone::visit(const ConstParamVisitor& f) const { visit_backbone(*this, f); }

std::vector<Tensor*> Backbone::parameters() {
  std::vector<Tensor*> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

void Backbone::set_requires_grad(bool on) {
  visit([&](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

std::uint64_t Backbone::parameter_hash() const {
  Fnv1a h;
  visit([&](const std::string& name, const Tensor& t) {
    h.update(name);
    h.update_value(t.content_hash());
  });
  return h.digest();
}

Var linear(const Var& x, const Tensor& w, const Tensor& b) {
  Tape& tape = x.tape();
  return ops::add_row(ops::matmul(x, tape.parameter(w)), tape.parameter(b));
}

EncoderOutputs encode(Tape& tape, const Backbone& model, const Matrix& visual,
                      const RowVector& instruction) {
  const BackboneConfig& c = model.config;
  if (visual.cols() != static_cast<Index>(c.token_dim) ||
      instruction.size() != static_cast<Index>(c.instruction_dim)) {
    throw ContractError("encode: visual [" + std::to_string(visual.rows()) + "x" +
                        std::to_string(visual.cols()) + "] / instruction [" +
                        std::to_string(instruction.size()) + "] do not match config");
  }
  EncoderOutputs out;
  out.visual = linear(tape.constant(visual, "visual"), model.enc_v_w, model.enc_v_b);
  out.language = linear(tape.constant(Matrix(instruction), "instruction"), model.enc_l_w,
                        model.enc_l_b);
  return out;
}

Var initial_state(const EncoderOutputs& enc) {
  const Var parts[] = {enc.visual, enc.language};
  return ops::concat_rows(parts);
}

Var self_attention(const Var& x_norm, const LayerParams& p, std::size_t heads, bool project) {
  Tape& tape = x_norm.tape();
  const Index d = x_norm.cols();
  const Index dh = d / static_cast<Index>(heads);
  const Var q = ops::matmul(x_norm, tape.parameter(p.wq));
  const Var k = ops::matmul(x_norm, tape.parameter(p.wk));
  const Var v = ops::matmul(x_norm, tape.parameter(p.wv));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Index off = static_cast<Index>(h) * dh;
    const Var qh = ops::slice_cols(q, off, dh);
    const Var kh = ops::slice_cols(k, off, dh);
    const Var vh = ops::slice_cols(v, off, dh);
    const Var scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    outs.push_back(ops::matmul(ops::softmax_rows(scores), vh));
  }
  const Var merged = heads == 1 ? outs.front() : ops::concat_cols(outs);
  return project ? ops::matmul(merged, tape.parameter(p.wo)) : merged;
}

Var apply_layer(const Var& x, const LayerParams& p, std::size_t heads) {
  Tape& tape = x.tape();
  auto norm = [&](const Var& in, const Tensor& gain, const Tensor& bias) {
    return ops::add_row(ops::mul_row(ops::layer_norm_rows(in), tape.parameter(gain)),
                        tape.parameter(bias));
  };
  const Var attn = self_attention(norm(x, p.ln1_gain, p.ln1_bias), p, heads);
  const Var h = ops::add(x, attn);
  const Var hidden = ops::relu(linear(norm(h, p.ln2_gain, p.ln2_bias), p.w1, p.b1));
  return ops::add(h, linear(hidden, p.w2, p.b2));
}

std::vector<Var> forward_all_layers(const Backbone& model, const EncoderOutputs& enc) {
  std::vector<Var> states;
  states.reserve(model.layers.size());
  Var z = initial_state(enc);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    try {
      z = apply_layer(z, model.layers[l], model.config.heads);
    } catch (const NumericalError& e) {
      throw NumericalError("backbone layer " + std::to_string(l + 1) + ": " + e.what());
    }
    states.push_back(z);
  }
  return states;
}

Var apply_head(const ActionHead& head, const Var& x, double dropout, Rng* rng, bool train) {
  Var hidden = ops::relu(linear(x, head.w1, head.b1));
  hidden = ops::dropout(hidden, dropout, rng, train);
  return linear(hidden, head.w2, head.b2);
}

Var native_action_head(const ActionHead& head, const Var& h, double dropout, Rng* rng, bool train) {
  return apply_head(head, ops::mean_rows(h), dropout, rng, train);
}

ActionVector predict_native(const Backbone& model, const Episode& e) {
  Tape tape(GradMode::kInference);
  const auto states = forward_all_layers(model, encode(tape, model, e.visual, e.instruction));
  return native_action_head(model.head, states.back()).value();
}

}  // namespace actdistill
