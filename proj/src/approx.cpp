#include "ipl/approx.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "ipl/errors.hpp"

namespace ipl {

std::string to_string(Role role) {
  switch (role) {
    case Role::q:
      return "q";
    case Role::v:
      return "v";
    case Role::policy:
      return "policy";
    case Role::reward:
      return "reward";
  }
  return "unknown";
}

Role parse_role(const std::string& name) {
  if (name == "q") return Role::q;
  if (name == "v") return Role::v;
  if (name == "policy") return Role::policy;
  if (name == "reward") return Role::reward;
  throw ConfigError("unknown parameter role '" + name + "'");
}

void ParamBlock::validate() const {
  const std::size_t expected =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (shape.empty() || expected != values.size())
    throw ConfigError(fmt::format("parameter shape implies {} entries but block holds {}", expected, values.size()));
  for (double x : values)
    if (!std::isfinite(x)) throw ConfigError("parameter block holds a non-finite entry");
}

TabularFn::TabularFn(std::size_t rows, std::size_t cols, Role role, double fill)
    : rows_(rows), cols_(cols), params_{std::vector<double>(rows * cols, fill), {rows, cols}, role} {}

void TabularFn::check(std::size_t key) const {
  if (key >= rows_) throw EvaluationError(fmt::format("table key {} out of range [0, {})", key, rows_));
}

std::span<const double> TabularFn::forward(std::size_t key) const {
  check(key);
  return {params_.values.data() + key * cols_, cols_};
}

void TabularFn::backward(std::size_t key, std::span<const double> upstream, std::span<double> grad) const {
  check(key);
  for (std::size_t j = 0; j < cols_; ++j) grad[key * cols_ + j] += upstream[j];
}

std::size_t MlpFn::count_for(std::span<const std::size_t> layer_sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) n += (layer_sizes[l] + 1) * layer_sizes[l + 1];
  return n;
}

MlpFn::MlpFn(std::vector<std::size_t> layer_sizes, Role role) : layers_(std::move(layer_sizes)) {
  if (layers_.size() < 2) throw ConfigError("an MLP needs input and output sizes");
  for (auto n : layers_)
    if (n == 0) throw ConfigError("MLP layer sizes must be positive");
  params_.values.assign(count_for(layers_), 0.0);
  params_.shape = {params_.values.size()};
  params_.role = role;
}

void MlpFn::init_uniform(Rng& rng) {
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layers_[l]));
    const std::size_t n = (layers_[l] + 1) * layers_[l + 1];
    for (std::size_t i = 0; i < n; ++i) params_.values[offset + i] = rng.uniform(-bound, bound);
    offset += n;
  }
}

std::vector<std::vector<double>> MlpFn::activations(std::span<const double> input) const {
  if (input.size() != input_dim())
    throw EvaluationError(fmt::format("MLP expects {} inputs, got {}", input_dim(), input.size()));
  std::vector<std::vector<double>> acts;
  acts.reserve(layers_.size());
  acts.emplace_back(input.begin(), input.end());
  const double* p = params_.values.data();
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    const std::size_t fan_in = layers_[l];
    const std::size_t fan_out = layers_[l + 1];
    const double* w = p;
    const double* b = p + fan_in * fan_out;
    const auto& x = acts.back();
    std::vector<double> out(fan_out);
    for (std::size_t o = 0; o < fan_out; ++o) {
      double z = b[o];
      const double* wrow = w + o * fan_in;
      for (std::size_t i = 0; i < fan_in; ++i) z += wrow[i] * x[i];
      out[o] = (l + 2 < layers_.size()) ? std::tanh(z) : z;
    }
    acts.push_back(std::move(out));
    p += (fan_in + 1) * fan_out;
  }
  return acts;
}

std::vector<double> MlpFn::forward(std::span<const double> input) const { return activations(input).back(); }

void MlpFn::backward(std::span<const double> input, std::span<const double> upstream,
                     std::span<double> grad) const {
  if (upstream.size() != output_dim()) throw EvaluationError("upstream gradient has the wrong length");
  if (grad.size() != params_.values.size()) throw EvaluationError("gradient buffer has the wrong length");
  const auto acts = activations(input);

  // Offsets of each layer's parameters.
  std::vector<std::size_t> offsets(layers_.size() - 1);
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    offsets[l] = offset;
    offset += (layers_[l] + 1) * layers_[l + 1];
  }

  std::vector<double> delta(upstream.begin(), upstream.end());  // dL/dz at the output layer
  for (std::size_t l = layers_.size() - 1; l-- > 0;) {
    const std::size_t fan_in = layers_[l];
    const std::size_t fan_out = layers_[l + 1];
    const double* w = params_.values.data() + offsets[l];
    double* gw = grad.data() + offsets[l];
    double* gb = gw + fan_in * fan_out;
    const auto& x = acts[l];
    for (std::size_t o = 0; o < fan_out; ++o) {
      gb[o] += delta[o];
      for (std::size_t i = 0; i < fan_in; ++i) gw[o * fan_in + i] += delta[o] * x[i];
    }
    if (l == 0) break;
    std::vector<double> prev(fan_in, 0.0);
    for (std::size_t o = 0; o < fan_out; ++o)
      for (std::size_t i = 0; i < fan_in; ++i) prev[i] += w[o * fan_in + i] * delta[o];
    // acts[l] = tanh(z), so dtanh = 1 - acts^2.
    for (std::size_t i = 0; i < fan_in; ++i) prev[i] *= 1.0 - x[i] * x[i];
    delta = std::move(prev);
  }
}

Approximator Approximator::tabular(InputKind input, std::size_t n_states, std::size_t n_actions,
                                   std::size_t out_dim, Role role, double fill) {
  Approximator fn;
  fn.input_ = input;
  fn.n_states_ = n_states;
  fn.n_actions_ = n_actions;
  fn.out_dim_ = out_dim;
  const std::size_t rows = input == InputKind::state_action ? n_states * n_actions : n_states;
  fn.tabular_.emplace(rows, out_dim, role, fill);
  return fn;
}

Approximator Approximator::mlp(InputKind input, std::size_t n_states, std::size_t n_actions,
                               std::size_t out_dim, Role role, const MlpSpec& spec, Rng& rng) {
  Approximator fn;
  fn.input_ = input;
  fn.n_states_ = n_states;
  fn.n_actions_ = n_actions;
  fn.out_dim_ = out_dim;
  std::size_t state_dim = n_states;
  if (spec.state_features) {
    if (spec.state_features->n_states() != n_states) throw ConfigError("state feature table has the wrong size");
    fn.state_features_ = spec.state_features;
    state_dim = spec.state_features->n_actions();
  }
  std::vector<std::size_t> layers;
  layers.push_back(state_dim + (input == InputKind::state_action ? n_actions : 0));
  layers.insert(layers.end(), spec.hidden.begin(), spec.hidden.end());
  layers.push_back(out_dim);
  fn.mlp_.emplace(std::move(layers), role);
  fn.mlp_->init_uniform(rng);
  return fn;
}

ParamBlock& Approximator::params() { return tabular_ ? tabular_->params() : mlp_->params(); }
const ParamBlock& Approximator::params() const { return tabular_ ? tabular_->params() : mlp_->params(); }

void Approximator::check(StateId s, ActionId a) const {
  if (s >= n_states_) throw EvaluationError(fmt::format("state {} out of range [0, {})", s, n_states_));
  if (input_ == InputKind::state_action && a >= n_actions_)
    throw EvaluationError(fmt::format("action {} out of range [0, {})", a, n_actions_));
}

std::size_t Approximator::key(StateId s, ActionId a) const {
  return input_ == InputKind::state_action ? s * n_actions_ + a : s;
}

std::vector<double> Approximator::features(StateId s, ActionId a) const {
  check(s, a);
  std::vector<double> x;
  if (state_features_) {
    auto row = state_features_->row(s);
    x.assign(row.begin(), row.end());
  } else {
    x.assign(n_states_, 0.0);
    x[s] = 1.0;
  }
  if (input_ == InputKind::state_action) {
    const std::size_t base = x.size();
    x.resize(base + n_actions_, 0.0);
    x[base + a] = 1.0;
  }
  return x;
}

std::vector<double> Approximator::forward(StateId s, ActionId a) const {
  check(s, a);
  if (tabular_) {
    auto out = tabular_->forward(key(s, a));
    return {out.begin(), out.end()};
  }
  return mlp_->forward(features(s, a));
}

double Approximator::scalar(StateId s, ActionId a) const {
  check(s, a);
  if (tabular_) return tabular_->forward(key(s, a))[0];
  return mlp_->forward(features(s, a))[0];
}

void Approximator::backward(StateId s, ActionId a, std::span<const double> upstream,
                            std::span<double> grad) const {
  check(s, a);
  if (tabular_) {
    tabular_->backward(key(s, a), upstream, grad);
    return;
  }
  mlp_->backward(features(s, a), upstream, grad);
}

void Approximator::backward_scalar(StateId s, ActionId a, double upstream, std::span<double> grad) const {
  backward(s, a, std::span<const double>(&upstream, 1), grad);
}

StateActionTable Approximator::table() const {
  StateActionTable out(n_states_, n_actions_);
  for (StateId s = 0; s < n_states_; ++s)
    for (ActionId a = 0; a < n_actions_; ++a) out(s, a) = scalar(s, a);
  return out;
}

VTable Approximator::state_table() const {
  VTable out(n_states_);
  for (StateId s = 0; s < n_states_; ++s) out[s] = scalar(s);
  return out;
}

Policy Approximator::softmax_policy() const {
  if (input_ != InputKind::state || out_dim_ != n_actions_)
    throw ConfigError("softmax policy needs a state input and one logit per action");
  Policy pi{StateActionTable(n_states_, n_actions_)};
  for (StateId s = 0; s < n_states_; ++s) {
    const auto logits = forward(s);
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (ActionId a = 0; a < n_actions_; ++a) total += (pi.probs(s, a) = std::exp(logits[a] - peak));
    for (ActionId a = 0; a < n_actions_; ++a) pi.probs(s, a) /= total;
  }
  return pi;
}

nlohmann::json Approximator::to_checkpoint() const {
  nlohmann::json doc = {
      {"role", to_string(role())},
      {"kind", tabular_ ? "tabular" : "mlp"},
      {"input", input_ == InputKind::state ? "state" : "state_action"},
      {"n_states", n_states_},
      {"n_actions", n_actions_},
      {"out_dim", out_dim_},
      {"shape", params().shape},
      {"params", params().values},
  };
  if (mlp_) doc["layers"] = mlp_->layer_sizes();
  if (state_features_) {
    doc["state_features"] = state_features_->values();
    doc["state_feature_dim"] = state_features_->n_actions();
  }
  return doc;
}

Approximator Approximator::from_checkpoint(const nlohmann::json& doc) {
  try {
    Approximator fn;
    fn.input_ = doc.at("input").get<std::string>() == "state" ? InputKind::state : InputKind::state_action;
    fn.n_states_ = doc.at("n_states").get<std::size_t>();
    fn.n_actions_ = doc.at("n_actions").get<std::size_t>();
    fn.out_dim_ = doc.at("out_dim").get<std::size_t>();
    const Role role = parse_role(doc.at("role").get<std::string>());
    const auto kind = doc.at("kind").get<std::string>();
    if (kind == "tabular") {
      const std::size_t rows = fn.input_ == InputKind::state_action ? fn.n_states_ * fn.n_actions_ : fn.n_states_;
      fn.tabular_.emplace(rows, fn.out_dim_, role);
    } else if (kind == "mlp") {
      fn.mlp_.emplace(doc.at("layers").get<std::vector<std::size_t>>(), role);
      if (doc.contains("state_features")) {
        const auto dim = doc.at("state_feature_dim").get<std::size_t>();
        StateActionTable feats(fn.n_states_, dim);
        feats.values() = doc.at("state_features").get<std::vector<double>>();
        if (feats.values().size() != fn.n_states_ * dim) throw ConfigError("state feature table has the wrong size");
        fn.state_features_ = std::move(feats);
      }
    } else {
      throw ConfigError("unknown function kind '" + kind + "'");
    }
    auto values = doc.at("params").get<std::vector<double>>();
    if (values.size() != fn.params().size())
      throw ConfigError(fmt::format("checkpoint holds {} parameters, expected {}", values.size(), fn.params().size()));
    fn.params().values = std::move(values);
    fn.params().shape = doc.at("shape").get<std::vector<std::size_t>>();
    fn.params().validate();
    return fn;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what(), 0);
  }
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + name + "'");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw OptimizerError("Adam parameter, gradient and moment lengths differ");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i])) throw OptimizerError(fmt::format("non-finite gradient at index {}", i));
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(state.beta1, t);
  const double bias2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bias1;
    const double v_hat = state.v[i] / bias2;
    params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

Optimizer::Optimizer(const OptimizerSettings& settings, std::size_t n_params) : settings_(settings) {
  if (!(settings.lr > 0.0)) throw ConfigError("learning rate must be positive");
  adam_.m.assign(n_params, 0.0);
  adam_.v.assign(n_params, 0.0);
  adam_.lr = settings.lr;
  adam_.beta1 = settings.beta1;
  adam_.beta2 = settings.beta2;
  adam_.eps = settings.eps;
}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  if (settings_.kind == OptimizerKind::adam) {
    adam_step(adam_, params, grad);
    return;
  }
  if (params.size() != grad.size()) throw OptimizerError("parameter and gradient lengths differ");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i])) throw OptimizerError(fmt::format("non-finite gradient at index {}", i));
  ++adam_.step;
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= settings_.lr * grad[i];
}

void polyak_update(ParamBlock& target, const ParamBlock& source, double rate) {
  if (target.size() != source.size()) throw ConfigError("Polyak update between blocks of different sizes");
  for (std::size_t i = 0; i < target.size(); ++i)
    target.values[i] = (1.0 - rate) * target.values[i] + rate * source.values[i];
}

}  // namespace ipl
