#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipl/mdp.hpp"
#include "ipl/rng.hpp"

namespace ipl {

enum class Role { q, v, policy, reward };

std::string to_string(Role role);
Role parse_role(const std::string& name);

/// Flat parameter vector plus the shape it is viewed as.
struct ParamBlock {
  std::vector<double> values;
  std::vector<std::size_t> shape;
  Role role = Role::q;

  std::size_t size() const { return values.size(); }
  /// Throws ConfigError if shape and length disagree or an entry is non-finite.
  void validate() const;
};

/// Dense table with `rows` keys and `cols` outputs per key.
class TabularFn {
 public:
  TabularFn(std::size_t rows, std::size_t cols, Role role, double fill = 0.0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::span<const double> forward(std::size_t key) const;
  /// grad[key, :] += upstream.
  void backward(std::size_t key, std::span<const double> upstream, std::span<double> grad) const;

  ParamBlock& params() { return params_; }
  const ParamBlock& params() const { return params_; }

 private:
  void check(std::size_t key) const;
  std::size_t rows_;
  std::size_t cols_;
  ParamBlock params_;
};

/// Fully connected network: tanh on hidden layers, linear output.
/// Per layer the parameters are W (fan_out x fan_in, row-major) then b.
class MlpFn {
 public:
  MlpFn(std::vector<std::size_t> layer_sizes, Role role);

  /// PyTorch-style U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init_uniform(Rng& rng);

  const std::vector<std::size_t>& layer_sizes() const { return layers_; }
  std::size_t input_dim() const { return layers_.front(); }
  std::size_t output_dim() const { return layers_.back(); }

  std::vector<double> forward(std::span<const double> input) const;
  /// Accumulates d(upstream . output)/d(params) into grad.
  void backward(std::span<const double> input, std::span<const double> upstream,
                std::span<double> grad) const;

  ParamBlock& params() { return params_; }
  const ParamBlock& params() const { return params_; }

  static std::size_t count_for(std::span<const std::size_t> layer_sizes);

 private:
  /// activations[l] is the input to layer l; the last entry is the output.
  std::vector<std::vector<double>> activations(std::span<const double> input) const;
  std::vector<std::size_t> layers_;
  ParamBlock params_;
};

enum class InputKind { state, state_action };

/// A learnable function of a state (V, policy logits) or a state-action
/// pair (Q, reward), backed by a table or an MLP over one-hot features
/// (one-hot(s) or one-hot(s) concatenated with one-hot(a)).
class Approximator {
 public:
  struct MlpSpec {
    std::vector<std::size_t> hidden;
    /// Optional [state][feature] table replacing one-hot(s).
    std::optional<StateActionTable> state_features;
  };

  static Approximator tabular(InputKind input, std::size_t n_states, std::size_t n_actions,
                              std::size_t out_dim, Role role, double fill = 0.0);
  static Approximator mlp(InputKind input, std::size_t n_states, std::size_t n_actions,
                          std::size_t out_dim, Role role, const MlpSpec& spec, Rng& rng);

  bool is_tabular() const { return tabular_.has_value(); }
  InputKind input_kind() const { return input_; }
  Role role() const { return params().role; }
  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  std::size_t output_dim() const { return out_dim_; }

  std::vector<double> forward(StateId s, ActionId a = 0) const;
  double scalar(StateId s, ActionId a = 0) const;
  void backward(StateId s, ActionId a, std::span<const double> upstream, std::span<double> grad) const;
  void backward_scalar(StateId s, ActionId a, double upstream, std::span<double> grad) const;

  /// Feature vector fed to the MLP.
  std::vector<double> features(StateId s, ActionId a = 0) const;

  /// Scalar state-action function evaluated on every (s, a).
  StateActionTable table() const;
  /// Scalar state function evaluated on every state.
  VTable state_table() const;
  /// Softmax over per-state logits.
  Policy softmax_policy() const;

  ParamBlock& params();
  const ParamBlock& params() const;
  std::size_t param_count() const { return params().size(); }
  const MlpFn* mlp_fn() const { return mlp_ ? &*mlp_ : nullptr; }

  nlohmann::json to_checkpoint() const;
  static Approximator from_checkpoint(const nlohmann::json& doc);

 private:
  Approximator() = default;
  std::size_t key(StateId s, ActionId a) const;
  void check(StateId s, ActionId a) const;

  InputKind input_ = InputKind::state;
  std::size_t n_states_ = 0;
  std::size_t n_actions_ = 0;
  std::size_t out_dim_ = 1;
  std::optional<TabularFn> tabular_;
  std::optional<MlpFn> mlp_;
  std::optional<StateActionTable> state_features_;
};

enum class OptimizerKind { adam, sgd };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam: params -= lr * m_hat / (sqrt(v_hat) + eps).
/// Throws OptimizerError on a non-finite gradient before touching state.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);

/// Adam or plain gradient descent over one parameter block.
class Optimizer {
 public:
  Optimizer(const OptimizerSettings& settings, std::size_t n_params);
  void step(std::span<double> params, std::span<const double> grad);
  const AdamState& adam() const { return adam_; }

 private:
  OptimizerSettings settings_;
  AdamState adam_;
};

/// target <- (1 - rate) target + rate source.
void polyak_update(ParamBlock& target, const ParamBlock& source, double rate);

}  // namespace ipl
