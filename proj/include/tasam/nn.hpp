#pragma once

// Dense multilayer perceptron with exact reverse-mode gradients and Adam.
//
// Weights are stored as (out x in) matrices so that a layer computes
// a_{l+1} = act(W_l a_l + b_l). Batched entry points take one sample per
// column.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace tasam::nn {

enum class Activation { identity, tanh, sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Per-layer tensors with the same layout as MlpParams. Used for gradients,
// perturbation directions and Adam moments.
struct GradientSet {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  std::size_t num_layers() const { return weights.size(); }
  std::size_t num_entries() const;
  void set_zero();
  std::int64_t first_non_finite_layer() const;  // -1 when all finite

  GradientSet& operator+=(const GradientSet& other);
  GradientSet& operator*=(double s);
};

struct LossGrad {
  double loss = 0.0;
  GradientSet grads;
};

struct MlpParams {
  std::vector<int> layer_sizes;  // input, hidden..., output
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  Activation hidden_activation = Activation::tanh;
  Activation output_activation = Activation::identity;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return weights.size(); }
  std::size_t num_entries() const;

  // Zero-valued tensors with the shapes of this network.
  GradientSet zeros_like() const;

  // Throws ConfigError if the tensors do not chain with layer_sizes.
  void validate() const;
  std::int64_t first_non_finite_layer() const;
};

bool operator==(const GradientSet& a, const GradientSet& b);
bool operator==(const MlpParams& a, const MlpParams& b);

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
MlpParams make_mlp(const std::vector<int>& layer_sizes, Activation hidden,
                   Activation output, std::mt19937_64& rng);

// Same shapes, every entry zero.
MlpParams make_zero_mlp(const std::vector<int>& layer_sizes, Activation hidden,
                        Activation output);

Eigen::VectorXd forward(const MlpParams& params, const Eigen::VectorXd& input);

// Post-activation values per layer; activations[0] is the input batch.
struct Tape {
  std::vector<Eigen::MatrixXd> activations;
  const Eigen::MatrixXd& output() const { return activations.back(); }
};

Tape forward_batch(const MlpParams& params, const Eigen::MatrixXd& inputs);

struct Backprop {
  GradientSet grads;         // summed over the batch
  Eigen::MatrixXd input_grad;  // d(sum of output . upstream)/d input, per column
};

// Gradients of sum_j <output_j, upstream_j> for the batch recorded in `tape`.
Backprop backward_batch(const MlpParams& params, const Tape& tape,
                        const Eigen::MatrixXd& upstream);

// Gradient of output . upstream_grad with respect to every weight and bias.
GradientSet backward(const MlpParams& params, const Eigen::VectorXd& input,
                     const Eigen::VectorXd& upstream_grad);

struct AdamState {
  GradientSet first_moment;
  GradientSet second_moment;
  std::int64_t step_count = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam_state(const MlpParams& params, double learning_rate = 1e-4);

// Bias-corrected Adam update. Throws NumericError naming the layer when a
// gradient is not finite.
void adam_step_inplace(MlpParams& params, const GradientSet& grads, AdamState& state);

std::pair<MlpParams, AdamState> adam_step(MlpParams params, const GradientSet& grads,
                                          AdamState state);

// params + scale * direction.
MlpParams param_axpy(const MlpParams& params, const GradientSet& direction, double scale);

// Global L2 norm over all tensors jointly.
double grad_norm(const GradientSet& grads);

// Adds coeff * params to grads (gradient of coeff/2 * ||params||^2).
void add_weight_decay(GradientSet& grads, const MlpParams& params, double coeff);

// Row-major flattening: for each layer, weights then biases.
Eigen::VectorXd flatten(const GradientSet& g);
Eigen::VectorXd flatten(const MlpParams& p);
GradientSet unflatten_like(const MlpParams& shape, const Eigen::VectorXd& flat);
MlpParams with_flat_params(const MlpParams& shape, const Eigen::VectorXd& flat);

// Structured-text checkpoint records (see README, "Checkpoint format").
nlohmann::json to_json(const MlpParams& p);
MlpParams mlp_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AdamState& s);
AdamState adam_from_json(const nlohmann::json& j, const MlpParams& shape);

}  // namespace tasam::nn
