#include "tasam/nn.hpp"

#include <cmath>
#include <sstream>

#include "tasam/error.hpp"

namespace tasam::nn {

namespace {

void apply_activation(Activation act, Eigen::MatrixXd& z) {
  switch (act) {
    case Activation::identity:
      break;
    case Activation::tanh:
      z = z.array().tanh().matrix();
      break;
    case Activation::sigmoid:
      z = (1.0 / (1.0 + (-z.array()).exp())).matrix();
      break;
  }
}

// Derivative expressed through the post-activation value.
void scale_by_derivative(Activation act, const Eigen::MatrixXd& a, Eigen::MatrixXd& delta) {
  switch (act) {
    case Activation::identity:
      break;
    case Activation::tanh:
      delta.array() *= 1.0 - a.array().square();
      break;
    case Activation::sigmoid:
      delta.array() *= a.array() * (1.0 - a.array());
      break;
  }
}

void check_same_shape(const MlpParams& p, const GradientSet& g, const char* what) {
  bool ok = g.weights.size() == p.weights.size() && g.biases.size() == p.biases.size();
  for (std::size_t l = 0; ok && l < p.weights.size(); ++l) {
    ok = g.weights[l].rows() == p.weights[l].rows() && g.weights[l].cols() == p.weights[l].cols() &&
         g.biases[l].size() == p.biases[l].size();
  }
  if (!ok) throw ConfigError(std::string(what) + ": tensor shapes do not match the network");
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::tanh:
      return "tanh";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + s + "'");
}

std::size_t GradientSet::num_entries() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

void GradientSet::set_zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
}

std::int64_t GradientSet::first_non_finite_layer() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return static_cast<std::int64_t>(l);
  }
  return -1;
}

GradientSet& GradientSet::operator+=(const GradientSet& other) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += other.weights[l];
    biases[l] += other.biases[l];
  }
  return *this;
}

GradientSet& GradientSet::operator*=(double s) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] *= s;
    biases[l] *= s;
  }
  return *this;
}

std::size_t MlpParams::num_entries() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

GradientSet MlpParams::zeros_like() const {
  GradientSet g;
  g.weights.reserve(weights.size());
  g.biases.reserve(biases.size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    g.weights.push_back(Eigen::MatrixXd::Zero(weights[l].rows(), weights[l].cols()));
    g.biases.push_back(Eigen::VectorXd::Zero(biases[l].size()));
  }
  return g;
}

void MlpParams::validate() const {
  if (layer_sizes.size() < 2) throw ConfigError("mlp: need at least input and output sizes");
  for (int s : layer_sizes) {
    if (s <= 0) throw ConfigError("mlp: layer sizes must be positive");
  }
  if (weights.size() != layer_sizes.size() - 1 || biases.size() != weights.size()) {
    throw ConfigError("mlp: tensor count does not match layer_sizes");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rows() != layer_sizes[l + 1] || weights[l].cols() != layer_sizes[l] ||
        biases[l].size() != layer_sizes[l + 1]) {
      std::ostringstream os;
      os << "mlp: layer " << l << " shape does not chain with layer_sizes";
      throw ConfigError(os.str());
    }
  }
}

std::int64_t MlpParams::first_non_finite_layer() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return static_cast<std::int64_t>(l);
  }
  return -1;
}

bool operator==(const GradientSet& a, const GradientSet& b) {
  if (a.weights.size() != b.weights.size()) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    if (a.weights[l].rows() != b.weights[l].rows() || a.weights[l].cols() != b.weights[l].cols() ||
        a.biases[l].size() != b.biases[l].size()) {
      return false;
    }
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  }
  return true;
}

bool operator==(const MlpParams& a, const MlpParams& b) {
  if (a.layer_sizes != b.layer_sizes || a.hidden_activation != b.hidden_activation ||
      a.output_activation != b.output_activation) {
    return false;
  }
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  }
  return true;
}

MlpParams make_zero_mlp(const std::vector<int>& layer_sizes, Activation hidden, Activation output) {
  MlpParams p;
  p.layer_sizes = layer_sizes;
  p.hidden_activation = hidden;
  p.output_activation = output;
  if (layer_sizes.size() < 2) throw ConfigError("mlp: need at least input and output sizes");
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    if (layer_sizes[l] <= 0 || layer_sizes[l + 1] <= 0) throw ConfigError("mlp: layer sizes must be positive");
    p.weights.push_back(Eigen::MatrixXd::Zero(layer_sizes[l + 1], layer_sizes[l]));
    p.biases.push_back(Eigen::VectorXd::Zero(layer_sizes[l + 1]));
  }
  return p;
}

MlpParams make_mlp(const std::vector<int>& layer_sizes, Activation hidden, Activation output,
                   std::mt19937_64& rng) {
  MlpParams p = make_zero_mlp(layer_sizes, hidden, output);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer_sizes[l]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto& w = p.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
    }
    for (Eigen::Index r = 0; r < p.biases[l].size(); ++r) p.biases[l](r) = dist(rng);
  }
  return p;
}

Tape forward_batch(const MlpParams& params, const Eigen::MatrixXd& inputs) {
  if (inputs.rows() != params.input_size()) {
    std::ostringstream os;
    os << "forward: input length " << inputs.rows() << " does not match network input "
       << params.input_size();
    throw ConfigError(os.str());
  }
  Tape tape;
  tape.activations.reserve(params.num_layers() + 1);
  tape.activations.push_back(inputs);
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    Eigen::MatrixXd z = params.weights[l] * tape.activations.back();
    z.colwise() += params.biases[l];
    const bool last = l + 1 == params.num_layers();
    apply_activation(last ? params.output_activation : params.hidden_activation, z);
    tape.activations.push_back(std::move(z));
  }
  return tape;
}

Eigen::VectorXd forward(const MlpParams& params, const Eigen::VectorXd& input) {
  Tape tape = forward_batch(params, input);
  return tape.output().col(0);
}

Backprop backward_batch(const MlpParams& params, const Tape& tape, const Eigen::MatrixXd& upstream) {
  const std::size_t L = params.num_layers();
  if (tape.activations.size() != L + 1) throw ConfigError("backward: tape does not match network depth");
  if (upstream.rows() != params.output_size() || upstream.cols() != tape.output().cols()) {
    std::ostringstream os;
    os << "backward: upstream gradient shape " << upstream.rows() << "x" << upstream.cols()
       << " does not match output " << params.output_size() << "x" << tape.output().cols();
    throw ConfigError(os.str());
  }
  Backprop out;
  out.grads = params.zeros_like();
  Eigen::MatrixXd delta = upstream;
  for (std::size_t li = L; li-- > 0;) {
    const bool last = li + 1 == L;
    scale_by_derivative(last ? params.output_activation : params.hidden_activation,
                        tape.activations[li + 1], delta);
    out.grads.weights[li].noalias() = delta * tape.activations[li].transpose();
    out.grads.biases[li] = delta.rowwise().sum();
    Eigen::MatrixXd prev = params.weights[li].transpose() * delta;
    delta = std::move(prev);
  }
  out.input_grad = std::move(delta);
  return out;
}

GradientSet backward(const MlpParams& params, const Eigen::VectorXd& input,
                     const Eigen::VectorXd& upstream_grad) {
  if (upstream_grad.size() != params.output_size()) {
    throw ConfigError("backward: upstream gradient length does not match network output");
  }
  Tape tape = forward_batch(params, input);
  return backward_batch(params, tape, upstream_grad).grads;
}

AdamState make_adam_state(const MlpParams& params, double learning_rate) {
  AdamState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  s.learning_rate = learning_rate;
  return s;
}

void adam_step_inplace(MlpParams& params, const GradientSet& grads, AdamState& state) {
  check_same_shape(params, grads, "adam_step");
  check_same_shape(params, state.first_moment, "adam_step (first moment)");
  check_same_shape(params, state.second_moment, "adam_step (second moment)");
  if (auto bad = grads.first_non_finite_layer(); bad >= 0) {
    std::ostringstream os;
    os << "adam_step: non-finite gradient in layer " << bad;
    throw NumericError(os.str());
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double lr = state.learning_rate;
  const double eps = state.epsilon;

  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m.array() = b1 * m.array() + (1.0 - b1) * g.array();
    v.array() = b2 * v.array() + (1.0 - b2) * g.array().square();
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  };
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    update(params.weights[l], grads.weights[l], state.first_moment.weights[l],
           state.second_moment.weights[l]);
    update(params.biases[l], grads.biases[l], state.first_moment.biases[l],
           state.second_moment.biases[l]);
  }
  if (auto bad = params.first_non_finite_layer(); bad >= 0) {
    std::ostringstream os;
    os << "adam_step: parameters became non-finite in layer " << bad;
    throw NumericError(os.str());
  }
}

std::pair<MlpParams, AdamState> adam_step(MlpParams params, const GradientSet& grads, AdamState state) {
  adam_step_inplace(params, grads, state);
  return {std::move(params), std::move(state)};
}

MlpParams param_axpy(const MlpParams& params, const GradientSet& direction, double scale) {
  check_same_shape(params, direction, "param_axpy");
  MlpParams out = params;
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    out.weights[l] += scale * direction.weights[l];
    out.biases[l] += scale * direction.biases[l];
  }
  return out;
}

double grad_norm(const GradientSet& grads) {
  double sq = 0.0;
  for (std::size_t l = 0; l < grads.num_layers(); ++l) {
    sq += grads.weights[l].squaredNorm() + grads.biases[l].squaredNorm();
  }
  return std::sqrt(sq);
}

void add_weight_decay(GradientSet& grads, const MlpParams& params, double coeff) {
  if (coeff == 0.0) return;
  check_same_shape(params, grads, "add_weight_decay");
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    grads.weights[l] += coeff * params.weights[l];
    grads.biases[l] += coeff * params.biases[l];
  }
}

namespace {

template <class Tensors>
Eigen::VectorXd flatten_tensors(const Tensors& t) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < t.weights.size(); ++l) n += t.weights[l].size() + t.biases[l].size();
  Eigen::VectorXd flat(static_cast<Eigen::Index>(n));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < t.weights.size(); ++l) {
    const auto& w = t.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat(k++) = w(r, c);
    }
    for (Eigen::Index r = 0; r < t.biases[l].size(); ++r) flat(k++) = t.biases[l](r);
  }
  return flat;
}

template <class Tensors>
void fill_tensors(Tensors& t, const Eigen::VectorXd& flat) {
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < t.weights.size(); ++l) {
    auto& w = t.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat(k++);
    }
    for (Eigen::Index r = 0; r < t.biases[l].size(); ++r) t.biases[l](r) = flat(k++);
  }
}

}  // namespace

Eigen::VectorXd flatten(const GradientSet& g) { return flatten_tensors(g); }
Eigen::VectorXd flatten(const MlpParams& p) { return flatten_tensors(p); }

GradientSet unflatten_like(const MlpParams& shape, const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != shape.num_entries()) {
    throw ConfigError("unflatten: vector length does not match network size");
  }
  GradientSet g = shape.zeros_like();
  fill_tensors(g, flat);
  return g;
}

MlpParams with_flat_params(const MlpParams& shape, const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != shape.num_entries()) {
    throw ConfigError("with_flat_params: vector length does not match network size");
  }
  MlpParams p = shape;
  fill_tensors(p, flat);
  return p;
}

namespace {

nlohmann::json tensors_to_json(const std::vector<Eigen::MatrixXd>& ws,
                               const std::vector<Eigen::VectorXd>& bs) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < ws.size(); ++l) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(ws[l].size()));
    for (Eigen::Index r = 0; r < ws[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < ws[l].cols(); ++c) w.push_back(ws[l](r, c));
    }
    std::vector<double> b(bs[l].data(), bs[l].data() + bs[l].size());
    layers.push_back({{"rows", ws[l].rows()}, {"cols", ws[l].cols()}, {"weights", w}, {"biases", b}});
  }
  return layers;
}

void tensors_from_json(const nlohmann::json& layers, std::vector<Eigen::MatrixXd>& ws,
                       std::vector<Eigen::VectorXd>& bs) {
  if (layers.size() != ws.size()) throw ConfigError("checkpoint: layer count mismatch");
  for (std::size_t l = 0; l < ws.size(); ++l) {
    const auto& j = layers[l];
    const auto w = j.at("weights").get<std::vector<double>>();
    const auto b = j.at("biases").get<std::vector<double>>();
    if (j.at("rows").get<Eigen::Index>() != ws[l].rows() || j.at("cols").get<Eigen::Index>() != ws[l].cols() ||
        static_cast<Eigen::Index>(w.size()) != ws[l].size() || static_cast<Eigen::Index>(b.size()) != bs[l].size()) {
      throw ConfigError("checkpoint: tensor shape mismatch in layer " + std::to_string(l));
    }
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < ws[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < ws[l].cols(); ++c) ws[l](r, c) = w[k++];
    }
    for (Eigen::Index r = 0; r < bs[l].size(); ++r) bs[l](r) = b[static_cast<std::size_t>(r)];
  }
}

}  // namespace

nlohmann::json to_json(const MlpParams& p) {
  return {{"layer_sizes", p.layer_sizes},
          {"hidden_activation", to_string(p.hidden_activation)},
          {"output_activation", to_string(p.output_activation)},
          {"layers", tensors_to_json(p.weights, p.biases)}};
}

MlpParams mlp_from_json(const nlohmann::json& j) {
  MlpParams p = make_zero_mlp(j.at("layer_sizes").get<std::vector<int>>(),
                              activation_from_string(j.at("hidden_activation").get<std::string>()),
                              activation_from_string(j.at("output_activation").get<std::string>()));
  tensors_from_json(j.at("layers"), p.weights, p.biases);
  if (auto bad = p.first_non_finite_layer(); bad >= 0) {
    throw NumericError("checkpoint: non-finite parameter in layer " + std::to_string(bad));
  }
  return p;
}

nlohmann::json to_json(const AdamState& s) {
  return {{"step_count", s.step_count},
          {"learning_rate", s.learning_rate},
          {"beta1", s.beta1},
          {"beta2", s.beta2},
          {"epsilon", s.epsilon},
          {"first_moment", tensors_to_json(s.first_moment.weights, s.first_moment.biases)},
          {"second_moment", tensors_to_json(s.second_moment.weights, s.second_moment.biases)}};
}

AdamState adam_from_json(const nlohmann::json& j, const MlpParams& shape) {
  AdamState s = make_adam_state(shape, j.at("learning_rate").get<double>());
  s.step_count = j.at("step_count").get<std::int64_t>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  tensors_from_json(j.at("first_moment"), s.first_moment.weights, s.first_moment.biases);
  tensors_from_json(j.at("second_moment"), s.second_moment.weights, s.second_moment.biases);
  return s;
}

}  // namespace tasam::nn
