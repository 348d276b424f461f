#pragma once

// Dense feed-forward networks with exact reverse-mode gradients, an Adam
// optimizer, and per-group parameter freezing.
//
// Every layer reads from one source: the network input or an earlier layer.
// This covers plain chains as well as several towers sharing the same input
// (or a shared base). Network outputs are the column-wise concatenation of the
// activations of the layers listed in `NetworkParams::outputs`.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dpin/error.hpp"
#include "dpin/rng.hpp"

namespace dpin {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { kRelu, kLinear };

inline constexpr int kNetworkInput = -1;

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
  int source = kNetworkInput;
  Activation activation = Activation::kLinear;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

struct NetworkParams {
  std::vector<Layer> layers;
  std::map<std::string, std::vector<std::size_t>> groups;
  std::set<std::string> frozen;
  std::vector<std::size_t> outputs;
  Eigen::Index input_dim = 0;

  Eigen::Index output_dim() const {
    Eigen::Index n = 0;
    for (auto k : outputs) n += layers[k].out_dim();
    return n;
  }

  std::string group_of(std::size_t layer) const {
    for (const auto& [name, idx] : groups)
      for (auto k : idx)
        if (k == layer) return name;
    return {};
  }

  bool layer_frozen(std::size_t layer) const { return frozen.count(group_of(layer)) > 0; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  /// Throws DimensionError/ValidationError when a structural invariant fails.
  void validate() const {
    detail::require(input_dim > 0, "network input dimension must be positive");
    detail::require(!layers.empty(), "network has no layers");
    std::vector<int> owners(layers.size(), 0);
    for (const auto& [name, idx] : groups)
      for (auto k : idx) {
        detail::require(k < layers.size(), "group '" + name + "' references missing layer " + std::to_string(k));
        ++owners[k];
      }
    for (std::size_t k = 0; k < layers.size(); ++k) {
      detail::require(owners[k] == 1, "layer " + std::to_string(k) + " must belong to exactly one group");
      const auto& l = layers[k];
      detail::require(l.source >= kNetworkInput && l.source < static_cast<int>(k),
                      "layer " + std::to_string(k) + " has invalid source");
      const auto expected = l.source == kNetworkInput ? input_dim : layers[static_cast<std::size_t>(l.source)].out_dim();
      detail::require_dims(l.in_dim() == expected, "layer " + std::to_string(k) + ": input size " +
                                                       std::to_string(l.in_dim()) + " but source provides " +
                                                       std::to_string(expected));
      detail::require_dims(l.bias.size() == l.out_dim(), "layer " + std::to_string(k) + ": bias size mismatch");
      detail::require(l.weight.allFinite() && l.bias.allFinite(),
                      "layer " + std::to_string(k) + " has non-finite parameters");
    }
    for (const auto& name : frozen) detail::require(groups.count(name) > 0, "unknown frozen group '" + name + "'");
    detail::require(!outputs.empty(), "network declares no outputs");
    for (auto k : outputs) detail::require(k < layers.size(), "output references missing layer");
  }
};

/// Appends a layer owned by `group`, returns its index. Parameters are zero;
/// call `initialize` afterwards.
inline std::size_t add_layer(NetworkParams& net, int source, Eigen::Index out_dim, Activation act,
                             const std::string& group) {
  const auto in_dim = source == kNetworkInput ? net.input_dim : net.layers.at(static_cast<std::size_t>(source)).out_dim();
  Layer layer;
  layer.weight = Matrix::Zero(out_dim, in_dim);
  layer.bias = Vector::Zero(out_dim);
  layer.source = source;
  layer.activation = act;
  net.layers.push_back(std::move(layer));
  const std::size_t idx = net.layers.size() - 1;
  net.groups[group].push_back(idx);
  return idx;
}

/// Fan-in scaled uniform initialization. Rectifier layers use the He bound
/// sqrt(6/fan_in); linear layers and all biases use 1/sqrt(fan_in).
inline void initialize(NetworkParams& net, std::uint64_t seed) {
  Engine eng = make_engine(seed, Stream::kInit);
  for (auto& l : net.layers) {
    const double fan_in = static_cast<double>(l.in_dim());
    const double wb = (l.activation == Activation::kRelu ? std::sqrt(6.0) : 1.0) / std::sqrt(fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = uniform(eng, -wb, wb);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = uniform(eng, -bb, bb);
  }
}

struct ForwardTrace {
  Matrix inputs;                       // batch x d
  std::vector<Matrix> pre_activations;  // batch x out, per layer
  std::vector<Matrix> activations;      // batch x out, per layer
  Matrix outputs;                      // batch x n_outputs

  Eigen::Index batch() const { return inputs.rows(); }
};

namespace detail {

inline const Matrix& layer_input(const ForwardTrace& t, const Layer& l) {
  return l.source == kNetworkInput ? t.inputs : t.activations[static_cast<std::size_t>(l.source)];
}

}  // namespace detail

inline ForwardTrace forward(const NetworkParams& net, const Matrix& inputs) {
  if (inputs.cols() != net.input_dim)
    throw DimensionError("layer 0: input has " + std::to_string(inputs.cols()) + " columns, network expects " +
                         std::to_string(net.input_dim));
  if (!inputs.allFinite()) throw ValidationError("forward: non-finite input");

  ForwardTrace t;
  t.inputs = inputs;
  t.pre_activations.reserve(net.layers.size());
  t.activations.reserve(net.layers.size());
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    const Matrix& in = detail::layer_input(t, l);
    if (in.cols() != l.in_dim())
      throw DimensionError("layer " + std::to_string(k) + ": expects " + std::to_string(l.in_dim()) +
                           " inputs, got " + std::to_string(in.cols()));
    Matrix z = in * l.weight.transpose();
    z.rowwise() += l.bias.transpose();
    Matrix a = l.activation == Activation::kRelu ? Matrix(z.cwiseMax(0.0)) : z;
    t.pre_activations.push_back(std::move(z));
    t.activations.push_back(std::move(a));
  }
  t.outputs.resize(inputs.rows(), net.output_dim());
  Eigen::Index col = 0;
  for (auto k : net.outputs) {
    const auto w = net.layers[k].out_dim();
    t.outputs.middleCols(col, w) = t.activations[k];
    col += w;
  }
  return t;
}

/// Parameter-shaped gradient container. `applicable[k]` is false for layers
/// whose group is frozen; their gradients are still exact.
struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  std::vector<bool> applicable;

  static Gradients zeros_like(const NetworkParams& net) {
    Gradients g;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
      g.weight.push_back(Matrix::Zero(net.layers[k].weight.rows(), net.layers[k].weight.cols()));
      g.bias.push_back(Vector::Zero(net.layers[k].bias.size()));
      g.applicable.push_back(!net.layer_frozen(k));
    }
    return g;
  }
};

inline Gradients backward(const NetworkParams& net, const ForwardTrace& trace, const Matrix& output_grad) {
  if (output_grad.rows() != trace.outputs.rows() || output_grad.cols() != trace.outputs.cols())
    throw DimensionError("backward: output gradient is " + std::to_string(output_grad.rows()) + "x" +
                         std::to_string(output_grad.cols()) + ", outputs are " +
                         std::to_string(trace.outputs.rows()) + "x" + std::to_string(trace.outputs.cols()));
  if (trace.activations.size() != net.layers.size())
    throw DimensionError("backward: trace depth does not match layer count");

  Gradients g = Gradients::zeros_like(net);
  std::vector<Matrix> d_act(net.layers.size());
  for (std::size_t k = 0; k < net.layers.size(); ++k)
    d_act[k] = Matrix::Zero(trace.batch(), net.layers[k].out_dim());
  Eigen::Index col = 0;
  for (auto k : net.outputs) {
    const auto w = net.layers[k].out_dim();
    d_act[k] += output_grad.middleCols(col, w);
    col += w;
  }

  for (std::size_t r = net.layers.size(); r-- > 0;) {
    const auto& l = net.layers[r];
    Matrix dz = d_act[r];
    if (l.activation == Activation::kRelu)
      dz = dz.cwiseProduct((trace.pre_activations[r].array() > 0.0).cast<double>().matrix());
    g.weight[r] = dz.transpose() * detail::layer_input(trace, l);
    g.bias[r] = dz.colwise().sum().transpose();
    if (l.source != kNetworkInput) d_act[static_cast<std::size_t>(l.source)] += dz * l.weight;
  }
  return g;
}

struct OptimizerState {
  std::vector<Matrix> m_weight, v_weight;
  std::vector<Vector> m_bias, v_bias;
  std::uint64_t step = 0;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline OptimizerState make_optimizer(const NetworkParams& net, double learning_rate, double beta1 = 0.9,
                                     double beta2 = 0.999, double epsilon = 1e-8) {
  detail::require(learning_rate > 0.0, "learning rate must be positive");
  detail::require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "moment decay rates must lie in (0,1)");
  detail::require(epsilon > 0.0, "epsilon must be positive");
  OptimizerState s;
  s.learning_rate = learning_rate;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const auto& l : net.layers) {
    s.m_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    s.v_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    s.m_bias.push_back(Vector::Zero(l.bias.size()));
    s.v_bias.push_back(Vector::Zero(l.bias.size()));
  }
  return s;
}

/// Tensors skipped in one update because their gradient was non-finite.
struct UpdateReport {
  struct Skipped {
    std::size_t layer;
    bool is_bias;
  };
  std::vector<Skipped> skipped;

  bool clean() const { return skipped.empty(); }
};

namespace detail {

template <typename Param, typename Grad, typename Moment>
void adam_step(Param& p, const Grad& g, Moment& m, Moment& v, const OptimizerState& s, double bc1, double bc2) {
  m = s.beta1 * m + (1.0 - s.beta1) * g;
  v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseAbs2();
  p.array() -= s.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + s.epsilon);
}

}  // namespace detail

/// One Adam step. Frozen groups are left bit-identical; a tensor with a
/// non-finite gradient is skipped and reported.
inline UpdateReport apply_update(NetworkParams& net, const Gradients& grads, OptimizerState& state) {
  detail::require_dims(grads.weight.size() == net.layers.size() && grads.bias.size() == net.layers.size(),
                       "apply_update: gradient layer count mismatch");
  detail::require_dims(state.m_weight.size() == net.layers.size(), "apply_update: optimizer state not initialized");
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    detail::require_dims(grads.weight[k].rows() == net.layers[k].weight.rows() &&
                             grads.weight[k].cols() == net.layers[k].weight.cols() &&
                             grads.bias[k].size() == net.layers[k].bias.size(),
                         "apply_update: gradient shape mismatch at layer " + std::to_string(k));
    detail::require_dims(state.m_weight[k].rows() == net.layers[k].weight.rows() &&
                             state.m_weight[k].cols() == net.layers[k].weight.cols(),
                         "apply_update: optimizer state shape mismatch at layer " + std::to_string(k));
  }

  UpdateReport report;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    if (net.layer_frozen(k)) continue;
    auto& l = net.layers[k];
    if (grads.weight[k].allFinite())
      detail::adam_step(l.weight, grads.weight[k], state.m_weight[k], state.v_weight[k], state, bc1, bc2);
    else
      report.skipped.push_back({k, false});
    if (grads.bias[k].allFinite())
      detail::adam_step(l.bias, grads.bias[k], state.m_bias[k], state.v_bias[k], state, bc1, bc2);
    else
      report.skipped.push_back({k, true});
  }
  return report;
}

/// Replaces the frozen set. Unknown names raise ValidationError.
inline NetworkParams& set_frozen(NetworkParams& net, const std::set<std::string>& groups) {
  for (const auto& name : groups)
    if (!net.groups.count(name)) throw ValidationError("set_frozen: unknown group '" + name + "'");
  net.frozen = groups;
  return net;
}

}  // namespace dpin
