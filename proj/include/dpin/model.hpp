#pragma once

// Decoupled prediction-interval network.
//
// Output column 0 is the mean; columns 1 and 2 are raw upper/lower width
// activations, mapped to strictly positive widths by softplus. Stage I fits
// the mean (and shared base, if any) with squared error while the interval
// head is frozen. Stage II freezes base and mean head and fits the widths.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dpin/data.hpp"
#include "dpin/error.hpp"
#include "dpin/losses.hpp"
#include "dpin/nnet.hpp"
#include "dpin/rng.hpp"

namespace dpin {

inline const std::string kBaseGroup = "base";
inline const std::string kMeanGroup = "mean_head";
inline const std::string kPiGroup = "pi_head";

struct DpinConfig {
  Eigen::Index input_dim = 1;
  std::vector<Eigen::Index> hidden{50};
  bool shared_base = false;
  int stage1_epochs = 400;
  int stage2_epochs = 800;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  DpiWeights weights;
  double lr_stage1 = 1e-2;
  double lr_stage2 = 5e-3;

  void validate() const {
    detail::require(input_dim > 0, "input_dim must be positive");
    for (auto h : hidden) detail::require(h > 0, "hidden widths must be positive");
    detail::require(!shared_base || !hidden.empty(), "a shared base needs at least one hidden layer");
    detail::require(stage1_epochs >= 1 && stage2_epochs >= 1, "epoch counts must be at least 1");
    detail::require(batch_size >= 1, "batch_size must be at least 1");
    detail::require(lr_stage1 > 0.0 && lr_stage2 > 0.0, "learning rates must be positive");
    weights.validate();
  }
};

/// Mean with strictly positive upper/lower widths; bounds are mu + lambda_u
/// and mu - lambda_l.
struct PiPrediction {
  Vector mu;
  Vector lambda_u;
  Vector lambda_l;

  Eigen::Index size() const { return mu.size(); }
  Vector upper() const { return mu + lambda_u; }
  Vector lower() const { return mu - lambda_l; }
};

inline double softplus(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

/// Builds the network layout for `cfg` (parameters zero).
inline NetworkParams build_network(const DpinConfig& cfg) {
  NetworkParams net;
  net.input_dim = cfg.input_dim;
  net.groups[kBaseGroup];
  net.groups[kMeanGroup];
  net.groups[kPiGroup];

  auto tower = [&](int source, const std::string& group) {
    for (auto h : cfg.hidden) source = static_cast<int>(add_layer(net, source, h, Activation::kRelu, group));
    return source;
  };

  std::size_t mean_out = 0, pi_out = 0;
  if (cfg.shared_base) {
    const int base = tower(kNetworkInput, kBaseGroup);
    mean_out = add_layer(net, base, 1, Activation::kLinear, kMeanGroup);
    pi_out = add_layer(net, base, 2, Activation::kLinear, kPiGroup);
  } else {
    mean_out = add_layer(net, tower(kNetworkInput, kMeanGroup), 1, Activation::kLinear, kMeanGroup);
    pi_out = add_layer(net, tower(kNetworkInput, kPiGroup), 2, Activation::kLinear, kPiGroup);
  }
  net.outputs = {mean_out, pi_out};
  return net;
}

struct DpinModel {
  NetworkParams net;
  DpinConfig config;
  /// Standardization of the data the model was trained on; predictions are
  /// returned in original units.
  Standardizer standardizer;

  static DpinModel create(const DpinConfig& cfg) {
    cfg.validate();
    DpinModel m;
    m.config = cfg;
    m.net = build_network(cfg);
    initialize(m.net, cfg.seed);
    m.net.validate();
    return m;
  }
};

struct TrainHistory {
  std::vector<double> epoch_loss;
  bool diverged = false;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  /// Stage II only: hard coverage on the training set after training.
  double train_picp = std::numeric_limits<double>::quiet_NaN();
  std::size_t skipped_updates = 0;
  /// batch_size exceeded the training set and was clamped to it.
  bool batch_clamped = false;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx, std::size_t b, std::size_t e) {
  Matrix out(static_cast<Eigen::Index>(e - b), m.cols());
  for (std::size_t i = b; i < e; ++i) out.row(static_cast<Eigen::Index>(i - b)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Vector gather(const Vector& v, const std::vector<std::size_t>& idx, std::size_t b, std::size_t e) {
  Vector out(static_cast<Eigen::Index>(e - b));
  for (std::size_t i = b; i < e; ++i) out(static_cast<Eigen::Index>(i - b)) = v(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Vector softplus(const Vector& raw) { return raw.unaryExpr([](double t) { return dpin::softplus(t); }); }
inline Vector logistic(const Vector& raw) { return raw.unaryExpr([](double t) { return detail::logistic(t); }); }

/// Per-epoch minibatch loop. `step` computes loss and output gradient for one
/// batch and returns the loss.
template <typename Step>
TrainHistory run_epochs(DpinModel& model, const Matrix& x, const Vector& y, int epochs, double lr,
                        std::uint64_t shuffle_stream, Step&& step) {
  TrainHistory hist;
  const auto n = static_cast<std::size_t>(x.rows());
  const std::size_t bs = std::min(model.config.batch_size, n);
  hist.batch_clamped = model.config.batch_size > n;
  OptimizerState opt = make_optimizer(model.net, lr);
  Engine eng = make_engine(model.config.seed, Stream::kShuffle, shuffle_stream);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle(order, eng);
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += bs) {
      const std::size_t e = std::min(n, b + bs);
      const Matrix xb = gather_rows(x, order, b, e);
      const Vector yb = gather(y, order, b, e);
      const ForwardTrace trace = forward(model.net, xb);
      Matrix grad = Matrix::Zero(trace.outputs.rows(), trace.outputs.cols());
      const double loss = step(trace, yb, grad);
      if (!std::isfinite(loss)) {
        hist.diverged = true;
        return hist;
      }
      total += loss * static_cast<double>(e - b);
      const UpdateReport rep = apply_update(model.net, backward(model.net, trace, grad), opt);
      hist.skipped_updates += rep.skipped.size();
    }
    hist.epoch_loss.push_back(total / static_cast<double>(n));
  }
  hist.final_loss = hist.epoch_loss.back();
  return hist;
}

}  // namespace detail

/// Fits base and mean head with squared error; the interval head stays frozen.
/// `data` is used in standardized form; its standardizer is stored in the model.
inline TrainHistory train_stage1(DpinModel& model, const Dataset& data) {
  data.validate();
  detail::require_dims(data.dim() == model.config.input_dim, "train_stage1: dataset width does not match model");
  detail::require(data.size() > 0, "train_stage1: empty dataset");
  model.standardizer = data.standardizer;
  set_frozen(model.net, {kPiGroup});
  const Matrix x = data.standardized_features();
  const Vector y = data.standardized_targets();
  return detail::run_epochs(model, x, y, model.config.stage1_epochs, model.config.lr_stage1, 1,
                            [](const ForwardTrace& t, const Vector& yb, Matrix& grad) {
                              const MseResult r = mse_loss(t.outputs.col(0), yb);
                              grad.col(0) = r.grad_mu;
                              return r.value;
                            });
}

/// Fits the interval head around the frozen mean.
inline TrainHistory train_stage2(DpinModel& model, const Dataset& data) {
  data.validate();
  detail::require_dims(data.dim() == model.config.input_dim, "train_stage2: dataset width does not match model");
  set_frozen(model.net, {kBaseGroup, kMeanGroup});
  const DpiWeights w = model.config.weights;
  const Matrix x = data.standardized_features();
  const Vector y = data.standardized_targets();
  TrainHistory hist = detail::run_epochs(
      model, x, y, model.config.stage2_epochs, model.config.lr_stage2, 2,
      [&w](const ForwardTrace& t, const Vector& yb, Matrix& grad) {
        const Vector raw_u = t.outputs.col(1);
        const Vector raw_l = t.outputs.col(2);
        const DpiLossResult r = dpi_loss(t.outputs.col(0), detail::softplus(raw_u), detail::softplus(raw_l), yb, w);
        grad.col(1) = r.grad_lambda_u.cwiseProduct(detail::logistic(raw_u));
        grad.col(2) = r.grad_lambda_l.cwiseProduct(detail::logistic(raw_l));
        return r.value;
      });
  if (!hist.diverged) {
    const ForwardTrace t = forward(model.net, x);
    const Vector mu = t.outputs.col(0);
    const Vector lu = detail::softplus(t.outputs.col(1));
    const Vector ll = detail::softplus(t.outputs.col(2));
    hist.final_loss = dpi_loss(mu, lu, ll, y, w).value;
    hist.train_picp = picp_hard(mu - ll, mu + lu, y);
    if (!std::isfinite(hist.final_loss)) hist.diverged = true;
  }
  return hist;
}

/// Prediction in standardized units.
inline PiPrediction predict_standardized(const DpinModel& model, const Matrix& standardized_inputs) {
  const ForwardTrace t = forward(model.net, standardized_inputs);
  return {t.outputs.col(0), detail::softplus(t.outputs.col(1)), detail::softplus(t.outputs.col(2))};
}

/// Prediction in original target units from original-unit inputs.
inline PiPrediction predict(const DpinModel& model, const Matrix& inputs) {
  PiPrediction p = predict_standardized(model, model.standardizer.transform_features(inputs));
  if (model.standardizer.fitted()) {
    p.mu = model.standardizer.inverse_targets(p.mu);
    p.lambda_u = model.standardizer.inverse_widths(p.lambda_u);
    p.lambda_l = model.standardizer.inverse_widths(p.lambda_l);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint format (text, one token stream):
//
//   dpin-checkpoint 1
//   input_dim <d>
//   layers <L>
//   layer <k> source <s> activation <relu|linear> group <name> rows <r> cols <c>
//   <r*c weights, row-major> \n <r biases>
//   ... (L times)
//   outputs <n> <layer indices>
//   frozen <n> <names>
//   standardizer <0|1> [d means, d stds, target mean, target std]
//
// Numbers are written with 17 significant digits so reading restores each
// double exactly.

inline void save_checkpoint(std::ostream& out, const DpinModel& model) {
  const auto& net = model.net;
  out.precision(17);
  out << "dpin-checkpoint 1\n";
  out << "input_dim " << net.input_dim << '\n';
  out << "layers " << net.layers.size() << '\n';
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    out << "layer " << k << " source " << l.source << " activation "
        << (l.activation == Activation::kRelu ? "relu" : "linear") << " group " << net.group_of(k) << " rows "
        << l.weight.rows() << " cols " << l.weight.cols() << '\n';
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) out << l.weight(i, j) << (j + 1 == l.weight.cols() ? '\n' : ' ');
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) out << l.bias(i) << (i + 1 == l.bias.size() ? '\n' : ' ');
  }
  out << "outputs " << net.outputs.size();
  for (auto k : net.outputs) out << ' ' << k;
  out << "\nfrozen " << net.frozen.size();
  for (const auto& f : net.frozen) out << ' ' << f;
  const auto& s = model.standardizer;
  out << "\nstandardizer " << (s.fitted() ? 1 : 0) << '\n';
  if (s.fitted()) {
    for (Eigen::Index j = 0; j < s.feature_mean.size(); ++j) out << s.feature_mean(j) << ' ';
    out << '\n';
    for (Eigen::Index j = 0; j < s.feature_std.size(); ++j) out << s.feature_std(j) << ' ';
    out << '\n' << s.target_mean << ' ' << s.target_std << '\n';
  }
}

/// Restores parameters and standardizer. Training configuration is not part
/// of the checkpoint.
inline DpinModel load_checkpoint(std::istream& in) {
  auto expect = [&](const std::string& word) {
    std::string tok;
    if (!(in >> tok) || tok != word) throw ValidationError("checkpoint: expected '" + word + "', got '" + tok + "'");
  };
  auto read_num = [&](auto& v) {
    if (!(in >> v)) throw ValidationError("checkpoint: truncated or malformed number");
  };
  expect("dpin-checkpoint");
  int version = 0;
  read_num(version);
  if (version != 1) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));

  DpinModel m;
  auto& net = m.net;
  expect("input_dim");
  read_num(net.input_dim);
  std::size_t n_layers = 0;
  expect("layers");
  read_num(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k) {
    std::size_t idx = 0;
    std::string act, group;
    Eigen::Index rows = 0, cols = 0;
    Layer l;
    expect("layer");
    read_num(idx);
    if (idx != k) throw ValidationError("checkpoint: layers out of order");
    expect("source");
    read_num(l.source);
    expect("activation");
    in >> act;
    if (act != "relu" && act != "linear") throw ValidationError("checkpoint: unknown activation '" + act + "'");
    l.activation = act == "relu" ? Activation::kRelu : Activation::kLinear;
    expect("group");
    in >> group;
    expect("rows");
    read_num(rows);
    expect("cols");
    read_num(cols);
    if (rows <= 0 || cols <= 0) throw ValidationError("checkpoint: bad layer shape");
    l.weight.resize(rows, cols);
    l.bias.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) read_num(l.weight(i, j));
    for (Eigen::Index i = 0; i < rows; ++i) read_num(l.bias(i));
    net.layers.push_back(std::move(l));
    net.groups[group].push_back(k);
  }
  std::size_t n = 0;
  expect("outputs");
  read_num(n);
  net.outputs.resize(n);
  for (auto& o : net.outputs) read_num(o);
  expect("frozen");
  read_num(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string g;
    in >> g;
    net.frozen.insert(g);
  }
  for (const auto& g : {kBaseGroup, kMeanGroup, kPiGroup}) net.groups[g];
  int has_std = 0;
  expect("standardizer");
  read_num(has_std);
  if (has_std) {
    auto& s = m.standardizer;
    s.feature_mean.resize(net.input_dim);
    s.feature_std.resize(net.input_dim);
    for (Eigen::Index j = 0; j < net.input_dim; ++j) read_num(s.feature_mean(j));
    for (Eigen::Index j = 0; j < net.input_dim; ++j) read_num(s.feature_std(j));
    read_num(s.target_mean);
    read_num(s.target_std);
  }
  net.validate();
  m.config.input_dim = net.input_dim;
  return m;
}

}  // namespace dpin
