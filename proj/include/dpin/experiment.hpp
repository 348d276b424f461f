#pragma once

// Experiment runners behind the `dpin` command line tool: JSON configuration,
// result files (CSV + JSON mirrors), manifests and a plain-text log.
//
// Output schemas (schema_version 1):
//   regression: records.csv  run_id,split_seed,n_test,rmse,ll,picp,mpiw,mpiw_original
//               summary.csv  metric,mean,se,runs
//   synthetic:  train_data.csv  x,y
//               grid.csv        x,mu,lower,upper,width
//               summary.csv     metric,value
//   active:     trace.csv    repeat,iteration,rmse,ll,picp,mpiw,acquired_indices
//               summary.csv  iteration,rmse_mean,rmse_se,ll_mean,ll_se,count
//   gradcheck:  gradcheck.csv  loss,entries,max_rel_error,max_abs_error,fraction_within,passed
// Every CSV has a JSON twin with the same rows (array of objects keyed by the
// CSV header). Each run also writes manifest.json and log.txt.

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dpin/active.hpp"
#include "dpin/data.hpp"
#include "dpin/ensemble.hpp"
#include "dpin/error.hpp"
#include "dpin/gradcheck.hpp"
#include "dpin/metrics.hpp"
#include "dpin/model.hpp"
#include "dpin/rng.hpp"

namespace dpin::experiment {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "dpin 1.0.0";

// ---------------------------------------------------------------------------
// Config parsing

/// Reads keys from one JSON object and rejects any key that was not read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError(path_ + "." + key + ": wrong type");
    }
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : kEmpty, path_ + "." + key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError(path_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

struct DatasetSpec {
  std::string path;
  std::string target;  // name or index; empty = last column
  bool has_header = true;
  std::vector<std::string> drop_columns;
};

struct SyntheticSpec {
  std::size_t n = 1000;
  RegimeRule rule = RegimeRule::kMagnitude;
};

struct GridSpec {
  double min = -3.0;
  double max = 3.0;
  double step = 0.01;
};

struct ExperimentConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::size_t repeats = 20;
  std::size_t ensemble_size = 5;
  bool parallel = true;
  bool save_checkpoints = false;
  std::optional<DatasetSpec> dataset;
  SyntheticSpec synthetic;
  GridSpec grid;
  SplitSpec split;
  DpinConfig model;
  std::size_t n_acquire = 10;
  std::size_t iterations = 10;
  GradcheckOptions gradcheck;
  std::string out_dir;
};

inline DpinConfig parse_model(Section s) {
  DpinConfig m;
  m.hidden = s.get<std::vector<Eigen::Index>>("hidden", m.hidden);
  m.shared_base = s.get<bool>("shared_base", m.shared_base);
  m.stage1_epochs = s.get<int>("stage1_epochs", m.stage1_epochs);
  m.stage2_epochs = s.get<int>("stage2_epochs", m.stage2_epochs);
  m.batch_size = s.get<std::size_t>("batch_size", m.batch_size);
  m.lr_stage1 = s.get<double>("lr_stage1", m.lr_stage1);
  m.lr_stage2 = s.get<double>("lr_stage2", m.lr_stage2);
  m.weights.eta1 = s.get<double>("eta1", m.weights.eta1);
  m.weights.eta2 = s.get<double>("eta2", m.weights.eta2);
  m.weights.alpha = s.get<double>("alpha", m.weights.alpha);
  m.weights.softening = s.get<double>("softening", m.weights.softening);
  s.finish();
  return m;
}

inline json model_to_json(const DpinConfig& m) {
  return {{"hidden", m.hidden},         {"shared_base", m.shared_base}, {"stage1_epochs", m.stage1_epochs},
          {"stage2_epochs", m.stage2_epochs}, {"batch_size", m.batch_size},   {"lr_stage1", m.lr_stage1},
          {"lr_stage2", m.lr_stage2},   {"eta1", m.weights.eta1},        {"eta2", m.weights.eta2},
          {"alpha", m.weights.alpha},   {"softening", m.weights.softening}};
}

/// Parses and fully validates a config for `command` before any computation.
inline ExperimentConfig parse_config(const json& j, const std::string& command) {
  static const std::set<std::string> kCommands{"regression", "synthetic", "active", "gradcheck"};
  if (!kCommands.count(command)) throw ValidationError("unknown command '" + command + "'");
  Section root(j, "config");
  ExperimentConfig c;
  c.command = root.get<std::string>("command", command);
  if (c.command != command)
    throw ValidationError("config.command is '" + c.command + "' but '" + command + "' was requested");
  c.seed = root.get<std::uint64_t>("seed", c.seed);
  c.out_dir = root.get<std::string>("out", "");
  c.parallel = root.get<bool>("parallel", c.parallel);

  if (command == "gradcheck") {
    Section g = root.child("gradcheck");
    c.gradcheck.batch = g.get<Eigen::Index>("batch", c.gradcheck.batch);
    c.gradcheck.step = g.get<double>("step", c.gradcheck.step);
    c.gradcheck.rel_tol = g.get<double>("rel_tol", c.gradcheck.rel_tol);
    g.finish();
    detail::require(c.gradcheck.batch >= 1, "gradcheck.batch must be at least 1");
    detail::require(c.gradcheck.step > 0.0, "gradcheck.step must be positive");
    root.finish();
    return c;
  }

  c.ensemble_size = root.get<std::size_t>("ensemble_size", c.ensemble_size);
  c.save_checkpoints = root.get<bool>("save_checkpoints", c.save_checkpoints);
  c.model = parse_model(root.child("model"));
  detail::require(c.ensemble_size >= 1, "ensemble_size must be at least 1");

  if (command == "regression" || command == "active") {
    detail::require(root.has("dataset"), "config.dataset is required for '" + command + "'");
    Section d = root.child("dataset");
    DatasetSpec ds;
    ds.path = d.get<std::string>("path", "");
    detail::require(!ds.path.empty(), "config.dataset.path is required");
    if (d.has("target")) {
      const json& t = d.raw("target");
      if (t.is_string()) ds.target = t.get<std::string>();
      else if (t.is_number_unsigned()) ds.target = std::to_string(t.get<std::size_t>());
      else throw ValidationError("config.dataset.target: expected a column name or index");
    }
    ds.has_header = d.get<bool>("has_header", ds.has_header);
    ds.drop_columns = d.get<std::vector<std::string>>("drop_columns", {});
    d.finish();
    c.dataset = ds;
  }

  if (command == "regression") {
    c.repeats = root.get<std::size_t>("repeats", c.repeats);
    Section s = root.child("split");
    c.split.train = s.get<double>("train", 0.9);
    c.split.pool = s.get<double>("pool", 0.0);
    c.split.test = s.get<double>("test", 0.1);
    s.finish();
    detail::require(c.split.test > 0.0, "config.split.test must be positive for regression");
    detail::require(c.repeats >= 1, "repeats must be at least 1");
  } else if (command == "active") {
    Section a = root.child("active");
    c.n_acquire = a.get<std::size_t>("n_acquire", c.n_acquire);
    c.iterations = a.get<std::size_t>("iterations", c.iterations);
    c.repeats = a.get<std::size_t>("repeats", std::size_t{10});
    a.finish();
    Section s = root.child("split");
    c.split.train = s.get<double>("train", 0.3);
    c.split.pool = s.get<double>("pool", 0.5);
    c.split.test = s.get<double>("test", 0.2);
    s.finish();
    detail::require(c.iterations >= 1 && c.repeats >= 1, "active iterations and repeats must be at least 1");
  } else if (command == "synthetic") {
    Section s = root.child("synthetic");
    c.synthetic.n = s.get<std::size_t>("n", c.synthetic.n);
    const auto rule = s.get<std::string>("regime_rule", "magnitude");
    if (rule == "magnitude") c.synthetic.rule = RegimeRule::kMagnitude;
    else if (rule == "sign") c.synthetic.rule = RegimeRule::kSign;
    else throw ValidationError("config.synthetic.regime_rule: expected 'magnitude' or 'sign'");
    s.finish();
    Section g = root.child("grid");
    c.grid.min = g.get<double>("min", c.grid.min);
    c.grid.max = g.get<double>("max", c.grid.max);
    c.grid.step = g.get<double>("step", c.grid.step);
    g.finish();
    detail::require(c.synthetic.n >= 2, "config.synthetic.n must be at least 2");
    detail::require(c.grid.max > c.grid.min && c.grid.step > 0.0, "config.grid: need min < max and step > 0");
  }
  root.finish();
  c.split.validate();
  DpinConfig probe = c.model;
  probe.validate();
  return c;
}

/// Canonical form with all defaults filled in; hashed into the manifest.
inline json canonical_config(const ExperimentConfig& c) {
  json j{{"command", c.command}, {"seed", c.seed}, {"parallel", c.parallel}};
  if (c.command == "gradcheck") {
    j["gradcheck"] = {{"batch", c.gradcheck.batch}, {"step", c.gradcheck.step}, {"rel_tol", c.gradcheck.rel_tol}};
    return j;
  }
  j["ensemble_size"] = c.ensemble_size;
  j["save_checkpoints"] = c.save_checkpoints;
  j["model"] = model_to_json(c.model);
  if (c.dataset)
    j["dataset"] = {{"path", c.dataset->path},
                    {"target", c.dataset->target},
                    {"has_header", c.dataset->has_header},
                    {"drop_columns", c.dataset->drop_columns}};
  if (c.command == "regression" || c.command == "active")
    j["split"] = {{"train", c.split.train}, {"pool", c.split.pool}, {"test", c.split.test}};
  if (c.command == "regression") j["repeats"] = c.repeats;
  if (c.command == "active")
    j["active"] = {{"n_acquire", c.n_acquire}, {"iterations", c.iterations}, {"repeats", c.repeats}};
  if (c.command == "synthetic") {
    j["synthetic"] = {{"n", c.synthetic.n},
                      {"regime_rule", c.synthetic.rule == RegimeRule::kMagnitude ? "magnitude" : "sign"}};
    j["grid"] = {{"min", c.grid.min}, {"max", c.grid.max}, {"step", c.grid.step}};
  }
  return j;
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << v;
  return ss.str();
}

// ---------------------------------------------------------------------------
// Output

/// Shortest round-trip decimal form; the same text nlohmann/json emits.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Rows of mixed cells, rendered to CSV and to a JSON array of objects.
class Table {
 public:
  using Cell = std::variant<double, std::int64_t, std::uint64_t, std::string, bool>;

  explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<Cell> row) {
    if (row.size() != header_.size()) throw std::logic_error("table row width mismatch");
    rows_.push_back(std::move(row));
  }

  std::string csv() const {
    std::string out;
    for (std::size_t j = 0; j < header_.size(); ++j) out += (j ? "," : "") + header_[j];
    out += '\n';
    for (const auto& r : rows_) {
      for (std::size_t j = 0; j < r.size(); ++j) out += (j ? "," : "") + cell_text(r[j]);
      out += '\n';
    }
    return out;
  }

  json to_json() const {
    json arr = json::array();
    for (const auto& r : rows_) {
      json o = json::object();
      for (std::size_t j = 0; j < r.size(); ++j)
        std::visit(
            [&](const auto& v) {
              using T = std::decay_t<decltype(v)>;
              if constexpr (std::is_same_v<T, double>) {
                if (std::isnan(v)) o[header_[j]] = nullptr;
                else o[header_[j]] = v;
              } else {
                o[header_[j]] = v;
              }
            },
            r[j]);
      arr.push_back(std::move(o));
    }
    return arr;
  }

 private:
  static std::string cell_text(const Cell& c) {
    return std::visit(
        [](const auto& v) -> std::string {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, double>) return std::isnan(v) ? "" : fmt(v);
          else if constexpr (std::is_same_v<T, std::string>) return v;
          else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
          else return std::to_string(v);
        },
        c);
  }

  std::vector<std::string> header_;
  std::vector<std::vector<Cell>> rows_;
};

/// Writes via a temporary file and rename.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    out << content;
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Collects files and log lines for one run directory.
class RunOutput {
 public:
  explicit RunOutput(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  void log(const std::string& line) { log_ += line + '\n'; }

  void write(const std::string& name, const std::string& content) {
    if (dir_.empty()) return;
    write_atomic(dir_ / name, content);
    files_.push_back(name);
  }

  void write_table(const std::string& stem, const Table& t) {
    write(stem + ".csv", t.csv());
    write(stem + ".json", t.to_json().dump(2) + '\n');
  }

  void finish(const ExperimentConfig& cfg, const json& extra = json::object()) {
    const json canon = canonical_config(cfg);
    write("log.txt", log_);
    json manifest{{"schema_version", kSchemaVersion},
                  {"tool", kToolVersion},
                  {"command", cfg.command},
                  {"seed", cfg.seed},
                  {"config_hash", hex64(fnv1a(canon.dump()))},
                  {"config", canon},
                  {"seed_scheme", "splitmix64(root, stream, index); ensemble member i uses model seed + i"},
                  {"files", files_}};
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    write("manifest.json", manifest.dump(2) + '\n');
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::string log_;
  std::vector<std::string> files_;
};

inline Dataset load_dataset(const DatasetSpec& spec, RunOutput& out) {
  CsvOptions o;
  o.has_header = spec.has_header;
  o.drop_columns = spec.drop_columns;
  if (!spec.target.empty()) o.target = spec.target;
  Dataset ds = load_csv(spec.path, o);
  std::string names;
  for (const auto& n : ds.feature_names) names += (names.empty() ? "" : ",") + n;
  out.log("dataset " + spec.path + ": " + std::to_string(ds.size()) + " rows, " + std::to_string(ds.dim()) +
          " features [" + names + "], target " + ds.target_name);
  return ds;
}

inline void log_training(RunOutput& out, const std::string& prefix, const Ensemble& ens) {
  for (std::size_t j = 0; j < ens.reports.size(); ++j) {
    const auto& r = ens.reports[j];
    std::string line = prefix + " member " + std::to_string(j) + ": stage1 mse " + fmt(r.stage1.final_loss) +
                       ", stage2 loss " + fmt(r.stage2.final_loss) + ", train picp " + fmt(r.stage2.train_picp);
    if (r.diverged()) line += " DIVERGED";
    if (r.stage1.batch_clamped) line += " (warning: batch size clamped to training set size)";
    out.log(line);
  }
}

inline void log_standardizer(RunOutput& out, const std::string& prefix, const Standardizer& s,
                             const Dataset& ds) {
  for (auto c : s.constant_columns)
    out.log(prefix + " warning: constant feature column '" +
            (c < ds.feature_names.size() ? ds.feature_names[c] : std::to_string(c)) + "', std clamped to 1");
}

inline void save_member_checkpoints(RunOutput& out, const std::string& stem, const Ensemble& ens) {
  for (std::size_t j = 0; j < ens.members.size(); ++j) {
    std::ostringstream ss;
    save_checkpoint(ss, ens.members[j]);
    out.write(stem + "_member" + std::to_string(j) + ".ckpt", ss.str());
  }
}

// ---------------------------------------------------------------------------
// Commands

struct RegressionResult {
  std::vector<MetricsRecord> records;
  AggregateStats summary;
};

inline RegressionResult run_regression(const ExperimentConfig& cfg) {
  RunOutput out(cfg.out_dir);
  const Dataset ds = load_dataset(*cfg.dataset, out);
  RegressionResult res;
  Table rows({"run_id", "split_seed", "n_test", "rmse", "ll", "picp", "mpiw", "mpiw_original"});
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    SplitSpec spec = cfg.split;
    spec.seed = derive_seed(cfg.seed, Stream::kSplit, r);
    const Split s = split(ds, spec);
    log_standardizer(out, "run " + std::to_string(r), s.train.standardizer, ds);
    DpinConfig mc = cfg.model;
    mc.input_dim = ds.dim();
    mc.seed = derive_seed(cfg.seed, Stream::kTraining, r);
    const Ensemble ens = train_ensemble(s.train, mc, cfg.ensemble_size, cfg.parallel);
    log_training(out, "run " + std::to_string(r), ens);
    if (cfg.save_checkpoints) save_member_checkpoints(out, "run" + std::to_string(r), ens);
    MetricsRecord m = evaluate(ens.predict(s.test.features), s.test.targets, s.train.standardizer.target_std);
    m.run_id = static_cast<std::int64_t>(r);
    m.split_seed = spec.seed;
    out.log("run " + std::to_string(r) + ": rmse " + fmt(m.rmse) + " ll " + fmt(m.ll) + " picp " + fmt(m.picp) +
            " mpiw " + fmt(m.mpiw));
    rows.add({m.run_id, m.split_seed, static_cast<std::uint64_t>(m.n_test), m.rmse, m.ll, m.picp, m.mpiw,
              m.mpiw_original});
    res.records.push_back(m);
  }
  res.summary = aggregate(res.records);
  Table summary({"metric", "mean", "se", "runs"});
  for (auto name : kMetricNames) {
    const Stat& st = stat_of(res.summary, name);
    summary.add({std::string(name), st.mean, st.se, static_cast<std::uint64_t>(st.count)});
  }
  out.write_table("records", rows);
  out.write_table("summary", summary);
  if (res.summary.single_run) out.log("note: single run, standard errors reported as 0");
  out.finish(cfg, {{"single_run", res.summary.single_run}});
  return res;
}

struct SyntheticResult {
  double train_rmse = 0.0;
  double train_picp = 0.0;
  double train_mpiw = 0.0;
  double width_inner = 0.0;  // mean fused width over grid points with |x| <= 0.5
  double width_outer = 0.0;  // mean fused width over grid points with 1.5 <= |x| <= 2
  Dataset data;
  Vector grid_x;
  EnsemblePi grid;
};

inline SyntheticResult run_synthetic(const ExperimentConfig& cfg) {
  RunOutput out(cfg.out_dir);
  SyntheticResult res;
  res.data = gen_synthetic(cfg.synthetic.n, cfg.seed, cfg.synthetic.rule);
  res.data.standardizer = Standardizer::fit(res.data.features, res.data.targets);
  out.log("synthetic: " + std::to_string(cfg.synthetic.n) + " points, regime rule " +
          (cfg.synthetic.rule == RegimeRule::kMagnitude ? "magnitude" : "sign"));

  DpinConfig mc = cfg.model;
  mc.input_dim = 1;
  mc.seed = derive_seed(cfg.seed, Stream::kTraining);
  const Ensemble ens = train_ensemble(res.data, mc, cfg.ensemble_size, cfg.parallel);
  log_training(out, "synthetic", ens);
  if (cfg.save_checkpoints) save_member_checkpoints(out, "synthetic", ens);

  const EnsemblePi train_pred = ens.predict(res.data.features);
  const MetricsRecord tm = evaluate(train_pred, res.data.targets, res.data.standardizer.target_std);
  res.train_rmse = tm.rmse;
  res.train_picp = tm.picp;
  res.train_mpiw = tm.mpiw_original;

  const auto n_grid = static_cast<Eigen::Index>(std::floor((cfg.grid.max - cfg.grid.min) / cfg.grid.step + 1e-9)) + 1;
  res.grid_x.resize(n_grid);
  for (Eigen::Index i = 0; i < n_grid; ++i) res.grid_x(i) = cfg.grid.min + static_cast<double>(i) * cfg.grid.step;
  res.grid = ens.predict(res.grid_x);

  double inner = 0.0, outer = 0.0;
  int n_inner = 0, n_outer = 0;
  const Vector w = res.grid.width();
  Table grid({"x", "mu", "lower", "upper", "width"});
  for (Eigen::Index i = 0; i < n_grid; ++i) {
    const double ax = std::abs(res.grid_x(i));
    if (ax <= 0.5) {
      inner += w(i);
      ++n_inner;
    } else if (ax >= 1.5 && ax <= 2.0) {
      outer += w(i);
      ++n_outer;
    }
    grid.add({res.grid_x(i), res.grid.mu_bar(i), res.grid.mu_l_tilde(i), res.grid.mu_u_tilde(i), w(i)});
  }
  res.width_inner = n_inner ? inner / n_inner : 0.0;
  res.width_outer = n_outer ? outer / n_outer : 0.0;

  Table train({"x", "y"});
  for (Eigen::Index i = 0; i < res.data.size(); ++i) train.add({res.data.features(i, 0), res.data.targets(i)});
  Table summary({"metric", "value"});
  summary.add({std::string("train_rmse"), res.train_rmse});
  summary.add({std::string("train_picp"), res.train_picp});
  summary.add({std::string("train_mpiw"), res.train_mpiw});
  summary.add({std::string("width_abs_x_le_0.5"), res.width_inner});
  summary.add({std::string("width_abs_x_1.5_to_2"), res.width_outer});
  summary.add({std::string("width_ratio"), res.width_inner > 0 ? res.width_outer / res.width_inner : 0.0});
  out.write_table("train_data", train);
  out.write_table("grid", grid);
  out.write_table("summary", summary);
  out.log("train rmse " + fmt(res.train_rmse) + " picp " + fmt(res.train_picp));
  out.finish(cfg);
  return res;
}

struct ActiveResult {
  ActiveTrace trace;
  std::vector<ActiveIterationSummary> summary;
};

inline ActiveResult run_active_experiment(const ExperimentConfig& cfg) {
  RunOutput out(cfg.out_dir);
  const Dataset ds = load_dataset(*cfg.dataset, out);
  ActiveConfig ac;
  ac.n_acquire = cfg.n_acquire;
  ac.iterations = cfg.iterations;
  ac.repeats = cfg.repeats;
  ac.split = cfg.split;
  ac.model = cfg.model;
  ac.model.input_dim = ds.dim();
  ac.ensemble_size = cfg.ensemble_size;
  ac.seed = cfg.seed;
  ac.parallel_members = cfg.parallel;

  ActiveResult res;
  res.trace = run_active(ds, ac);
  res.summary = summarize_active(res.trace);

  Table trace({"repeat", "iteration", "rmse", "ll", "picp", "mpiw", "acquired_indices"});
  for (const auto& s : res.trace.steps) {
    std::string acq;
    for (auto i : s.acquired) acq += (acq.empty() ? "" : ";") + std::to_string(i);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    trace.add({static_cast<std::uint64_t>(s.repeat), static_cast<std::uint64_t>(s.iteration),
               s.skipped ? nan : s.metrics.rmse, s.skipped ? nan : s.metrics.ll, s.skipped ? nan : s.metrics.picp,
               s.skipped ? nan : s.metrics.mpiw, acq});
    out.log("repeat " + std::to_string(s.repeat) + " iteration " + std::to_string(s.iteration) + ": train " +
            std::to_string(s.train_size) + (s.skipped ? " SKIPPED (divergence)" : " rmse " + fmt(s.metrics.rmse)));
  }
  Table summary({"iteration", "rmse_mean", "rmse_se", "ll_mean", "ll_se", "count"});
  for (const auto& s : res.summary)
    summary.add({static_cast<std::uint64_t>(s.iteration), s.rmse.mean, s.rmse.se, s.ll.mean, s.ll.se,
                 static_cast<std::uint64_t>(s.rmse.count)});
  out.write_table("trace", trace);
  out.write_table("summary", summary);
  out.finish(cfg, {{"flagged", res.trace.flagged}});
  return res;
}

inline GradcheckReport run_gradcheck_experiment(const ExperimentConfig& cfg, std::ostream& report) {
  RunOutput out(cfg.out_dir);
  GradcheckOptions o = cfg.gradcheck;
  o.seed = cfg.seed;
  const GradcheckReport rep = run_gradcheck(o);
  Table t({"loss", "entries", "max_rel_error", "max_abs_error", "fraction_within", "passed"});
  report << "loss                        entries  max_rel_err   max_abs_err   within   result\n";
  for (const auto& r : rep.rows) {
    t.add({r.name, static_cast<std::uint64_t>(r.entries), r.max_rel_error, r.max_abs_error, r.fraction_within,
           r.passed});
    char line[160];
    std::snprintf(line, sizeof line, "%-27s %7zu  %11.3e  %11.3e  %7.4f   %s\n", r.name.c_str(), r.entries,
                  r.max_rel_error, r.max_abs_error, r.fraction_within, r.passed ? "PASS" : "FAIL");
    report << line;
    out.log(std::string(line, std::strlen(line) - 1));
  }
  out.write_table("gradcheck", t);
  out.finish(cfg, {{"passed", rep.passed()}});
  return rep;
}

}  // namespace dpin::experiment
