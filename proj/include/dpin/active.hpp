#pragma once

// Pool-based active learning: per repeat, a fresh train/pool/test split; per
// iteration, train an ensemble from scratch on the current training rows,
// evaluate on the test rows, then move the pool rows with the widest fused
// intervals into the training set.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dpin/data.hpp"
#include "dpin/ensemble.hpp"
#include "dpin/error.hpp"
#include "dpin/metrics.hpp"
#include "dpin/model.hpp"
#include "dpin/rng.hpp"

namespace dpin {

struct ActiveConfig {
  std::size_t n_acquire = 10;
  std::size_t iterations = 10;
  std::size_t repeats = 10;
  SplitSpec split{0.3, 0.5, 0.2, 0};
  DpinConfig model;
  std::size_t ensemble_size = 5;
  std::uint64_t seed = 0;
  bool parallel_members = true;

  void validate() const {
    detail::require(iterations >= 1, "active: iterations must be at least 1");
    detail::require(repeats >= 1, "active: repeats must be at least 1");
    detail::require(ensemble_size >= 1, "active: ensemble size must be at least 1");
    detail::require(split.pool > 0.0, "active: split needs a pool fraction");
    split.validate();
    model.validate();
  }

  void validate_for(std::size_t n_rows) const {
    validate();
    const auto pool = split_sizes(n_rows, split)[1];
    detail::require(n_acquire * iterations <= pool,
                    "active: n_acquire x iterations (" + std::to_string(n_acquire * iterations) +
                        ") exceeds the initial pool size (" + std::to_string(pool) + ")");
  }
};

struct ActiveStep {
  std::size_t repeat = 0;
  std::size_t iteration = 0;  // 1-based
  MetricsRecord metrics;
  std::vector<std::size_t> acquired;  // source-dataset row indices moved to train after this evaluation
  std::size_t train_size = 0;         // rows trained on in this iteration
  bool skipped = false;               // training diverged; no evaluation
};

struct ActiveTrace {
  std::vector<ActiveStep> steps;
  bool flagged = false;  // some iteration was skipped
};

/// Acquisition score: total fused interval width.
inline Vector acquisition_score(const EnsemblePi& ens) {
  detail::require(ens.size() > 0, "acquisition_score: empty pool");
  return ens.width();
}

/// Positions of the k highest scores; ties go to the lower position.
inline std::vector<std::size_t> top_k(const Vector& scores, std::size_t k) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
  });
  order.resize(std::min(k, order.size()));
  return order;
}

inline std::uint64_t active_split_seed(std::uint64_t root, std::size_t repeat) {
  return derive_seed(root, Stream::kSplit, repeat);
}

inline std::uint64_t active_training_seed(std::uint64_t root, std::size_t repeat, std::size_t iteration) {
  return derive_seed(root, Stream::kTraining, (static_cast<std::uint64_t>(repeat) << 32) | iteration);
}

inline std::vector<ActiveStep> run_active_repeat(const Dataset& ds, const ActiveConfig& cfg, std::size_t repeat) {
  SplitSpec spec = cfg.split;
  spec.seed = active_split_seed(cfg.seed, repeat);
  const Split s = split(ds, spec);
  std::vector<std::size_t> train = s.train_idx;
  std::vector<std::size_t> pool = s.pool_idx;
  const std::vector<std::size_t>& test = s.test_idx;

  std::vector<ActiveStep> steps;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    ActiveStep step;
    step.repeat = repeat;
    step.iteration = it;
    step.train_size = train.size();

    Dataset train_ds = ds.subset(train);
    train_ds.standardizer = Standardizer::fit(train_ds.features, train_ds.targets);
    DpinConfig mc = cfg.model;
    mc.input_dim = ds.dim();
    mc.seed = active_training_seed(cfg.seed, repeat, it);
    try {
      const Ensemble ens = train_ensemble(train_ds, mc, cfg.ensemble_size, cfg.parallel_members);
      const Dataset test_ds = ds.subset(test);
      step.metrics = evaluate(ens.predict(test_ds.features), test_ds.targets, train_ds.standardizer.target_std);
      step.metrics.run_id = static_cast<std::int64_t>(repeat);
      step.metrics.split_seed = spec.seed;

      const Dataset pool_ds = ds.subset(pool);
      const auto picks = top_k(acquisition_score(ens.predict(pool_ds.features)), cfg.n_acquire);
      std::vector<bool> taken(pool.size(), false);
      for (auto p : picks) {
        taken[p] = true;
        step.acquired.push_back(pool[p]);
        train.push_back(pool[p]);
      }
      std::vector<std::size_t> rest;
      for (std::size_t p = 0; p < pool.size(); ++p)
        if (!taken[p]) rest.push_back(pool[p]);
      pool = std::move(rest);
    } catch (const DivergenceError&) {
      step.skipped = true;
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

inline ActiveTrace run_active(const Dataset& ds, const ActiveConfig& cfg) {
  ds.validate();
  cfg.validate_for(static_cast<std::size_t>(ds.size()));
  ActiveTrace trace;
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    auto steps = run_active_repeat(ds, cfg, r);
    for (auto& s : steps) {
      trace.flagged = trace.flagged || s.skipped;
      trace.steps.push_back(std::move(s));
    }
  }
  return trace;
}

struct ActiveIterationSummary {
  std::size_t iteration = 0;
  Stat rmse;
  Stat ll;
};

/// Mean and standard error of test RMSE and LL per iteration across repeats.
inline std::vector<ActiveIterationSummary> summarize_active(const ActiveTrace& trace) {
  detail::require(!trace.steps.empty(), "summarize_active: empty trace");
  std::size_t max_it = 0;
  for (const auto& s : trace.steps) max_it = std::max(max_it, s.iteration);
  std::vector<ActiveIterationSummary> out;
  for (std::size_t it = 1; it <= max_it; ++it) {
    std::vector<double> r, l;
    for (const auto& s : trace.steps)
      if (s.iteration == it && !s.skipped) {
        r.push_back(s.metrics.rmse);
        l.push_back(s.metrics.ll);
      }
    if (r.empty()) continue;
    out.push_back({it, mean_se(r), mean_se(l)});
  }
  return out;
}

}  // namespace dpin
