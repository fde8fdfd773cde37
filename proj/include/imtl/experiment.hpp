#pragma once

// Replicated simulation experiments: for each replication, generate (or load)
// train/validation/test sets, extract features with IMTL or HOCPD, tune
// (R, lambda_s, lambda_beta) on the validation error and score the selected
// classifier on the test set.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "imtl/hocpd.hpp"
#include "imtl/logistic.hpp"
#include "imtl/multilayer.hpp"
#include "imtl/simulate.hpp"
#include "imtl/storage.hpp"

namespace imtl {

struct ExperimentConfig {
  std::string method = "imtl";  // "imtl" or "hocpd"
  SimConfig simulation;
  std::string dataset;  // directory with train/, validation/, test/; empty = simulate
  std::vector<Index> ranks{1, 2, 3, 4};
  std::vector<double> lambda_s{0.0, 1.0, 10.0, 100.0};
  std::vector<double> lambda_beta{0.3, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02, 0.01, 0.005};
  int replications = 20;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string output;
  bool inductive = false;
  FitOptions fit = [] {
    FitOptions o;
    o.stationarity_tolerance = 0.0;
    return o;
  }();

  void validate() const {
    if (method != "imtl" && method != "hocpd") throw ContractViolation("experiment: unknown method '" + method + "'");
    if (replications < 1) throw ContractViolation("experiment: replications must be >= 1");
    if (ranks.empty() || lambda_s.empty() || lambda_beta.empty())
      throw ContractViolation("experiment: grids for rank, lambda_s and lambda_beta must be non-empty");
    if (workers < 1) throw ContractViolation("experiment: workers must be >= 1");
    for (Index r : ranks) detail::require(r >= 1, "experiment: ranks must be >= 1");
    for (double l : lambda_s) detail::require(l >= 0.0, "experiment: lambda_s values must be non-negative");
    for (double l : lambda_beta) detail::require(l >= 0.0, "experiment: lambda_beta values must be non-negative");
    if (dataset.empty()) simulation.validate();
  }
};

struct ReplicationResult {
  int replication = 0;
  std::string method;
  Index rank = 0;
  double lambda_s = 0.0;
  double lambda_beta = 0.0;
  Metrics test;
};

struct Summary {
  double mean = 0.0;
  double se = 0.0;
};

struct ExperimentResult {
  std::vector<ReplicationResult> replications;
  Summary accuracy, sensitivity, specificity;
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

using json = nlohmann::json;

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ContractViolation(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ContractViolation(where + ": unknown key '" + item.key() + "'");
  }
}

}  // namespace detail

inline SimConfig parse_sim_config(const nlohmann::json& j, SimConfig c = {}) {
  detail::check_keys(j,
                     {"n_train", "n_validation", "n_test", "image_size", "prevalence", "signal_value",
                      "mean_signal_cancer", "mean_signal_normal", "noise_sd", "background_sd", "background_rank",
                      "per_subject_background", "seed"},
                     "simulation");
  detail::read_field(j, "n_train", c.n_train);
  detail::read_field(j, "n_validation", c.n_validation);
  detail::read_field(j, "n_test", c.n_test);
  detail::read_field(j, "image_size", c.image_size);
  detail::read_field(j, "prevalence", c.prevalence);
  detail::read_field(j, "signal_value", c.signal_value);
  detail::read_field(j, "mean_signal_cancer", c.mean_signal_cancer);
  detail::read_field(j, "mean_signal_normal", c.mean_signal_normal);
  detail::read_field(j, "noise_sd", c.noise_sd);
  detail::read_field(j, "background_sd", c.background_sd);
  detail::read_field(j, "background_rank", c.background_rank);
  detail::read_field(j, "per_subject_background", c.per_subject_background);
  detail::read_field(j, "seed", c.seed);
  return c;
}

inline FitOptions parse_fit_options(const nlohmann::json& j, FitOptions o = {}) {
  detail::check_keys(j,
                     {"restarts", "seed", "max_iterations", "max_inner_iterations", "tolerance", "modality_tolerance",
                      "individual_tolerance", "outer_tolerance", "stationarity_tolerance", "max_polish_sweeps", "ridge",
                      "freeze_individual"},
                     "fit");
  detail::read_field(j, "restarts", o.restarts);
  detail::read_field(j, "seed", o.seed);
  detail::read_field(j, "max_iterations", o.max_iterations);
  detail::read_field(j, "max_inner_iterations", o.max_inner_iterations);
  detail::read_field(j, "tolerance", o.tolerance);
  detail::read_field(j, "modality_tolerance", o.modality_tolerance);
  detail::read_field(j, "individual_tolerance", o.individual_tolerance);
  detail::read_field(j, "outer_tolerance", o.outer_tolerance);
  detail::read_field(j, "stationarity_tolerance", o.stationarity_tolerance);
  detail::read_field(j, "max_polish_sweeps", o.max_polish_sweeps);
  detail::read_field(j, "ridge", o.ridge);
  detail::read_field(j, "freeze_individual", o.freeze_individual);
  return o;
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"method", "simulation", "dataset", "grid", "replications", "seed", "workers", "output",
                      "inductive", "fit"},
                     "experiment config");
  ExperimentConfig c;
  detail::read_field(j, "method", c.method);
  if (j.contains("simulation")) c.simulation = parse_sim_config(j.at("simulation"));
  if (j.contains("dataset") && !j.at("dataset").is_null()) c.dataset = j.at("dataset").get<std::string>();
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    detail::check_keys(g, {"rank", "lambda_s", "lambda_beta"}, "grid");
    detail::read_field(g, "rank", c.ranks);
    detail::read_field(g, "lambda_s", c.lambda_s);
    detail::read_field(g, "lambda_beta", c.lambda_beta);
  }
  detail::read_field(j, "replications", c.replications);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "workers", c.workers);
  detail::read_field(j, "output", c.output);
  detail::read_field(j, "inductive", c.inductive);
  if (j.contains("fit")) c.fit = parse_fit_options(j.at("fit"), c.fit);
  return c;
}

// ---------------------------------------------------------------------------
// Features

namespace detail {

/// Subjects x (p_1 ... p_D x M) integrated tensor: the modality becomes the last mode.
inline DenseTensor integrated_tensor(const MultimodalDataset& data) {
  Dims dims{data.n_subjects()};
  dims.insert(dims.end(), data.dims().begin(), data.dims().end());
  dims.push_back(data.n_modalities());
  Vector values(product(dims));
  const Index block = data.n_subjects() * data.image_size();
  for (Index m = 0; m < data.n_modalities(); ++m)
    values.segment(m * block, block) = Eigen::Map<const Vector>(data.modality(m).data(), block);
  return DenseTensor(std::move(dims), std::move(values));
}

/// One subject's images as a p_1 x ... x p_D x M tensor.
inline DenseTensor integrated_image(const MultimodalDataset& data, Index i) {
  Dims dims = data.dims();
  dims.push_back(data.n_modalities());
  Vector values(product(dims));
  const Index P = data.image_size();
  for (Index m = 0; m < data.n_modalities(); ++m) values.segment(m * P, P) = data.modality(m).row(i).transpose();
  return DenseTensor(std::move(dims), std::move(values));
}

inline Matrix project_new_subjects(const MultilayerModel& model, const MultimodalDataset& data) {
  Matrix out;
  for (Index i = 0; i < data.n_subjects(); ++i) {
    std::vector<DenseTensor> images;
    for (Index m = 0; m < data.n_modalities(); ++m) images.push_back(data.image(i, m));
    const Vector f = fit_new_subject(model, images).flatten();
    if (i == 0) out.resize(data.n_subjects(), f.size());
    out.row(i) = f.transpose();
  }
  return out;
}

struct FeatureSplit {
  Matrix train, validation, test;
};

/// IMTL features for one (R, lambda_s).
inline FeatureSplit imtl_features(const ExperimentConfig& c, const MultimodalDataset& train,
                                  const MultimodalDataset& validation, const MultimodalDataset& test, Index rank,
                                  double lambda_s, const FitOptions& opts) {
  if (c.inductive) {
    const auto fitted = fit(train, rank, lambda_s, opts);
    return {feature_matrix(fitted.first), project_new_subjects(fitted.first, validation),
            project_new_subjects(fitted.first, test)};
  }
  const MultimodalDataset all = MultimodalDataset::concatenate({&train, &validation, &test});
  const Matrix f = feature_matrix(fit(all, rank, lambda_s, opts).first);
  const Index a = train.n_subjects(), b = validation.n_subjects(), t = test.n_subjects();
  return {f.topRows(a), f.middleRows(a, b), f.bottomRows(t)};
}

inline FeatureSplit hocpd_feature_split(const ExperimentConfig& c, const MultimodalDataset& train,
                                        const MultimodalDataset& validation, const MultimodalDataset& test, Index rank,
                                        const FitOptions& opts) {
  if (c.inductive) {
    const HocpdModel m = fit_hocpd(integrated_tensor(train), rank, opts).first;
    auto project = [&](const MultimodalDataset& d) {
      Matrix out(d.n_subjects(), rank);
      for (Index i = 0; i < d.n_subjects(); ++i) out.row(i) = hocpd_project(m, integrated_image(d, i), opts.ridge).transpose();
      return out;
    };
    return {m.W, project(validation), project(test)};
  }
  const MultimodalDataset all = MultimodalDataset::concatenate({&train, &validation, &test});
  const Matrix f = fit_hocpd(integrated_tensor(all), rank, opts).first.W;
  const Index a = train.n_subjects(), b = validation.n_subjects(), t = test.n_subjects();
  return {f.topRows(a), f.middleRows(a, b), f.bottomRows(t)};
}

/// Ranks usable by HOCPD: no larger than any mode of the integrated tensor.
inline std::vector<Index> hocpd_ranks(const ExperimentConfig& c, const MultimodalDataset& data) {
  Index cap = data.n_subjects();
  for (Index p : data.dims()) cap = std::min(cap, p);
  cap = std::min(cap, data.n_modalities());
  std::vector<Index> out;
  for (Index r : c.ranks)
    if (r <= cap) out.push_back(r);
  if (out.empty()) throw ContractViolation("experiment: no rank in the grid is feasible for HOCPD (cap " + std::to_string(cap) + ")");
  return out;
}

}  // namespace detail

/// One replication: data from seed + k (or the configured dataset), fit seed + k.
inline ReplicationResult run_replication(const ExperimentConfig& c, int k) {
  SimulatedData data;
  if (c.dataset.empty()) {
    SimConfig sc = c.simulation;
    sc.seed = c.seed + static_cast<std::uint64_t>(k);
    data = generate(sc);
  } else {
    const std::filesystem::path root(c.dataset);
    data = {io::load_dataset(root / "train"), io::load_dataset(root / "validation"), io::load_dataset(root / "test")};
  }
  for (const auto* d : {&data.train, &data.validation, &data.test})
    if (!d->labels()) throw DataError("experiment: dataset split without labels");

  FitOptions opts = c.fit;
  opts.seed = c.seed + static_cast<std::uint64_t>(k);
  const auto& ytrain = *data.train.labels();
  const auto& yval = *data.validation.labels();
  const auto& ytest = *data.test.labels();

  const bool hocpd = c.method == "hocpd";
  const std::vector<Index> ranks = hocpd ? detail::hocpd_ranks(c, data.train) : c.ranks;
  const std::vector<double> lambda_s = hocpd ? std::vector<double>{0.0} : c.lambda_s;

  std::map<std::tuple<Index, double, double>, Metrics> test_metrics;
  const TuneResult best = tune(ranks, lambda_s, c.lambda_beta, [&](Index r, double ls, const std::vector<double>& lbs) {
    const detail::FeatureSplit f = hocpd ? detail::hocpd_feature_split(c, data.train, data.validation, data.test, r, opts)
                                         : detail::imtl_features(c, data.train, data.validation, data.test, r, ls, opts);
    const auto models = fit_l1_logistic_path(f.train, ytrain, lbs);
    std::vector<double> errors;
    for (std::size_t j = 0; j < lbs.size(); ++j) {
      errors.push_back(error_rate(yval, predict(models[j], f.validation)));
      test_metrics[{r, ls, lbs[j]}] = metrics(ytest, predict(models[j], f.test));
    }
    return errors;
  });

  ReplicationResult out;
  out.replication = k;
  out.method = c.method;
  out.rank = best.rank;
  out.lambda_s = best.lambda_s;
  out.lambda_beta = best.lambda_beta;
  out.test = test_metrics.at({best.rank, best.lambda_s, best.lambda_beta});
  return out;
}

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_csv(std::ostream& os, const std::vector<ReplicationResult>& rows) {
  os << "replication,method,R,lambda_s,lambda_beta,accuracy,sensitivity,specificity\n";
  for (const auto& r : rows) {
    os << r.replication << "," << r.method << "," << r.rank << "," << format_number(r.lambda_s) << ","
       << format_number(r.lambda_beta) << "," << format_number(r.test.accuracy) << ","
       << format_number(r.test.sensitivity) << "," << format_number(r.test.specificity) << "\n";
  }
}

/// Runs every replication (concurrently up to config.workers) and aggregates
/// in replication order, so the result does not depend on the worker count.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const int n = config.replications;
  std::vector<ReplicationResult> results(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int k = next++; k < n; k = next++) {
      try {
        results[static_cast<std::size_t>(k)] = run_replication(config, k);
      } catch (...) {
        errors[static_cast<std::size_t>(k)] = std::current_exception();
      }
    }
  };
  const int threads = std::min(config.workers, n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  ExperimentResult out;
  out.replications = std::move(results);
  std::vector<double> acc, sens, spec;
  for (const auto& r : out.replications) {
    acc.push_back(r.test.accuracy);
    sens.push_back(r.test.sensitivity);
    spec.push_back(r.test.specificity);
  }
  out.accuracy = summarize(acc);
  out.sensitivity = summarize(sens);
  out.specificity = summarize(spec);
  return out;
}

}  // namespace imtl
