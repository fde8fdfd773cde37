// imtl: simulate data, fit and apply multilayer models, check identifiability,
// and run replicated experiments.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error (bad flags, missing
// or malformed config).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "imtl/imtl.hpp"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
}

std::string need_string(const json& j, const char* key, const std::string& fallback = {}) {
  if (j.contains(key)) return j.at(key).get<std::string>();
  if (!fallback.empty()) return fallback;
  throw UsageError(std::string("config: missing '") + key + "'");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed) {
  try {
    imtl::detail::check_keys(j, allowed, "config");
  } catch (const imtl::ContractViolation& e) {
    throw UsageError(e.what());
  }
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  file.open(path);
  if (!file) throw imtl::FormatError("cannot write " + path);
  return file;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& c) {
  const json j = load_config(c.config);
  check_keys(j, {"simulation"});
  imtl::SimConfig sim = j.contains("simulation") ? imtl::parse_sim_config(j.at("simulation")) : imtl::SimConfig{};
  if (c.seed) sim.seed = *c.seed;
  const fs::path out = c.out.empty() ? fs::path("simulated") : fs::path(c.out);
  const imtl::SimulatedData data = imtl::generate(sim);
  imtl::io::save_dataset(out / "train", data.train);
  imtl::io::save_dataset(out / "validation", data.validation);
  imtl::io::save_dataset(out / "test", data.test);
  std::cout << "wrote " << data.train.n_subjects() << "/" << data.validation.n_subjects() << "/"
            << data.test.n_subjects() << " subjects to " << out.string() << "\n";
  return 0;
}

int cmd_fit(const Common& c) {
  const json j = load_config(c.config);
  check_keys(j, {"data", "rank", "lambda_s", "lambda_beta", "fit"});
  const imtl::MultimodalDataset data = imtl::io::load_dataset(need_string(j, "data"));
  if (!j.contains("rank")) throw UsageError("config: missing 'rank'");
  const imtl::Index rank = j.at("rank").get<imtl::Index>();
  const double lambda_s = j.value("lambda_s", 0.0);
  imtl::FitOptions opts = j.contains("fit") ? imtl::parse_fit_options(j.at("fit")) : imtl::FitOptions{};
  if (c.seed) opts.seed = *c.seed;
  auto [model, report] = imtl::fit(data, rank, lambda_s, opts);

  std::optional<imtl::LogisticModel> classifier;
  if (j.contains("lambda_beta")) {
    if (!data.labels()) throw imtl::DataError("fit: lambda_beta given but the dataset has no labels");
    const auto path = imtl::fit_l1_logistic_path(imtl::feature_matrix(model), *data.labels(),
                                                 {j.at("lambda_beta").get<double>()});
    classifier = path.front();
  }
  const fs::path out = c.out.empty() ? fs::path("model") : fs::path(c.out);
  imtl::io::save_model(out, model, classifier);
  json summary{{"objective", report.final_objective()},
               {"iterations", report.iterations},
               {"outer_converged", report.outer_converged},
               {"stationary", report.stationary},
               {"max_block_improvement", report.max_block_improvement},
               {"max_orthogonality", report.max_orthogonality},
               {"best_restart", report.best_restart},
               {"seconds", report.seconds}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_predict(const Common& c) {
  const json j = load_config(c.config);
  check_keys(j, {"model", "data"});
  const imtl::io::StoredModel stored = imtl::io::load_model(need_string(j, "model"));
  if (!stored.classifier) throw imtl::DataError("predict: the model has no classifier (fit with lambda_beta)");
  const imtl::MultimodalDataset data = imtl::io::load_dataset(need_string(j, "data"));
  const imtl::Matrix features = imtl::detail::project_new_subjects(stored.model, data);
  const imtl::Vector prob = imtl::predict_proba(*stored.classifier, features);
  const std::vector<int> labels = imtl::predict(*stored.classifier, features);

  std::ofstream file;
  std::ostream& os = open_out(c.out, file);
  os << "subject_id,probability,label\n";
  for (imtl::Index i = 0; i < prob.size(); ++i)
    os << i << "," << imtl::format_number(prob[i]) << "," << labels[static_cast<std::size_t>(i)] << "\n";
  if (data.labels()) {
    const imtl::Metrics m = imtl::metrics(*data.labels(), labels);
    std::cerr << "accuracy " << imtl::format_number(m.accuracy) << " sensitivity " << imtl::format_number(m.sensitivity)
              << " specificity " << imtl::format_number(m.specificity) << "\n";
  }
  return 0;
}

int cmd_identifiability(const Common& c) {
  const json j = load_config(c.config);
  check_keys(j, {"model", "subjects"});
  const imtl::io::StoredModel stored = imtl::io::load_model(need_string(j, "model"));
  imtl::IdentifiabilityReport rep;
  if (j.contains("subjects") && j.at("subjects").is_array())
    rep = imtl::check_identifiability(stored.model, j.at("subjects").get<std::vector<imtl::Index>>());
  else
    rep = imtl::check_identifiability(stored.model, j.value("subjects", imtl::Index{2}));
  json out;
  out["threshold"] = rep.threshold;
  out["satisfied"] = rep.satisfied;
  out["generic_estimate"] = rep.generic_estimate;
  out["subjects"] = rep.subjects;
  json mods = json::array();
  for (const auto& m : rep.modalities) {
    std::vector<imtl::Index> ks;
    for (const auto& k : m.k_ranks) ks.push_back(k.value);
    mods.push_back({{"k_ranks", ks}, {"total", m.total}, {"satisfied", m.satisfied}});
  }
  out["modalities"] = mods;
  std::ofstream file;
  open_out(c.out, file) << out.dump(2) << "\n";
  return 0;
}

int cmd_experiment(const Common& c) {
  json j = load_config(c.config);
  imtl::ExperimentConfig cfg;
  try {
    cfg = imtl::parse_experiment_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const imtl::ContractViolation& e) {
    throw UsageError(e.what());
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.workers) cfg.workers = *c.workers;
  if (!c.out.empty()) cfg.output = c.out;
  try {
    cfg.validate();
  } catch (const imtl::ContractViolation& e) {
    throw UsageError(e.what());
  }
  const imtl::ExperimentResult res = imtl::run_experiment(cfg);
  std::ofstream file;
  imtl::write_csv(open_out(cfg.output, file), res.replications);
  std::cerr << cfg.method << " over " << res.replications.size() << " replications: accuracy "
            << imtl::format_number(res.accuracy.mean) << " (" << imtl::format_number(res.accuracy.se) << "), sensitivity "
            << imtl::format_number(res.sensitivity.mean) << " (" << imtl::format_number(res.sensitivity.se)
            << "), specificity " << imtl::format_number(res.specificity.mean) << " ("
            << imtl::format_number(res.specificity.se) << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Individualized multilayer tensor learning"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON configuration file");
    sub->add_option("--seed", common.seed, "Override the random seed");
    sub->add_option("--out", common.out, "Output path");
    sub->add_option("--workers", common.workers, "Worker threads")->check(CLI::PositiveNumber);
  };
  auto* simulate = app.add_subcommand("simulate", "Generate train/validation/test datasets");
  auto* fit = app.add_subcommand("fit", "Fit a multilayer model (and optionally a classifier)");
  auto* predict = app.add_subcommand("predict", "Classify new subjects with a fitted model");
  auto* ident = app.add_subcommand("identifiability", "Check the uniqueness condition on a fitted model");
  auto* experiment = app.add_subcommand("experiment", "Run replicated simulation experiments");
  for (auto* s : {simulate, fit, predict, ident, experiment}) add_common(s);
  for (auto* s : {fit, predict, ident}) s->get_option("--config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*simulate) return cmd_simulate(common);
    if (*fit) return cmd_fit(common);
    if (*predict) return cmd_predict(common);
    if (*ident) return cmd_identifiability(common);
    if (*experiment) return cmd_experiment(common);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
