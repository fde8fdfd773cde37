#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "support.hpp"

using namespace imtl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.simulation.n_train = c.simulation.n_validation = c.simulation.n_test = 16;
  c.simulation.image_size = 10;
  c.simulation.mean_signal_cancer = 12.0;
  c.simulation.mean_signal_normal = 3.0;
  c.ranks = {1, 2};
  c.lambda_s = {0.0, 10.0};
  c.lambda_beta = {0.2, 0.05, 0.01};
  c.replications = 3;
  c.seed = 5;
  c.fit.restarts = 1;
  c.fit.max_iterations = 20;
  return c;
}

std::string csv(const ExperimentResult& r) {
  std::ostringstream os;
  write_csv(os, r.replications);
  return os.str();
}

}  // namespace

TEST(Experiment, CsvSchemaAndDeterminism) {
  const ExperimentConfig c = small_config();
  const ExperimentResult a = run_experiment(c);
  const std::string text = csv(a);
  std::istringstream lines(text);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "replication,method,R,lambda_s,lambda_beta,accuracy,sensitivity,specificity");
  int rows = 0;
  for (std::string line; std::getline(lines, line);) {
    EXPECT_EQ(line.rfind(std::to_string(rows) + ",imtl,", 0), 0u) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  EXPECT_EQ(csv(run_experiment(c)), text);
  for (const auto& r : a.replications) {
    EXPECT_GE(r.test.accuracy, 0.0);
    EXPECT_LE(r.test.accuracy, 1.0);
  }
  EXPECT_GE(a.accuracy.se, 0.0);
}

TEST(Experiment, WorkerCountDoesNotChangeResults) {
  ExperimentConfig c = small_config();
  const std::string one = csv(run_experiment(c));
  c.workers = 4;
  EXPECT_EQ(csv(run_experiment(c)), one);
}

TEST(Experiment, HocpdAndInductiveModes) {
  ExperimentConfig c = small_config();
  c.replications = 1;
  c.method = "hocpd";
  c.ranks = {1, 2, 6};  // 6 exceeds the modality mode and is skipped
  const ExperimentResult h = run_experiment(c);
  EXPECT_EQ(h.replications[0].method, "hocpd");
  EXPECT_LE(h.replications[0].rank, 2);
  EXPECT_EQ(h.replications[0].lambda_s, 0.0);
  c.inductive = true;
  EXPECT_NO_THROW(run_experiment(c));
  c.method = "imtl";
  c.ranks = {1};
  EXPECT_NO_THROW(run_experiment(c));
}

TEST(Experiment, StoredDatasetMatchesSimulation) {
  ExperimentConfig c = small_config();
  c.replications = 1;
  SimConfig sc = c.simulation;
  sc.seed = c.seed;
  const SimulatedData d = generate(sc);
  const fs::path root = fs::temp_directory_path() / "imtl_experiment_dataset";
  fs::remove_all(root);
  io::save_dataset(root / "train", d.train);
  io::save_dataset(root / "validation", d.validation);
  io::save_dataset(root / "test", d.test);
  const std::string simulated = csv(run_experiment(c));
  c.dataset = root.string();
  EXPECT_EQ(csv(run_experiment(c)), simulated);
  fs::remove_all(root);
}

TEST(Experiment, ConfigErrors) {
  ExperimentConfig c = small_config();
  c.lambda_beta.clear();
  EXPECT_THROW(run_experiment(c), ContractViolation);
  c = small_config();
  c.method = "svm";
  EXPECT_THROW(run_experiment(c), ContractViolation);
  c = small_config();
  c.replications = 0;
  EXPECT_THROW(run_experiment(c), ContractViolation);
  c = small_config();
  c.dataset = "/nonexistent/imtl";
  EXPECT_THROW(run_experiment(c), FormatError);
}

TEST(ExperimentConfig, ParsesJson) {
  const auto j = nlohmann::json::parse(R"({
    "method": "hocpd",
    "simulation": {"n_train": 30, "image_size": 16, "seed": 3},
    "grid": {"rank": [1, 3], "lambda_s": [0, 5], "lambda_beta": [0.1]},
    "replications": 4, "seed": 9, "workers": 2, "output": "out.csv", "inductive": true,
    "fit": {"restarts": 2, "outer_tolerance": 0.01}
  })");
  const ExperimentConfig c = parse_experiment_config(j);
  EXPECT_EQ(c.method, "hocpd");
  EXPECT_EQ(c.simulation.n_train, 30);
  EXPECT_EQ(c.simulation.n_test, 60);
  EXPECT_EQ(c.simulation.image_size, 16);
  EXPECT_EQ(c.ranks, (std::vector<Index>{1, 3}));
  EXPECT_EQ(c.lambda_s, (std::vector<double>{0.0, 5.0}));
  EXPECT_EQ(c.replications, 4);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.workers, 2);
  EXPECT_EQ(c.output, "out.csv");
  EXPECT_TRUE(c.inductive);
  EXPECT_EQ(c.fit.restarts, 2);
  EXPECT_EQ(c.fit.outer_tolerance, 0.01);
  EXPECT_EQ(c.fit.stationarity_tolerance, 0.0);
  EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"replicas": 3})")), ContractViolation);
  EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"grid": {"R": [1]}})")), ContractViolation);
  EXPECT_THROW(parse_experiment_config(nlohmann::json::parse(R"({"simulation": {"D": 3}})")), ContractViolation);
}

TEST(Summarize, MeanAndStandardError) {
  // Values 0.5, 0.7, 0.9: mean 0.7, sample sd 0.2, se 0.2 / sqrt(3).
  const Summary s = summarize({0.5, 0.7, 0.9});
  EXPECT_NEAR(s.mean, 0.7, 1e-15);
  EXPECT_NEAR(s.se, 0.2 / std::sqrt(3.0), 1e-15);
  EXPECT_EQ(summarize({0.8}).se, 0.0);
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(2.0 / 3.0), "0.6666666667");
}
