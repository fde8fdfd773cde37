#pragma once

// On-disk layouts.
//
// Dataset directory:
//   manifest.json       shape, modality file names, missing cells, labels file
//   modality_<m>.imtd   N x p_1 x ... x p_D stack of modality m (subject index fastest)
//   labels.csv          subject_id,label
//
// Model directory:
//   manifest.json       dims, R, M, N, lambda_s, file names, optional classifier
//   W.imtd              N x R
//   B_<m>_<d>.imtd      p_d x R, unit columns
//   S_<d>.imtd          N x p_d, unit rows (or zero)
//   mu.imtd             N individual weights
//   scale.imtd          M x R signed modality scales

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "imtl/dataset.hpp"
#include "imtl/io.hpp"
#include "imtl/logistic.hpp"
#include "imtl/multilayer.hpp"

namespace imtl::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline void save_labels(const fs::path& path, const std::vector<int>& labels) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "subject_id,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) out << i << "," << labels[i] << "\n";
}

inline std::vector<int> load_labels(const fs::path& path, Index n_subjects) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "subject_id,label") throw FormatError(path.string() + ": bad header");
  std::vector<int> labels(static_cast<std::size_t>(n_subjects), -1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    long long id;
    char comma;
    int y;
    if (!(row >> id >> comma >> y) || comma != ',' || id < 0 || id >= n_subjects || (y != 0 && y != 1))
      throw FormatError(path.string() + ": bad row '" + line + "'");
    labels[static_cast<std::size_t>(id)] = y;
  }
  for (int y : labels)
    if (y < 0) throw FormatError(path.string() + ": missing labels");
  return labels;
}

inline void save_dataset(const fs::path& dir, const MultimodalDataset& data) {
  fs::create_directories(dir);
  json j;
  j["format"] = "imtl-dataset";
  j["version"] = 1;
  j["n_subjects"] = data.n_subjects();
  j["n_modalities"] = data.n_modalities();
  j["dims"] = data.dims();
  json files = json::array();
  Dims stacked{data.n_subjects()};
  stacked.insert(stacked.end(), data.dims().begin(), data.dims().end());
  for (Index m = 0; m < data.n_modalities(); ++m) {
    const std::string name = "modality_" + std::to_string(m) + ".imtd";
    const Matrix& x = data.modality(m);
    save_tensor(dir / name, DenseTensor(stacked, Eigen::Map<const Vector>(x.data(), x.size())));
    files.push_back(name);
  }
  j["modalities"] = files;
  json missing = json::array();
  for (Index i = 0; i < data.n_subjects(); ++i)
    for (Index m = 0; m < data.n_modalities(); ++m)
      if (!data.is_present(i, m)) missing.push_back({i, m});
  j["missing"] = missing;
  if (data.labels()) {
    save_labels(dir / "labels.csv", *data.labels());
    j["labels"] = "labels.csv";
  } else {
    j["labels"] = nullptr;
  }
  write_json(dir / "manifest.json", j);
}

inline MultimodalDataset load_dataset(const fs::path& dir) {
  const json j = read_json(dir / "manifest.json");
  try {
    if (j.at("format") != "imtl-dataset") throw FormatError(dir.string() + ": not a dataset directory");
    const Index n = j.at("n_subjects").get<Index>();
    const Index mcount = j.at("n_modalities").get<Index>();
    const Dims dims = j.at("dims").get<Dims>();
    MultimodalDataset data(n, mcount, dims);
    const auto& files = j.at("modalities");
    if (static_cast<Index>(files.size()) != mcount) throw FormatError(dir.string() + ": modality count mismatch");
    for (Index m = 0; m < mcount; ++m) {
      const DenseTensor t = load_tensor(dir / files.at(static_cast<std::size_t>(m)).get<std::string>());
      if (t.ndim() != static_cast<Index>(dims.size()) + 1 || t.dim(0) != n ||
          !std::equal(dims.begin(), dims.end(), t.dims().begin() + 1))
        throw FormatError(dir.string() + ": modality " + std::to_string(m) + " has dims " + dims_to_string(t.dims()));
      data.modality(m) = Eigen::Map<const Matrix>(t.values().data(), n, product(dims));
    }
    for (const auto& cell : j.at("missing")) data.set_missing(cell.at(0).get<Index>(), cell.at(1).get<Index>());
    if (!j.at("labels").is_null()) data.set_labels(load_labels(dir / j.at("labels").get<std::string>(), n));
    return data;
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
}

inline json classifier_to_json(const LogisticModel& c) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return json{{"coefficients", vec(c.coefficients)},
              {"intercept", c.intercept},
              {"lambda_beta", c.lambda_beta},
              {"mean", vec(c.mean)},
              {"scale", vec(c.scale)}};
}

inline LogisticModel classifier_from_json(const json& j) {
  auto vec = [](const json& a) {
    const auto v = a.get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
  };
  LogisticModel c;
  c.coefficients = vec(j.at("coefficients"));
  c.intercept = j.at("intercept").get<double>();
  c.lambda_beta = j.at("lambda_beta").get<double>();
  c.mean = vec(j.at("mean"));
  c.scale = vec(j.at("scale"));
  if (c.mean.size() != c.coefficients.size() || c.scale.size() != c.coefficients.size())
    throw FormatError("classifier: coefficient, mean and scale lengths differ");
  c.converged = true;
  return c;
}

inline void save_model(const fs::path& dir, const MultilayerModel& model,
                       const std::optional<LogisticModel>& classifier = std::nullopt) {
  imtl::detail::require(model.finalized, "save_model: model is not finalized");
  fs::create_directories(dir);
  json j;
  j["format"] = "imtl-model";
  j["version"] = 1;
  j["dims"] = model.dims;
  j["rank"] = model.rank();
  j["n_modalities"] = model.n_modalities();
  j["n_subjects"] = model.n_subjects();
  j["lambda_s"] = model.lambda_s;
  save_matrix(dir / "W.imtd", model.W);
  j["W"] = "W.imtd";
  json bfiles = json::array();
  for (Index m = 0; m < model.n_modalities(); ++m) {
    json row = json::array();
    for (Index d = 0; d < model.ndim(); ++d) {
      const std::string name = "B_" + std::to_string(m) + "_" + std::to_string(d) + ".imtd";
      save_matrix(dir / name, model.B[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
      row.push_back(name);
    }
    bfiles.push_back(row);
  }
  j["B"] = bfiles;
  json sfiles = json::array();
  for (Index d = 0; d < model.ndim(); ++d) {
    const std::string name = "S_" + std::to_string(d) + ".imtd";
    save_matrix(dir / name, Matrix(imtl::detail::individual_factor_matrix(model, d).transpose()));
    sfiles.push_back(name);
  }
  j["S"] = sfiles;
  save_matrix(dir / "mu.imtd", Matrix(model.individual_weight));
  j["mu"] = "mu.imtd";
  save_matrix(dir / "scale.imtd", model.modality_scale);
  j["scale"] = "scale.imtd";
  j["classifier"] = classifier ? classifier_to_json(*classifier) : json(nullptr);
  write_json(dir / "manifest.json", j);
}

struct StoredModel {
  MultilayerModel model;
  std::optional<LogisticModel> classifier;
};

inline StoredModel load_model(const fs::path& dir) {
  const json j = read_json(dir / "manifest.json");
  try {
    if (j.at("format") != "imtl-model") throw FormatError(dir.string() + ": not a model directory");
    const Dims dims = j.at("dims").get<Dims>();
    const Index R = j.at("rank").get<Index>();
    const Index M = j.at("n_modalities").get<Index>();
    const Index N = j.at("n_subjects").get<Index>();
    StoredModel out;
    MultilayerModel& model = out.model;
    model = MultilayerModel::zeros(N, M, dims, R, j.at("lambda_s").get<double>());
    auto load_shaped = [&](const std::string& name, Index rows, Index cols) {
      Matrix x = load_matrix(dir / name);
      if (x.rows() != rows || x.cols() != cols)
        throw FormatError(dir.string() + "/" + name + ": expected " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", got " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
      return x;
    };
    model.W = load_shaped(j.at("W").get<std::string>(), N, R);
    for (Index m = 0; m < M; ++m)
      for (Index d = 0; d < model.ndim(); ++d)
        model.B[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)] =
            load_shaped(j.at("B").at(static_cast<std::size_t>(m)).at(static_cast<std::size_t>(d)).get<std::string>(),
                        dims[static_cast<std::size_t>(d)], R);
    for (Index d = 0; d < model.ndim(); ++d) {
      const Matrix s = load_shaped(j.at("S").at(static_cast<std::size_t>(d)).get<std::string>(), N,
                                   dims[static_cast<std::size_t>(d)]);
      for (Index i = 0; i < N; ++i) model.S[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] = s.row(i).transpose();
    }
    model.individual_weight = load_shaped(j.at("mu").get<std::string>(), N, 1);
    model.modality_scale = load_shaped(j.at("scale").get<std::string>(), M, R);
    model.finalized = true;
    if (j.contains("classifier") && !j.at("classifier").is_null()) out.classifier = classifier_from_json(j.at("classifier"));
    return out;
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
}

}  // namespace imtl::io
