#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>

#include "nids_xray/config.hpp"
#include "nids_xray/ensemble.hpp"
#include "nids_xray/tamper.hpp"

namespace nids_xray {

// Fault-injection adapter: labels come from a size z-score, but score()
// always throws. Exercises the pipeline's per-model failure path.
class BrokenScoreModel final : public ModelAdapter {
 public:
  explicit BrokenScoreModel(SizeZScoreModel inner) : inner_(std::move(inner)) {}

  std::string id() const override { return "broken_score"; }
  const std::vector<std::string>& feature_names() const override { return inner_.feature_names(); }
  double threshold() const override { return inner_.threshold(); }
  const SizeZScoreModel& inner() const { return inner_; }

 protected:
  std::vector<double> score_rows(const Matrix&) const override {
    throw Error("broken_score: score is not available for this model");
  }
  std::vector<int> predict_rows(const Matrix& x) const override { return inner_.predict(x); }

 private:
  SizeZScoreModel inner_;
};

inline EnsembleConfig ensemble_config(const PipelineConfig& cfg) {
  EnsembleConfig e;
  e.m_max = static_cast<std::size_t>(cfg.ensemble_m_max);
  e.learning_rate = cfg.ensemble_learning_rate;
  e.hidden_ratio = cfg.ensemble_hidden_ratio;
  e.calibration_fraction = cfg.ensemble_calibration_fraction;
  e.phi_multiplier = cfg.ensemble_phi_multiplier;
  e.seed = cfg.seed;
  return e;
}

inline std::unique_ptr<ModelAdapter> train_model(const std::string& id, const FeatureMatrix& train,
                                                 const PipelineConfig& cfg) {
  if (id == "ensemble_ae") return std::make_unique<EnsembleAeModel>(EnsembleAeModel::train(train, ensemble_config(cfg)));
  if (id == "size_zscore") return std::make_unique<SizeZScoreModel>(SizeZScoreModel::train(train, cfg.zscore_cut));
  if (id == "broken_score") return std::make_unique<BrokenScoreModel>(SizeZScoreModel::train(train, cfg.zscore_cut));
  throw InvalidArgument(str_cat("unknown model '", id, "'"));
}

// ensemble_ae uses its binary format; the z-score models a small json file.
inline void save_model(const ModelAdapter& model, const std::filesystem::path& path) {
  if (const auto* ae = dynamic_cast<const EnsembleAeModel*>(&model)) {
    ae->save(path);
    return;
  }
  const SizeZScoreModel* z = dynamic_cast<const SizeZScoreModel*>(&model);
  if (const auto* b = dynamic_cast<const BrokenScoreModel*>(&model)) z = &b->inner();
  if (!z) throw InvalidArgument(str_cat("cannot save model '", model.id(), "'"));
  const nlohmann::json j{{"model", model.id()},
                         {"feature_names", z->feature_names()},
                         {"mean", z->mean()},
                         {"sd", z->sd()},
                         {"cut", z->threshold()}};
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(1) << '\n';
  if (!out) throw IoError(str_cat("cannot write model '", path.string(), "'"));
}

inline std::unique_ptr<ModelAdapter> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(str_cat("cannot open model '", path.string(), "'"));
  char magic[8] = {};
  in.read(magic, 8);
  if (in && std::string(magic, 7) == "NXRAYAE") return std::make_unique<EnsembleAeModel>(EnsembleAeModel::load(path));
  in.clear();
  in.seekg(0);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(str_cat("model '", path.string(), "' is neither an ensemble nor a json model: ", e.what()));
  }
  const std::string id = j.at("model");
  auto z = SizeZScoreModel::from_params(j.at("feature_names"), j.at("mean"), j.at("sd"), j.at("cut"));
  if (id == "size_zscore") return std::make_unique<SizeZScoreModel>(std::move(z));
  if (id == "broken_score") return std::make_unique<BrokenScoreModel>(std::move(z));
  throw FormatError(str_cat("model '", path.string(), "' has unknown id '", id, "'"));
}

}  // namespace nids_xray
