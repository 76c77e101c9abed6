#include <algorithm>
#include <iterator>

#include <json.hpp>

#include "tabl/harness.hpp"

namespace tabl {

namespace {

using Json = nlohmann::ordered_json;

template <typename T>
void read_field(const Json& obj, const char* key, T& out, std::vector<std::string>& seen) {
  seen.emplace_back(key);
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

void reject_unknown(const Json& obj, const std::vector<std::string>& seen, const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(seen.begin(), seen.end(), key) == seen.end()) {
      throw ConfigError("unknown config field '" + where + key + "'");
    }
  }
}

Json parse(const std::string& text, const char* what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

Json mode_row_json(const ModeRow& row) {
  return Json{{"params", row.params},
              {"fold_dsc", row.fold_dsc},
              {"fold_sdc", row.fold_sdc},
              {"dsc_mean", row.dsc.mean},
              {"dsc_sd", row.dsc.sd},
              {"sdc_mean", row.sdc.mean},
              {"sdc_sd", row.sdc.sd}};
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) {
  const DatasetConfig& d = cfg.data;
  const TrainConfig& t = cfg.train;
  Json j;
  j["models"] = cfg.models;
  j["modes"] = Json::array();
  if (cfg.run_standard) j["modes"].push_back("s");
  if (cfg.run_ablated) j["modes"].push_back("abl");
  j["folds"] = cfg.folds;
  j["data"] = Json{{"n_cases", d.n_cases},
                   {"grid", d.grid},
                   {"spacing", d.spacing},
                   {"classes", d.classes},
                   {"min_blobs", d.min_blobs},
                   {"max_blobs", d.max_blobs},
                   {"min_radius", d.min_radius},
                   {"max_radius", d.max_radius},
                   {"intensity_step", d.intensity_step},
                   {"noise_sd", d.noise_sd},
                   {"min_class_voxels", d.min_class_voxels},
                   {"max_retries", d.max_retries},
                   {"seed", d.seed}};
  j["train"] = Json{{"epochs", t.epochs},
                    {"batch_size", t.batch_size},
                    {"lr", t.lr},
                    {"weight_decay", t.weight_decay},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"adam_eps", t.adam_eps},
                    {"warmup_fraction", t.warmup_fraction},
                    {"tolerance_mm", t.tolerance_mm},
                    {"patch", t.patch},
                    {"seed", t.seed}};
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(const std::string& text) {
  const Json j = parse(text, "config");
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  std::vector<std::string> seen;
  read_field(j, "models", cfg.models, seen);
  read_field(j, "folds", cfg.folds, seen);
  std::vector<std::string> modes{"s", "abl"};
  read_field(j, "modes", modes, seen);
  cfg.run_standard = cfg.run_ablated = false;
  for (const auto& m : modes) {
    if (m == "s") {
      cfg.run_standard = true;
    } else if (m == "abl") {
      cfg.run_ablated = true;
    } else {
      throw ConfigError("unknown mode '" + m + "' (expected s or abl)");
    }
  }
  seen.emplace_back("data");
  seen.emplace_back("train");
  reject_unknown(j, seen, "");

  bool grid_given = false;
  if (j.contains("data")) {
    const Json& d = j.at("data");
    if (!d.is_object()) throw ConfigError("config field 'data' must be an object");
    DatasetConfig& c = cfg.data;
    std::vector<std::string> s;
    read_field(d, "n_cases", c.n_cases, s);
    read_field(d, "grid", c.grid, s);
    read_field(d, "spacing", c.spacing, s);
    read_field(d, "classes", c.classes, s);
    read_field(d, "min_blobs", c.min_blobs, s);
    read_field(d, "max_blobs", c.max_blobs, s);
    read_field(d, "min_radius", c.min_radius, s);
    read_field(d, "max_radius", c.max_radius, s);
    read_field(d, "intensity_step", c.intensity_step, s);
    read_field(d, "noise_sd", c.noise_sd, s);
    read_field(d, "min_class_voxels", c.min_class_voxels, s);
    read_field(d, "max_retries", c.max_retries, s);
    read_field(d, "seed", c.seed, s);
    reject_unknown(d, s, "data.");
    grid_given = d.contains("grid");
    if (grid_given && !d.contains("spacing")) c.spacing.assign(c.grid.size(), 1.0);
  }
  // The network input follows the dataset grid unless given explicitly.
  cfg.train.patch = cfg.data.grid;
  if (j.contains("train")) {
    const Json& t = j.at("train");
    if (!t.is_object()) throw ConfigError("config field 'train' must be an object");
    TrainConfig& c = cfg.train;
    std::vector<std::string> s;
    read_field(t, "epochs", c.epochs, s);
    read_field(t, "batch_size", c.batch_size, s);
    read_field(t, "lr", c.lr, s);
    read_field(t, "weight_decay", c.weight_decay, s);
    read_field(t, "beta1", c.beta1, s);
    read_field(t, "beta2", c.beta2, s);
    read_field(t, "adam_eps", c.adam_eps, s);
    read_field(t, "warmup_fraction", c.warmup_fraction, s);
    read_field(t, "tolerance_mm", c.tolerance_mm, s);
    read_field(t, "patch", c.patch, s);
    read_field(t, "seed", c.seed, s);
    reject_unknown(t, s, "train.");
  }
  cfg.data.validate();
  cfg.train.validate();
  return cfg;
}

std::string train_result_to_json(const std::string& model, GraphMode mode, const TrainResult& r) {
  Json j;
  j["model"] = model;
  j["mode"] = mode == GraphMode::kAblated ? "abl" : "s";
  j["params"] = r.params;
  j["folds"] = Json::array();
  for (const auto& f : r.folds) {
    j["folds"].push_back(Json{{"fold", f.fold},
                              {"dsc", f.val.dsc},
                              {"sdc", f.val.sdc},
                              {"mean_dsc", f.val.mean_dsc},
                              {"mean_sdc", f.val.mean_sdc},
                              {"steps", f.steps},
                              {"epoch_loss", f.epoch_loss}});
  }
  return j.dump(2) + "\n";
}

void merge_result_json(ExperimentReport& report, const std::string& text) {
  const Json j = parse(text, "run result");
  TrainResult r;
  std::string model, mode;
  try {
    model = j.at("model").get<std::string>();
    mode = j.at("mode").get<std::string>();
    r.params = j.at("params").get<std::size_t>();
    for (const auto& f : j.at("folds")) {
      FoldResult fr;
      fr.fold = f.at("fold").get<std::size_t>();
      fr.val.dsc = f.at("dsc").get<std::vector<double>>();
      fr.val.sdc = f.at("sdc").get<std::vector<double>>();
      fr.val.mean_dsc = f.at("mean_dsc").get<double>();
      fr.val.mean_sdc = f.at("mean_sdc").get<double>();
      r.folds.push_back(std::move(fr));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed run result: ") + e.what());
  }
  if (mode != "s" && mode != "abl") throw ConfigError("run result has unknown mode '" + mode + "'");
  auto it = std::find_if(report.models.begin(), report.models.end(),
                         [&](const ModelReport& m) { return m.model == model; });
  if (it == report.models.end()) {
    report.models.push_back({});
    it = std::prev(report.models.end());
    it->model = model;
  }
  (mode == "s" ? it->standard : it->ablated) = summarize(r);
  if (it->standard && it->ablated && it->standard->params > 0) {
    it->ratio = double(it->ablated->params) / double(it->standard->params);
  }
}

std::string report_to_json(const ExperimentReport& r) {
  Json j = Json::array();
  for (const auto& m : r.models) {
    Json row{{"model", m.model}};
    if (m.standard) row["S"] = mode_row_json(*m.standard);
    if (m.ablated) row["Abl"] = mode_row_json(*m.ablated);
    if (m.ratio) row["ratio"] = *m.ratio;
    if (!m.error.empty()) row["error"] = m.error;
    j.push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

}  // namespace tabl
