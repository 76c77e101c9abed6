#pragma once

// Synthetic data, cross-validated training and report assembly.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tabl/arch_ir.hpp"
#include "tabl/error.hpp"
#include "tabl/seg_metrics.hpp"
#include "tabl/tensor.hpp"

namespace tabl {

class GenerationError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t fold)
      : Error("fold " + std::to_string(fold) + ", epoch " + std::to_string(epoch) + ": " + what),
        epoch_(epoch),
        fold_(fold) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t fold() const noexcept { return fold_; }

 private:
  std::size_t epoch_;
  std::size_t fold_;
};

struct DatasetConfig {
  std::size_t n_cases = 10;
  Shape grid{32, 32, 32};
  std::vector<double> spacing{1.0, 1.0, 1.0};
  std::size_t classes = 1;  // foreground classes K
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 2;
  // Ellipsoid semi-axes as a fraction of the extent.
  double min_radius = 0.22;
  double max_radius = 0.35;
  // Mean intensity of class c is c * intensity_step; background is 0.
  double intensity_step = 1.0;
  double noise_sd = 0.2;
  std::size_t min_class_voxels = 8;
  std::size_t max_retries = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Case {
  Tensor image;  // [1, grid...]
  LabelVolume labels;
};

std::vector<Case> gen_dataset(const DatasetConfig& cfg);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Fisher-Yates permutation cut into k contiguous validation blocks whose
// sizes differ by at most one.
std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 6;
  std::size_t batch_size = 2;  // gradient accumulation over single cases
  double lr = 1e-2;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.05;
  double tolerance_mm = 1.0;
  // Network input extents; must equal the dataset grid.
  Shape patch{32, 32, 32};
  std::uint64_t seed = 0;

  void validate() const;
};

struct FoldResult {
  std::size_t fold = 0;
  MetricResult val;
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::size_t steps = 0;
};

struct TrainResult {
  std::size_t params = 0;
  std::vector<FoldResult> folds;
};

// Mean over foreground classes of soft Dice loss plus voxel cross-entropy.
// logits [C, S...], labels in [0, C).
Tensor dice_ce_loss(const Tensor& logits, const LabelVolume& labels);

// Per-voxel argmax over the channel axis.
LabelVolume predict_labels(const Tensor& logits, const std::vector<double>& spacing);

// Trains one fresh network per fold and validates on the held-out cases.
// Random streams derive from (tc.seed, graph name, graph mode, fold).
TrainResult train(const ArchGraph& g, const std::vector<Case>& data, const std::vector<Fold>& folds,
                  const TrainConfig& tc);

struct ModeRow {
  std::size_t params = 0;
  // Percentages across folds.
  std::vector<double> fold_dsc;
  std::vector<double> fold_sdc;
  MeanSd dsc;
  MeanSd sdc;
};

struct ModelReport {
  std::string model;
  std::optional<ModeRow> standard;
  std::optional<ModeRow> ablated;
  std::optional<double> ratio;  // #Abl / #S
  std::string error;            // non-empty when the row was aborted
};

struct ExperimentReport {
  std::vector<ModelReport> models;
};

ModeRow summarize(const TrainResult& r);

struct ExperimentConfig {
  std::vector<std::string> models{"conv_baseline", "unetr", "swinunetr"};
  bool run_standard = true;
  bool run_ablated = true;
  std::size_t folds = 5;
  DatasetConfig data;
  TrainConfig train;
};

// Toy-scale runs. A model without transformer nodes gets no ablated row.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

enum class ReportFormat { kText, kCsv };
std::string emit_report(const ExperimentReport& r, ReportFormat format);

// Fixed-point rendering with round-half-away-from-zero on the decimal value.
std::string format_fixed(double value, int decimals);
std::string format_mean_sd(const MeanSd& v);

// JSON forms used by the CLI for configs and run directories.
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
std::string train_result_to_json(const std::string& model, GraphMode mode, const TrainResult& r);
// Adds one (model, mode) result to a report, keeping models in insertion order.
void merge_result_json(ExperimentReport& report, const std::string& text);
std::string report_to_json(const ExperimentReport& r);

}  // namespace tabl
