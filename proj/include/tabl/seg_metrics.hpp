#pragma once

// Overlap and surface metrics on integer label grids.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tabl/tensor.hpp"

namespace tabl {

using Label = std::uint16_t;

// Row-major labels over a grid with per-axis spacing in mm. 0 is background.
struct LabelVolume {
  Shape grid;
  std::vector<double> spacing;
  std::vector<Label> labels;

  LabelVolume() = default;
  LabelVolume(Shape grid, std::vector<double> spacing);
  LabelVolume(Shape grid, std::vector<double> spacing, std::vector<Label> labels);

  std::size_t size() const { return labels.size(); }
  Label max_label() const;
  // ShapeError / UsageError on inconsistent fields.
  void validate() const;
};

double dice(const LabelVolume& pred, const LabelVolume& gt, Label c);

// Flat indices of class-c voxels with a face neighbour outside class c;
// the volume border counts as outside.
std::vector<std::size_t> extract_surface(const LabelVolume& v, Label c);

// Squared physical distance from every voxel to the nearest seed voxel
// (+inf when there are no seeds). Exact: each value is the same double as
// sum over axes of (delta_i * spacing_i)^2 for the nearest seed, summed in
// axis order.
std::vector<double> squared_distance_field(const Shape& grid, const std::vector<double>& spacing,
                                           const std::vector<std::size_t>& seeds);

double surface_dice(const LabelVolume& pred, const LabelVolume& gt, Label c, double tolerance_mm);

struct MetricResult {
  std::vector<double> dsc;  // per foreground class 1..K
  std::vector<double> sdc;
  double mean_dsc = 0.0;
  double mean_sdc = 0.0;
};

MetricResult evaluate(const LabelVolume& pred, const LabelVolume& gt, std::size_t classes,
                      double tolerance_mm = 1.0);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

// Sample standard deviation; sd is 0 for a single value. UsageError when empty.
MeanSd aggregate_folds(const std::vector<double>& values);

// Binary label grid, little-endian:
//   8 bytes  magic "TABLLV01"
//   u32      rank
//   u32      dtype (1 = u8, 2 = u16)
//   u32      extent per axis
//   f64      spacing per axis
//   labels   row-major, one element of dtype each
void write_labels(std::ostream& out, const LabelVolume& v);
LabelVolume read_labels(std::istream& in);
void save_labels(const std::string& path, const LabelVolume& v);
LabelVolume load_labels(const std::string& path);

}  // namespace tabl
