#include "tabl/seg_metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "tabl/error.hpp"

namespace tabl {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr char kMagic[8] = {'T', 'A', 'B', 'L', 'L', 'V', '0', '1'};

void check_same_grid(const LabelVolume& a, const LabelVolume& b) {
  a.validate();
  b.validate();
  if (a.grid != b.grid) {
    throw ShapeError("label grids differ: " + to_string(a.grid) + " vs " + to_string(b.grid));
  }
  if (a.spacing != b.spacing) throw ShapeError("label spacings differ");
}

std::vector<std::size_t> strides_of(const Shape& grid) {
  std::vector<std::size_t> s(grid.size(), 1);
  for (std::size_t a = grid.size(); a-- > 1;) s[a - 1] = s[a] * grid[a];
  return s;
}

// One axis of the lower-envelope transform. f holds squared distances over
// the previous axes; on return it holds min_v f[v] + ((q - v) * s)^2.
void envelope_pass(std::vector<double>& f, std::size_t n, double s, std::vector<std::size_t>& v,
                   std::vector<double>& z, std::vector<double>& out) {
  auto term = [s](std::size_t q, std::size_t p) {
    const double t = (double(q) - double(p)) * s;
    return t * t;
  };
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      any = true;
      continue;
    }
    const double s2 = s * s;
    for (;;) {
      const std::size_t p = v[k];
      const double x = ((f[q] + s2 * double(q) * double(q)) - (f[p] + s2 * double(p) * double(p))) /
                       (2.0 * s2 * (double(q) - double(p)));
      if (x <= z[k]) {  // z[0] is -inf, so k never underflows
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = x;
      z[k + 1] = kInf;
      break;
    }
  }
  if (!any) return;
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < double(q)) ++j;
    // Neighbouring parabolas guard against rounding in the breakpoints.
    double best = f[v[j]] + term(q, v[j]);
    if (j > 0) best = std::min(best, f[v[j - 1]] + term(q, v[j - 1]));
    if (j < k) best = std::min(best, f[v[j + 1]] + term(q, v[j + 1]));
    out[q] = best;
  }
  std::copy(out.begin(), out.begin() + std::ptrdiff_t(n), f.begin());
}

}  // namespace

LabelVolume::LabelVolume(Shape g, std::vector<double> s)
    : grid(std::move(g)), spacing(std::move(s)), labels(numel(grid), 0) {}

LabelVolume::LabelVolume(Shape g, std::vector<double> s, std::vector<Label> l)
    : grid(std::move(g)), spacing(std::move(s)), labels(std::move(l)) {
  validate();
}

Label LabelVolume::max_label() const {
  return labels.empty() ? Label{0} : *std::max_element(labels.begin(), labels.end());
}

void LabelVolume::validate() const {
  if (grid.empty()) throw ShapeError("label grid has rank 0");
  if (spacing.size() != grid.size()) throw ShapeError("spacing rank does not match grid rank");
  for (double s : spacing) {
    if (!std::isfinite(s) || s <= 0.0) throw UsageError("spacing must be finite and positive");
  }
  if (labels.size() != numel(grid)) throw ShapeError("label count does not match grid " + to_string(grid));
}

double dice(const LabelVolume& pred, const LabelVolume& gt, Label c) {
  check_same_grid(pred, gt);
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.labels[i] == c, b = gt.labels[i] == c;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

std::vector<std::size_t> extract_surface(const LabelVolume& v, Label c) {
  v.validate();
  const std::size_t rank = v.grid.size();
  const auto strides = strides_of(v.grid);
  std::vector<std::size_t> out;
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) {
      for (std::size_t a = rank; a-- > 0;) {
        if (++idx[a] < v.grid[a]) break;
        idx[a] = 0;
      }
    }
    if (v.labels[i] != c) continue;
    bool boundary = false;
    for (std::size_t a = 0; a < rank && !boundary; ++a) {
      boundary = idx[a] == 0 || idx[a] + 1 == v.grid[a] || v.labels[i - strides[a]] != c ||
                 v.labels[i + strides[a]] != c;
    }
    if (boundary) out.push_back(i);
  }
  return out;
}

std::vector<double> squared_distance_field(const Shape& grid, const std::vector<double>& spacing,
                                           const std::vector<std::size_t>& seeds) {
  const std::size_t total = numel(grid);
  std::vector<double> d(total, kInf);
  for (std::size_t s : seeds) d.at(s) = 0.0;
  if (seeds.empty()) return d;
  const auto strides = strides_of(grid);
  const std::size_t longest = *std::max_element(grid.begin(), grid.end());
  std::vector<double> line(longest), out(longest), z(longest + 1);
  std::vector<std::size_t> v(longest);
  for (std::size_t a = 0; a < grid.size(); ++a) {
    const std::size_t n = grid[a], stride = strides[a];
    // Enumerate line starts: all indices with coordinate 0 along axis a.
    for (std::size_t base = 0; base < total; ++base) {
      if ((base / stride) % n != 0) continue;
      for (std::size_t q = 0; q < n; ++q) line[q] = d[base + q * stride];
      envelope_pass(line, n, spacing[a], v, z, out);
      for (std::size_t q = 0; q < n; ++q) d[base + q * stride] = line[q];
    }
  }
  return d;
}

double surface_dice(const LabelVolume& pred, const LabelVolume& gt, Label c, double tolerance_mm) {
  check_same_grid(pred, gt);
  if (!(tolerance_mm >= 0.0)) throw UsageError("tolerance must be non-negative");
  const auto sp = extract_surface(pred, c);
  const auto sg = extract_surface(gt, c);
  if (sp.empty() && sg.empty()) return 1.0;
  if (sp.empty() || sg.empty()) return 0.0;
  const double tol2 = tolerance_mm * tolerance_mm;
  const auto dg = squared_distance_field(gt.grid, gt.spacing, sg);
  const auto dp = squared_distance_field(pred.grid, pred.spacing, sp);
  std::size_t hits = 0;
  for (std::size_t i : sp) hits += dg[i] <= tol2;
  for (std::size_t i : sg) hits += dp[i] <= tol2;
  return double(hits) / double(sp.size() + sg.size());
}

MetricResult evaluate(const LabelVolume& pred, const LabelVolume& gt, std::size_t classes,
                      double tolerance_mm) {
  if (classes == 0) throw UsageError("evaluate needs at least one foreground class");
  MetricResult r;
  for (std::size_t c = 1; c <= classes; ++c) {
    r.dsc.push_back(dice(pred, gt, Label(c)));
    r.sdc.push_back(surface_dice(pred, gt, Label(c), tolerance_mm));
  }
  r.mean_dsc = std::accumulate(r.dsc.begin(), r.dsc.end(), 0.0) / double(classes);
  r.mean_sdc = std::accumulate(r.sdc.begin(), r.sdc.end(), 0.0) / double(classes);
  return r;
}

MeanSd aggregate_folds(const std::vector<double>& values) {
  if (values.empty()) throw UsageError("aggregate_folds of an empty list");
  MeanSd r;
  for (double x : values) r.mean += x;
  r.mean /= double(values.size());
  if (values.size() < 2) return r;
  double ss = 0.0;
  for (double x : values) ss += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(ss / double(values.size() - 1));
  return r;
}

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw UsageError("truncated label file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_labels(std::ostream& out, const LabelVolume& v) {
  v.validate();
  const bool narrow = v.max_label() <= 0xFF;
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, std::uint32_t(v.grid.size()));
  put<std::uint32_t>(out, narrow ? 1u : 2u);
  for (std::size_t e : v.grid) put<std::uint32_t>(out, std::uint32_t(e));
  for (double s : v.spacing) put<double>(out, s);
  for (Label l : v.labels) {
    if (narrow) {
      put<std::uint8_t>(out, std::uint8_t(l));
    } else {
      put<std::uint16_t>(out, l);
    }
  }
}

LabelVolume read_labels(std::istream& in) {
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw UsageError("not a label file");
  }
  const auto rank = get<std::uint32_t>(in);
  const auto dtype = get<std::uint32_t>(in);
  if (rank == 0 || rank > 8) throw UsageError("label file has unsupported rank " + std::to_string(rank));
  if (dtype != 1 && dtype != 2) throw UsageError("label file has unknown dtype " + std::to_string(dtype));
  LabelVolume v;
  for (std::uint32_t a = 0; a < rank; ++a) v.grid.push_back(get<std::uint32_t>(in));
  for (std::uint32_t a = 0; a < rank; ++a) v.spacing.push_back(get<double>(in));
  v.labels.resize(numel(v.grid));
  for (auto& l : v.labels) l = dtype == 1 ? Label(get<std::uint8_t>(in)) : get<std::uint16_t>(in);
  v.validate();
  return v;
}

void save_labels(const std::string& path, const LabelVolume& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  write_labels(out, v);
}

LabelVolume load_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  return read_labels(in);
}

}  // namespace tabl
