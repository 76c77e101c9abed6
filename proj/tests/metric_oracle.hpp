#pragma once

// Brute-force metric oracles and random label volumes.

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "tabl/rng.hpp"
#include "tabl/seg_metrics.hpp"

namespace tabl::testing {

inline std::vector<std::size_t> coords(const Shape& grid, std::size_t flat) {
  std::vector<std::size_t> c(grid.size());
  for (std::size_t a = grid.size(); a-- > 0;) {
    c[a] = flat % grid[a];
    flat /= grid[a];
  }
  return c;
}

inline double squared_mm(const Shape& grid, const std::vector<double>& spacing, std::size_t i, std::size_t j) {
  const auto a = coords(grid, i), b = coords(grid, j);
  double d2 = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double t = (double(a[k]) - double(b[k])) * spacing[k];
    d2 += t * t;
  }
  return d2;
}

inline double brute_nearest_sq(const Shape& grid, const std::vector<double>& spacing, std::size_t i,
                               const std::vector<std::size_t>& seeds) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t s : seeds) best = std::min(best, squared_mm(grid, spacing, i, s));
  return best;
}

// Boundary by direct neighbour inspection in coordinates.
inline std::vector<std::size_t> brute_surface(const LabelVolume& v, Label c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.labels[i] != c) continue;
    const auto x = coords(v.grid, i);
    bool edge = false;
    for (std::size_t a = 0; a < x.size(); ++a) {
      for (int step : {-1, 1}) {
        auto y = x;
        if ((step < 0 && y[a] == 0) || (step > 0 && y[a] + 1 == v.grid[a])) {
          edge = true;
          continue;
        }
        y[a] = std::size_t(long(y[a]) + step);
        std::size_t flat = 0;
        for (std::size_t k = 0; k < y.size(); ++k) flat = flat * v.grid[k] + y[k];
        edge = edge || v.labels[flat] != c;
      }
    }
    if (edge) out.push_back(i);
  }
  return out;
}

inline double brute_surface_dice(const LabelVolume& p, const LabelVolume& g, Label c, double tau) {
  const auto sp = brute_surface(p, c), sg = brute_surface(g, c);
  if (sp.empty() && sg.empty()) return 1.0;
  if (sp.empty() || sg.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i : sp) hits += brute_nearest_sq(p.grid, p.spacing, i, sg) <= tau * tau;
  for (std::size_t j : sg) hits += brute_nearest_sq(p.grid, p.spacing, j, sp) <= tau * tau;
  return double(hits) / double(sp.size() + sg.size());
}

inline double brute_dice(const LabelVolume& p, const LabelVolume& g, Label c) {
  double inter = 0, total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += (p.labels[i] == c) && (g.labels[i] == c);
    total += (p.labels[i] == c) + (g.labels[i] == c);
  }
  return total == 0 ? 1.0 : 2.0 * inter / total;
}

inline std::pair<double, double> two_pass_mean_sd(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= double(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / double(xs.size() - 1))};
}

// Pair of blob-shaped label volumes with classes {0, 1, 2}, 2D or 3D, with
// random anisotropic spacing. The second volume perturbs the first.
inline std::pair<LabelVolume, LabelVolume> random_mask_pair(RngStream& rng, std::size_t max_extent) {
  const std::size_t rank = 2 + rng.below(2);
  Shape grid;
  std::vector<double> spacing;
  const double choices[] = {0.4, 0.5, 0.75, 1.0, 1.0, 1.3, 2.0};
  for (std::size_t a = 0; a < rank; ++a) {
    grid.push_back(1 + rng.below(max_extent));
    spacing.push_back(rng.below(4) == 0 ? rng.uniform(0.3, 2.5) : choices[rng.below(7)]);
  }
  LabelVolume p(grid, spacing);
  const std::size_t blobs = 1 + rng.below(4);
  for (std::size_t b = 0; b < blobs; ++b) {
    std::vector<double> centre, radius;
    for (std::size_t a = 0; a < rank; ++a) {
      centre.push_back(rng.uniform(0.0, double(grid[a])));
      radius.push_back(rng.uniform(0.5, 0.5 + double(grid[a]) / 2.0));
    }
    const Label cls = Label(1 + rng.below(2));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto x = coords(grid, i);
      double r = 0;
      for (std::size_t a = 0; a < rank; ++a) r += std::pow((double(x[a]) - centre[a]) / radius[a], 2);
      if (r <= 1.0) p.labels[i] = cls;
    }
  }
  LabelVolume g = p;
  const double flip = rng.uniform(0.0, 0.3);
  for (auto& l : g.labels) {
    if (rng.uniform() < flip) l = Label(rng.below(3));
  }
  return {p, g};
}

}  // namespace tabl::testing
