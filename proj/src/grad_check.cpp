#include "tabl/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "tabl/error.hpp"

namespace tabl {

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                  double floor) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  const Shape shape = x.shape();
  std::vector<double> base(x.data().begin(), x.data().end());

  Tensor probe(shape, base, true);
  const Tensor y = f(probe);
  if (y.numel() != 1) throw UsageError("grad_check: function must be scalar-valued");
  backward(y);
  const std::vector<double> analytic = probe.grad();

  auto eval = [&](const std::vector<double>& values) {
    return f(Tensor(shape, values, false)).item();
  };
  double worst = 0.0;
  std::vector<double> shifted = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    shifted[i] = base[i] + eps;
    const double up = eval(shifted);
    shifted[i] = base[i] - eps;
    const double down = eval(shifted);
    shifted[i] = base[i];
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace tabl
