#include "tabl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "tabl/error.hpp"
#include "tabl/kernels/kernels.hpp"

namespace tabl {
namespace {

const kernels::KernelTable& K() { return kernels::active(); }

std::vector<double>& gbuf(detail::Node& self, std::size_t parent) {
  return self.parents[parent]->grad_buffer();
}

bool wants(const detail::Node& self, std::size_t parent) {
  return self.parents[parent]->requires_grad;
}

// Strides of `shape` aligned to an output of rank `rank`; broadcast axes get 0.
std::vector<std::size_t> aligned_strides(const Shape& shape, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const std::size_t axis = shape.size() - 1 - i;
    const std::size_t oaxis = rank - 1 - i;
    strides[oaxis] = shape[axis] == 1 && out[oaxis] != 1 ? 0 : stride;
    stride *= shape[axis];
  }
  return strides;
}

// Calls fn(out_index, a_offset, b_offset) for every output element, innermost
// axis in a tight loop.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  if (out.empty()) {
    fn(0, 0, 0);
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia = sa[rank - 1], ib = sb[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(base + j, oa + j * ia, ob + j * ib);
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      ++counter[axis];
      oa += sa[axis];
      ob += sb[axis];
      if (counter[axis] < out[axis]) break;
      oa -= sa[axis] * counter[axis];
      ob -= sb[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape out = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = numel(out);
  std::vector<double> data(n);
  const auto ad = a.data();
  const auto bd = b.data();
  const bool same = a.shape() == b.shape();
  if (same) {
    switch (kind) {
      case BinaryKind::kAdd: K().add(ad.data(), bd.data(), data.data(), n); break;
      case BinaryKind::kMul: K().mul(ad.data(), bd.data(), data.data(), n); break;
      case BinaryKind::kSub:
        for (std::size_t i = 0; i < n; ++i) data[i] = ad[i] - bd[i];
        break;
    }
  } else {
    const auto sa = aligned_strides(a.shape(), out);
    const auto sb = aligned_strides(b.shape(), out);
    for_each_broadcast(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::kAdd: data[i] = ad[ia] + bd[ib]; break;
        case BinaryKind::kSub: data[i] = ad[ia] - bd[ib]; break;
        case BinaryKind::kMul: data[i] = ad[ia] * bd[ib]; break;
      }
    });
  }
  const Shape ashape = a.shape(), bshape = b.shape();
  auto bwd = [kind, out, ashape, bshape, same](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    const double bsign = kind == BinaryKind::kSub ? -1.0 : 1.0;
    if (same) {
      const std::size_t n = g.size();
      if (wants(self, 0)) {
        auto& ga = gbuf(self, 0);
        if (kind == BinaryKind::kMul) {
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        } else {
          K().axpy(1.0, g.data(), ga.data(), n);
        }
      }
      if (wants(self, 1)) {
        auto& gb = gbuf(self, 1);
        if (kind == BinaryKind::kMul) {
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        } else {
          K().axpy(bsign, g.data(), gb.data(), n);
        }
      }
      return;
    }
    const auto sa = aligned_strides(ashape, out);
    const auto sb = aligned_strides(bshape, out);
    const bool wa = wants(self, 0), wb = wants(self, 1);
    std::vector<double>* ga = wa ? &gbuf(self, 0) : nullptr;
    std::vector<double>* gb = wb ? &gbuf(self, 1) : nullptr;
    for_each_broadcast(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (kind == BinaryKind::kMul) {
        if (wa) (*ga)[ia] += g[i] * bv[ib];
        if (wb) (*gb)[ib] += g[i] * av[ia];
      } else {
        if (wa) (*ga)[ia] += g[i];
        if (wb) (*gb)[ib] += bsign * g[i];
      }
    });
  };
  return Tensor::make_result(out, std::move(data), {a, b}, bwd, name);
}

// Unary map with derivative expressed through input x and output y.
template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx, const char* name) {
  const auto xd = x.data();
  std::vector<double> data(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) data[i] = f(xd[i]);
  auto bwd = [dfdx](detail::Node& self) {
    if (!wants(self, 0)) return;
    const auto& xv = self.parents[0]->data;
    auto& gx = gbuf(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.data[i]);
  };
  return Tensor::make_result(x.shape(), std::move(data), {x}, bwd, name);
}

std::size_t checked_axis(std::size_t axis, std::size_t rank, const char* op) {
  if (axis >= rank) {
    throw UsageError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return axis;
}

// Splits a shape around an axis into (outer, n, inner).
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> data(a.numel());
  K().scale(factor, a.data().data(), data.data(), data.size());
  auto bwd = [factor](detail::Node& self) {
    if (!wants(self, 0)) return;
    K().axpy(factor, self.grad.data(), gbuf(self, 0).data(), self.grad.size());
  };
  return Tensor::make_result(a.shape(), std::move(data), {a}, bwd, "scale");
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; },
               "add_scalar");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
               [slope](double v, double) { return v > 0.0 ? 1.0 : slope; }, "leaky_relu");
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      },
      "gelu");
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, "exp");
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; },
               "log");
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; },
               "square");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto bwd = [](detail::Node& self) {
    if (!wants(self, 0)) return;
    auto& gx = gbuf(self, 0);
    const double g = self.grad[0];
    for (auto& v : gx) v += g;
  };
  return Tensor::make_result(Shape{}, {acc}, {x}, bwd, "sum");
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  checked_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out = x.shape();
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto xd = x.data();
  std::vector<double> data(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.n; ++k) {
      const double* src = xd.data() + (o * s.n + k) * s.inner;
      double* dst = data.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  auto bwd = [s](detail::Node& self) {
    if (!wants(self, 0)) return;
    auto& gx = gbuf(self, 0);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t k = 0; k < s.n; ++k) {
        double* dst = gx.data() + (o * s.n + k) * s.inner;
        const double* src = self.grad.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return Tensor::make_result(out, std::move(data), {x}, bwd, "sum_axis");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw UsageError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<double> data(x.data().begin(), x.data().end());
  auto bwd = [](detail::Node& self) {
    if (!wants(self, 0)) return;
    K().axpy(1.0, self.grad.data(), gbuf(self, 0).data(), self.grad.size());
  };
  return Tensor::make_result(std::move(shape), std::move(data), {x}, bwd, "reshape");
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (numel(shape) != index->size()) {
    throw ShapeError("gather: index count " + std::to_string(index->size()) +
                     " does not match shape " + to_string(shape));
  }
  const auto xd = x.data();
  std::vector<double> data(index->size());
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t src = (*index)[i];
    if (src >= xd.size()) throw ShapeError("gather: index out of range");
    data[i] = xd[src];
  }
  auto bwd = [index](detail::Node& self) {
    if (!wants(self, 0)) return;
    auto& gx = gbuf(self, 0);
    for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += self.grad[i];
  };
  return Tensor::make_result(std::move(shape), std::move(data), {x}, bwd, "gather");
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) throw UsageError("permute: order rank mismatch");
  std::vector<bool> used(rank, false);
  for (auto o : order) {
    if (o >= rank || used[o]) throw UsageError("permute: order is not a permutation");
    used[o] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[order[i]];
    src_strides[i] = in_strides[order[i]];
  }
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> zero(rank, 0);
  for_each_broadcast(out, src_strides, zero,
                     [&](std::size_t i, std::size_t src, std::size_t) { (*index)[i] = src; });
  return gather(x, std::move(index), out);
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw UsageError("transpose needs rank >= 2");
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  checked_axis(axis, first.size(), "concat");
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: " + to_string(s) + " incompatible with " + to_string(first) +
                       " along axis " + std::to_string(axis));
    }
    out[axis] += s[axis];
  }
  const AxisSplit os = split_at(out, axis);
  std::vector<double> data(numel(out));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.shape()[axis] * os.inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(pd.data() + o * block, block,
                  data.data() + o * os.n * os.inner + offset * os.inner);
    }
    offset += p.shape()[axis];
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[axis]);
  auto bwd = [os, offsets, extents](detail::Node& self) {
    for (std::size_t k = 0; k < extents.size(); ++k) {
      if (!wants(self, k)) continue;
      auto& gp = gbuf(self, k);
      const std::size_t block = extents[k] * os.inner;
      for (std::size_t o = 0; o < os.outer; ++o) {
        const double* src = self.grad.data() + o * os.n * os.inner + offsets[k] * os.inner;
        K().axpy(1.0, src, gp.data() + o * block, block);
      }
    }
  };
  return Tensor::make_result(out, std::move(data), parts, bwd, "concat");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2], kk = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape()[b.rank() - 1];
  if (kk != kb) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(abatch, bbatch);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch dimensions not broadcastable: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t nb = numel(batch);
  // Per-batch matrix offsets into a and b.
  std::vector<std::size_t> aoff(nb), boff(nb);
  {
    auto sa = aligned_strides(abatch, batch);
    auto sb = aligned_strides(bbatch, batch);
    if (batch.empty()) {
      aoff[0] = boff[0] = 0;
    } else {
      for_each_broadcast(batch, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        aoff[i] = ia * m * kk;
        boff[i] = ib * kk * n;
      });
    }
  }
  Shape out = batch;
  out.push_back(m);
  out.push_back(n);
  std::vector<double> data(numel(out));
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < nb; ++i) {
    K().gemm_nn(m, n, kk, ad + aoff[i], kk, bd + boff[i], n, data.data() + i * m * n, n, false);
  }
  auto bwd = [m, n, kk, nb, aoff, boff](detail::Node& self) {
    const double* g = self.grad.data();
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (wants(self, 0)) {
      auto& ga = gbuf(self, 0);
      for (std::size_t i = 0; i < nb; ++i) {
        K().gemm_nt(m, kk, n, g + i * m * n, n, bv.data() + boff[i], n, ga.data() + aoff[i], kk,
                    true);
      }
    }
    if (wants(self, 1)) {
      auto& gb = gbuf(self, 1);
      std::vector<double> at(kk * m);
      for (std::size_t i = 0; i < nb; ++i) {
        const double* am = av.data() + aoff[i];
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < kk; ++c) at[c * m + r] = am[r * kk + c];
        }
        K().gemm_nn(kk, n, m, at.data(), m, g + i * m * n, n, gb.data() + boff[i], n, true);
      }
    }
  };
  return Tensor::make_result(out, std::move(data), {a, b}, bwd, "matmul");
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  checked_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> data(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = xd[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const double e = std::exp(xd[base + k * s.inner] - mx);
        data[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) data[base + k * s.inner] /= z;
    }
  }
  auto bwd = [s](detail::Node& self) {
    if (!wants(self, 0)) return;
    auto& gx = gbuf(self, 0);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double dotp = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) dotp += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += y[j] * (g[j] - dotp);
        }
      }
    }
  };
  return Tensor::make_result(x.shape(), std::move(data), {x}, bwd, "softmax");
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  checked_axis(axis, x.rank(), "log_softmax");
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> data(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = xd[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(xd[base + k * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) data[base + k * s.inner] = xd[base + k * s.inner] - lz;
    }
  }
  auto bwd = [s](detail::Node& self) {
    if (!wants(self, 0)) return;
    auto& gx = gbuf(self, 0);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double gs = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) gs += g[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] += g[j] - std::exp(y[j]) * gs;
        }
      }
    }
  };
  return Tensor::make_result(x.shape(), std::move(data), {x}, bwd, "log_softmax");
}

Tensor normalize_last(const Tensor& x, double eps) {
  if (x.rank() == 0) throw UsageError("normalize_last on a scalar");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  const auto xd = x.data();
  std::vector<double> data(xd.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * len;
    double mu = 0.0;
    for (std::size_t i = 0; i < len; ++i) mu += row[i];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < len; ++i) data[r * len + i] = (row[i] - mu) * is;
  }
  auto bwd = [len, rows, inv_std](detail::Node& self) {
    if (!wants(self, 0)) return;
    auto& gx = gbuf(self, 0);
    const auto& y = self.data;
    const auto& g = self.grad;
    const double inv_len = 1.0 / static_cast<double>(len);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * len;
      const double* yr = y.data() + r * len;
      double gmean = 0.0, gy = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        gmean += gr[i];
        gy += gr[i] * yr[i];
      }
      gmean *= inv_len;
      gy *= inv_len;
      for (std::size_t i = 0; i < len; ++i) {
        gx[r * len + i] += inv_std[r] * (gr[i] - gmean - yr[i] * gy);
      }
    }
  };
  return Tensor::make_result(x.shape(), std::move(data), {x}, bwd, "normalize_last");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0 || gain.shape() != Shape{x.shape().back()} || bias.shape() != gain.shape()) {
    throw ShapeError("layer_norm: gain/bias must be [" +
                     std::to_string(x.rank() ? x.shape().back() : 0) + "], got " +
                     to_string(gain.shape()) + " and " + to_string(bias.shape()));
  }
  return add(mul(normalize_last(x, eps), gain), bias);
}

Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 2) throw ShapeError("instance_norm needs a [C, S...] map");
  const std::size_t c = x.shape()[0];
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw ShapeError("instance_norm: gain/bias must be [" + std::to_string(c) + "]");
  }
  Shape affine(x.rank(), 1);
  affine[0] = c;
  const Tensor normed = reshape(normalize_last(reshape(x, {c, x.numel() / c}), eps), x.shape());
  return add(mul(normed, reshape(gain, affine)), reshape(bias, affine));
}

}  // namespace tabl
