#include <algorithm>
#include <array>

#include "tabl/error.hpp"
#include "tabl/kernels/kernels.hpp"
#include "tabl/ops.hpp"

namespace tabl {
namespace {

const kernels::KernelTable& K() { return kernels::active(); }

// 2D problems are carried as 3D with a unit leading axis.
struct Geometry {
  std::size_t cin = 0, cout = 0;
  std::array<std::size_t, 3> in{1, 1, 1}, k{1, 1, 1}, stride{1, 1, 1}, pad{0, 0, 0}, out{1, 1, 1};

  std::size_t in_size() const { return in[0] * in[1] * in[2]; }
  std::size_t out_size() const { return out[0] * out[1] * out[2]; }
  std::size_t k_size() const { return k[0] * k[1] * k[2]; }
  bool pointwise() const {
    return k_size() == 1 && stride == std::array<std::size_t, 3>{1, 1, 1} &&
           pad == std::array<std::size_t, 3>{0, 0, 0};
  }
};

void im2col(const Geometry& g, const double* x, double* col) {
  const std::size_t p = g.out_size();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* xc = x + c * g.in_size();
    for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          double* dst = col + row * p;
          std::size_t o = 0;
          for (std::size_t oz = 0; oz < g.out[0]; ++oz) {
            const long iz = static_cast<long>(oz * g.stride[0] + kz) - static_cast<long>(g.pad[0]);
            const bool zin = iz >= 0 && iz < static_cast<long>(g.in[0]);
            for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
              const long iy =
                  static_cast<long>(oy * g.stride[1] + ky) - static_cast<long>(g.pad[1]);
              const bool yin = zin && iy >= 0 && iy < static_cast<long>(g.in[1]);
              const double* xrow = yin ? xc + (iz * g.in[1] + iy) * g.in[2] : nullptr;
              for (std::size_t ox = 0; ox < g.out[2]; ++ox, ++o) {
                const long ix =
                    static_cast<long>(ox * g.stride[2] + kx) - static_cast<long>(g.pad[2]);
                dst[o] = (yin && ix >= 0 && ix < static_cast<long>(g.in[2])) ? xrow[ix] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const Geometry& g, const double* col, double* dx) {
  const std::size_t p = g.out_size();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* xc = dx + c * g.in_size();
    for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.k[2]; ++kx, ++row) {
          const double* src = col + row * p;
          std::size_t o = 0;
          for (std::size_t oz = 0; oz < g.out[0]; ++oz) {
            const long iz = static_cast<long>(oz * g.stride[0] + kz) - static_cast<long>(g.pad[0]);
            const bool zin = iz >= 0 && iz < static_cast<long>(g.in[0]);
            for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
              const long iy =
                  static_cast<long>(oy * g.stride[1] + ky) - static_cast<long>(g.pad[1]);
              const bool yin = zin && iy >= 0 && iy < static_cast<long>(g.in[1]);
              double* xrow = yin ? xc + (iz * g.in[1] + iy) * g.in[2] : nullptr;
              for (std::size_t ox = 0; ox < g.out[2]; ++ox, ++o) {
                const long ix =
                    static_cast<long>(ox * g.stride[2] + kx) - static_cast<long>(g.pad[2]);
                if (yin && ix >= 0 && ix < static_cast<long>(g.in[2])) xrow[ix] += src[o];
              }
            }
          }
        }
      }
    }
  }
}

std::size_t spatial_rank(const Tensor& input, const char* op) {
  const std::size_t rank = input.rank();
  if (rank != 3 && rank != 4) {
    throw ShapeError(std::string(op) + ": expected [C, S...] with 2 or 3 spatial axes, got " +
                     to_string(input.shape()));
  }
  return rank - 1;
}

}  // namespace

Tensor conv_nd(const Tensor& input, const Tensor& kernel, const std::optional<Tensor>& bias,
               const std::vector<std::size_t>& stride, const std::vector<std::size_t>& padding) {
  const std::size_t sr = spatial_rank(input, "conv_nd");
  if (kernel.rank() != sr + 2 || kernel.shape()[1] != input.shape()[0]) {
    throw ShapeError("conv_nd: kernel " + to_string(kernel.shape()) + " incompatible with input " +
                     to_string(input.shape()));
  }
  if (stride.size() != sr || padding.size() != sr) {
    throw ShapeError("conv_nd: stride/padding rank must equal spatial rank " + std::to_string(sr));
  }
  Geometry g;
  g.cin = input.shape()[0];
  g.cout = kernel.shape()[0];
  const std::size_t lead = 3 - sr;
  Shape out{g.cout};
  for (std::size_t i = 0; i < sr; ++i) {
    if (stride[i] < 1) throw ShapeError("conv_nd: stride must be >= 1");
    g.in[lead + i] = input.shape()[1 + i];
    g.k[lead + i] = kernel.shape()[2 + i];
    g.stride[lead + i] = stride[i];
    g.pad[lead + i] = padding[i];
    const long span = static_cast<long>(g.in[lead + i] + 2 * padding[i]) -
                      static_cast<long>(g.k[lead + i]);
    if (span < 0) {
      throw ShapeError("conv_nd: output extent < 1 for input " + to_string(input.shape()) +
                       " and kernel " + to_string(kernel.shape()));
    }
    g.out[lead + i] = static_cast<std::size_t>(span) / stride[i] + 1;
    out.push_back(g.out[lead + i]);
  }
  if (bias && bias->shape() != Shape{g.cout}) {
    throw ShapeError("conv_nd: bias must be [" + std::to_string(g.cout) + "]");
  }
  const std::size_t p = g.out_size();
  const std::size_t ck = g.cin * g.k_size();
  std::vector<double> data(g.cout * p);
  const double* xd = input.data().data();
  const double* wd = kernel.data().data();
  if (g.pointwise()) {
    K().gemm_nn(g.cout, p, ck, wd, ck, xd, p, data.data(), p, false);
  } else {
    std::vector<double> col(ck * p);
    im2col(g, xd, col.data());
    K().gemm_nn(g.cout, p, ck, wd, ck, col.data(), p, data.data(), p, false);
  }
  if (bias) {
    const auto bd = bias->data();
    for (std::size_t c = 0; c < g.cout; ++c) {
      double* row = data.data() + c * p;
      for (std::size_t i = 0; i < p; ++i) row[i] += bd[c];
    }
  }
  std::vector<Tensor> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  const bool has_bias = bias.has_value();
  auto bwd = [g, has_bias](detail::Node& self) {
    const std::size_t p = g.out_size();
    const std::size_t ck = g.cin * g.k_size();
    const double* gy = self.grad.data();
    const auto& xv = self.parents[0]->data;
    const auto& wv = self.parents[1]->data;
    const bool need_x = self.parents[0]->requires_grad;
    const bool need_w = self.parents[1]->requires_grad;
    std::vector<double> col;
    const double* colp = xv.data();
    if (!g.pointwise() && need_w) {
      col.resize(ck * p);
      im2col(g, xv.data(), col.data());
      colp = col.data();
    }
    if (need_w) {
      auto& gw = self.parents[1]->grad_buffer();
      K().gemm_nt(g.cout, ck, p, gy, p, colp, p, gw.data(), ck, true);
    }
    if (has_bias && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t c = 0; c < g.cout; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i) acc += gy[c * p + i];
        gb[c] += acc;
      }
    }
    if (need_x) {
      std::vector<double> wt(ck * g.cout);
      for (std::size_t r = 0; r < g.cout; ++r) {
        for (std::size_t c = 0; c < ck; ++c) wt[c * g.cout + r] = wv[r * ck + c];
      }
      auto& gx = self.parents[0]->grad_buffer();
      if (g.pointwise()) {
        K().gemm_nn(ck, p, g.cout, wt.data(), g.cout, gy, p, gx.data(), p, true);
      } else {
        std::vector<double> dcol(ck * p);
        K().gemm_nn(ck, p, g.cout, wt.data(), g.cout, gy, p, dcol.data(), p, false);
        col2im(g, dcol.data(), gx.data());
      }
    }
  };
  return Tensor::make_result(out, std::move(data), parents, bwd, "conv_nd");
}

Tensor conv_transpose_2x(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const std::size_t sr = spatial_rank(input, "conv_transpose_2x");
  const std::size_t cin = input.shape()[0];
  bool ok = kernel.rank() == sr + 2 && kernel.shape()[0] == cin;
  for (std::size_t i = 0; ok && i < sr; ++i) ok = kernel.shape()[2 + i] == 2;
  if (!ok) {
    throw ShapeError("conv_transpose_2x: kernel " + to_string(kernel.shape()) +
                     " incompatible with input " + to_string(input.shape()));
  }
  const std::size_t cout = kernel.shape()[1];
  if (bias.shape() != Shape{cout}) {
    throw ShapeError("conv_transpose_2x: bias must be [" + std::to_string(cout) + "]");
  }
  const std::size_t lead = 3 - sr;
  std::array<std::size_t, 3> in{1, 1, 1}, f{1, 1, 1};
  Shape out{cout};
  for (std::size_t i = 0; i < sr; ++i) {
    in[lead + i] = input.shape()[1 + i];
    f[lead + i] = 2;
    out.push_back(2 * input.shape()[1 + i]);
  }
  const std::size_t p = in[0] * in[1] * in[2];
  const std::size_t taps = f[0] * f[1] * f[2];
  const std::size_t rows = cout * taps;
  const std::array<std::size_t, 3> o{in[0] * f[0], in[1] * f[1], in[2] * f[2]};

  // Output position of (tap t, input site q) for channel 0.
  auto scatter_index = [in, f, o](std::size_t t, std::size_t q) {
    const std::size_t a = t / (f[1] * f[2]), b = (t / f[2]) % f[1], c = t % f[2];
    const std::size_t z = q / (in[1] * in[2]), y = (q / in[2]) % in[1], x = q % in[2];
    return ((z * f[0] + a) * o[1] + (y * f[1] + b)) * o[2] + (x * f[2] + c);
  };

  // tmp[(co, t), q] = sum_ci W[ci, co, t] * x[ci, q]
  const double* wd = kernel.data().data();
  std::vector<double> wt(rows * cin);
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t r = 0; r < rows; ++r) wt[r * cin + ci] = wd[ci * rows + r];
  }
  std::vector<double> tmp(rows * p);
  K().gemm_nn(rows, p, cin, wt.data(), cin, input.data().data(), p, tmp.data(), p, false);
  const std::size_t osize = o[0] * o[1] * o[2];
  std::vector<double> data(cout * osize);
  const auto bd = bias.data();
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t t = 0; t < taps; ++t) {
      const double* src = tmp.data() + (co * taps + t) * p;
      for (std::size_t q = 0; q < p; ++q) {
        data[co * osize + scatter_index(t, q)] = src[q] + bd[co];
      }
    }
  }
  auto bwd = [cin, cout, taps, rows, p, osize, scatter_index](detail::Node& self) {
    std::vector<double> dtmp(rows * p);
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t t = 0; t < taps; ++t) {
        double* dst = dtmp.data() + (co * taps + t) * p;
        for (std::size_t q = 0; q < p; ++q) dst[q] = self.grad[co * osize + scatter_index(t, q)];
      }
    }
    const auto& xv = self.parents[0]->data;
    const auto& wv = self.parents[1]->data;
    if (self.parents[0]->requires_grad) {
      auto& gx = self.parents[0]->grad_buffer();
      K().gemm_nn(cin, p, rows, wv.data(), rows, dtmp.data(), p, gx.data(), p, true);
    }
    if (self.parents[1]->requires_grad) {
      auto& gw = self.parents[1]->grad_buffer();
      K().gemm_nt(cin, rows, p, xv.data(), p, dtmp.data(), p, gw.data(), rows, true);
    }
    if (self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (std::size_t i = 0; i < osize; ++i) acc += self.grad[co * osize + i];
        gb[co] += acc;
      }
    }
  };
  return Tensor::make_result(out, std::move(data), {input, kernel, bias}, bwd,
                             "conv_transpose_2x");
}

}  // namespace tabl
