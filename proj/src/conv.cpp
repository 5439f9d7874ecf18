// conv2d as im2col + GEMM, one image at a time.
#include <algorithm>
#include <vector>

#include "zsq/error.hpp"
#include "zsq/kernels/kernels.hpp"
#include "zsq/ops.hpp"

namespace zsq {
namespace {

struct ConvGeom {
  std::size_t n, cin, h, w;
  std::size_t cout, kh, kw;
  std::size_t stride, pad;
  std::size_t ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t out_hw() const { return ho * wo; }
};

// cols[(c * kh + i) * kw + j][oy * wo + ox] = x[c][oy*s + i - p][ox*s + j - p]
void im2col(const ConvGeom& g, const double* img, double* cols) {
  const std::size_t ohw = g.out_hw();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ohw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeom& g, const double* cols, double* img) {
  const std::size_t ohw = g.out_hw();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ohw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  if (x.dim() != 4 || weight.dim() != 4 || weight.size(1) != x.size(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (opts.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3), weight.size(0), weight.size(2),
             weight.size(3), opts.stride, opts.padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != g.cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(g.cout) + " output channels");
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  Tensor out({g.n, g.cout, g.ho, g.wo});
  const auto& kt = kernels::kernels();
  const std::size_t patch = g.patch(), ohw = g.out_hw();
  std::vector<double> cols(patch * ohw);
  const double* wp = weight.data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    im2col(g, x.data().data() + b * g.cin * g.h * g.w, cols.data());
    double* dst = out.data().data() + b * g.cout * ohw;
    kt.gemm(g.cout, ohw, patch, {wp, patch, 1}, {cols.data(), ohw, 1}, dst, ohw, false);
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t co = 0; co < g.cout; ++co) {
        double* plane = dst + co * ohw;
        for (std::size_t i = 0; i < ohw; ++i) plane[i] += bv[co];
      }
    }
  }

  if (needs_grad({&x, &weight, &bias})) {
    out.set_requires_grad(true);
    Tape::current().record([x, weight, bias, out, g]() mutable {
      if (!out.has_grad()) return;
      const auto& kt = kernels::kernels();
      const std::size_t patch = g.patch(), ohw = g.out_hw();
      const double* gy = out.grad().data();
      std::vector<double> cols(patch * ohw);
      const bool need_x = x.requires_grad();
      const bool need_w = weight.requires_grad();
      const bool need_b = bias.defined() && bias.requires_grad();
      double* gw = need_w ? weight.grad().data() : nullptr;
      double* gx = need_x ? x.grad().data() : nullptr;
      for (std::size_t b = 0; b < g.n; ++b) {
        const double* gyb = gy + b * g.cout * ohw;
        if (need_w) {
          im2col(g, x.data().data() + b * g.cin * g.h * g.w, cols.data());
          // dW[cout x patch] += dY[cout x ohw] * cols^T
          kt.gemm(g.cout, patch, ohw, {gyb, ohw, 1}, {cols.data(), 1, ohw}, gw, patch, true);
        }
        if (need_x) {
          // dcols[patch x ohw] = W^T * dY
          kt.gemm(patch, ohw, g.cout, {weight.data().data(), 1, patch}, {gyb, ohw, 1}, cols.data(),
                  ohw, false);
          col2im_add(g, cols.data(), gx + b * g.cin * g.h * g.w);
        }
        if (need_b) {
          auto gb = bias.grad();
          for (std::size_t co = 0; co < g.cout; ++co) {
            double acc = 0.0;
            for (std::size_t i = 0; i < ohw; ++i) acc += gyb[co * ohw + i];
            gb[co] += acc;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace zsq
