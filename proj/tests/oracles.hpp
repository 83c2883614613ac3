#pragma once

// Naive reference implementations used as test oracles. They only read raw
// values out of tensors and never call into cafpn::ops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "cafpn/tensor.hpp"

namespace oracle {

using cafpn::Tensor;
using i64 = std::int64_t;

struct Array4 {
  i64 n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Array4() = default;
  Array4(i64 n_, i64 c_, i64 h_, i64 w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_ * c_ * h_ * w_), fill) {}
  static Array4 of(const Tensor& t) {
    Array4 a(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    std::copy(t.data().begin(), t.data().end(), a.v.begin());
    return a;
  }
  double& operator()(i64 i, i64 j, i64 y, i64 x) {
    return v[static_cast<std::size_t>(((i * c + j) * h + y) * w + x)];
  }
  double operator()(i64 i, i64 j, i64 y, i64 x) const {
    return v[static_cast<std::size_t>(((i * c + j) * h + y) * w + x)];
  }
};

inline double max_abs_diff(const std::vector<double>& a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Array4& a, const Tensor& t) { return max_abs_diff(a.v, t.data()); }

inline Array4 conv2d(const Array4& x, const Array4& w, const std::vector<double>& bias, i64 stride,
                     i64 pad) {
  const i64 ho = (x.h + 2 * pad - w.h) / stride + 1;
  const i64 wo = (x.w + 2 * pad - w.w) / stride + 1;
  Array4 y(x.n, w.n, ho, wo);
  for (i64 n = 0; n < x.n; ++n)
    for (i64 co = 0; co < w.n; ++co)
      for (i64 oy = 0; oy < ho; ++oy)
        for (i64 ox = 0; ox < wo; ++ox) {
          double s = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (i64 ci = 0; ci < x.c; ++ci)
            for (i64 ky = 0; ky < w.h; ++ky)
              for (i64 kx = 0; kx < w.w; ++kx) {
                i64 iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                s += x(n, ci, iy, ix) * w(co, ci, ky, kx);
              }
          y(n, co, oy, ox) = s;
        }
  return y;
}

// Scatter form: every input pixel spreads its value through the kernel.
// w is Cin x Cout x k x k.
inline Array4 transposed_conv2d(const Array4& x, const Array4& w, i64 stride, i64 pad) {
  const i64 ho = (x.h - 1) * stride - 2 * pad + w.h;
  const i64 wo = (x.w - 1) * stride - 2 * pad + w.w;
  Array4 y(x.n, w.c, ho, wo);
  for (i64 n = 0; n < x.n; ++n)
    for (i64 ci = 0; ci < x.c; ++ci)
      for (i64 iy = 0; iy < x.h; ++iy)
        for (i64 ix = 0; ix < x.w; ++ix)
          for (i64 co = 0; co < w.c; ++co)
            for (i64 ky = 0; ky < w.h; ++ky)
              for (i64 kx = 0; kx < w.w; ++kx) {
                i64 oy = iy * stride - pad + ky, ox = ix * stride - pad + kx;
                if (oy < 0 || oy >= ho || ox < 0 || ox >= wo) continue;
                y(n, co, oy, ox) += x(n, ci, iy, ix) * w(ci, co, ky, kx);
              }
  return y;
}

// Direct evaluation of the half-pixel, edge-clamped interpolation weights.
inline Array4 bilinear2x(const Array4& x) {
  Array4 y(x.n, x.c, 2 * x.h, 2 * x.w);
  auto source = [](i64 o, i64 extent, i64& lo, i64& hi, double& t) {
    double s = (o + 0.5) / 2.0 - 0.5;
    if (s < 0) s = 0;
    lo = static_cast<i64>(s);
    hi = lo + 1 < extent ? lo + 1 : extent - 1;
    t = s - static_cast<double>(lo);
  };
  for (i64 n = 0; n < x.n; ++n)
    for (i64 c = 0; c < x.c; ++c)
      for (i64 oy = 0; oy < y.h; ++oy)
        for (i64 ox = 0; ox < y.w; ++ox) {
          i64 y0, y1, x0, x1;
          double ty, tx;
          source(oy, x.h, y0, y1, ty);
          source(ox, x.w, x0, x1, tx);
          y(n, c, oy, ox) = (1 - ty) * (1 - tx) * x(n, c, y0, x0) + (1 - ty) * tx * x(n, c, y0, x1) +
                            ty * (1 - tx) * x(n, c, y1, x0) + ty * tx * x(n, c, y1, x1);
        }
  return y;
}

inline Array4 nearest2x(const Array4& x) {
  Array4 y(x.n, x.c, 2 * x.h, 2 * x.w);
  for (i64 n = 0; n < x.n; ++n)
    for (i64 c = 0; c < x.c; ++c)
      for (i64 oy = 0; oy < y.h; ++oy)
        for (i64 ox = 0; ox < y.w; ++ox) y(n, c, oy, ox) = x(n, c, oy / 2, ox / 2);
  return y;
}

inline Array4 max_pool(const Array4& x, i64 k, i64 stride, i64 pad) {
  const i64 ho = (x.h + 2 * pad - k) / stride + 1, wo = (x.w + 2 * pad - k) / stride + 1;
  Array4 y(x.n, x.c, ho, wo, -std::numeric_limits<double>::infinity());
  for (i64 n = 0; n < x.n; ++n)
    for (i64 c = 0; c < x.c; ++c)
      for (i64 oy = 0; oy < ho; ++oy)
        for (i64 ox = 0; ox < wo; ++ox)
          for (i64 ky = 0; ky < k; ++ky)
            for (i64 kx = 0; kx < k; ++kx) {
              i64 iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
              y(n, c, oy, ox) = std::max(y(n, c, oy, ox), x(n, c, iy, ix));
            }
  return y;
}

// N x C means.
inline std::vector<double> gap(const Array4& x) {
  std::vector<double> out;
  for (i64 n = 0; n < x.n; ++n)
    for (i64 c = 0; c < x.c; ++c) {
      double s = 0;
      for (i64 i = 0; i < x.h; ++i)
        for (i64 j = 0; j < x.w; ++j) s += x(n, c, i, j);
      out.push_back(s / static_cast<double>(x.h * x.w));
    }
  return out;
}

inline Array4 channel_mean(const Array4& x) {
  Array4 y(x.n, 1, x.h, x.w);
  for (i64 n = 0; n < x.n; ++n)
    for (i64 i = 0; i < x.h; ++i)
      for (i64 j = 0; j < x.w; ++j) {
        double s = 0;
        for (i64 c = 0; c < x.c; ++c) s += x(n, c, i, j);
        y(n, 0, i, j) = s / static_cast<double>(x.c);
      }
  return y;
}

// Batch norm straight from its definition. In train mode the batch
// statistics (biased variance) are used and returned through mean/var.
inline Array4 batch_norm(const Array4& x, const std::vector<double>& gamma,
                         const std::vector<double>& beta, std::vector<double> mean,
                         std::vector<double> var, bool train, double eps = 1e-5) {
  Array4 y(x.n, x.c, x.h, x.w);
  for (i64 c = 0; c < x.c; ++c) {
    auto k = static_cast<std::size_t>(c);
    if (train) {
      double s = 0, m = static_cast<double>(x.n * x.h * x.w);
      for (i64 n = 0; n < x.n; ++n)
        for (i64 i = 0; i < x.h; ++i)
          for (i64 j = 0; j < x.w; ++j) s += x(n, c, i, j);
      mean[k] = s / m;
      double ss = 0;
      for (i64 n = 0; n < x.n; ++n)
        for (i64 i = 0; i < x.h; ++i)
          for (i64 j = 0; j < x.w; ++j) ss += (x(n, c, i, j) - mean[k]) * (x(n, c, i, j) - mean[k]);
      var[k] = ss / m;
    }
    for (i64 n = 0; n < x.n; ++n)
      for (i64 i = 0; i < x.h; ++i)
        for (i64 j = 0; j < x.w; ++j)
          y(n, c, i, j) = gamma[k] * (x(n, c, i, j) - mean[k]) / std::sqrt(var[k] + eps) + beta[k];
  }
  return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Central finite-difference derivative of scalar f with respect to every
// entry of `param` (modified in place and restored).
inline std::vector<double> numeric_grad(Tensor param, const std::function<double()>& f,
                                        double h = 1e-5) {
  auto data = param.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + h;
    const double fp = f();
    data[i] = orig - h;
    const double fm = f();
    data[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

inline double max_rel_err(const std::vector<double>& numeric, std::span<const double> analytic,
                          double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    double a = i < analytic.size() ? analytic[i] : 0.0;
    double denom = std::max({std::abs(a), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(a - numeric[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(cafpn::Shape s, std::mt19937_64& rng, double scale = 1.0,
                            bool requires_grad = false) {
  return Tensor::randn(std::move(s), rng, scale, requires_grad);
}

inline i64 uniform_int(std::mt19937_64& rng, i64 lo, i64 hi) {
  return std::uniform_int_distribution<i64>(lo, hi)(rng);
}

}  // namespace oracle
