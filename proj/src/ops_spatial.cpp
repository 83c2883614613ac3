// Convolution, transposed convolution, resizing and pooling kernels.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "cafpn/error.hpp"
#include "cafpn/ops.hpp"

namespace cafpn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapConstRow = Eigen::Map<const RowMat>;

int g_num_threads = 1;

// Weight gradients are accumulated in this many per-shard partials, whatever
// the thread count, so their summation order never depends on --threads.
constexpr std::int64_t kReductionShards = 8;

// Runs body(shard, begin, end) over [0, n) split into contiguous shards,
// distributing the shards round-robin over `workers` threads.
template <typename Body>
void for_shards(std::int64_t n, int shards, int workers, Body&& body) {
  shards = static_cast<int>(std::max<std::int64_t>(1, std::min<std::int64_t>(shards, n)));
  workers = std::max(1, std::min(workers, shards));
  auto run = [&body, n, shards, workers](int worker) {
    for (int s = worker; s < shards; s += workers) body(s, n * s / shards, n * (s + 1) / shards);
  };
  if (workers == 1) {
    run(0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) pool.emplace_back(run, t);
  for (auto& t : pool) t.join();
}

int reduction_shards(std::int64_t n) {
  return static_cast<int>(std::max<std::int64_t>(1, std::min(kReductionShards, n)));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

struct ConvGeom {
  std::int64_t channels, h, w, kh, kw, stride, pad, ho, wo;
  std::int64_t patch() const { return channels * kh * kw; }
  std::int64_t positions() const { return ho * wo; }
};

// cols is patch() x positions(), row-major.
void im2col(const double* x, const ConvGeom& g, double* cols) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.positions();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          std::int64_t iy = oy * g.stride - g.pad + ki;
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            std::int64_t ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add of cols back onto the image grid.
void col2im(const double* cols, const ConvGeom& g, double* x) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.positions();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = x + (c * g.h + iy) * g.w;
          const double* src = row + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

void add_bias(double* y, const double* b, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t c = 0; c < channels; ++c) {
    double* row = y + c * plane;
    for (std::int64_t p = 0; p < plane; ++p) row[p] += b[c];
  }
}

void accumulate_bias_grad(const double* gy, std::int64_t channels, std::int64_t plane,
                          double* gb) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const double* row = gy + c * plane;
    double s = 0.0;
    for (std::int64_t p = 0; p < plane; ++p) s += row[p];
    gb[c] += s;
  }
}

// Sums per-shard partial buffers into `dst` in shard order.
void reduce_partials(const std::vector<std::vector<double>>& partials, std::vector<double>& dst) {
  for (const auto& part : partials) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += part[i];
  }
}

}  // namespace

void set_num_threads(int threads) { g_num_threads = std::max(1, threads); }
int num_threads() { return g_num_threads; }

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride < 1 || pad < 0) {
    throw ConfigError("conv2d requires stride >= 1 and pad >= 0, got stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  if (x.dim(1) != w.dim(1)) {
    throw ConfigError("conv2d channel mismatch: input " + to_string(x.shape()) + " vs weight " +
                      to_string(w.shape()));
  }
  const std::int64_t n = x.dim(0), cout = w.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, pad, 0, 0};
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw ShapeError("conv2d kernel " + to_string(w.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw ConfigError("conv2d bias " + to_string(b.shape()) + " does not match weight " +
                      to_string(w.shape()));
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::int64_t in_plane = g.channels * g.h * g.w;
  const std::int64_t out_plane = cout * g.positions();
  std::vector<double> y(static_cast<std::size_t>(n * out_plane));
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  const bool pointwise = is_pointwise(g);

  for_shards(n, g_num_threads, g_num_threads, [&](int, std::int64_t begin, std::int64_t end) {
    std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(g.patch() * g.positions()));
    MapConstRow wm(wd, cout, g.patch());
    for (std::int64_t i = begin; i < end; ++i) {
      const double* colp = xd + i * in_plane;
      if (!pointwise) {
        im2col(colp, g, cols.data());
        colp = cols.data();
      }
      MapRow ym(y.data() + i * out_plane, cout, g.positions());
      ym.noalias() = wm * MapConstRow(colp, g.patch(), g.positions());
      if (b.defined()) add_bias(ym.data(), b.data().data(), cout, g.positions());
    }
  });

  Tensor out = Tensor::from_data({n, cout, g.ho, g.wo}, std::move(y));
  if (autograd::needed({&x, &w, &b})) {
    autograd::attach(out, "conv2d", {&x, &w, &b},
                     [xi = x.impl(), wi = w.impl(), bi = b.impl(), g, n, cout, pointwise, in_plane,
                      out_plane](const detail::TensorImpl& o) {
                       auto* gx = xi->grad_buffer();
                       auto* gw = wi->grad_buffer();
                       auto* gb = bi ? bi->grad_buffer() : nullptr;
                       const int shards = reduction_shards(n);
                       std::vector<std::vector<double>> gw_part(
                           static_cast<std::size_t>(gw ? shards : 0),
                           std::vector<double>(gw ? gw->size() : 0, 0.0));
                       for_shards(n, shards, g_num_threads, [&](int s, std::int64_t begin, std::int64_t end) {
                         std::vector<double> cols(
                             pointwise ? 0 : static_cast<std::size_t>(g.patch() * g.positions()));
                         std::vector<double> dcols(cols.size());
                         MapConstRow wm(wi->data.data(), cout, g.patch());
                         for (std::int64_t i = begin; i < end; ++i) {
                           MapConstRow gy(o.grad.data() + i * out_plane, cout, g.positions());
                           if (gw) {
                             const double* colp = xi->data.data() + i * in_plane;
                             if (!pointwise) {
                               im2col(colp, g, cols.data());
                               colp = cols.data();
                             }
                             MapRow gwm(gw_part[static_cast<std::size_t>(s)].data(), cout,
                                        g.patch());
                             gwm.noalias() +=
                                 gy * MapConstRow(colp, g.patch(), g.positions()).transpose();
                           }
                           if (gx) {
                             if (pointwise) {
                               MapRow gxm(gx->data() + i * in_plane, g.patch(), g.positions());
                               gxm.noalias() += wm.transpose() * gy;
                             } else {
                               MapRow dc(dcols.data(), g.patch(), g.positions());
                               dc.noalias() = wm.transpose() * gy;
                               col2im(dcols.data(), g, gx->data() + i * in_plane);
                             }
                           }
                         }
                       });
                       if (gw) reduce_partials(gw_part, *gw);
                       if (gb) {
                         for (std::int64_t i = 0; i < n; ++i) {
                           accumulate_bias_grad(o.grad.data() + i * out_plane, cout,
                                                g.positions(), gb->data());
                         }
                       }
                     });
  }
  return out;
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require_rank(x, 4, "transposed_conv2d input");
  require_rank(w, 4, "transposed_conv2d weight");
  if (x.dim(1) != w.dim(0)) {
    throw ConfigError("transposed_conv2d channel mismatch: input " + to_string(x.shape()) +
                      " vs weight " + to_string(w.shape()));
  }
  if (w.dim(2) != w.dim(3) || stride < 1 || pad < 0 || w.dim(2) != stride + 2 * pad) {
    throw ConfigError("transposed_conv2d kernel " + to_string(w.shape()) + " with stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad) +
                      " does not scale extents exactly by the stride");
  }
  const std::int64_t n = x.dim(0), cin = x.dim(1), cout = w.dim(1);
  const std::int64_t h = x.dim(2), wd = x.dim(3);
  const std::int64_t k = w.dim(2);
  const std::int64_t ho = h * stride, wo = wd * stride;
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw ConfigError("transposed_conv2d bias " + to_string(b.shape()) +
                      " does not match weight " + to_string(w.shape()));
  }
  // Geometry of the forward convolution this operator is the adjoint of:
  // it maps the (ho x wo) output grid back onto the (h x wd) input grid.
  ConvGeom g{cout, ho, wo, k, k, stride, pad, h, wd};
  const std::int64_t in_plane = cin * h * wd;
  const std::int64_t out_plane = cout * ho * wo;
  std::vector<double> y(static_cast<std::size_t>(n * out_plane), 0.0);

  for_shards(n, g_num_threads, g_num_threads, [&](int, std::int64_t begin, std::int64_t end) {
    std::vector<double> cols(static_cast<std::size_t>(g.patch() * g.positions()));
    MapConstRow wm(w.data().data(), cin, g.patch());
    for (std::int64_t i = begin; i < end; ++i) {
      MapRow cm(cols.data(), g.patch(), g.positions());
      cm.noalias() = wm.transpose() * MapConstRow(x.data().data() + i * in_plane, cin, h * wd);
      col2im(cols.data(), g, y.data() + i * out_plane);
      if (b.defined()) add_bias(y.data() + i * out_plane, b.data().data(), cout, ho * wo);
    }
  });

  Tensor out = Tensor::from_data({n, cout, ho, wo}, std::move(y));
  if (autograd::needed({&x, &w, &b})) {
    autograd::attach(
        out, "transposed_conv2d", {&x, &w, &b},
        [xi = x.impl(), wi = w.impl(), bi = b.impl(), g, n, cin, in_plane,
         out_plane](const detail::TensorImpl& o) {
          auto* gx = xi->grad_buffer();
          auto* gw = wi->grad_buffer();
          auto* gb = bi ? bi->grad_buffer() : nullptr;
          const int shards = reduction_shards(n);
          std::vector<std::vector<double>> gw_part(static_cast<std::size_t>(gw ? shards : 0),
                                                   std::vector<double>(gw ? gw->size() : 0, 0.0));
          for_shards(n, shards, g_num_threads, [&](int s, std::int64_t begin, std::int64_t end) {
            std::vector<double> dcols(static_cast<std::size_t>(g.patch() * g.positions()));
            MapConstRow wm(wi->data.data(), cin, g.patch());
            for (std::int64_t i = begin; i < end; ++i) {
              im2col(o.grad.data() + i * out_plane, g, dcols.data());
              MapConstRow dc(dcols.data(), g.patch(), g.positions());
              if (gx) {
                MapRow gxm(gx->data() + i * in_plane, cin, g.positions());
                gxm.noalias() += wm * dc;
              }
              if (gw) {
                MapRow gwm(gw_part[static_cast<std::size_t>(s)].data(), cin, g.patch());
                gwm.noalias() +=
                    MapConstRow(xi->data.data() + i * in_plane, cin, g.positions()) *
                    dc.transpose();
              }
            }
          });
          if (gw) reduce_partials(gw_part, *gw);
          if (gb) {
            for (std::int64_t i = 0; i < n; ++i) {
              accumulate_bias_grad(o.grad.data() + i * out_plane, g.channels, g.h * g.w,
                                   gb->data());
            }
          }
        });
  }
  return out;
}

namespace {

// Source sample for output coordinate `dst` of a x2 half-pixel resize.
struct BilinearTap {
  std::int64_t i0, i1;
  double frac;
};

BilinearTap bilinear_tap(std::int64_t dst, std::int64_t extent) {
  double src = std::max(0.0, (static_cast<double>(dst) + 0.5) * 0.5 - 0.5);
  auto i0 = static_cast<std::int64_t>(std::floor(src));
  i0 = std::min(i0, extent - 1);
  std::int64_t i1 = std::min(i0 + 1, extent - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace

Tensor bilinear_resize2x(const Tensor& x) {
  require_rank(x, 4, "bilinear_resize2x input");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = 2 * h, wo = 2 * w;
  std::vector<BilinearTap> ty(static_cast<std::size_t>(ho)), tx(static_cast<std::size_t>(wo));
  for (std::int64_t i = 0; i < ho; ++i) ty[static_cast<std::size_t>(i)] = bilinear_tap(i, h);
  for (std::int64_t j = 0; j < wo; ++j) tx[static_cast<std::size_t>(j)] = bilinear_tap(j, w);

  std::vector<double> y(static_cast<std::size_t>(planes * ho * wo));
  const double* xd = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xd + p * h * w;
    double* dst = y.data() + p * ho * wo;
    for (std::int64_t i = 0; i < ho; ++i) {
      const auto& a = ty[static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < wo; ++j) {
        const auto& c = tx[static_cast<std::size_t>(j)];
        // Lerp form keeps constant inputs exactly constant.
        double v00 = src[a.i0 * w + c.i0], v01 = src[a.i0 * w + c.i1];
        double v10 = src[a.i1 * w + c.i0], v11 = src[a.i1 * w + c.i1];
        double top = v00 + c.frac * (v01 - v00);
        double bottom = v10 + c.frac * (v11 - v10);
        dst[i * wo + j] = top + a.frac * (bottom - top);
      }
    }
  }
  Tensor out = Tensor::from_data({x.dim(0), x.dim(1), ho, wo}, std::move(y));
  if (autograd::needed({&x})) {
    autograd::attach(out, "bilinear_resize2x", {&x},
                     [xi = x.impl(), ty, tx, planes, h, w, ho, wo](const detail::TensorImpl& o) {
                       auto* gx = xi->grad_buffer();
                       for (std::int64_t p = 0; p < planes; ++p) {
                         double* dst = gx->data() + p * h * w;
                         const double* gy = o.grad.data() + p * ho * wo;
                         for (std::int64_t i = 0; i < ho; ++i) {
                           const auto& a = ty[static_cast<std::size_t>(i)];
                           for (std::int64_t j = 0; j < wo; ++j) {
                             const auto& c = tx[static_cast<std::size_t>(j)];
                             double g = gy[i * wo + j];
                             dst[a.i0 * w + c.i0] += g * (1 - a.frac) * (1 - c.frac);
                             dst[a.i0 * w + c.i1] += g * (1 - a.frac) * c.frac;
                             dst[a.i1 * w + c.i0] += g * a.frac * (1 - c.frac);
                             dst[a.i1 * w + c.i1] += g * a.frac * c.frac;
                           }
                         }
                       }
                     });
  }
  return out;
}

Tensor nearest_resize2x(const Tensor& x) {
  require_rank(x, 4, "nearest_resize2x input");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = 2 * h, wo = 2 * w;
  std::vector<double> y(static_cast<std::size_t>(planes * ho * wo));
  const double* xd = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j) {
        y[static_cast<std::size_t>((p * ho + i) * wo + j)] = xd[(p * h + i / 2) * w + j / 2];
      }
    }
  }
  Tensor out = Tensor::from_data({x.dim(0), x.dim(1), ho, wo}, std::move(y));
  if (autograd::needed({&x})) {
    autograd::attach(out, "nearest_resize2x", {&x},
                     [xi = x.impl(), planes, h, w, ho, wo](const detail::TensorImpl& o) {
                       auto* gx = xi->grad_buffer();
                       for (std::int64_t p = 0; p < planes; ++p) {
                         for (std::int64_t i = 0; i < ho; ++i) {
                           for (std::int64_t j = 0; j < wo; ++j) {
                             (*gx)[static_cast<std::size_t>((p * h + i / 2) * w + j / 2)] +=
                                 o.grad[static_cast<std::size_t>((p * ho + i) * wo + j)];
                           }
                         }
                       }
                     });
  }
  return out;
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad) {
  require_rank(x, 4, "max_pool2d input");
  if (kernel < 1 || stride < 1 || pad < 0 || 2 * pad > kernel) {
    throw ConfigError("max_pool2d: invalid kernel/stride/pad");
  }
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel > h + 2 * pad || kernel > w + 2 * pad) {
    throw ShapeError("max_pool2d kernel larger than padded input " + to_string(x.shape()));
  }
  const std::int64_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - kernel) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(planes * ho * wo));
  std::vector<std::int64_t> argmax(y.size());
  const double* xd = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_idx = -1;
        for (std::int64_t ki = 0; ki < kernel; ++ki) {
          std::int64_t iy = i * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t kj = 0; kj < kernel; ++kj) {
            std::int64_t ix = j * stride - pad + kj;
            if (ix < 0 || ix >= w) continue;
            std::int64_t idx = (p * h + iy) * w + ix;
            if (best_idx < 0 || xd[idx] > best) {
              best = xd[idx];
              best_idx = idx;
            }
          }
        }
        auto o = static_cast<std::size_t>((p * ho + i) * wo + j);
        y[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  Tensor out = Tensor::from_data({x.dim(0), x.dim(1), ho, wo}, std::move(y));
  if (autograd::needed({&x})) {
    autograd::attach(out, "max_pool2d", {&x},
                     [xi = x.impl(), argmax = std::move(argmax)](const detail::TensorImpl& o) {
                       auto* gx = xi->grad_buffer();
                       for (std::size_t k = 0; k < argmax.size(); ++k) {
                         (*gx)[static_cast<std::size_t>(argmax[k])] += o.grad[k];
                       }
                     });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool input");
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> y(static_cast<std::size_t>(n * c));
  const double* xd = x.data().data();
  for (std::int64_t k = 0; k < n * c; ++k) {
    double s = 0.0;
    for (std::int64_t p = 0; p < plane; ++p) s += xd[k * plane + p];
    y[static_cast<std::size_t>(k)] = s / static_cast<double>(plane);
  }
  Tensor out = Tensor::from_data({n, c}, std::move(y));
  if (autograd::needed({&x})) {
    autograd::attach(out, "global_avg_pool", {&x},
                     [xi = x.impl(), n, c, plane](const detail::TensorImpl& o) {
                       auto* gx = xi->grad_buffer();
                       const double inv = 1.0 / static_cast<double>(plane);
                       for (std::int64_t k = 0; k < n * c; ++k) {
                         double g = o.grad[static_cast<std::size_t>(k)] * inv;
                         for (std::int64_t p = 0; p < plane; ++p) {
                           (*gx)[static_cast<std::size_t>(k * plane + p)] += g;
                         }
                       }
                     });
  }
  return out;
}

Tensor cross_channel_mean(const Tensor& x) {
  require_rank(x, 4, "cross_channel_mean input");
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> y(static_cast<std::size_t>(n * plane), 0.0);
  const double* xd = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    double* dst = y.data() + i * plane;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* src = xd + (i * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) dst[p] += src[p];
    }
    for (std::int64_t p = 0; p < plane; ++p) dst[p] /= static_cast<double>(c);
  }
  Tensor out = Tensor::from_data({n, 1, x.dim(2), x.dim(3)}, std::move(y));
  if (autograd::needed({&x})) {
    autograd::attach(out, "cross_channel_mean", {&x},
                     [xi = x.impl(), n, c, plane](const detail::TensorImpl& o) {
                       auto* gx = xi->grad_buffer();
                       const double inv = 1.0 / static_cast<double>(c);
                       for (std::int64_t i = 0; i < n; ++i) {
                         const double* gy = o.grad.data() + i * plane;
                         for (std::int64_t ch = 0; ch < c; ++ch) {
                           double* dst = gx->data() + (i * c + ch) * plane;
                           for (std::int64_t p = 0; p < plane; ++p) dst[p] += gy[p] * inv;
                         }
                       }
                     });
  }
  return out;
}

}  // namespace cafpn::ops
