#include "cafpn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "cafpn/error.hpp"

namespace cafpn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapConstRow = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                      to_string(b.shape()) + " differ");
  }
}

template <typename F>
Tensor map_unary(const Tensor& x, F f) {
  std::vector<double> y(x.data().begin(), x.data().end());
  for (auto& v : y) v = f(v);
  return Tensor::from_data(x.shape(), std::move(y));
}

}  // namespace

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BatchNormMode mode, BatchNormOptions options) {
  if (x.rank() != 4) throw ShapeError("batch_norm expects N x C x H x W, got " + to_string(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw ConfigError("batch_norm parameter " + to_string(t->shape()) + " does not match " +
                        to_string(x.shape()));
    }
  }
  const double count = static_cast<double>(n * plane);
  std::vector<double> mu(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  const double* xd = x.data().data();

  if (mode == BatchNormMode::Train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double* src = xd + (i * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) s += src[p];
      }
      const double m = s / count;
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double* src = xd + (i * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) ss += (src[p] - m) * (src[p] - m);
      }
      const double var = ss / count;
      const auto k = static_cast<std::size_t>(ch);
      mu[k] = m;
      invstd[k] = 1.0 / std::sqrt(var + options.eps);
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      rm[k] = (1 - options.momentum) * rm[k] + options.momentum * m;
      rv[k] = (1 - options.momentum) * rv[k] + options.momentum * unbiased;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      mu[k] = running_mean.data()[k];
      invstd[k] = 1.0 / std::sqrt(running_var.data()[k] + options.eps);
    }
  }

  std::vector<double> xhat(x.data().size()), y(x.data().size());
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      const std::int64_t base = (i * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        const auto idx = static_cast<std::size_t>(base + p);
        xhat[idx] = (xd[idx] - mu[k]) * invstd[k];
        y[idx] = gd[ch] * xhat[idx] + bd[ch];
      }
    }
  }

  Tensor out = Tensor::from_data(x.shape(), std::move(y));
  if (autograd::needed({&x, &gamma, &beta})) {
    const bool train = mode == BatchNormMode::Train;
    autograd::attach(
        out, "batch_norm", {&x, &gamma, &beta},
        [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
         invstd = std::move(invstd), n, c, plane, count, train](const detail::TensorImpl& o) {
          auto* gx = xi->grad_buffer();
          auto* gg = gi->grad_buffer();
          auto* gb = bi->grad_buffer();
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto k = static_cast<std::size_t>(ch);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
              const std::int64_t base = (i * c + ch) * plane;
              for (std::int64_t p = 0; p < plane; ++p) {
                const auto idx = static_cast<std::size_t>(base + p);
                sum_dy += o.grad[idx];
                sum_dy_xhat += o.grad[idx] * xhat[idx];
              }
            }
            if (gg) (*gg)[k] += sum_dy_xhat;
            if (gb) (*gb)[k] += sum_dy;
            if (!gx) continue;
            const double g = gi->data[k];
            for (std::int64_t i = 0; i < n; ++i) {
              const std::int64_t base = (i * c + ch) * plane;
              for (std::int64_t p = 0; p < plane; ++p) {
                const auto idx = static_cast<std::size_t>(base + p);
                double dx = o.grad[idx];
                if (train) dx -= (sum_dy + xhat[idx] * sum_dy_xhat) / count;
                (*gx)[idx] += g * invstd[k] * dx;
              }
            }
          }
        });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = map_unary(x, [](double v) { return v > 0 ? v : 0.0; });
  if (autograd::needed({&x})) {
    autograd::attach(out, "relu", {&x}, [xi = x.impl()](const detail::TensorImpl& o) {
      auto* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (xi->data[i] > 0) (*gx)[i] += o.grad[i];
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = map_unary(x, [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  if (autograd::needed({&x})) {
    autograd::attach(out, "sigmoid", {&x}, [xi = x.impl()](const detail::TensorImpl& o) {
      auto* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double s = o.data[i];
        (*gx)[i] += o.grad[i] * s * (1 - s);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ConfigError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                      to_string(w.shape()));
  }
  const std::int64_t n = x.dim(0), in = x.dim(1), outf = w.dim(0);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outf)) {
    throw ConfigError("linear: bias " + to_string(b.shape()) + " does not match weight " +
                      to_string(w.shape()));
  }
  std::vector<double> y(static_cast<std::size_t>(n * outf));
  MapRow ym(y.data(), n, outf);
  ym.noalias() = MapConstRow(x.data().data(), n, in) * MapConstRow(w.data().data(), outf, in).transpose();
  if (b.defined()) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < outf; ++j) ym(i, j) += b.data()[static_cast<std::size_t>(j)];
    }
  }
  Tensor out = Tensor::from_data({n, outf}, std::move(y));
  if (autograd::needed({&x, &w, &b})) {
    autograd::attach(out, "linear", {&x, &w, &b},
                     [xi = x.impl(), wi = w.impl(), bi = b.impl(), n, in,
                      outf](const detail::TensorImpl& o) {
                       MapConstRow gy(o.grad.data(), n, outf);
                       if (auto* gx = xi->grad_buffer()) {
                         MapRow(gx->data(), n, in).noalias() +=
                             gy * MapConstRow(wi->data.data(), outf, in);
                       }
                       if (auto* gw = wi->grad_buffer()) {
                         MapRow(gw->data(), outf, in).noalias() +=
                             gy.transpose() * MapConstRow(xi->data.data(), n, in);
                       }
                       if (bi) {
                         if (auto* gb = bi->grad_buffer()) {
                           for (std::int64_t i = 0; i < n; ++i) {
                             for (std::int64_t j = 0; j < outf; ++j) {
                               (*gb)[static_cast<std::size_t>(j)] += gy(i, j);
                             }
                           }
                         }
                       }
                     });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> y(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.data()[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(y));
  if (autograd::needed({&a, &b})) {
    autograd::attach(out, "add", {&a, &b},
                     [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& o) {
                       for (auto* t : {ai.get(), bi.get()}) {
                         if (auto* g = t->grad_buffer()) {
                           for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
                         }
                       }
                     });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> y(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.data()[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(y));
  if (autograd::needed({&a, &b})) {
    autograd::attach(out, "sub", {&a, &b},
                     [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& o) {
                       if (auto* g = ai->grad_buffer()) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
                       }
                       if (auto* g = bi->grad_buffer()) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i];
                       }
                     });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> y(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.data()[i];
  Tensor out = Tensor::from_data(a.shape(), std::move(y));
  if (autograd::needed({&a, &b})) {
    autograd::attach(out, "mul", {&a, &b},
                     [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& o) {
                       if (auto* g = ai->grad_buffer()) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * bi->data[i];
                       }
                       if (auto* g = bi->grad_buffer()) {
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * ai->data[i];
                       }
                     });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = map_unary(x, [factor](double v) { return v * factor; });
  if (autograd::needed({&x})) {
    autograd::attach(out, "scale", {&x}, [xi = x.impl(), factor](const detail::TensorImpl& o) {
      auto* g = xi->grad_buffer();
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * factor;
    });
  }
  return out;
}

Tensor broadcast_mul(const Tensor& s, const Tensor& x) {
  if (x.rank() != 4) {
    throw ConfigError("broadcast_mul: target must be N x C x H x W, got " + to_string(x.shape()));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const bool per_channel = s.rank() == 2 && s.dim(0) == n && s.dim(1) == c;
  const bool per_pixel = s.rank() == 4 && s.dim(0) == n && s.dim(1) == 1 && s.dim(2) == x.dim(2) &&
                         s.dim(3) == x.dim(3);
  if (!per_channel && !per_pixel) {
    throw ConfigError("broadcast_mul: scale " + to_string(s.shape()) +
                      " cannot broadcast against " + to_string(x.shape()));
  }
  // Index of the scale factor that multiplies element (i, ch, p).
  auto scale_index = [=](std::int64_t i, std::int64_t ch, std::int64_t p) {
    return static_cast<std::size_t>(per_channel ? i * c + ch : i * plane + p);
  };
  std::vector<double> y(x.data().size());
  const double* xd = x.data().data();
  const double* sd = s.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t base = (i * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        y[static_cast<std::size_t>(base + p)] = sd[scale_index(i, ch, p)] * xd[base + p];
      }
    }
  }
  Tensor out = Tensor::from_data(x.shape(), std::move(y));
  if (autograd::needed({&s, &x})) {
    autograd::attach(out, "broadcast_mul", {&s, &x},
                     [si = s.impl(), xi = x.impl(), n, c, plane,
                      scale_index](const detail::TensorImpl& o) {
                       auto* gs = si->grad_buffer();
                       auto* gx = xi->grad_buffer();
                       for (std::int64_t i = 0; i < n; ++i) {
                         for (std::int64_t ch = 0; ch < c; ++ch) {
                           const std::int64_t base = (i * c + ch) * plane;
                           for (std::int64_t p = 0; p < plane; ++p) {
                             const auto idx = static_cast<std::size_t>(base + p);
                             const auto k = scale_index(i, ch, p);
                             if (gs) (*gs)[k] += o.grad[idx] * xi->data[idx];
                             if (gx) (*gx)[idx] += o.grad[idx] * si->data[k];
                           }
                         }
                       }
                     });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels: no inputs");
  const Shape& ref = parts.front().shape();
  if (ref.size() < 2) throw ShapeError("concat_channels needs rank >= 2, got " + to_string(ref));
  std::int64_t total_c = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == ref[a];
    if (!ok) {
      throw ConfigError("concat_channels: " + to_string(s) + " incompatible with " + to_string(ref));
    }
    total_c += s[1];
  }
  const std::int64_t n = ref[0];
  std::int64_t inner = 1;
  for (std::size_t a = 2; a < ref.size(); ++a) inner *= ref[a];

  Shape out_shape = ref;
  out_shape[1] = total_c;
  std::vector<double> y(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& t : parts) {
    offsets.push_back(off);
    const std::int64_t block = t.dim(1) * inner;
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy_n(t.data().data() + i * block, block, y.data() + i * total_c * inner + off * inner);
    }
    off += t.dim(1);
  }
  Tensor out = Tensor::from_data(out_shape, std::move(y));
  bool need = false;
  for (const auto& t : parts) need = need || autograd::needed({&t});
  if (need) {
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const auto& t : parts) impls.push_back(t.impl());
    autograd::attach(out, "concat_channels", parts,
                     [impls, offsets, n, total_c, inner](const detail::TensorImpl& o) {
                       for (std::size_t k = 0; k < impls.size(); ++k) {
                         auto* g = impls[k]->grad_buffer();
                         if (!g) continue;
                         const std::int64_t block = impls[k]->shape[1] * inner;
                         for (std::int64_t i = 0; i < n; ++i) {
                           const double* src = o.grad.data() + i * total_c * inner + offsets[k] * inner;
                           double* dst = g->data() + i * block;
                           for (std::int64_t e = 0; e < block; ++e) dst[e] += src[e];
                         }
                       }
                     });
  }
  return out;
}

Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t end) {
  if (x.rank() < 2 || begin < 0 || end > x.dim(1) || begin >= end) {
    throw ShapeError("slice_channels [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + to_string(x.shape()));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t inner = x.numel() / (n * c);
  Shape out_shape = x.shape();
  out_shape[1] = end - begin;
  const std::int64_t block = (end - begin) * inner;
  std::vector<double> y(static_cast<std::size_t>(n * block));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(x.data().data() + (i * c + begin) * inner, block, y.data() + i * block);
  }
  Tensor out = Tensor::from_data(out_shape, std::move(y));
  if (autograd::needed({&x})) {
    autograd::attach(out, "slice_channels", {&x},
                     [xi = x.impl(), n, c, begin, inner, block](const detail::TensorImpl& o) {
                       auto* g = xi->grad_buffer();
                       for (std::int64_t i = 0; i < n; ++i) {
                         double* dst = g->data() + (i * c + begin) * inner;
                         const double* src = o.grad.data() + i * block;
                         for (std::int64_t e = 0; e < block; ++e) dst[e] += src[e];
                       }
                     });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (autograd::needed({&x})) {
    autograd::attach(out, "sum", {&x}, [xi = x.impl()](const detail::TensorImpl& o) {
      auto* g = xi->grad_buffer();
      for (auto& v : *g) v += o.grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects N x K, got " + to_string(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> p(logits.data().begin(), logits.data().end());
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = p.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += (row[j] = std::exp(row[j] - m));
    for (std::int64_t j = 0; j < k; ++j) row[j] /= z;
  }
  return Tensor::from_data(logits.shape(), std::move(p));
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy expects N x K logits, got " + to_string(logits.shape()));
  }
  require_same_shape(logits, target, "softmax_cross_entropy");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  const double* z = logits.data().data();
  const double* t = target.data().data();
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = z + i * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::int64_t j = 0; j < k; ++j) loss -= t[i * k + j] * (row[j] - lse);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(n));
  if (autograd::needed({&logits})) {
    autograd::attach(out, "softmax_cross_entropy", {&logits},
                     [li = logits.impl(), ti = target.impl(), n, k](const detail::TensorImpl& o) {
                       auto* g = li->grad_buffer();
                       Tensor p = softmax(wrap_impl(li));
                       const double scale = o.grad[0] / static_cast<double>(n);
                       for (std::int64_t i = 0; i < n; ++i) {
                         double mass = 0.0;
                         for (std::int64_t j = 0; j < k; ++j) mass += ti->data[static_cast<std::size_t>(i * k + j)];
                         for (std::int64_t j = 0; j < k; ++j) {
                           const auto idx = static_cast<std::size_t>(i * k + j);
                           (*g)[idx] += scale * (p.data()[idx] * mass - ti->data[idx]);
                         }
                       }
                     });
  }
  return out;
}

}  // namespace cafpn::ops
