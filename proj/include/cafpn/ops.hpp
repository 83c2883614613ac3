#pragma once

#include <vector>

#include "cafpn/tensor.hpp"

// Differentiable operators. Activations are N x C x H x W; every operator
// validates its operands and throws ShapeError / ConfigError with the
// offending shapes in the message.
namespace cafpn::ops {

// Kernel count for batch-parallel loops in conv kernels. Reductions across
// the batch are summed in fixed shard order, so results depend only on the
// thread count, never on scheduling.
void set_num_threads(int threads);
int num_threads();

// Zero-padded cross-correlation. w is Cout x Cin x kh x kw; b (optional) has
// Cout entries.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b = {}, int stride = 1,
              int pad = 0);

// Adjoint of conv2d with the same geometry: w is Cin x Cout x k x k. Only
// configurations that scale extents exactly by `stride` are accepted
// (k == stride + 2 * pad), e.g. 4x4 / stride 2 / pad 1.
Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& b = {},
                         int stride = 2, int pad = 1);

// x2 bilinear upsampling with half-pixel centres and edge clamping.
Tensor bilinear_resize2x(const Tensor& x);
// x2 nearest-neighbour upsampling (block replication).
Tensor nearest_resize2x(const Tensor& x);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad);

// N x C x H x W -> N x C spatial mean.
Tensor global_avg_pool(const Tensor& x);
// N x C x H x W -> N x 1 x H x W mean over channels.
Tensor cross_channel_mean(const Tensor& x);

enum class BatchNormMode { Train, Eval };

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalisation over N x H x W. Train mode normalises with the
// batch statistics and folds them into running_mean / running_var (unbiased
// variance); eval mode uses the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BatchNormMode mode,
                  BatchNormOptions options = {});

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// x: N x I, w: O x I, b: O (optional) -> N x O.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// scale is N x C (one factor per channel) or N x 1 x H x W (one factor per
// pixel, shared by all channels); x is N x C x H x W.
Tensor broadcast_mul(const Tensor& scale, const Tensor& x);

// Concatenate along axis 1; all other extents must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);
// Channels [begin, end) of x along axis 1.
Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t end);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean over the batch of -sum_k target_k * log softmax(logits)_k. Targets
// may be any per-row distribution (mixup soft labels).
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target);

// Row-wise softmax without gradient tracking.
Tensor softmax(const Tensor& logits);

}  // namespace cafpn::ops
