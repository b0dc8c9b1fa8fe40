#pragma once

#include <array>
#include <functional>
#include <utility>
#include <vector>

#include "longiseg/autograd.hpp"

namespace longiseg {

/// Running statistics of a batch-normalisation layer.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  explicit BatchNormStats(int channels = 0)
      : running_mean(Shape{channels}, 0.0f), running_var(Shape{channels}, 1.0f) {}
};

/// Gradient-carrying scalar objective evaluated outside the graph: the value
/// plus d(value)/d(input_i) for each input (an empty tensor means "no gradient").
template <typename T>
struct LossValue {
  double value = 0.0;
  std::vector<BasicTensor<T>> grads;
};

/// Batch position (item, w, h, d) inside a [N, C, W, H, D] activation.
using Position = std::array<int, 4>;

namespace ops {

/// 3x3x3 convolution, stride 1, zero padding 1.
/// x: [N, Ci, W, H, D]; weight: [Co, Ci, 3, 3, 3]; bias: [Co].
Var conv3d(const Var& x, const Var& weight, const Var& bias);

/// Per-channel normalisation over batch and spatial axes of [N, C, ...].
/// In training mode uses batch statistics and updates `stats` with the
/// given momentum; in eval mode uses `stats`.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
               bool training, double momentum = 0.1, double eps = 1e-5);

Var relu(const Var& x);

/// 2x2x2 max pooling with stride 2; spatial extents must be even.
Var max_pool2(const Var& x);

/// Nearest-neighbour 2x upsampling of [N, C, W, H, D].
Var upsample2(const Var& x);

/// Channel concatenation [a, b] of equally-shaped spatial tensors.
Var concat_channels(const Var& a, const Var& b);

/// Row-wise affine map: x [R, K], weight [O, K], bias [O] -> [R, O].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Rows of feature vectors at the listed positions: [P, C].
Var gather_positions(const Var& x, const std::vector<Position>& positions);

/// Row concatenation of matrices with equal column counts.
Var concat_rows(const std::vector<Var>& parts);

/// Row-wise L2 normalisation with norm floor eps.
Var normalize_rows(const Var& x, double eps = 1e-12);

/// Softmax over the channel axis of [N, C, ...].
Var softmax_channels(const Var& x);

/// Items [begin, begin + count) along the batch axis.
Var select_batch(const Var& x, int begin, int count);

/// sum_i weight_i * term_i over scalar terms.
Var weighted_sum(const std::vector<std::pair<double, Var>>& terms);

/// Wraps an externally differentiated scalar objective as a graph node.
Var scalar_objective(const std::vector<Var>& inputs,
                     const std::function<LossValue<float>(const std::vector<const Tensor*>&)>& fn);

}  // namespace ops

/// C = op(A) * op(B) (+ C if accumulate), row-major single precision.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b, float* c,
          bool accumulate);

/// Thread count of the BLAS backend (1 keeps results bitwise reproducible).
void set_blas_threads(int threads);

}  // namespace longiseg
