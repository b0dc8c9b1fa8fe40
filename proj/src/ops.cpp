#include "longiseg/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace longiseg {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b, float* c,
          bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<std::size_t>(m) * n);
    return;
  }
  const int lda = trans_a ? m : k;
  const int ldb = trans_b ? k : n;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a, lda, b, ldb,
              accumulate ? 1.0f : 0.0f, c, n);
}

void set_blas_threads(int threads) { openblas_set_num_threads(threads < 1 ? 1 : threads); }

namespace {

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::shape, std::string(op) + ": expected rank " + std::to_string(rank) +
                                      ", got " + shape_string(t.shape()));
  }
}

// Unfolds one [C, W, H, D] item into [C*27, W*H*D] columns for a 3x3x3 kernel.
// Columns for output slab w in [w0, w1): cols is [C*27, (w1-w0)*H*D].
void im2col(const float* x, int channels, int W, int H, int D, int w0, int w1, float* cols) {
  const std::size_t S = static_cast<std::size_t>(W) * H * D;
  const std::size_t L = static_cast<std::size_t>(w1 - w0) * H * D;
  for (int c = 0; c < channels; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * S;
    for (int kx = 0; kx < 3; ++kx) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kz = 0; kz < 3; ++kz) {
          float* dst = cols + static_cast<std::size_t>(((c * 3 + kx) * 3 + ky) * 3 + kz) * L;
          for (int w = w0; w < w1; ++w) {
            const int sw = w + kx - 1;
            for (int h = 0; h < H; ++h) {
              const int sh = h + ky - 1;
              float* out = dst + (static_cast<std::size_t>(w - w0) * H + h) * D;
              if (sw < 0 || sw >= W || sh < 0 || sh >= H) {
                std::memset(out, 0, sizeof(float) * D);
                continue;
              }
              const float* src = xc + (static_cast<std::size_t>(sw) * H + sh) * D;
              if (kz == 1) {
                std::memcpy(out, src, sizeof(float) * D);
              } else if (kz == 0) {
                out[0] = 0.0f;
                std::memcpy(out + 1, src, sizeof(float) * (D - 1));
              } else {
                std::memcpy(out, src + 1, sizeof(float) * (D - 1));
                out[D - 1] = 0.0f;
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates slab columns back into [C, W, H, D].
void col2im(const float* cols, int channels, int W, int H, int D, int w0, int w1, float* x) {
  const std::size_t S = static_cast<std::size_t>(W) * H * D;
  const std::size_t L = static_cast<std::size_t>(w1 - w0) * H * D;
  for (int c = 0; c < channels; ++c) {
    float* xc = x + static_cast<std::size_t>(c) * S;
    for (int kx = 0; kx < 3; ++kx) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kz = 0; kz < 3; ++kz) {
          const float* src = cols + static_cast<std::size_t>(((c * 3 + kx) * 3 + ky) * 3 + kz) * L;
          for (int w = w0; w < w1; ++w) {
            const int sw = w + kx - 1;
            if (sw < 0 || sw >= W) continue;
            for (int h = 0; h < H; ++h) {
              const int sh = h + ky - 1;
              if (sh < 0 || sh >= H) continue;
              const float* in = src + (static_cast<std::size_t>(w - w0) * H + h) * D;
              float* dst = xc + (static_cast<std::size_t>(sw) * H + sh) * D;
              const int lo = kz == 0 ? 1 : 0;
              const int hi = kz == 2 ? D - 1 : D;
              const int shift = kz - 1;
              for (int d = lo; d < hi; ++d) dst[d + shift] += in[d];
            }
          }
        }
      }
    }
  }
}

// Slab width keeping the column buffer around 512 KiB, but at least ~1024 columns.
int slab_width(int K, int W, int H, int D) {
  const std::size_t per_w = static_cast<std::size_t>(K) * H * D * sizeof(float);
  const int by_cache = static_cast<int>((std::size_t{1} << 19) / std::max<std::size_t>(per_w, 1));
  const int by_width = (1024 + H * D - 1) / (H * D);  // tiny gemms cost more than cache misses
  return std::clamp(std::max(by_cache, by_width), 1, W);
}

void sgemm_ld(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda, const float* b, int ldb,
              float* c, int ldc, bool accumulate) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              1.0f, a, lda, b, ldb, accumulate ? 1.0f : 0.0f, c, ldc);
}

std::vector<float>& scratch(std::size_t n, int slot) {
  thread_local std::vector<float> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

}  // namespace

namespace ops {

Var conv3d(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank(xv, 5, "conv3d input");
  require_rank(wv, 5, "conv3d weight");
  const int N = xv.dim(0), Ci = xv.dim(1), W = xv.dim(2), H = xv.dim(3), D = xv.dim(4);
  const int Co = wv.dim(0);
  if (wv.dim(1) != Ci || wv.dim(2) != 3 || wv.dim(3) != 3 || wv.dim(4) != 3) {
    throw Error(ErrorKind::shape, "conv3d: weight " + shape_string(wv.shape()) +
                                      " incompatible with input " + shape_string(xv.shape()));
  }
  require(bias.value().size() == static_cast<std::size_t>(Co), ErrorKind::shape,
          "conv3d: bias size mismatch");
  const std::size_t S = static_cast<std::size_t>(W) * H * D;
  const int K = Ci * 27;

  Tensor y(Shape{N, Co, W, H, D});
  const int sw = slab_width(K, W, H, D);
  const int plane = H * D;
  auto& cols = scratch(static_cast<std::size_t>(K) * sw * plane, 0);
  for (int n = 0; n < N; ++n) {
    const float* xn = xv.data() + static_cast<std::size_t>(n) * Ci * S;
    float* yn = y.data() + static_cast<std::size_t>(n) * Co * S;
    for (int w0 = 0; w0 < W; w0 += sw) {
      const int w1 = std::min(W, w0 + sw);
      const int L = (w1 - w0) * plane;
      im2col(xn, Ci, W, H, D, w0, w1, cols.data());
      sgemm_ld(false, false, Co, L, K, wv.data(), K, cols.data(), L, yn + static_cast<std::size_t>(w0) * plane,
               static_cast<int>(S), false);
    }
    for (int o = 0; o < Co; ++o) {
      const float b = bias.value()[o];
      float* row = yn + static_cast<std::size_t>(o) * S;
      for (std::size_t s = 0; s < S; ++s) row[s] += b;
    }
  }

  return make_result(std::move(y), {x, weight, bias}, [=](Node& self) {
    const Tensor& dy = self.grad;
    Node* xn = self.inputs[0].get();
    Node* wn = self.inputs[1].get();
    Node* bn = self.inputs[2].get();
    auto& cols = scratch(static_cast<std::size_t>(K) * sw * plane, 0);
    auto& dcols = scratch(static_cast<std::size_t>(K) * sw * plane, 1);
    for (int n = 0; n < N; ++n) {
      const float* dyn = dy.data() + static_cast<std::size_t>(n) * Co * S;
      if (bn->requires_grad) {
        Tensor& db = bn->grad_buffer();
        for (int o = 0; o < Co; ++o) {
          const float* row = dyn + static_cast<std::size_t>(o) * S;
          double acc = 0.0;
#pragma omp simd reduction(+ : acc)
          for (std::size_t s = 0; s < S; ++s) acc += row[s];
          db[o] += static_cast<float>(acc);
        }
      }
      for (int w0 = 0; w0 < W; w0 += sw) {
        const int w1 = std::min(W, w0 + sw);
        const int L = (w1 - w0) * plane;
        const float* dys = dyn + static_cast<std::size_t>(w0) * plane;
        if (wn->requires_grad) {
          im2col(xn->value.data() + static_cast<std::size_t>(n) * Ci * S, Ci, W, H, D, w0, w1, cols.data());
          sgemm_ld(false, true, Co, K, L, dys, static_cast<int>(S), cols.data(), L, wn->grad_buffer().data(), K,
                   true);
        }
        if (xn->requires_grad) {
          sgemm_ld(true, false, K, L, Co, wn->value.data(), K, dys, static_cast<int>(S), dcols.data(), L, false);
          col2im(dcols.data(), Ci, W, H, D, w0, w1,
                 xn->grad_buffer().data() + static_cast<std::size_t>(n) * Ci * S);
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
               bool training, double momentum, double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, ErrorKind::shape, "batch_norm: rank must be >= 2");
  const int N = xv.dim(0), C = xv.dim(1);
  const std::size_t S = spatial_size(xv.shape());
  require(gamma.value().size() == static_cast<std::size_t>(C), ErrorKind::shape,
          "batch_norm: channel mismatch " + shape_string(xv.shape()));
  const std::size_t count = static_cast<std::size_t>(N) * S;

  Tensor y(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<float> inv_std(C);
  for (int c = 0; c < C; ++c) {
    double mean, var;
    if (training) {
      require(count > 1, ErrorKind::shape,
              "batch_norm: training mode needs more than one value per channel");
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * S;
#pragma omp simd reduction(+ : sum)
        for (std::size_t s = 0; s < S; ++s) sum += p[s];
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * S;
#pragma omp simd reduction(+ : sq)
        for (std::size_t s = 0; s < S; ++s) {
          const double d = p[s] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      stats.running_mean[c] =
          static_cast<float>((1.0 - momentum) * stats.running_mean[c] + momentum * mean);
      stats.running_var[c] =
          static_cast<float>((1.0 - momentum) * stats.running_var[c] + momentum * unbiased);
    } else {
      mean = stats.running_mean[c];
      var = stats.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[c] = static_cast<float>(istd);
    const float g = gamma.value()[c], b = beta.value()[c];
    const float mf = static_cast<float>(mean), sf = static_cast<float>(istd);
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * S;
      const float* xp = xv.data() + off;
      float* hp = xhat.data() + off;
      float* yp = y.data() + off;
#pragma omp simd
      for (std::size_t s = 0; s < S; ++s) {
        const float h = (xp[s] - mf) * sf;
        hp[s] = h;
        yp[s] = g * h + b;
      }
    }
  }

  return make_result(std::move(y), {x, gamma, beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const Tensor& dy = self.grad;
    Node* xn = self.inputs[0].get();
    Node* gn = self.inputs[1].get();
    Node* bn = self.inputs[2].get();
    for (int c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * S;
        const float* dp = dy.data() + off;
        const float* hp = xhat.data() + off;
#pragma omp simd reduction(+ : sum_dy, sum_dy_xhat)
        for (std::size_t s = 0; s < S; ++s) {
          sum_dy += dp[s];
          sum_dy_xhat += static_cast<double>(dp[s]) * hp[s];
        }
      }
      if (gn->requires_grad) gn->grad_buffer()[c] += static_cast<float>(sum_dy_xhat);
      if (bn->requires_grad) bn->grad_buffer()[c] += static_cast<float>(sum_dy);
      if (!xn->requires_grad) continue;
      Tensor& dx = xn->grad_buffer();
      const float a = static_cast<float>(gn->value[c] * inv_std[c]);
      const double inv_count = 1.0 / static_cast<double>(count);
      const float k1 = training ? static_cast<float>(inv_count * sum_dy) : 0.0f;
      const float k2 = training ? static_cast<float>(inv_count * sum_dy_xhat) : 0.0f;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * S;
        const float* dp = dy.data() + off;
        const float* hp = xhat.data() + off;
        float* gp = dx.data() + off;
#pragma omp simd
        for (std::size_t s = 0; s < S; ++s) gp[s] += a * (dp[s] - k1 - hp[s] * k2);
      }
    }
  });
}

Var relu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  return make_result(std::move(y), {x}, [](Node& self) {
    Node* xn = self.inputs[0].get();
    Tensor& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xn->value[i] > 0.0f) dx[i] += self.grad[i];
    }
  });
}

Var max_pool2(const Var& x) {
  const Tensor& xv = x.value();
  require_rank(xv, 5, "max_pool2");
  const int N = xv.dim(0), C = xv.dim(1), W = xv.dim(2), H = xv.dim(3), D = xv.dim(4);
  require(W % 2 == 0 && H % 2 == 0 && D % 2 == 0, ErrorKind::shape,
          "max_pool2: odd spatial extent " + shape_string(xv.shape()));
  const int w2 = W / 2, h2 = H / 2, d2 = D / 2;
  Tensor y(Shape{N, C, w2, h2, d2});
  std::vector<std::uint32_t> argmax(y.size());
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * W * H * D;
    for (int w = 0; w < w2; ++w) {
      for (int h = 0; h < h2; ++h) {
        for (int d = 0; d < d2; ++d, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          std::uint32_t best_i = 0;
          for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
              for (int c = 0; c < 2; ++c) {
                const auto i = static_cast<std::uint32_t>(
                    ((static_cast<std::size_t>(2 * w + a) * H) + 2 * h + b) * D + 2 * d + c);
                const float v = xv[base + i];
                if (v > best) {
                  best = v;
                  best_i = i;
                }
              }
            }
          }
          y[o] = best;
          argmax[o] = best_i;
        }
      }
    }
  }
  const std::size_t in_block = static_cast<std::size_t>(W) * H * D;
  const std::size_t out_block = static_cast<std::size_t>(w2) * h2 * d2;
  return make_result(std::move(y), {x}, [argmax = std::move(argmax), in_block, out_block](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax.size(); ++o) {
      dx[(o / out_block) * in_block + argmax[o]] += self.grad[o];
    }
  });
}

Var upsample2(const Var& x) {
  const Tensor& xv = x.value();
  require_rank(xv, 5, "upsample2");
  const int N = xv.dim(0), C = xv.dim(1), W = xv.dim(2), H = xv.dim(3), D = xv.dim(4);
  Tensor y(Shape{N, C, 2 * W, 2 * H, 2 * D});
  const int W2 = 2 * W, H2 = 2 * H, D2 = 2 * D;
  for (int nc = 0; nc < N * C; ++nc) {
    const float* src = xv.data() + static_cast<std::size_t>(nc) * W * H * D;
    float* dst = y.data() + static_cast<std::size_t>(nc) * W2 * H2 * D2;
    for (int w = 0; w < W2; ++w)
      for (int h = 0; h < H2; ++h)
        for (int d = 0; d < D2; ++d)
          dst[(static_cast<std::size_t>(w) * H2 + h) * D2 + d] =
              src[(static_cast<std::size_t>(w / 2) * H + h / 2) * D + d / 2];
  }
  return make_result(std::move(y), {x}, [=](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int nc = 0; nc < N * C; ++nc) {
      float* dst = dx.data() + static_cast<std::size_t>(nc) * W * H * D;
      const float* src = self.grad.data() + static_cast<std::size_t>(nc) * W2 * H2 * D2;
      for (int w = 0; w < W2; ++w)
        for (int h = 0; h < H2; ++h)
          for (int d = 0; d < D2; ++d)
            dst[(static_cast<std::size_t>(w / 2) * H + h / 2) * D + d / 2] +=
                src[(static_cast<std::size_t>(w) * H2 + h) * D2 + d];
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() >= 2 && av.rank() == bv.rank() && av.dim(0) == bv.dim(0) &&
              spatial_size(av.shape()) == spatial_size(bv.shape()),
          ErrorKind::shape,
          "concat_channels: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  for (int i = 2; i < av.rank(); ++i) {
    require(av.dim(i) == bv.dim(i), ErrorKind::shape, "concat_channels: spatial mismatch");
  }
  const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
  const std::size_t S = spatial_size(av.shape());
  Shape shape = av.shape();
  shape[1] = Ca + Cb;
  Tensor y(shape);
  for (int n = 0; n < N; ++n) {
    std::memcpy(y.data() + static_cast<std::size_t>(n) * (Ca + Cb) * S,
                av.data() + static_cast<std::size_t>(n) * Ca * S, sizeof(float) * Ca * S);
    std::memcpy(y.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * S,
                bv.data() + static_cast<std::size_t>(n) * Cb * S, sizeof(float) * Cb * S);
  }
  return make_result(std::move(y), {a, b}, [=](Node& self) {
    Node* an = self.inputs[0].get();
    Node* bn = self.inputs[1].get();
    for (int n = 0; n < N; ++n) {
      const float* g = self.grad.data() + static_cast<std::size_t>(n) * (Ca + Cb) * S;
      if (an->requires_grad) {
        float* da = an->grad_buffer().data() + static_cast<std::size_t>(n) * Ca * S;
        for (std::size_t i = 0; i < Ca * S; ++i) da[i] += g[i];
      }
      if (bn->requires_grad) {
        float* db = bn->grad_buffer().data() + static_cast<std::size_t>(n) * Cb * S;
        for (std::size_t i = 0; i < Cb * S; ++i) db[i] += g[Ca * S + i];
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank(xv, 2, "linear input");
  const int R = xv.dim(0), K = xv.dim(1), O = wv.dim(0);
  require(wv.dim(1) == K, ErrorKind::shape,
          "linear: input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  Tensor y(Shape{R, O});
  gemm(false, true, R, O, K, xv.data(), wv.data(), y.data(), false);
  for (int r = 0; r < R; ++r)
    for (int o = 0; o < O; ++o) y.at(r, o) += bias.value()[o];
  return make_result(std::move(y), {x, weight, bias}, [=](Node& self) {
    Node* xn = self.inputs[0].get();
    Node* wn = self.inputs[1].get();
    Node* bn = self.inputs[2].get();
    const float* dy = self.grad.data();
    if (xn->requires_grad) gemm(false, false, R, K, O, dy, wn->value.data(), xn->grad_buffer().data(), true);
    if (wn->requires_grad) gemm(true, false, O, K, R, dy, xn->value.data(), wn->grad_buffer().data(), true);
    if (bn->requires_grad) {
      Tensor& db = bn->grad_buffer();
      for (int r = 0; r < R; ++r)
        for (int o = 0; o < O; ++o) db[o] += dy[static_cast<std::size_t>(r) * O + o];
    }
  });
}

Var gather_positions(const Var& x, const std::vector<Position>& positions) {
  const Tensor& xv = x.value();
  require_rank(xv, 5, "gather_positions");
  const int N = xv.dim(0), C = xv.dim(1), W = xv.dim(2), H = xv.dim(3), D = xv.dim(4);
  const std::size_t S = static_cast<std::size_t>(W) * H * D;
  std::vector<std::size_t> offsets;
  offsets.reserve(positions.size());
  for (const auto& p : positions) {
    if (p[0] < 0 || p[0] >= N || p[1] < 0 || p[1] >= W || p[2] < 0 || p[2] >= H || p[3] < 0 ||
        p[3] >= D) {
      throw Error(ErrorKind::shape, "gather_positions: index (" + std::to_string(p[1]) + "," +
                                        std::to_string(p[2]) + "," + std::to_string(p[3]) +
                                        ") outside " + shape_string(xv.shape()));
    }
    offsets.push_back(static_cast<std::size_t>(p[0]) * C * S +
                      (static_cast<std::size_t>(p[1]) * H + p[2]) * D + p[3]);
  }
  const int P = static_cast<int>(positions.size());
  Tensor y(Shape{P, C});
  for (int r = 0; r < P; ++r)
    for (int c = 0; c < C; ++c) y.at(r, c) = xv[offsets[r] + static_cast<std::size_t>(c) * S];
  return make_result(std::move(y), {x}, [offsets = std::move(offsets), P, C, S](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int r = 0; r < P; ++r)
      for (int c = 0; c < C; ++c) dx[offsets[r] + static_cast<std::size_t>(c) * S] += self.grad.at(r, c);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorKind::shape, "concat_rows: no inputs");
  const int C = parts.front().value().dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    require_rank(p.value(), 2, "concat_rows");
    require(p.value().dim(1) == C, ErrorKind::shape, "concat_rows: column mismatch");
    rows += p.value().dim(0);
  }
  Tensor y(Shape{rows, C});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(y.data() + off, p.value().data(), sizeof(float) * p.value().size());
    off += p.value().size();
  }
  return make_result(std::move(y), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        Tensor& g = in->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Var normalize_rows(const Var& x, double eps) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "normalize_rows");
  const int R = xv.dim(0), C = xv.dim(1);
  Tensor y(xv.shape());
  std::vector<float> norms(R);
  for (int r = 0; r < R; ++r) {
    double sq = 0.0;
    for (int c = 0; c < C; ++c) sq += static_cast<double>(xv.at(r, c)) * xv.at(r, c);
    const double n = std::max(std::sqrt(sq), eps);
    norms[r] = static_cast<float>(n);
    for (int c = 0; c < C; ++c) y.at(r, c) = static_cast<float>(xv.at(r, c) / n);
  }
  return make_result(std::move(y), {x}, [norms = std::move(norms), R, C, eps](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const Tensor& xv = self.inputs[0]->value;
    for (int r = 0; r < R; ++r) {
      const double n = norms[r];
      if (n <= eps) {
        for (int c = 0; c < C; ++c) dx.at(r, c) += static_cast<float>(self.grad.at(r, c) / n);
        continue;
      }
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += static_cast<double>(self.grad.at(r, c)) * xv.at(r, c) / n;
      for (int c = 0; c < C; ++c) {
        dx.at(r, c) += static_cast<float>((self.grad.at(r, c) - dot * xv.at(r, c) / n) / n);
      }
    }
  });
}

Var softmax_channels(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, ErrorKind::shape, "softmax_channels: rank must be >= 2");
  const int N = xv.dim(0), C = xv.dim(1);
  const std::size_t S = spatial_size(xv.shape());
  Tensor y(xv.shape());
  for (int n = 0; n < N; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * C * S;
    for (std::size_t s = 0; s < S; ++s) {
      float mx = -std::numeric_limits<float>::infinity();
      for (int c = 0; c < C; ++c) mx = std::max(mx, xv[base + c * S + s]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(xv[base + c * S + s] - mx));
      for (int c = 0; c < C; ++c) {
        y[base + c * S + s] = static_cast<float>(std::exp(static_cast<double>(xv[base + c * S + s] - mx)) / z);
      }
    }
  }
  return make_result(y, {x}, [y, N, C, S](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int n = 0; n < N; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * C * S;
      for (std::size_t s = 0; s < S; ++s) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += static_cast<double>(y[base + c * S + s]) * self.grad[base + c * S + s];
        for (int c = 0; c < C; ++c) {
          const std::size_t i = base + c * S + s;
          dx[i] += static_cast<float>(y[i] * (self.grad[i] - dot));
        }
      }
    }
  });
}

Var select_batch(const Var& x, int begin, int count) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1 && begin >= 0 && count >= 0 && begin + count <= xv.dim(0),
          ErrorKind::shape, "select_batch: range outside batch");
  const std::size_t item = xv.size() / static_cast<std::size_t>(std::max(xv.dim(0), 1));
  Shape shape = xv.shape();
  shape[0] = count;
  Tensor y(shape);
  std::memcpy(y.data(), xv.data() + static_cast<std::size_t>(begin) * item, sizeof(float) * y.size());
  return make_result(std::move(y), {x}, [begin, item](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    float* dst = dx.data() + static_cast<std::size_t>(begin) * item;
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
  });
}

Var weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
  double total = 0.0;
  std::vector<Var> inputs;
  std::vector<double> weights;
  for (const auto& [w, v] : terms) {
    require(v.value().size() == 1, ErrorKind::shape, "weighted_sum: non-scalar term");
    total += w * v.value()[0];
    inputs.push_back(v);
    weights.push_back(w);
  }
  return make_result(Tensor(Shape{1}, static_cast<float>(total)), inputs,
                     [weights = std::move(weights)](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (self.inputs[i]->requires_grad) {
        self.inputs[i]->grad_buffer()[0] += static_cast<float>(weights[i] * self.grad[0]);
      }
    }
  });
}

Var scalar_objective(const std::vector<Var>& inputs,
                     const std::function<LossValue<float>(const std::vector<const Tensor*>&)>& fn) {
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  for (const auto& v : inputs) values.push_back(&v.value());
  LossValue<float> result = fn(values);
  require(result.grads.size() == inputs.size(), ErrorKind::shape,
          "scalar_objective: gradient count mismatch");
  return make_result(Tensor(Shape{1}, static_cast<float>(result.value)), inputs,
                     [grads = std::move(result.grads)](Node& self) {
    const float upstream = self.grad[0];
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      Node* in = self.inputs[i].get();
      if (!in->requires_grad || grads[i].empty()) continue;
      Tensor& g = in->grad_buffer();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += upstream * grads[i][k];
    }
  });
}

}  // namespace ops
}  // namespace longiseg
