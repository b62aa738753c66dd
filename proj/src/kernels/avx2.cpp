// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma and
// must only be entered after cpu_has_avx2_fma() returned true.

#include <immintrin.h>

#include <algorithm>
#include <cstdint>
#include <vector>

#include "mvseg/kernels.hpp"

namespace mvseg::kernels::avx2 {
namespace {

// Register tile of the GEMM micro-kernel: 6 rows x 16 columns = 12 ymm
// accumulators, 2 for the B row and 1 broadcast.
constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 16;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 96;
constexpr std::size_t kNc = 2048;

struct PackBuffers {
  std::vector<float> a = std::vector<float>(kMc * kKc);
  std::vector<float> b = std::vector<float>(kKc * kNc);
};

PackBuffers& pack_buffers() {
  thread_local PackBuffers buffers;
  return buffers;
}

void pack_a(Trans ta, const float* a, std::size_t lda, std::size_t i0, std::size_t mc,
            std::size_t p0, std::size_t kc, float* out) {
  for (std::size_t ir = 0; ir < mc; ir += kMr) {
    const std::size_t rows = std::min(kMr, mc - ir);
    for (std::size_t p = 0; p < kc; ++p) {
      for (std::size_t r = 0; r < kMr; ++r) {
        float value = 0.0f;
        if (r < rows) {
          const std::size_t i = i0 + ir + r;
          value = ta == Trans::no ? a[i * lda + p0 + p] : a[(p0 + p) * lda + i];
        }
        *out++ = value;
      }
    }
  }
}

void pack_b(Trans tb, const float* b, std::size_t ldb, std::size_t p0, std::size_t kc,
            std::size_t j0, std::size_t nc, float* out) {
  for (std::size_t jr = 0; jr < nc; jr += kNr) {
    const std::size_t cols = std::min(kNr, nc - jr);
    const std::size_t j = j0 + jr;
    if (tb == Trans::no) {
      for (std::size_t p = 0; p < kc; ++p) {
        const float* src = b + (p0 + p) * ldb + j;
        if (cols == kNr) {
          _mm256_storeu_ps(out, _mm256_loadu_ps(src));
          _mm256_storeu_ps(out + 8, _mm256_loadu_ps(src + 8));
        } else {
          for (std::size_t c = 0; c < kNr; ++c) out[c] = c < cols ? src[c] : 0.0f;
        }
        out += kNr;
      }
    } else {
      // Walk each source row contiguously; the packed panel is written with
      // a stride of kNr instead.
      for (std::size_t c = 0; c < kNr; ++c) {
        const float* src = b + (j + c) * ldb + p0;
        if (c < cols) {
          for (std::size_t p = 0; p < kc; ++p) out[p * kNr + c] = src[p];
        } else {
          for (std::size_t p = 0; p < kc; ++p) out[p * kNr + c] = 0.0f;
        }
      }
      out += kc * kNr;
    }
  }
}

inline void store_row(float* c, __m256 lo, __m256 hi, float beta) {
  if (beta == 0.0f) {
    _mm256_storeu_ps(c, lo);
    _mm256_storeu_ps(c + 8, hi);
  } else if (beta == 1.0f) {
    _mm256_storeu_ps(c, _mm256_add_ps(_mm256_loadu_ps(c), lo));
    _mm256_storeu_ps(c + 8, _mm256_add_ps(_mm256_loadu_ps(c + 8), hi));
  } else {
    const __m256 vb = _mm256_set1_ps(beta);
    _mm256_storeu_ps(c, _mm256_fmadd_ps(vb, _mm256_loadu_ps(c), lo));
    _mm256_storeu_ps(c + 8, _mm256_fmadd_ps(vb, _mm256_loadu_ps(c + 8), hi));
  }
}

// bstride is kNr for a packed B panel, or ldb when B is read in place.
void micro_kernel(std::size_t kc, const float* ap, const float* bp, std::size_t bstride, float* c,
                  std::size_t ldc, float beta, std::size_t rows, std::size_t cols) {
  __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
  __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
  __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
  __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
  __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
  __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();

  for (std::size_t p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    __m256 a = _mm256_broadcast_ss(ap + 0);
    c00 = _mm256_fmadd_ps(a, b0, c00);
    c01 = _mm256_fmadd_ps(a, b1, c01);
    a = _mm256_broadcast_ss(ap + 1);
    c10 = _mm256_fmadd_ps(a, b0, c10);
    c11 = _mm256_fmadd_ps(a, b1, c11);
    a = _mm256_broadcast_ss(ap + 2);
    c20 = _mm256_fmadd_ps(a, b0, c20);
    c21 = _mm256_fmadd_ps(a, b1, c21);
    a = _mm256_broadcast_ss(ap + 3);
    c30 = _mm256_fmadd_ps(a, b0, c30);
    c31 = _mm256_fmadd_ps(a, b1, c31);
    a = _mm256_broadcast_ss(ap + 4);
    c40 = _mm256_fmadd_ps(a, b0, c40);
    c41 = _mm256_fmadd_ps(a, b1, c41);
    a = _mm256_broadcast_ss(ap + 5);
    c50 = _mm256_fmadd_ps(a, b0, c50);
    c51 = _mm256_fmadd_ps(a, b1, c51);
    ap += kMr;
    bp += bstride;
  }

  if (rows == kMr && cols == kNr) {
    store_row(c + 0 * ldc, c00, c01, beta);
    store_row(c + 1 * ldc, c10, c11, beta);
    store_row(c + 2 * ldc, c20, c21, beta);
    store_row(c + 3 * ldc, c30, c31, beta);
    store_row(c + 4 * ldc, c40, c41, beta);
    store_row(c + 5 * ldc, c50, c51, beta);
    return;
  }

  alignas(32) float tile[kMr][kNr];
  _mm256_store_ps(tile[0], c00), _mm256_store_ps(tile[0] + 8, c01);
  _mm256_store_ps(tile[1], c10), _mm256_store_ps(tile[1] + 8, c11);
  _mm256_store_ps(tile[2], c20), _mm256_store_ps(tile[2] + 8, c21);
  _mm256_store_ps(tile[3], c30), _mm256_store_ps(tile[3] + 8, c31);
  _mm256_store_ps(tile[4], c40), _mm256_store_ps(tile[4] + 8, c41);
  _mm256_store_ps(tile[5], c50), _mm256_store_ps(tile[5] + 8, c51);
  for (std::size_t r = 0; r < rows; ++r) {
    float* crow = c + r * ldc;
    for (std::size_t j = 0; j < cols; ++j) {
      crow[j] = beta == 0.0f ? tile[r][j] : beta * crow[j] + tile[r][j];
    }
  }
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = beta == 0.0f ? 0.0f : beta * c[i * ldc + j];
    }
    return;
  }

  auto& buffers = pack_buffers();
  for (std::size_t jc = 0; jc < n; jc += kNc) {
    const std::size_t nc = std::min(kNc, n - jc);
    // Full 16-wide column panels of an untransposed B are consumed in place;
    // only the ragged tail panel goes through the packing buffer.
    const std::size_t direct_cols = tb == Trans::no ? nc / kNr * kNr : 0;
    for (std::size_t pc = 0; pc < k; pc += kKc) {
      const std::size_t kc = std::min(kKc, k - pc);
      const float block_beta = pc == 0 ? beta : 1.0f;
      if (direct_cols < nc) {
        pack_b(tb, b, ldb, pc, kc, jc + direct_cols, nc - direct_cols, buffers.b.data());
      }
      for (std::size_t ic = 0; ic < m; ic += kMc) {
        const std::size_t mc = std::min(kMc, m - ic);
        pack_a(ta, a, lda, ic, mc, pc, kc, buffers.a.data());
        for (std::size_t jr = 0; jr < nc; jr += kNr) {
          const bool direct = jr < direct_cols;
          const float* bp = direct ? b + pc * ldb + jc + jr : buffers.b.data() + (jr - direct_cols) * kc;
          const std::size_t bstride = direct ? ldb : kNr;
          const std::size_t cols = std::min(kNr, nc - jr);
          for (std::size_t ir = 0; ir < mc; ir += kMr) {
            const float* ap = buffers.a.data() + ir * kc;
            const std::size_t rows = std::min(kMr, mc - ir);
            micro_kernel(kc, ap, bp, bstride, c + (ic + ir) * ldc + jc + jr, ldc, block_beta, rows,
                         cols);
          }
        }
      }
    }
  }
}

void relu_forward(const float* x, float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(const float* activation, float* grad, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 keep = _mm256_cmp_ps(_mm256_loadu_ps(activation + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(grad + i, _mm256_and_ps(keep, _mm256_loadu_ps(grad + i)));
  }
  for (; i < n; ++i) {
    if (!(activation[i] > 0.0f)) grad[i] = 0.0f;
  }
}

void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n,
                 const AdamStep& s) {
  const float step = s.lr / s.bias_correction1;
  const float inv_bc2 = 1.0f / s.bias_correction2;
  const __m256 b1 = _mm256_set1_ps(s.beta1), one_b1 = _mm256_set1_ps(1.0f - s.beta1);
  const __m256 b2 = _mm256_set1_ps(s.beta2), one_b2 = _mm256_set1_ps(1.0f - s.beta2);
  const __m256 vstep = _mm256_set1_ps(step), vinv = _mm256_set1_ps(inv_bc2);
  const __m256 veps = _mm256_set1_ps(s.eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    const __m256 mi = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(one_b1, g));
    const __m256 vi = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                                    _mm256_mul_ps(_mm256_mul_ps(one_b2, g), g));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vi, vinv)), veps);
    const __m256 upd = _mm256_div_ps(_mm256_mul_ps(vstep, mi), denom);
    _mm256_storeu_ps(param + i, _mm256_sub_ps(_mm256_loadu_ps(param + i), upd));
  }
  if (i < n) generic::kernels().adam_update(param + i, grad + i, m + i, v + i, n - i, s);
}

double dot(const float* x, const float* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    const __m256 yv = _mm256_loadu_ps(y + i);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(xv)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(yv)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(xv, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(yv, 1)), acc1);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) total += static_cast<double>(x[i]) * y[i];
  return total;
}

double sum(const float* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(xv)));
    acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(xv, 1)));
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) total += x[i];
  return total;
}

constexpr KernelSet kAvx2{"avx2", gemm, relu_forward, relu_backward, adam_update, dot, sum};

}  // namespace

const KernelSet* kernels() { return &kAvx2; }

}  // namespace mvseg::kernels::avx2
