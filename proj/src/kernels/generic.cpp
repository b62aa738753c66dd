#include "mvseg/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace mvseg::kernels::generic {
namespace {

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * ldc;
    if (beta == 0.0f) {
      std::fill(crow, crow + n, 0.0f);
    } else if (beta != 1.0f) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }

  if (tb == Trans::no) {
    // i-k-j keeps the innermost loop on contiguous rows of B and C.
    for (std::size_t i = 0; i < m; ++i) {
      float* crow = c + i * ldc;
      for (std::size_t p = 0; p < k; ++p) {
        const float aip = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const float* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
    return;
  }

  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const float* bcol = b + j * ldb;
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) {
        const float aip = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        acc += aip * bcol[p];
      }
      crow[j] += acc;
    }
  }
}

void relu_forward(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(const float* activation, float* grad, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!(activation[i] > 0.0f)) grad[i] = 0.0f;
  }
}

void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n,
                 const AdamStep& s) {
  const float step = s.lr / s.bias_correction1;
  const float inv_bc2 = 1.0f / s.bias_correction2;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = s.beta1 * m[i] + (1.0f - s.beta1) * grad[i];
    v[i] = s.beta2 * v[i] + (1.0f - s.beta2) * grad[i] * grad[i];
    param[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + s.eps);
  }
}

double dot(const float* x, const float* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * y[i];
  return acc;
}

double sum(const float* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

constexpr KernelSet kGeneric{"generic", gemm, relu_forward, relu_backward, adam_update, dot, sum};

}  // namespace

const KernelSet& kernels() { return kGeneric; }

}  // namespace mvseg::kernels::generic
