#pragma once

// Data-parallel inner loops used by the network: a general single-precision
// matrix multiply and a handful of element-wise passes. Every kernel has a
// portable scalar reference in mvseg::kernels::generic and, where the build
// supports it, an AVX2/FMA variant in mvseg::kernels::avx2. The variant used
// by the rest of the library is chosen once at runtime (see active()).

#include <cstddef>
#include <string_view>

namespace mvseg::kernels {

enum class Trans : bool { no = false, yes = true };

/// C = op(A) * op(B) + beta * C, with op(A) of shape M x K and op(B) of
/// shape K x N. All matrices are row-major with explicit leading dimensions.
/// When beta == 0 the prior contents of C are ignored (NaNs included).
using GemmFn = void (*)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                        const float* a, std::size_t lda, const float* b, std::size_t ldb,
                        float beta, float* c, std::size_t ldc);

/// y[i] = max(x[i], 0). In-place (y == x) is allowed.
using ReluForwardFn = void (*)(const float* x, float* y, std::size_t n);

/// grad[i] = activation[i] > 0 ? grad[i] : 0
using ReluBackwardFn = void (*)(const float* activation, float* grad, std::size_t n);

struct AdamStep {
  float lr;
  float beta1;
  float beta2;
  float eps;
  float bias_correction1;  // 1 - beta1^t
  float bias_correction2;  // 1 - beta2^t
};

/// One adaptive-moment update over a flat parameter range.
using AdamUpdateFn = void (*)(float* param, const float* grad, float* m, float* v, std::size_t n,
                              const AdamStep& step);

/// Sum of x[i] * y[i], accumulated in double.
using DotFn = double (*)(const float* x, const float* y, std::size_t n);

/// Sum of x[i], accumulated in double.
using SumFn = double (*)(const float* x, std::size_t n);

struct KernelSet {
  std::string_view name;
  GemmFn gemm;
  ReluForwardFn relu_forward;
  ReluBackwardFn relu_backward;
  AdamUpdateFn adam_update;
  DotFn dot;
  SumFn sum;
};

namespace generic {
const KernelSet& kernels();
}

namespace avx2 {
/// nullptr when the library was built without the AVX2 translation unit.
const KernelSet* kernels();
}

/// True when the running CPU reports AVX2 and FMA.
bool cpu_has_avx2_fma();

/// Kernel set in use. Picks AVX2 when both compiled in and supported by the
/// CPU, unless the environment variable MVSEG_KERNELS=generic forces the
/// scalar path.
const KernelSet& active();

/// Override the selection ("generic" or "avx2"). Returns false if the
/// requested set is unavailable on this machine.
bool select(std::string_view name);

}  // namespace mvseg::kernels
