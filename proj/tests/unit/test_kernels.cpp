#include <cmath>
#include <vector>

#include "doctest.h"
#include "mvseg/kernels.hpp"
#include "mvseg/rng.hpp"

using namespace mvseg;
using kernels::Trans;

namespace {

std::vector<float> random_vector(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

// Textbook triple loop in double.
void reference_gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                    const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const float av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const float bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        acc += static_cast<double>(av) * bv;
      }
      c[i * ldc + j] = static_cast<float>(acc + (beta == 0.0f ? 0.0 : beta * static_cast<double>(c[i * ldc + j])));
    }
  }
}

void check_gemm(const kernels::KernelSet& ks, Rng& rng, Trans ta, Trans tb, std::size_t m, std::size_t n,
                std::size_t k, float beta) {
  const std::size_t lda = (ta == Trans::no ? k : m) + 3;
  const std::size_t ldb = (tb == Trans::no ? n : k) + 5;
  const std::size_t ldc = n + 7;
  const auto a = random_vector(rng, (ta == Trans::no ? m : k) * lda);
  const auto b = random_vector(rng, (tb == Trans::no ? k : n) * ldb);
  auto c = random_vector(rng, m * ldc);
  auto expect = c;
  if (beta == 0.0f) {
    for (std::size_t i = 0; i < m; ++i) c[i * ldc] = std::nanf("");  // must be ignored
  }
  ks.gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, beta, c.data(), ldc);
  reference_gemm(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, beta, expect.data(), ldc);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < ldc; ++j) {
      const float tol = j < n ? 1e-5f * static_cast<float>(k + 1) : 0.0f;
      if (j >= n) {
        REQUIRE(c[i * ldc + j] == expect[i * ldc + j]);  // padding untouched
      } else {
        REQUIRE(std::abs(c[i * ldc + j] - expect[i * ldc + j]) <= tol);
      }
    }
  }
}

std::vector<const kernels::KernelSet*> all_sets() {
  std::vector<const kernels::KernelSet*> sets{&kernels::generic::kernels()};
  if (kernels::avx2::kernels() && kernels::cpu_has_avx2_fma()) sets.push_back(kernels::avx2::kernels());
  return sets;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("gemm matches a double-precision reference for every variant") {
    Rng rng(11);
    const std::size_t shapes[][3] = {{1, 1, 1},   {6, 16, 8},  {7, 17, 9},   {13, 33, 300}, {96, 40, 257},
                                     {100, 2050, 3}, {2, 5, 1000}, {64, 64, 64}, {5, 300, 20}};
    for (const auto* ks : all_sets()) {
      CAPTURE(ks->name);
      for (const auto& s : shapes) {
        for (Trans ta : {Trans::no, Trans::yes}) {
          for (Trans tb : {Trans::no, Trans::yes}) {
            for (float beta : {0.0f, 1.0f, 0.5f}) {
              CAPTURE(s[0]);
              CAPTURE(s[1]);
              CAPTURE(s[2]);
              check_gemm(*ks, rng, ta, tb, s[0], s[1], s[2], beta);
            }
          }
        }
      }
    }
  }

  TEST_CASE("SIMD element-wise kernels agree with the scalar reference") {
    const auto* simd = kernels::avx2::kernels();
    if (!simd || !kernels::cpu_has_avx2_fma()) {
      MESSAGE("AVX2 variant unavailable on this machine; skipped");
      return;
    }
    const auto& ref = kernels::generic::kernels();
    Rng rng(3);
    for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 31u, 1000u, 4099u}) {
      CAPTURE(n);
      auto x = random_vector(rng, n);
      std::vector<float> y1(n), y2(n);
      ref.relu_forward(x.data(), y1.data(), n);
      simd->relu_forward(x.data(), y2.data(), n);
      CHECK(y1 == y2);

      auto g1 = random_vector(rng, n);
      auto g2 = g1;
      ref.relu_backward(x.data(), g1.data(), n);
      simd->relu_backward(x.data(), g2.data(), n);
      CHECK(g1 == g2);

      const auto w = random_vector(rng, n);
      CHECK(simd->dot(x.data(), w.data(), n) == doctest::Approx(ref.dot(x.data(), w.data(), n)).epsilon(1e-12));
      CHECK(simd->sum(x.data(), n) == doctest::Approx(ref.sum(x.data(), n)).epsilon(1e-12));

      auto p1 = random_vector(rng, n), grad = random_vector(rng, n);
      auto p2 = p1;
      std::vector<float> m1(n, 0.01f), v1(n, 0.02f);
      auto m2 = m1, v2 = v1;
      const kernels::AdamStep step{2e-4f, 0.9f, 0.999f, 1e-7f, 1.0f - 0.9f * 0.9f, 1.0f - 0.999f * 0.999f};
      ref.adam_update(p1.data(), grad.data(), m1.data(), v1.data(), n, step);
      simd->adam_update(p2.data(), grad.data(), m2.data(), v2.data(), n, step);
      for (std::size_t i = 0; i < n; ++i) {
        REQUIRE(p2[i] == doctest::Approx(p1[i]).epsilon(1e-6));
        REQUIRE(m2[i] == doctest::Approx(m1[i]).epsilon(1e-6));
        REQUIRE(v2[i] == doctest::Approx(v1[i]).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("relu kernels work in place") {
    for (const auto* ks : all_sets()) {
      std::vector<float> x{-1.0f, 0.0f, 2.0f, -0.5f, 3.0f, -4.0f, 5.0f, 6.0f, -7.0f};
      ks->relu_forward(x.data(), x.data(), x.size());
      CHECK(x == std::vector<float>{0, 0, 2, 0, 3, 0, 5, 6, 0});
    }
  }

  TEST_CASE("runtime selection") {
    CHECK(kernels::select("generic"));
    CHECK(kernels::active().name == kernels::generic::kernels().name);
    CHECK_FALSE(kernels::select("neon"));
    const bool simd = kernels::avx2::kernels() && kernels::cpu_has_avx2_fma();
    CHECK(kernels::select("avx2") == simd);
    if (!simd) kernels::select("generic");
  }
}
