#include <atomic>
#include <cstdlib>

#include "mvseg/kernels.hpp"

namespace mvseg::kernels {

#if !MVSEG_HAVE_AVX2
namespace avx2 {
const KernelSet* kernels() { return nullptr; }
}  // namespace avx2
#endif

bool cpu_has_avx2_fma() {
#if MVSEG_HAVE_AVX2 && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelSet* detect() {
  if (const char* env = std::getenv("MVSEG_KERNELS"); env && std::string_view(env) == "generic") {
    return &generic::kernels();
  }
  if (avx2::kernels() != nullptr && cpu_has_avx2_fma()) return avx2::kernels();
  return &generic::kernels();
}

std::atomic<const KernelSet*>& selected() {
  static std::atomic<const KernelSet*> current{detect()};
  return current;
}

}  // namespace

const KernelSet& active() { return *selected().load(std::memory_order_acquire); }

bool select(std::string_view name) {
  if (name == "generic") {
    selected().store(&generic::kernels(), std::memory_order_release);
    return true;
  }
  if (name == "avx2" && avx2::kernels() != nullptr && cpu_has_avx2_fma()) {
    selected().store(avx2::kernels(), std::memory_order_release);
    return true;
  }
  return false;
}

}  // namespace mvseg::kernels
