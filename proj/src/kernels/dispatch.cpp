#include "tabl/kernels/kernels.hpp"

#include <cstdlib>
#include <string_view>

namespace tabl::kernels {

bool cpu_has_avx2() {
#if defined(TABL_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelTable& resolve() {
  const char* env = std::getenv("TABL_SIMD");
  if (env != nullptr && std::string_view(env) == "scalar") return scalar_table();
#if defined(TABL_HAVE_AVX2)
  if (cpu_has_avx2()) return avx2_table();
#endif
  return scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = resolve();
  return table;
}

}  // namespace tabl::kernels
