#include "cdt/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace cdt::kernels {

namespace scalar {

// Accumulate in double: the reference is the accuracy yardstick for the
// wider variants, not a speed baseline.
float dot(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return static_cast<float>(acc);
}

float norm_sq(const float* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(a[i]);
  }
  return static_cast<float>(acc);
}

void dot_rows(const float* query, const float* rows, std::size_t n_rows,
              std::size_t dim, float* out) {
  for (std::size_t r = 0; r < n_rows; ++r) {
    out[r] = dot(query, rows + r * dim, dim);
  }
}

}  // namespace scalar

namespace {

constexpr KernelTable kScalarTable{SimdLevel::scalar, &scalar::dot,
                                   &scalar::norm_sq, &scalar::dot_rows};

#if defined(CDT_HAVE_AVX2_KERNELS)
constexpr KernelTable kAvx2Table{SimdLevel::avx2, &avx2::dot, &avx2::norm_sq,
                                 &avx2::dot_rows};
#endif

bool cpu_has_avx2() {
#if defined(CDT_HAVE_AVX2_KERNELS) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& select() {
  const char* forced = std::getenv("CDT_SIMD");
  if (forced != nullptr) {
    const std::string want{forced};
    if (want == "scalar") return kScalarTable;
    if (want == "avx2" && supported(SimdLevel::avx2)) return table(SimdLevel::avx2);
    return kScalarTable;
  }
  if (supported(SimdLevel::avx2)) return table(SimdLevel::avx2);
  return kScalarTable;
}

}  // namespace

std::string_view to_string(SimdLevel level) {
  switch (level) {
    case SimdLevel::scalar:
      return "scalar";
    case SimdLevel::avx2:
      return "avx2";
  }
  return "unknown";
}

bool supported(SimdLevel level) {
  switch (level) {
    case SimdLevel::scalar:
      return true;
    case SimdLevel::avx2:
      return cpu_has_avx2();
  }
  return false;
}

const KernelTable& table(SimdLevel level) {
  if (!supported(level)) {
    throw std::invalid_argument("kernel level not supported: " +
                                std::string(to_string(level)));
  }
#if defined(CDT_HAVE_AVX2_KERNELS)
  if (level == SimdLevel::avx2) return kAvx2Table;
#endif
  return kScalarTable;
}

const KernelTable& active() {
  static const KernelTable& chosen = select();
  return chosen;
}

}  // namespace cdt::kernels
