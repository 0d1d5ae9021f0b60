#pragma once

// Dense float kernels used by the retrieval scan.
//
// Every kernel has a portable scalar reference in cdt::kernels::scalar. Wider
// variants live in separately compiled translation units and are chosen once
// at runtime from the CPU's capabilities. CDT_SIMD=scalar|avx2 in the
// environment overrides the choice (an unsupported request falls back to
// scalar).

#include <cstddef>
#include <span>
#include <string_view>

namespace cdt::kernels {

enum class SimdLevel { scalar, avx2 };

std::string_view to_string(SimdLevel level);

struct KernelTable {
  SimdLevel level;
  float (*dot)(const float* a, const float* b, std::size_t n);
  float (*norm_sq)(const float* a, std::size_t n);
  // out[r] = dot(query, rows + r * dim) for r in [0, n_rows)
  void (*dot_rows)(const float* query, const float* rows, std::size_t n_rows,
                   std::size_t dim, float* out);
};

namespace scalar {
float dot(const float* a, const float* b, std::size_t n);
float norm_sq(const float* a, std::size_t n);
void dot_rows(const float* query, const float* rows, std::size_t n_rows,
              std::size_t dim, float* out);
}  // namespace scalar

#if defined(CDT_HAVE_AVX2_KERNELS)
namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
float norm_sq(const float* a, std::size_t n);
void dot_rows(const float* query, const float* rows, std::size_t n_rows,
              std::size_t dim, float* out);
}  // namespace avx2
#endif

/// True when this build contains the variant and the CPU can run it.
bool supported(SimdLevel level);

/// Kernel table for an explicit level; throws std::invalid_argument when the
/// level is not supported here.
const KernelTable& table(SimdLevel level);

/// The table selected for this process (detected once, thread-safe).
const KernelTable& active();

inline float dot(std::span<const float> a, std::span<const float> b) {
  return active().dot(a.data(), b.data(), a.size() < b.size() ? a.size() : b.size());
}

inline float norm_sq(std::span<const float> a) {
  return active().norm_sq(a.data(), a.size());
}

}  // namespace cdt::kernels
