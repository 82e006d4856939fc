#pragma once

#include <cstdint>

namespace ssd::kern {

// C[M x N] (+)= op(A) * op(B), row-major, op transposes when the flag is set.
// lda/ldb/ldc are row strides of the stored (untransposed) matrices.
// Accumulation order per output element is fixed by the k loop, so results
// do not depend on how work is split across threads.
template <typename S>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
          std::int64_t k, const S* a, std::int64_t lda, const S* b,
          std::int64_t ldb, S* c, std::int64_t ldc, bool accumulate);

extern template void gemm<float>(bool, bool, std::int64_t, std::int64_t,
                                 std::int64_t, const float*, std::int64_t,
                                 const float*, std::int64_t, float*,
                                 std::int64_t, bool);
extern template void gemm<double>(bool, bool, std::int64_t, std::int64_t,
                                  std::int64_t, const double*, std::int64_t,
                                  const double*, std::int64_t, double*,
                                  std::int64_t, bool);

}  // namespace ssd::kern
