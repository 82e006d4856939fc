#include "ssd/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include "ssd/parallel.hpp"

namespace ssd::kern {

namespace {

// C rows [r0, r1) of A[m x k] * B[k x n], both untransposed. i-k-j order with
// a 4-way k unroll: the inner update over contiguous C/B rows vectorizes,
// and each C element accumulates in a fixed order regardless of the row
// partition, so results never depend on the thread count.
template <typename S>
void gemm_nn_rows(std::int64_t r0, std::int64_t r1, std::int64_t n,
                  std::int64_t k, const S* a, std::int64_t lda, const S* b,
                  std::int64_t ldb, S* c, std::int64_t ldc) {
  const std::int64_t k4 = k & ~std::int64_t(3);
  for (std::int64_t i = r0; i < r1; ++i) {
    S* ci = c + i * ldc;
    const S* ai = a + i * lda;
    std::int64_t p = 0;
    for (; p < k4; p += 4) {
      const S a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const S* b0 = b + p * ldb;
      const S* b1 = b0 + ldb;
      const S* b2 = b1 + ldb;
      const S* b3 = b2 + ldb;
      for (std::int64_t j = 0; j < n; ++j)
        ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const S av = ai[p];
      const S* bp = b + p * ldb;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C rows of A^T * B where A is stored [k x m]: k outermost so each C element
// still accumulates in ascending k within its row chunk.
template <typename S>
void gemm_tn_rows(std::int64_t r0, std::int64_t r1, std::int64_t n,
                  std::int64_t k, const S* a, std::int64_t lda, const S* b,
                  std::int64_t ldb, S* c, std::int64_t ldc) {
  for (std::int64_t p = 0; p < k; ++p) {
    const S* ap = a + p * lda;
    const S* bp = b + p * ldb;
    for (std::int64_t i = r0; i < r1; ++i) {
      const S av = ap[i];
      if (av == S(0)) continue;
      S* ci = c + i * ldc;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// Direct row-row dot products for A * B^T; only worthwhile for small
// operands where a scratch transpose would cost more than it saves.
template <typename S>
void gemm_nt_rows(std::int64_t r0, std::int64_t r1, std::int64_t n,
                  std::int64_t k, const S* a, std::int64_t lda, const S* b,
                  std::int64_t ldb, S* c, std::int64_t ldc) {
  for (std::int64_t i = r0; i < r1; ++i) {
    const S* ai = a + i * lda;
    S* ci = c + i * ldc;
    for (std::int64_t j = 0; j < n; ++j) {
      const S* bj = b + j * ldb;
      S acc = S(0);
      for (std::int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

template <typename S>
void gemm_tt_rows(std::int64_t r0, std::int64_t r1, std::int64_t n,
                  std::int64_t k, const S* a, std::int64_t lda, const S* b,
                  std::int64_t ldb, S* c, std::int64_t ldc) {
  for (std::int64_t i = r0; i < r1; ++i) {
    S* ci = c + i * ldc;
    for (std::int64_t j = 0; j < n; ++j) {
      S acc = S(0);
      for (std::int64_t p = 0; p < k; ++p) acc += a[p * lda + i] * b[j * ldb + p];
      ci[j] += acc;
    }
  }
}

// src stored [rows x cols] with row stride ld -> dst [cols x rows].
template <typename S>
void transpose(const S* src, std::int64_t rows, std::int64_t cols,
               std::int64_t ld, S* dst) {
  constexpr std::int64_t kBlock = 32;
  parallel_for(0, (rows + kBlock - 1) / kBlock, [&](std::int64_t t0,
                                                    std::int64_t t1) {
    for (std::int64_t t = t0; t < t1; ++t) {
      const std::int64_t r0 = t * kBlock, r1 = std::min(r0 + kBlock, rows);
      for (std::int64_t c0 = 0; c0 < cols; c0 += kBlock) {
        const std::int64_t c1 = std::min(c0 + kBlock, cols);
        for (std::int64_t r = r0; r < r1; ++r)
          for (std::int64_t c = c0; c < c1; ++c)
            dst[c * rows + r] = src[r * ld + c];
      }
    }
  });
}

}  // namespace

template <typename S>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
          std::int64_t k, const S* a, std::int64_t lda, const S* b,
          std::int64_t ldb, S* c, std::int64_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::int64_t i = 0; i < m; ++i)
      std::memset(c + i * ldc, 0, sizeof(S) * static_cast<std::size_t>(n));
  }
  if (m == 0 || n == 0 || k == 0) return;

  // A^T B^T stays a rarity; everything hot funnels into the NN/TN kernels.
  // B^T is materialized once so the inner loops stream contiguously instead
  // of reducing down strided columns.
  std::vector<S> bt;
  const S* b_eff = b;
  std::int64_t ldb_eff = ldb;
  bool tb_eff = trans_b;
  if (trans_b && !trans_a && k * n >= (std::int64_t(1) << 14)) {
    bt.resize(static_cast<std::size_t>(k * n));
    transpose<S>(b, n, k, ldb, bt.data());  // B stored [n x k] -> [k x n]
    b_eff = bt.data();
    ldb_eff = n;
    tb_eff = false;
  }

  parallel_for(0, m, [&](std::int64_t r0, std::int64_t r1) {
    if (!trans_a && !tb_eff)
      gemm_nn_rows(r0, r1, n, k, a, lda, b_eff, ldb_eff, c, ldc);
    else if (!trans_a && tb_eff)
      gemm_nt_rows(r0, r1, n, k, a, lda, b, ldb, c, ldc);
    else if (trans_a && !tb_eff)
      gemm_tn_rows(r0, r1, n, k, a, lda, b_eff, ldb_eff, c, ldc);
    else
      gemm_tt_rows(r0, r1, n, k, a, lda, b, ldb, c, ldc);
  });
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t,
                          const float*, std::int64_t, const float*,
                          std::int64_t, float*, std::int64_t, bool);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t,
                           std::int64_t, const double*, std::int64_t,
                           const double*, std::int64_t, double*, std::int64_t,
                           bool);

}  // namespace ssd::kern
