#pragma once

#include <algorithm>
#include <cstddef>

namespace mixres::detail {

/// Strided read-only view of a matrix operand: element (i, k) lives at
/// ptr[i * row_stride + k * col_stride]. Lets callers pass transposed
/// operands without copying.
template <class T>
struct MatView {
  const T* ptr;
  std::size_t row_stride;
  std::size_t col_stride;
  T operator()(std::size_t i, std::size_t k) const { return ptr[i * row_stride + k * col_stride]; }
};

// Widest register tile: NB contiguous columns of C.
template <class T>
inline constexpr std::size_t kGemmNB = 256 / sizeof(T);
inline constexpr std::size_t kGemmKB = 256;

template <class T, std::size_t MR, std::size_t NB>
inline void gemm_tile_full(std::size_t i0, std::size_t k0, std::size_t k1, MatView<T> a, const T* b, std::size_t ldb,
                           T* c, std::size_t ldc) {
  T acc[MR][NB];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NB; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t k = k0; k < k1; ++k) {
    const T* brow = b + k * ldb;
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a(i0 + r, k);
      for (std::size_t j = 0; j < NB; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NB; ++j) c[r * ldc + j] = acc[r][j];
}

template <class T>
inline void gemm_tile_edge(std::size_t i0, std::size_t mr, std::size_t nb, std::size_t k0, std::size_t k1,
                           MatView<T> a, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t r = 0; r < mr; ++r) {
    T* crow = c + r * ldc;
    for (std::size_t k = k0; k < k1; ++k) {
      const T av = a(i0 + r, k);
      const T* brow = b + k * ldb;
      for (std::size_t j = 0; j < nb; ++j) crow[j] += av * brow[j];
    }
  }
}

// Rows of C covered by one register tile of width NB: narrow tiles take more
// rows so enough independent accumulators stay in flight.
template <std::size_t NB, class T>
inline constexpr std::size_t kTileRows = NB == kGemmNB<T> ? 4 : 8;

template <class T, std::size_t NB>
inline void gemm_panel(std::size_t M, std::size_t k0, std::size_t k1, MatView<T> a, const T* b, std::size_t ldb, T* c,
                       std::size_t ldc) {
  constexpr std::size_t MR = kTileRows<NB, T>;
  std::size_t i0 = 0;
  for (; i0 + MR <= M; i0 += MR) gemm_tile_full<T, MR, NB>(i0, k0, k1, a, b, ldb, c + i0 * ldc, ldc);
  if (i0 < M) gemm_tile_edge<T>(i0, M - i0, NB, k0, k1, a, b, ldb, c + i0 * ldc, ldc);
}

/// C[M x N] += A[M x K] * B[K x N].
///
/// B and C are row-major with leading dimensions ldb / ldc. Every output
/// element is accumulated as c = c + a_ik * b_kj for k = 0, 1, ..., K-1 in
/// that order, one rounded multiply and one rounded add per term, so the
/// result equals a naive triple loop bit for bit (given -ffp-contract=off).
/// Vectorization only runs across j.
template <class T>
void gemm_accumulate(std::size_t M, std::size_t N, std::size_t K, MatView<T> a, const T* b, std::size_t ldb, T* c,
                     std::size_t ldc) {
  constexpr std::size_t NB = kGemmNB<T>;
  for (std::size_t k0 = 0; k0 < K; k0 += kGemmKB) {
    const std::size_t k1 = std::min(K, k0 + kGemmKB);
    std::size_t j0 = 0;
    for (; j0 + NB <= N; j0 += NB) gemm_panel<T, NB>(M, k0, k1, a, b + j0, ldb, c + j0, ldc);
    if (j0 + NB / 2 <= N) {
      gemm_panel<T, NB / 2>(M, k0, k1, a, b + j0, ldb, c + j0, ldc);
      j0 += NB / 2;
    }
    if (j0 + NB / 4 <= N) {
      gemm_panel<T, NB / 4>(M, k0, k1, a, b + j0, ldb, c + j0, ldc);
      j0 += NB / 4;
    }
    if (j0 < N) gemm_tile_edge<T>(0, M, N - j0, k0, k1, a, b + j0, ldb, c + j0, ldc);
  }
}

}  // namespace mixres::detail
