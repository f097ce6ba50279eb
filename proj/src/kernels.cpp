#include "tsgen/kernels.hpp"

#include <algorithm>

namespace tsgen::kernels::par {

namespace {

// gemm_nt inner tile: one A row against 6 B rows, dot-product layout.
// 6 accumulators keep the FMA pipes busy without spilling.
template <typename T>
inline void dot6(const T* a, const T* b0, const T* b1, const T* b2, const T* b3, const T* b4,
                 const T* b5, std::size_t K, T* out) {
  T c0 = 0, c1 = 0, c2 = 0, c3 = 0, c4 = 0, c5 = 0;
#pragma omp simd reduction(+ : c0, c1, c2, c3, c4, c5)
  for (std::size_t k = 0; k < K; ++k) {
    const T av = a[k];
    c0 += av * b0[k];
    c1 += av * b1[k];
    c2 += av * b2[k];
    c3 += av * b3[k];
    c4 += av * b4[k];
    c5 += av * b5[k];
  }
  out[0] = c0;
  out[1] = c1;
  out[2] = c2;
  out[3] = c3;
  out[4] = c4;
  out[5] = c5;
}

template <typename T>
inline T dot1(const T* a, const T* b, std::size_t K) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
  return acc;
}

constexpr std::size_t kRowBlock = 32;  // A rows per tile pass; keeps the B tile hot in L1

}  // namespace

template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i0s = 0; i0s < static_cast<std::ptrdiff_t>(M);
       i0s += static_cast<std::ptrdiff_t>(kRowBlock)) {
    const std::size_t i0 = static_cast<std::size_t>(i0s);
    const std::size_t ilim = std::min(i0 + kRowBlock, M);
    std::size_t j0 = 0;
    for (; j0 + 6 <= N; j0 += 6) {
      const T* b0 = B + (j0 + 0) * K;
      const T* b1 = B + (j0 + 1) * K;
      const T* b2 = B + (j0 + 2) * K;
      const T* b3 = B + (j0 + 3) * K;
      const T* b4 = B + (j0 + 4) * K;
      const T* b5 = B + (j0 + 5) * K;
      for (std::size_t i = i0; i < ilim; ++i) {
        T vals[6];
        dot6(A + i * K, b0, b1, b2, b3, b4, b5, K, vals);
        T* c = C + i * N + j0;
        if (accumulate)
          for (int jj = 0; jj < 6; ++jj) c[jj] += vals[jj];
        else
          for (int jj = 0; jj < 6; ++jj) c[jj] = vals[jj];
      }
    }
    for (; j0 < N; ++j0) {
      const T* b = B + j0 * K;
      for (std::size_t i = i0; i < ilim; ++i) {
        const T v = dot1(A + i * K, b, K);
        if (accumulate)
          C[i * N + j0] += v;
        else
          C[i * N + j0] = v;
      }
    }
  }
}

template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t is = 0; is < static_cast<std::ptrdiff_t>(M); ++is) {
    const std::size_t i = static_cast<std::size_t>(is);
    T* c = C + i * N;
    if (!accumulate)
      for (std::size_t j = 0; j < N; ++j) c[j] = 0;
    const T* arow = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* b = B + k * N;
#pragma omp simd
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  // Each thread owns a block of output rows; B rows are reused across the
  // whole block per k step, C rows stay in cache.
  constexpr std::size_t MB = 8;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t m0s = 0; m0s < static_cast<std::ptrdiff_t>(M);
       m0s += static_cast<std::ptrdiff_t>(MB)) {
    const std::size_t m0 = static_cast<std::size_t>(m0s);
    const std::size_t mlim = std::min(m0 + MB, M);
    if (!accumulate)
      for (std::size_t m = m0; m < mlim; ++m)
        for (std::size_t j = 0; j < N; ++j) C[m * N + j] = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      const T* acol = A + k * M;
      for (std::size_t m = m0; m < mlim; ++m) {
        const T av = acol[m];
        T* c = C + m * N;
#pragma omp simd
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

template <typename T>
void colsum(std::size_t M, std::size_t N, const T* A, T* out, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t js = 0; js < static_cast<std::ptrdiff_t>(N); ++js) {
    const std::size_t j = static_cast<std::size_t>(js);
    T acc = 0;
    for (std::size_t i = 0; i < M; ++i) acc += A[i * N + j];
    if (accumulate)
      out[j] += acc;
    else
      out[j] = acc;
  }
}

template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                             float*, bool);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*,
                              double*, bool);
template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                             float*, bool);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*,
                              double*, bool);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                             float*, bool);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*,
                              double*, bool);
template void colsum<float>(std::size_t, std::size_t, const float*, float*, bool);
template void colsum<double>(std::size_t, std::size_t, const double*, double*, bool);

}  // namespace tsgen::kernels::par
