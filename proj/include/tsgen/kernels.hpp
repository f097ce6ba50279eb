#pragma once

#include <cstddef>

// Dense compute kernels shared by every learned component.
//
// Two implementations of each kernel:
//   kernels::serial — straight triple loops, the reference used by tests
//   kernels::par    — OpenMP + register-tiled, the production path
//
// The parallel kernels partition work over independent output elements and
// keep a fixed per-element accumulation order, so their results do not depend
// on the thread count. serial and par may differ in the last ulps (different
// unrolling), which the equivalence tests bound.
//
// Layout conventions (row-major):
//   gemm_nt: C[M,N] = A[M,K] * B[N,K]^T        (linear forward: B = weights)
//   gemm_nn: C[M,N] = A[M,K] * B[K,N]          (linear backward: dX = dY * W)
//   gemm_tn: C[M,N] = A[K,M]^T * B[K,N]        (weight grad: dW = dY^T * X)
// All take an `accumulate` flag: false overwrites C, true adds into it.

namespace tsgen::kernels {

namespace serial {

template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      T acc = 0;
      const T* a = A + i * K;
      const T* b = B + j * K;
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      if (accumulate)
        C[i * N + j] += acc;
      else
        C[i * N + j] = acc;
    }
  }
}

template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    if (!accumulate)
      for (std::size_t j = 0; j < N; ++j) c[j] = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[i * K + k];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
  for (std::size_t m = 0; m < M; ++m) {
    T* c = C + m * N;
    if (!accumulate)
      for (std::size_t j = 0; j < N; ++j) c[j] = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[k * M + m];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// column sums: out[j] = sum_i A[i*N+j]
template <typename T>
void colsum(std::size_t M, std::size_t N, const T* A, T* out, bool accumulate = false) {
  for (std::size_t j = 0; j < N; ++j) {
    T acc = 0;
    for (std::size_t i = 0; i < M; ++i) acc += A[i * N + j];
    if (accumulate)
      out[j] += acc;
    else
      out[j] = acc;
  }
}

}  // namespace serial

namespace par {

// Implemented in kernels.cpp for float and double.
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false);
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false);
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false);
template <typename T>
void colsum(std::size_t M, std::size_t N, const T* A, T* out, bool accumulate = false);

}  // namespace par

}  // namespace tsgen::kernels
