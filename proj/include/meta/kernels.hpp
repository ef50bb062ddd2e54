#pragma once

#include <cstddef>

// Plain row-major GEMM and im2col kernels. Inner loops run over contiguous
// output columns so the compiler can vectorize them without reassociating
// floating-point sums; results are independent of build-time vector width.

namespace meta::kernels {

/// C(M,N) += A(M,K) * B(K,N). Rows of C are processed four at a time so
/// each row of B is loaded once per group; every C entry still accumulates
/// over k in increasing order.
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* __restrict A,
                    const double* __restrict B, double* __restrict C) {
  constexpr std::size_t kBlock = 64;
  for (std::size_t k0 = 0; k0 < K; k0 += kBlock) {
    const std::size_t k1 = k0 + kBlock < K ? k0 + kBlock : K;
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
      double* __restrict c0 = C + i * N;
      double* __restrict c1 = c0 + N;
      double* __restrict c2 = c1 + N;
      double* __restrict c3 = c2 + N;
      const double* a0 = A + i * K;
      for (std::size_t k = k0; k < k1; ++k) {
        const double x0 = a0[k], x1 = a0[K + k], x2 = a0[2 * K + k], x3 = a0[3 * K + k];
        const double* __restrict brow = B + k * N;
        for (std::size_t j = 0; j < N; ++j) {
          const double b = brow[j];
          c0[j] += x0 * b;
          c1[j] += x1 * b;
          c2[j] += x2 * b;
          c3[j] += x3 * b;
        }
      }
    }
    for (; i < M; ++i) {
      double* __restrict crow = C + i * N;
      const double* arow = A + i * K;
      for (std::size_t k = k0; k < k1; ++k) {
        const double a = arow[k];
        const double* __restrict brow = B + k * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  }
}

/// C(M,N) += A(K,M)^T * B(K,N)
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* __restrict A,
                    const double* __restrict B, double* __restrict C) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    double* __restrict c0 = C + i * N;
    double* __restrict c1 = c0 + N;
    double* __restrict c2 = c1 + N;
    double* __restrict c3 = c2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const double* a = A + k * M + i;
      const double x0 = a[0], x1 = a[1], x2 = a[2], x3 = a[3];
      const double* __restrict brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) {
        const double b = brow[j];
        c0[j] += x0 * b;
        c1[j] += x1 * b;
        c2[j] += x2 * b;
        c3[j] += x3 * b;
      }
    }
  }
  for (; i < M; ++i) {
    double* __restrict crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = A[k * M + i];
      const double* __restrict brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

/// out(N,M) = in(M,N)^T
inline void transpose(std::size_t M, std::size_t N, const double* __restrict in, double* __restrict out) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out[j * M + i] = in[i * N + j];
}

/// 3x3, stride 1, zero padding 1. col is (C*9, H*W).
inline void im2col3x3(const double* __restrict img, std::size_t C, std::size_t H, std::size_t W,
                      double* __restrict col) {
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = img + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          double* dst = row + y * W;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            for (std::size_t x = 0; x < W; ++x) dst[x] = 0.0;
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(sy) * W;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            dst[x] = (sx < 0 || sx >= static_cast<long>(W)) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col3x3.
inline void col2im3x3(const double* __restrict col, std::size_t C, std::size_t H, std::size_t W,
                      double* __restrict img) {
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    double* plane = img + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          double* dst = plane + static_cast<std::size_t>(sy) * W;
          const double* src = row + y * W;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace meta::kernels
