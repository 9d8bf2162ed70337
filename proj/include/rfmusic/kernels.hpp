#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>

// Dense row-major GEMM on Eigen maps. Eigen runs single-threaded here (no
// OpenMP), and its blocking depends only on the shapes, so results are
// bit-reproducible run to run.
namespace rfm::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

// C[n,m] += sum_k A[n,k] * B[k,m]
template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
    if (n == 0 || m == 0 || k == 0) return;
    MMap<T>(c, n, m).noalias() += CMap<T>(a, n, k) * CMap<T>(b, k, m);
}

// out[c,r] = in[r,c]
template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
    constexpr std::size_t kBlock = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
        const std::size_t r1 = std::min(rows, r0 + kBlock);
        for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
            const std::size_t c1 = std::min(cols, c0 + kBlock);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
        }
    }
}

// C[n,m] += A[n,k] * B[m,k]^T
template <class T>
void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
    if (n == 0 || m == 0 || k == 0) return;
    MMap<T>(c, n, m).noalias() += CMap<T>(a, n, k) * CMap<T>(b, m, k).transpose();
}

// C[k,m] += A[n,k]^T * B[n,m]
template <class T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
    if (n == 0 || m == 0 || k == 0) return;
    MMap<T>(c, k, m).noalias() += CMap<T>(a, n, k).transpose() * CMap<T>(b, n, m);
}

}  // namespace rfm::kernels
