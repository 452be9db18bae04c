#pragma once
// OpenMP compute kernels.
//
// Same contracts as kernels_ref.h.  Each wrapper parallelizes across the
// independent rows (or fixed-size element blocks) of the computation and
// calls the *same* noinline workers as the serial reference, so results are
// bit-identical to kern_ref at any thread count: the partition never depends
// on the number of threads, and every row/block runs the identical machine
// code.  Full reductions delegate to the serial reference on purpose; a
// parallel reduction would reorder floating-point sums.

#include <cstdint>

#include "mstr/kernels_ref.h"

namespace mstr::kern {

template <typename T>
void mm_nn(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* out) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < M; ++i) kern_detail::mm_nn_row(K, N, a + i * K, b, out + i * N);
}

template <typename T>
void mm_nt(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* out) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < M; ++i) kern_detail::mm_nt_row(K, N, a + i * K, b, out + i * N);
}

template <typename T>
void mm_tn(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* out) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < M; ++i) kern_detail::mm_tn_row(i, M, K, N, a, b, out + i * N);
}

template <typename T>
int64_t softmax_masked_rows(int64_t R, int64_t C, const T* x, const T* mask,
                            int64_t mask_stride, T* out) {
    int64_t empty_rows = 0;
#pragma omp parallel for schedule(static) reduction(+ : empty_rows)
    for (int64_t i = 0; i < R; ++i) {
        empty_rows += kern_detail::softmax_masked_row(
            C, x + i * C, mask ? mask + i * mask_stride : nullptr, out + i * C);
    }
    return empty_rows;
}

template <typename T>
void layer_norm_rows(int64_t R, int64_t C, const T* x, const T* gain, const T* bias, T eps,
                     T* out, T* mean, T* rstd) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < R; ++i) {
        kern_detail::layer_norm_row(C, x + i * C, gain, bias, eps, out + i * C, mean + i,
                                    rstd + i);
    }
}

template <typename T>
void layer_norm_rows_bwd(int64_t R, int64_t C, const T* x, const T* gain, const T* mean,
                         const T* rstd, const T* gout, T* gx, T* ggain, T* gbias) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < R; ++i) {
        kern_detail::layer_norm_row_bwd_gx(C, x + i * C, gain, mean[i], rstd[i], gout + i * C,
                                           gx + i * C);
    }
    kern_detail::layer_norm_gainbias_accum(R, C, x, mean, rstd, gout, ggain, gbias);
}

template <typename T>
void cumsum_rows(int64_t R, int64_t C, const T* x, T* out) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < R; ++i) kern_detail::cumsum_row(C, x + i * C, out + i * C);
}

template <typename T>
void cumprod_rows(int64_t R, int64_t C, const T* x, T* out) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < R; ++i) kern_detail::cumprod_row(C, x + i * C, out + i * C);
}

template <typename T, typename F>
void ew_unary(int64_t n, const T* x, T* out, F f) {
    using namespace kern_detail;
#pragma omp parallel for schedule(static)
    for (int64_t blk = 0; blk < block_count(n); ++blk) {
        int64_t lo = blk * kElemBlock;
        int64_t len = std::min(kElemBlock, n - lo);
        ew_unary_block(len, x + lo, out + lo, f);
    }
}

template <typename T, typename F>
void ew_binary(int64_t n, const T* a, const T* b, T* out, F f) {
    using namespace kern_detail;
#pragma omp parallel for schedule(static)
    for (int64_t blk = 0; blk < block_count(n); ++blk) {
        int64_t lo = blk * kElemBlock;
        int64_t len = std::min(kElemBlock, n - lo);
        ew_binary_block(len, a + lo, b + lo, out + lo, f);
    }
}

template <typename T>
void axpy(int64_t n, T alpha, const T* x, T* y) {
    using namespace kern_detail;
#pragma omp parallel for schedule(static)
    for (int64_t blk = 0; blk < block_count(n); ++blk) {
        int64_t lo = blk * kElemBlock;
        int64_t len = std::min(kElemBlock, n - lo);
        axpy_block(len, alpha, x + lo, y + lo);
    }
}

template <typename T>
T reduce_sum(int64_t n, const T* x) {
    return kern_ref::reduce_sum(n, x);  // serial by design
}

}  // namespace mstr::kern
