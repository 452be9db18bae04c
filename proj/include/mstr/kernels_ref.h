#pragma once
// Serial reference compute kernels.
//
// Every kernel is built from a per-row (or fixed-size per-block) worker in
// mstr::kern_detail.  The serial wrappers here loop over the workers; the
// OpenMP wrappers in kernels.h loop over the *same* workers in parallel.
// Because both sides execute the identical machine code per row/block, the
// parallel results are bit-identical to the serial ones at any thread count.
// The workers are marked noinline so the compiler cannot specialize (and
// potentially re-contract or re-vectorize) them differently per call site.
//
// Full reductions (reduce_sum, the gain/bias accumulation of the layer-norm
// backward) are serial everywhere: a parallel reduction would reorder
// floating-point sums and break bit-reproducibility.

#include <algorithm>
#include <cmath>
#include <cstdint>

// noinline alone is not enough: GCC's interprocedural constant propagation
// may still emit specialized .constprop clones per call site, which can be
// vectorized differently.  noclone forbids that, keeping exactly one compiled
// body per instantiation.
#if defined(_MSC_VER)
#define MSTR_NOINLINE __declspec(noinline)
#elif defined(__clang__)
#define MSTR_NOINLINE __attribute__((noinline))
#else
#define MSTR_NOINLINE __attribute__((noinline, noclone))
#endif

namespace mstr::kern_detail {

// Elementwise kernels process fixed-size blocks so that the work partition
// (and therefore the arithmetic) never depends on the thread count.
inline constexpr int64_t kElemBlock = 4096;

inline int64_t block_count(int64_t n) { return (n + kElemBlock - 1) / kElemBlock; }

// out_row = a_row @ b, b:[K,N].
template <typename T>
MSTR_NOINLINE void mm_nn_row(int64_t K, int64_t N, const T* arow, const T* b, T* orow) {
    for (int64_t j = 0; j < N; ++j) orow[j] = T(0);
    for (int64_t k = 0; k < K; ++k) {
        T av = arow[k];
        const T* brow = b + k * N;
        for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
}

// out_row[j] = dot(a_row, b[j,:]), b:[N,K].
template <typename T>
MSTR_NOINLINE void mm_nt_row(int64_t K, int64_t N, const T* arow, const T* b, T* orow) {
    for (int64_t j = 0; j < N; ++j) {
        const T* brow = b + j * K;
        T acc = T(0);
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        orow[j] = acc;
    }
}

// Row i of a^T @ b, a:[K,M] b:[K,N]: out_row[j] = sum_k a[k,i] * b[k,j].
template <typename T>
MSTR_NOINLINE void mm_tn_row(int64_t i, int64_t M, int64_t K, int64_t N, const T* a,
                             const T* b, T* orow) {
    for (int64_t j = 0; j < N; ++j) orow[j] = T(0);
    for (int64_t k = 0; k < K; ++k) {
        T av = a[k * M + i];
        const T* brow = b + k * N;
        for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
}

// Returns 1 when the row has no unmasked entry (caller reports the error;
// a worker must not throw from inside a parallel region).  mask may be null
// (nothing masked).  Masked outputs are exact zeros.
template <typename T>
MSTR_NOINLINE int64_t softmax_masked_row(int64_t C, const T* xrow, const T* maskrow, T* orow) {
    T mx = T(0);
    bool any = false;
    for (int64_t j = 0; j < C; ++j) {
        if (maskrow && !(maskrow[j] > T(0.5))) continue;
        if (!any || xrow[j] > mx) mx = xrow[j];
        any = true;
    }
    if (!any) {
        for (int64_t j = 0; j < C; ++j) orow[j] = T(0);
        return 1;
    }
    T denom = T(0);
    for (int64_t j = 0; j < C; ++j) {
        if (maskrow && !(maskrow[j] > T(0.5))) {
            orow[j] = T(0);
        } else {
            T e = std::exp(xrow[j] - mx);
            orow[j] = e;
            denom += e;
        }
    }
    T inv = T(1) / denom;
    for (int64_t j = 0; j < C; ++j) orow[j] *= inv;
    return 0;
}

template <typename T>
MSTR_NOINLINE void layer_norm_row(int64_t C, const T* xrow, const T* gain, const T* bias,
                                  T eps, T* orow, T* mean, T* rstd) {
    T mu = T(0);
    for (int64_t j = 0; j < C; ++j) mu += xrow[j];
    mu /= T(C);
    T var = T(0);
    for (int64_t j = 0; j < C; ++j) {
        T d = xrow[j] - mu;
        var += d * d;
    }
    var /= T(C);
    T rs = T(1) / std::sqrt(var + eps);
    *mean = mu;
    *rstd = rs;
    for (int64_t j = 0; j < C; ++j) orow[j] = (xrow[j] - mu) * rs * gain[j] + bias[j];
}

// d(loss)/d(x) for one normalized row.
template <typename T>
MSTR_NOINLINE void layer_norm_row_bwd_gx(int64_t C, const T* xrow, const T* gain, T mu, T rs,
                                         const T* grow, T* gxrow) {
    T sum_g = T(0), sum_gx = T(0);
    for (int64_t j = 0; j < C; ++j) {
        T xhat = (xrow[j] - mu) * rs;
        T gg = grow[j] * gain[j];
        sum_g += gg;
        sum_gx += gg * xhat;
    }
    T inv_c = T(1) / T(C);
    for (int64_t j = 0; j < C; ++j) {
        T xhat = (xrow[j] - mu) * rs;
        T gg = grow[j] * gain[j];
        gxrow[j] = rs * (gg - inv_c * sum_g - xhat * inv_c * sum_gx);
    }
}

// Gain/bias gradients accumulate across rows: serial everywhere.
template <typename T>
MSTR_NOINLINE void layer_norm_gainbias_accum(int64_t R, int64_t C, const T* x, const T* mean,
                                             const T* rstd, const T* gout, T* ggain,
                                             T* gbias) {
    for (int64_t i = 0; i < R; ++i) {
        const T* xrow = x + i * C;
        const T* grow = gout + i * C;
        T mu = mean[i];
        T rs = rstd[i];
        for (int64_t j = 0; j < C; ++j) {
            T xhat = (xrow[j] - mu) * rs;
            ggain[j] += grow[j] * xhat;
            gbias[j] += grow[j];
        }
    }
}

template <typename T>
MSTR_NOINLINE void cumsum_row(int64_t C, const T* xrow, T* orow) {
    T acc = T(0);
    for (int64_t j = 0; j < C; ++j) {
        acc += xrow[j];
        orow[j] = acc;
    }
}

template <typename T>
MSTR_NOINLINE void cumprod_row(int64_t C, const T* xrow, T* orow) {
    T acc = T(1);
    for (int64_t j = 0; j < C; ++j) {
        acc *= xrow[j];
        orow[j] = acc;
    }
}

template <typename T, typename F>
MSTR_NOINLINE void ew_unary_block(int64_t n, const T* x, T* out, F f) {
    for (int64_t i = 0; i < n; ++i) out[i] = f(x[i]);
}

template <typename T, typename F>
MSTR_NOINLINE void ew_binary_block(int64_t n, const T* a, const T* b, T* out, F f) {
    for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
}

template <typename T>
MSTR_NOINLINE void axpy_block(int64_t n, T alpha, const T* x, T* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
MSTR_NOINLINE T reduce_sum_serial(int64_t n, const T* x) {
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

}  // namespace mstr::kern_detail

namespace mstr::kern_ref {

template <typename T>
void mm_nn(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* out) {
    for (int64_t i = 0; i < M; ++i) kern_detail::mm_nn_row(K, N, a + i * K, b, out + i * N);
}

template <typename T>
void mm_nt(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* out) {
    for (int64_t i = 0; i < M; ++i) kern_detail::mm_nt_row(K, N, a + i * K, b, out + i * N);
}

template <typename T>
void mm_tn(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* out) {
    for (int64_t i = 0; i < M; ++i) kern_detail::mm_tn_row(i, M, K, N, a, b, out + i * N);
}

// Returns the number of rows with no unmasked entry (0 when mask is null).
// mask_stride 0 shares one mask row across all rows.
template <typename T>
int64_t softmax_masked_rows(int64_t R, int64_t C, const T* x, const T* mask,
                            int64_t mask_stride, T* out) {
    int64_t empty_rows = 0;
    for (int64_t i = 0; i < R; ++i) {
        empty_rows += kern_detail::softmax_masked_row(
            C, x + i * C, mask ? mask + i * mask_stride : nullptr, out + i * C);
    }
    return empty_rows;
}

template <typename T>
void layer_norm_rows(int64_t R, int64_t C, const T* x, const T* gain, const T* bias, T eps,
                     T* out, T* mean, T* rstd) {
    for (int64_t i = 0; i < R; ++i) {
        kern_detail::layer_norm_row(C, x + i * C, gain, bias, eps, out + i * C, mean + i,
                                    rstd + i);
    }
}

template <typename T>
void layer_norm_rows_bwd(int64_t R, int64_t C, const T* x, const T* gain, const T* mean,
                         const T* rstd, const T* gout, T* gx, T* ggain, T* gbias) {
    for (int64_t i = 0; i < R; ++i) {
        kern_detail::layer_norm_row_bwd_gx(C, x + i * C, gain, mean[i], rstd[i], gout + i * C,
                                           gx + i * C);
    }
    kern_detail::layer_norm_gainbias_accum(R, C, x, mean, rstd, gout, ggain, gbias);
}

template <typename T>
void cumsum_rows(int64_t R, int64_t C, const T* x, T* out) {
    for (int64_t i = 0; i < R; ++i) kern_detail::cumsum_row(C, x + i * C, out + i * C);
}

template <typename T>
void cumprod_rows(int64_t R, int64_t C, const T* x, T* out) {
    for (int64_t i = 0; i < R; ++i) kern_detail::cumprod_row(C, x + i * C, out + i * C);
}

template <typename T, typename F>
void ew_unary(int64_t n, const T* x, T* out, F f) {
    using namespace kern_detail;
    for (int64_t blk = 0; blk < block_count(n); ++blk) {
        int64_t lo = blk * kElemBlock;
        int64_t len = std::min(kElemBlock, n - lo);
        ew_unary_block(len, x + lo, out + lo, f);
    }
}

template <typename T, typename F>
void ew_binary(int64_t n, const T* a, const T* b, T* out, F f) {
    using namespace kern_detail;
    for (int64_t blk = 0; blk < block_count(n); ++blk) {
        int64_t lo = blk * kElemBlock;
        int64_t len = std::min(kElemBlock, n - lo);
        ew_binary_block(len, a + lo, b + lo, out + lo, f);
    }
}

template <typename T>
void axpy(int64_t n, T alpha, const T* x, T* y) {
    using namespace kern_detail;
    for (int64_t blk = 0; blk < block_count(n); ++blk) {
        int64_t lo = blk * kElemBlock;
        int64_t len = std::min(kElemBlock, n - lo);
        axpy_block(len, alpha, x + lo, y + lo);
    }
}

template <typename T>
T reduce_sum(int64_t n, const T* x) {
    return kern_detail::reduce_sum_serial(n, x);
}

}  // namespace mstr::kern_ref
