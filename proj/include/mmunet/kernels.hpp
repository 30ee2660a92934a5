#pragma once

#include <cstdint>

// Numeric kernels behind the tensor operators.
//
// The main entry points (gemm, im2col/im2row, col2im) run their inner loops
// through shared noinline bodies; the OpenMP team only distributes
// write-disjoint output rows, so results are bit-identical whether the
// parallel switch is on or off and for any thread count. Every reduction
// keeps a fixed serial summation order per output element.
//
// kernels::ref holds naive reference implementations of the same
// contracts, kept for testing and benchmarked against the fast path.

namespace mmunet::kernels {

// Process-wide switch consulted by the `if` clause of every omp pragma.
bool parallel_enabled();
void set_parallel(bool on);
int thread_count();

// c[m x n] (+)= a[m x k] * b[k x n], all row-major contiguous.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool accumulate);

// Patch matrix layouts for conv2d. Both read x[C x H x W] (single image) and
// zero-fill out-of-bounds taps.
//   im2col: col[(C*KH*KW) x (HO*WO)], row r = (c*KH + kh)*KW + kw
//   im2row: row[(HO*WO) x (C*KH*KW)], same tap order along the minor axis
template <class T>
void im2col(const T* x, T* col, std::int64_t c, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t ho, std::int64_t wo);
template <class T>
void im2row(const T* x, T* row, std::int64_t c, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t ho, std::int64_t wo);

// Scatter-add of a patch-gradient matrix back onto dx[C x H x W]. Adds are
// ordered (kh, kw, position) within each channel; channels are independent.
template <class T>
void col2im_add(const T* col, T* dx, std::int64_t c, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t ho, std::int64_t wo);

namespace ref {

// Plain triple loop, no tiling, no threads.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool accumulate);

// Direct convolution from the definition, one image batch at a time.
// x[B x C x H x W], wgt[O x C x KH x KW], bias[O] (may be null), y[B x O x HO x WO].
template <class T>
void conv2d_forward(const T* x, const T* wgt, const T* bias, T* y, std::int64_t b,
                    std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t o,
                    std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad);

// Gradients from the definition; all three outputs are zero-initialised here.
template <class T>
void conv2d_backward(const T* x, const T* wgt, const T* dy, T* dx, T* dwgt, T* dbias,
                     std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w,
                     std::int64_t o, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                     std::int64_t pad);

}  // namespace ref

}  // namespace mmunet::kernels
