#include "mmunet/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmunet::kernels {

namespace {

std::atomic<bool> g_parallel{true};

using i64 = std::int64_t;

// Column-tile width. Keeps the active c-row slice and the streamed b-panel
// cache resident while leaving enough tiles to spread across threads.
constexpr i64 kColTile = 512;

// Rows of a handled per tile, accumulated together in registers.
constexpr i64 kRowBlock = 4;

// Column strip held in registers: 128 bytes per row.
template <class T>
constexpr int kStrip = static_cast<int>(128 / sizeof(T));

// Register-blocked strip: RB rows against a JW-wide panel of b. Each c
// element still accumulates over p in ascending order starting from its
// current value, so the serial, threaded and reference paths round
// identically. noinline keeps the compiler from re-contracting the
// arithmetic differently per call site.
template <class T, int RB, int JW>
[[gnu::noinline]] void gemm_strip(const T* a, const T* b, T* c, i64 k, i64 n, i64 j) {
    T acc[RB][JW];
    for (int r = 0; r < RB; ++r) {
        for (int u = 0; u < JW; ++u) {
            acc[r][u] = c[r * n + j + u];
        }
    }
    for (i64 p = 0; p < k; ++p) {
        const T* br = b + p * n + j;
        for (int r = 0; r < RB; ++r) {
            const T av = a[r * k + p];
            for (int u = 0; u < JW; ++u) {
                acc[r][u] += av * br[u];
            }
        }
    }
    for (int r = 0; r < RB; ++r) {
        for (int u = 0; u < JW; ++u) {
            c[r * n + j + u] = acc[r][u];
        }
    }
}

// Ragged right edge, runtime width.
template <class T, int RB>
[[gnu::noinline]] void gemm_strip_tail(const T* a, const T* b, T* c, i64 k, i64 n, i64 j,
                                       int w) {
    T acc[RB][kStrip<T>];
    for (int r = 0; r < RB; ++r) {
        for (int u = 0; u < w; ++u) {
            acc[r][u] = c[r * n + j + u];
        }
    }
    for (i64 p = 0; p < k; ++p) {
        const T* br = b + p * n + j;
        for (int r = 0; r < RB; ++r) {
            const T av = a[r * k + p];
            for (int u = 0; u < w; ++u) {
                acc[r][u] += av * br[u];
            }
        }
    }
    for (int r = 0; r < RB; ++r) {
        for (int u = 0; u < w; ++u) {
            c[r * n + j + u] = acc[r][u];
        }
    }
}

template <class T, int RB>
void gemm_tile(const T* a, const T* b, T* c, i64 k, i64 n, i64 j0, i64 j1) {
    i64 j = j0;
    for (; j + kStrip<T> <= j1; j += kStrip<T>) {
        gemm_strip<T, RB, kStrip<T>>(a, b, c, k, n, j);
    }
    if (j < j1) {
        gemm_strip_tail<T, RB>(a, b, c, k, n, j, static_cast<int>(j1 - j));
    }
}

template <class T>
[[gnu::noinline]] void im2col_row(const T* x, T* col_row, i64 h, i64 w, i64 stride, i64 pad,
                                  i64 ho, i64 wo, i64 kh_off, i64 kw_off) {
    for (i64 oy = 0; oy < ho; ++oy) {
        const i64 iy = oy * stride - pad + kh_off;
        const bool row_ok = iy >= 0 && iy < h;
        for (i64 ox = 0; ox < wo; ++ox) {
            const i64 ix = ox * stride - pad + kw_off;
            col_row[oy * wo + ox] =
                (row_ok && ix >= 0 && ix < w) ? x[iy * w + ix] : T(0);
        }
    }
}

template <class T>
[[gnu::noinline]] void im2row_pos(const T* x, T* out_row, i64 c, i64 h, i64 w, i64 kh, i64 kw,
                                  i64 iy0, i64 ix0) {
    i64 r = 0;
    for (i64 ch = 0; ch < c; ++ch) {
        const T* plane = x + ch * h * w;
        for (i64 ky = 0; ky < kh; ++ky) {
            const i64 iy = iy0 + ky;
            const bool row_ok = iy >= 0 && iy < h;
            for (i64 kx = 0; kx < kw; ++kx) {
                const i64 ix = ix0 + kx;
                out_row[r++] = (row_ok && ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
            }
        }
    }
}

template <class T>
[[gnu::noinline]] void col2im_channel(const T* col, T* dxp, i64 h, i64 w, i64 kh, i64 kw,
                                      i64 stride, i64 pad, i64 ho, i64 wo) {
    const i64 npos = ho * wo;
    for (i64 ky = 0; ky < kh; ++ky) {
        for (i64 kx = 0; kx < kw; ++kx) {
            const T* crow = col + (ky * kw + kx) * npos;
            for (i64 oy = 0; oy < ho; ++oy) {
                const i64 iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) {
                    continue;
                }
                for (i64 ox = 0; ox < wo; ++ox) {
                    const i64 ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= w) {
                        continue;
                    }
                    dxp[iy * w + ix] += crow[oy * wo + ox];
                }
            }
        }
    }
}

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int thread_count() {
#ifdef _OPENMP
    return parallel_enabled() ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

template <class T>
void gemm(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    if (m <= 0 || n <= 0) {
        return;
    }
    if (!accumulate) {
        std::fill(c, c + m * n, T(0));
    }
    const i64 mblocks = (m + kRowBlock - 1) / kRowBlock;
    const i64 ntiles = (n + kColTile - 1) / kColTile;
    const bool par =
        parallel_enabled() && mblocks * ntiles > 1 && m * k * n > (i64{1} << 14);
#pragma omp parallel for collapse(2) schedule(static) if (par)
    for (i64 ib = 0; ib < mblocks; ++ib) {
        for (i64 t = 0; t < ntiles; ++t) {
            const i64 i0 = ib * kRowBlock;
            const T* ar = a + i0 * k;
            T* cr = c + i0 * n;
            const i64 j0 = t * kColTile;
            const i64 j1 = std::min(j0 + kColTile, n);
            switch (m - i0 >= kRowBlock ? kRowBlock : m - i0) {
                case 4: gemm_tile<T, 4>(ar, b, cr, k, n, j0, j1); break;
                case 3: gemm_tile<T, 3>(ar, b, cr, k, n, j0, j1); break;
                case 2: gemm_tile<T, 2>(ar, b, cr, k, n, j0, j1); break;
                default: gemm_tile<T, 1>(ar, b, cr, k, n, j0, j1); break;
            }
        }
    }
}

template <class T>
void im2col(const T* x, T* col, i64 c, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 pad,
            i64 ho, i64 wo) {
    const i64 rows = c * kh * kw;
    const bool par = parallel_enabled() && rows > 1;
#pragma omp parallel for schedule(static) if (par)
    for (i64 r = 0; r < rows; ++r) {
        const i64 ch = r / (kh * kw);
        const i64 ky = (r / kw) % kh;
        const i64 kx = r % kw;
        im2col_row(x + ch * h * w, col + r * ho * wo, h, w, stride, pad, ho, wo, ky, kx);
    }
}

template <class T>
void im2row(const T* x, T* row, i64 c, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 pad,
            i64 ho, i64 wo) {
    const i64 npos = ho * wo;
    const i64 taps = c * kh * kw;
    const bool par = parallel_enabled() && npos > 1;
#pragma omp parallel for schedule(static) if (par)
    for (i64 pos = 0; pos < npos; ++pos) {
        const i64 oy = pos / wo;
        const i64 ox = pos % wo;
        im2row_pos(x, row + pos * taps, c, h, w, kh, kw, oy * stride - pad, ox * stride - pad);
    }
}

template <class T>
void col2im_add(const T* col, T* dx, i64 c, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 pad,
                i64 ho, i64 wo) {
    const bool par = parallel_enabled() && c > 1;
#pragma omp parallel for schedule(static) if (par)
    for (i64 ch = 0; ch < c; ++ch) {
        col2im_channel(col + ch * kh * kw * ho * wo, dx + ch * h * w, h, w, kh, kw, stride,
                       pad, ho, wo);
    }
}

namespace ref {

template <class T>
void gemm(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, T(0));
    }
    for (i64 i = 0; i < m; ++i) {
        for (i64 p = 0; p < k; ++p) {
            const T apk = a[i * k + p];
            for (i64 j = 0; j < n; ++j) {
                c[i * n + j] += apk * b[p * n + j];
            }
        }
    }
}

template <class T>
void conv2d_forward(const T* x, const T* wgt, const T* bias, T* y, i64 b, i64 c, i64 h, i64 w,
                    i64 o, i64 kh, i64 kw, i64 stride, i64 pad) {
    const i64 ho = (h + 2 * pad - kh) / stride + 1;
    const i64 wo = (w + 2 * pad - kw) / stride + 1;
    for (i64 img = 0; img < b; ++img) {
        const T* xi = x + img * c * h * w;
        T* yi = y + img * o * ho * wo;
        for (i64 oc = 0; oc < o; ++oc) {
            for (i64 oy = 0; oy < ho; ++oy) {
                for (i64 ox = 0; ox < wo; ++ox) {
                    T acc = bias ? bias[oc] : T(0);
                    for (i64 ic = 0; ic < c; ++ic) {
                        for (i64 ky = 0; ky < kh; ++ky) {
                            const i64 iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) {
                                continue;
                            }
                            for (i64 kx = 0; kx < kw; ++kx) {
                                const i64 ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= w) {
                                    continue;
                                }
                                acc += xi[(ic * h + iy) * w + ix] *
                                       wgt[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    yi[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_backward(const T* x, const T* wgt, const T* dy, T* dx, T* dwgt, T* dbias, i64 b,
                     i64 c, i64 h, i64 w, i64 o, i64 kh, i64 kw, i64 stride, i64 pad) {
    const i64 ho = (h + 2 * pad - kh) / stride + 1;
    const i64 wo = (w + 2 * pad - kw) / stride + 1;
    std::fill(dx, dx + b * c * h * w, T(0));
    std::fill(dwgt, dwgt + o * c * kh * kw, T(0));
    if (dbias) {
        std::fill(dbias, dbias + o, T(0));
    }
    for (i64 img = 0; img < b; ++img) {
        const T* xi = x + img * c * h * w;
        const T* dyi = dy + img * o * ho * wo;
        T* dxi = dx + img * c * h * w;
        for (i64 oc = 0; oc < o; ++oc) {
            for (i64 oy = 0; oy < ho; ++oy) {
                for (i64 ox = 0; ox < wo; ++ox) {
                    const T g = dyi[(oc * ho + oy) * wo + ox];
                    if (dbias) {
                        dbias[oc] += g;
                    }
                    for (i64 ic = 0; ic < c; ++ic) {
                        for (i64 ky = 0; ky < kh; ++ky) {
                            const i64 iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) {
                                continue;
                            }
                            for (i64 kx = 0; kx < kw; ++kx) {
                                const i64 ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= w) {
                                    continue;
                                }
                                dxi[(ic * h + iy) * w + ix] +=
                                    wgt[((oc * c + ic) * kh + ky) * kw + kx] * g;
                                dwgt[((oc * c + ic) * kh + ky) * kw + kx] +=
                                    xi[(ic * h + iy) * w + ix] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace ref

// Instantiations for both supported dtypes.
template void gemm<float>(const float*, const float*, float*, i64, i64, i64, bool);
template void gemm<double>(const double*, const double*, double*, i64, i64, i64, bool);
template void im2col<float>(const float*, float*, i64, i64, i64, i64, i64, i64, i64, i64, i64);
template void im2col<double>(const double*, double*, i64, i64, i64, i64, i64, i64, i64, i64,
                             i64);
template void im2row<float>(const float*, float*, i64, i64, i64, i64, i64, i64, i64, i64, i64);
template void im2row<double>(const double*, double*, i64, i64, i64, i64, i64, i64, i64, i64,
                             i64);
template void col2im_add<float>(const float*, float*, i64, i64, i64, i64, i64, i64, i64, i64,
                                i64);
template void col2im_add<double>(const double*, double*, i64, i64, i64, i64, i64, i64, i64,
                                 i64, i64);

namespace ref {
template void gemm<float>(const float*, const float*, float*, i64, i64, i64, bool);
template void gemm<double>(const double*, const double*, double*, i64, i64, i64, bool);
template void conv2d_forward<float>(const float*, const float*, const float*, float*, i64, i64,
                                    i64, i64, i64, i64, i64, i64, i64);
template void conv2d_forward<double>(const double*, const double*, const double*, double*, i64,
                                     i64, i64, i64, i64, i64, i64, i64, i64);
template void conv2d_backward<float>(const float*, const float*, const float*, float*, float*,
                                     float*, i64, i64, i64, i64, i64, i64, i64, i64, i64);
template void conv2d_backward<double>(const double*, const double*, const double*, double*,
                                      double*, double*, i64, i64, i64, i64, i64, i64, i64, i64,
                                      i64);
}  // namespace ref

}  // namespace mmunet::kernels
