#include "mmunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <string>
#include <utility>

#include "mmunet/errors.hpp"
#include "mmunet/kernels.hpp"

// All loops here either write disjoint output ranges per iteration or run
// serially, and every parallel loop carries an if-clause, so one compiled body
// serves both execution modes and results match bit for bit.
namespace mmunet::ops {
namespace {

constexpr index_t kParGrain = index_t(1) << 14;

bool par(index_t work) {
    return kernels::parallel_enabled() && work > kParGrain;
}

template <class T>
TensorPtr<T> make_result(std::vector<index_t> shape, std::initializer_list<TensorPtr<T>> inputs) {
    auto out = Tensor<T>::create(std::move(shape));
    if (!grad_enabled()) {
        return out;
    }
    for (const auto& p : inputs) {
        if (p && p->requires_grad) {
            out->requires_grad = true;
            break;
        }
    }
    if (out->requires_grad) {
        for (const auto& p : inputs) {
            if (p) {
                out->parents.push_back(p);
            }
        }
    }
    return out;
}

template <class T>
void transpose2(const T* src, T* dst, index_t rows, index_t cols) {
#pragma omp parallel for if (par(rows * cols))
    for (index_t r = 0; r < rows; ++r) {
        for (index_t c = 0; c < cols; ++c) {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

void require_4d(const std::vector<index_t>& shape, const char* op) {
    if (shape.size() != 4) {
        throw ShapeError(std::string(op) + " expects a 4-d tensor, got " + shape_str(shape));
    }
}

}  // namespace

template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape) {
        throw ShapeError("add shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    auto out = make_result<T>(a->shape, {a, b});
    const index_t n = a->numel();
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* po = out->data.data();
#pragma omp parallel for if (par(n))
    for (index_t i = 0; i < n; ++i) {
        po[i] = pa[i] + pb[i];
    }
    if (out->requires_grad) {
        out->backward_op = [a, b](Tensor<T>& self) {
            const T* g = self.grad.data();
            if (a->requires_grad) {
                a->accumulate_grad(g);
            }
            if (b->requires_grad) {
                b->accumulate_grad(g);
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape) {
        throw ShapeError("mul shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    auto out = make_result<T>(a->shape, {a, b});
    const index_t n = a->numel();
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* po = out->data.data();
#pragma omp parallel for if (par(n))
    for (index_t i = 0; i < n; ++i) {
        po[i] = pa[i] * pb[i];
    }
    if (out->requires_grad) {
        out->backward_op = [a, b, n](Tensor<T>& self) {
            const T* g = self.grad.data();
            if (a->requires_grad) {
                T* da = a->grad.data();
                const T* pb2 = b->data.data();
#pragma omp parallel for if (par(n))
                for (index_t i = 0; i < n; ++i) {
                    da[i] += g[i] * pb2[i];
                }
            }
            if (b->requires_grad) {
                T* db = b->grad.data();
                const T* pa2 = a->data.data();
#pragma omp parallel for if (par(n))
                for (index_t i = 0; i < n; ++i) {
                    db[i] += g[i] * pa2[i];
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, T factor) {
    auto out = make_result<T>(a->shape, {a});
    const index_t n = a->numel();
    const T* pa = a->data.data();
    T* po = out->data.data();
#pragma omp parallel for if (par(n))
    for (index_t i = 0; i < n; ++i) {
        po[i] = factor * pa[i];
    }
    if (out->requires_grad) {
        out->backward_op = [a, factor, n](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* da = a->grad.data();
#pragma omp parallel for if (par(n))
            for (index_t i = 0; i < n; ++i) {
                da[i] += factor * g[i];
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> sum(const TensorPtr<T>& a) {
    auto out = make_result<T>({1}, {a});
    const index_t n = a->numel();
    const T* pa = a->data.data();
    T acc = T(0);
    for (index_t i = 0; i < n; ++i) {
        acc += pa[i];
    }
    out->data[0] = acc;
    if (out->requires_grad) {
        out->backward_op = [a, n](Tensor<T>& self) {
            const T g0 = self.grad[0];
            T* da = a->grad.data();
#pragma omp parallel for if (par(n))
            for (index_t i = 0; i < n; ++i) {
                da[i] += g0;
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(1) != b->dim(0)) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    const index_t m = a->dim(0);
    const index_t k = a->dim(1);
    const index_t n = b->dim(1);
    auto out = make_result<T>({m, n}, {a, b});
    kernels::gemm(a->data.data(), b->data.data(), out->data.data(), m, k, n, false);
    if (out->requires_grad) {
        out->backward_op = [a, b, m, k, n](Tensor<T>& self) {
            const T* g = self.grad.data();
            if (a->requires_grad) {
                std::vector<T> bt(static_cast<std::size_t>(k * n));
                transpose2(b->data.data(), bt.data(), k, n);
                kernels::gemm(g, bt.data(), a->grad.data(), m, n, k, true);
            }
            if (b->requires_grad) {
                std::vector<T> at(static_cast<std::size_t>(m * k));
                transpose2(a->data.data(), at.data(), m, k);
                kernels::gemm(at.data(), g, b->grad.data(), k, m, n, true);
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias) {
    if (w->ndim() != 2) {
        throw ShapeError("linear weight must be 2-d, got " + shape_str(w->shape));
    }
    const index_t k = w->dim(0);
    const index_t n = w->dim(1);
    if (x->ndim() < 1 || x->dim(x->ndim() - 1) != k) {
        throw ShapeError("linear input " + shape_str(x->shape) + " does not end in " +
                         std::to_string(k));
    }
    if (bias && (bias->ndim() != 1 || bias->dim(0) != n)) {
        throw ShapeError("linear bias must be [" + std::to_string(n) + "], got " +
                         shape_str(bias->shape));
    }
    const index_t m = x->numel() / k;
    std::vector<index_t> out_shape = x->shape;
    out_shape.back() = n;
    auto out = make_result<T>(std::move(out_shape), {x, w, bias});
    T* po = out->data.data();
    if (bias) {
        const T* pb = bias->data.data();
#pragma omp parallel for if (par(m * n))
        for (index_t r = 0; r < m; ++r) {
            std::copy(pb, pb + n, po + r * n);
        }
    }
    kernels::gemm(x->data.data(), w->data.data(), po, m, k, n, true);
    if (out->requires_grad) {
        out->backward_op = [x, w, bias, m, k, n](Tensor<T>& self) {
            const T* g = self.grad.data();
            if (x->requires_grad) {
                std::vector<T> wt(static_cast<std::size_t>(k * n));
                transpose2(w->data.data(), wt.data(), k, n);
                kernels::gemm(g, wt.data(), x->grad.data(), m, n, k, true);
            }
            if (w->requires_grad) {
                std::vector<T> xt(static_cast<std::size_t>(m * k));
                transpose2(x->data.data(), xt.data(), m, k);
                kernels::gemm(xt.data(), g, w->grad.data(), k, m, n, true);
            }
            if (bias && bias->requires_grad) {
                T* db = bias->grad.data();
#pragma omp parallel for if (par(m * n))
                for (index_t j = 0; j < n; ++j) {
                    T acc = T(0);
                    for (index_t r = 0; r < m; ++r) {
                        acc += g[r * n + j];
                    }
                    db[j] += acc;
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias,
                    index_t stride, index_t pad) {
    require_4d(x->shape, "conv2d input");
    require_4d(w->shape, "conv2d weight");
    const index_t bsz = x->dim(0), c = x->dim(1), h = x->dim(2), wd = x->dim(3);
    const index_t o = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    if (w->dim(1) != c) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x->shape) +
                         ", weight " + shape_str(w->shape));
    }
    if (bias && (bias->ndim() != 1 || bias->dim(0) != o)) {
        throw ShapeError("conv2d bias must be [" + std::to_string(o) + "], got " +
                         shape_str(bias->shape));
    }
    if (stride < 1 || pad < 0) {
        throw ConfigError("conv2d needs stride >= 1 and pad >= 0, got stride=" +
                          std::to_string(stride) + " pad=" + std::to_string(pad));
    }
    if (h + 2 * pad < kh || wd + 2 * pad < kw || (h + 2 * pad - kh) % stride != 0 ||
        (wd + 2 * pad - kw) % stride != 0) {
        throw ConfigError("conv2d geometry invalid: input " + std::to_string(h) + "x" +
                          std::to_string(wd) + ", kernel " + std::to_string(kh) + "x" +
                          std::to_string(kw) + ", stride " + std::to_string(stride) +
                          ", pad " + std::to_string(pad));
    }
    const index_t ho = (h + 2 * pad - kh) / stride + 1;
    const index_t wo = (wd + 2 * pad - kw) / stride + 1;
    const index_t ckk = c * kh * kw;
    const index_t howo = ho * wo;
    const index_t chw = c * h * wd;

    auto out = make_result<T>({bsz, o, ho, wo}, {x, w, bias});
    T* py = out->data.data();
    const T* px = x->data.data();
    {
        std::vector<T> col(static_cast<std::size_t>(ckk * howo));
        for (index_t bi = 0; bi < bsz; ++bi) {
            kernels::im2col(px + bi * chw, col.data(), c, h, wd, kh, kw, stride, pad, ho, wo);
            T* yb = py + bi * o * howo;
            if (bias) {
                for (index_t oi = 0; oi < o; ++oi) {
                    std::fill(yb + oi * howo, yb + (oi + 1) * howo, bias->data[oi]);
                }
            }
            kernels::gemm(w->data.data(), col.data(), yb, o, ckk, howo, true);
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, w, bias, bsz, c, h, wd, o, kh, kw, stride, pad, ho, wo, ckk,
                            howo, chw](Tensor<T>& self) {
            const T* g = self.grad.data();
            const T* px2 = x->data.data();
            std::vector<T> wt;
            if (x->requires_grad) {
                wt.resize(static_cast<std::size_t>(ckk * o));
                transpose2(w->data.data(), wt.data(), o, ckk);
            }
            std::vector<T> rowbuf(w->requires_grad ? static_cast<std::size_t>(howo * ckk) : 0);
            std::vector<T> dcol(x->requires_grad ? static_cast<std::size_t>(ckk * howo) : 0);
            for (index_t bi = 0; bi < bsz; ++bi) {
                const T* gb = g + bi * o * howo;
                if (w->requires_grad) {
                    kernels::im2row(px2 + bi * chw, rowbuf.data(), c, h, wd, kh, kw, stride,
                                    pad, ho, wo);
                    kernels::gemm(gb, rowbuf.data(), w->grad.data(), o, howo, ckk, true);
                }
                if (x->requires_grad) {
                    kernels::gemm(wt.data(), gb, dcol.data(), ckk, o, howo, false);
                    kernels::col2im_add(dcol.data(), x->grad.data() + bi * chw, c, h, wd, kh,
                                        kw, stride, pad, ho, wo);
                }
            }
            if (bias && bias->requires_grad) {
                T* db = bias->grad.data();
#pragma omp parallel for if (par(bsz * o * howo))
                for (index_t oi = 0; oi < o; ++oi) {
                    T acc = T(0);
                    for (index_t bi = 0; bi < bsz; ++bi) {
                        const T* gb = g + (bi * o + oi) * howo;
                        for (index_t i = 0; i < howo; ++i) {
                            acc += gb[i];
                        }
                    }
                    db[oi] += acc;
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> maxpool2(const TensorPtr<T>& x) {
    require_4d(x->shape, "maxpool2");
    const index_t b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("maxpool2 needs even spatial dims, got " + shape_str(x->shape));
    }
    const index_t ho = h / 2, wo = w / 2;
    const index_t planes = b * c;
    const index_t opp = ho * wo;  // outputs per plane
    auto out = make_result<T>({b, c, ho, wo}, {x});
    auto arg = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(planes * opp));
    const T* px = x->data.data();
    T* po = out->data.data();
    index_t* pi = arg->data();
#pragma omp parallel for if (par(planes * opp))
    for (index_t pl = 0; pl < planes; ++pl) {
        const T* xp = px + pl * h * w;
        for (index_t oy = 0; oy < ho; ++oy) {
            for (index_t ox = 0; ox < wo; ++ox) {
                index_t best = (2 * oy) * w + 2 * ox;
                T bv = xp[best];
                for (index_t dy = 0; dy < 2; ++dy) {
                    for (index_t dx = 0; dx < 2; ++dx) {
                        const index_t idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if (xp[idx] > bv) {  // strict: ties keep the earliest
                            bv = xp[idx];
                            best = idx;
                        }
                    }
                }
                po[pl * opp + oy * wo + ox] = bv;
                pi[pl * opp + oy * wo + ox] = pl * h * w + best;
            }
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, arg, planes, opp](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = x->grad.data();
            const index_t* idx = arg->data();
#pragma omp parallel for if (par(planes * opp))
            for (index_t pl = 0; pl < planes; ++pl) {
                for (index_t i = pl * opp; i < (pl + 1) * opp; ++i) {
                    dx[idx[i]] += g[i];
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> upsample_bilinear2(const TensorPtr<T>& x) {
    require_4d(x->shape, "upsample_bilinear2");
    const index_t b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    const index_t ho = 2 * h, wo = 2 * w;
    const index_t planes = b * c;
    auto out = make_result<T>({b, c, ho, wo}, {x});
    const T* px = x->data.data();
    T* po = out->data.data();
    const auto corner = [](index_t oi, index_t extent, index_t& lo, index_t& hi, T& frac) {
        const double s = (static_cast<double>(oi) + 0.5) * 0.5 - 0.5;
        const double f = std::floor(s);
        const auto i0 = static_cast<index_t>(f);
        frac = static_cast<T>(s - f);
        lo = std::clamp<index_t>(i0, 0, extent - 1);
        hi = std::clamp<index_t>(i0 + 1, 0, extent - 1);
    };
#pragma omp parallel for if (par(planes * ho * wo))
    for (index_t pl = 0; pl < planes; ++pl) {
        const T* xp = px + pl * h * w;
        T* op = po + pl * ho * wo;
        for (index_t oy = 0; oy < ho; ++oy) {
            index_t y0, y1;
            T fy;
            corner(oy, h, y0, y1, fy);
            for (index_t ox = 0; ox < wo; ++ox) {
                index_t x0, x1;
                T fx;
                corner(ox, w, x0, x1, fx);
                const T w00 = (T(1) - fy) * (T(1) - fx);
                const T w01 = (T(1) - fy) * fx;
                const T w10 = fy * (T(1) - fx);
                const T w11 = fy * fx;
                op[oy * wo + ox] = w00 * xp[y0 * w + x0] + w01 * xp[y0 * w + x1] +
                                   w10 * xp[y1 * w + x0] + w11 * xp[y1 * w + x1];
            }
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, corner, b, c, h, w, ho, wo, planes](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = x->grad.data();
#pragma omp parallel for if (par(planes * ho * wo))
            for (index_t pl = 0; pl < planes; ++pl) {
                T* dxp = dx + pl * h * w;
                const T* gp = g + pl * ho * wo;
                for (index_t oy = 0; oy < ho; ++oy) {
                    index_t y0, y1;
                    T fy;
                    corner(oy, h, y0, y1, fy);
                    for (index_t ox = 0; ox < wo; ++ox) {
                        index_t x0, x1;
                        T fx;
                        corner(ox, w, x0, x1, fx);
                        const T gv = gp[oy * wo + ox];
                        dxp[y0 * w + x0] += (T(1) - fy) * (T(1) - fx) * gv;
                        dxp[y0 * w + x1] += (T(1) - fy) * fx * gv;
                        dxp[y1 * w + x0] += fy * (T(1) - fx) * gv;
                        dxp[y1 * w + x1] += fy * fx * gv;
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> layernorm(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                       const TensorPtr<T>& delta, T eps) {
    if (x->ndim() < 1) {
        throw ShapeError("layernorm input must have at least one axis");
    }
    const index_t d = x->dim(x->ndim() - 1);
    if (gamma->ndim() != 1 || gamma->dim(0) != d || delta->ndim() != 1 || delta->dim(0) != d) {
        throw ShapeError("layernorm affine params must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma->shape) + " and " + shape_str(delta->shape));
    }
    if (!(eps > T(0))) {
        throw ConfigError("layernorm eps must be positive");
    }
    const index_t rows = x->numel() / d;
    auto out = make_result<T>(x->shape, {x, gamma, delta});
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * d));
    auto istd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* px = x->data.data();
    const T* pg = gamma->data.data();
    const T* pd = delta->data.data();
    T* po = out->data.data();
    T* ph = xhat->data();
    T* pi = istd->data();
    const T inv_d = T(1) / static_cast<T>(d);
#pragma omp parallel for if (par(rows * d))
    for (index_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T mean = T(0);
        for (index_t j = 0; j < d; ++j) {
            mean += xr[j];
        }
        mean *= inv_d;
        T var = T(0);
        for (index_t j = 0; j < d; ++j) {
            const T dv = xr[j] - mean;
            var += dv * dv;
        }
        var *= inv_d;
        const T is = T(1) / std::sqrt(var + eps);
        pi[r] = is;
        for (index_t j = 0; j < d; ++j) {
            const T xh = (xr[j] - mean) * is;
            ph[r * d + j] = xh;
            po[r * d + j] = xh * pg[j] + pd[j];
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, gamma, delta, xhat, istd, rows, d, inv_d](Tensor<T>& self) {
            const T* g = self.grad.data();
            const T* ph2 = xhat->data();
            const T* pi2 = istd->data();
            const T* pg2 = gamma->data.data();
            if (x->requires_grad) {
                T* dx = x->grad.data();
#pragma omp parallel for if (par(rows * d))
                for (index_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * d;
                    const T* hr = ph2 + r * d;
                    T s1 = T(0), s2 = T(0);
                    for (index_t j = 0; j < d; ++j) {
                        const T gj = gr[j] * pg2[j];
                        s1 += gj;
                        s2 += gj * hr[j];
                    }
                    s1 *= inv_d;
                    s2 *= inv_d;
                    for (index_t j = 0; j < d; ++j) {
                        const T gj = gr[j] * pg2[j];
                        dx[r * d + j] += pi2[r] * (gj - s1 - hr[j] * s2);
                    }
                }
            }
            if (gamma->requires_grad || delta->requires_grad) {
                T* dg = gamma->requires_grad ? gamma->grad.data() : nullptr;
                T* dd = delta->requires_grad ? delta->grad.data() : nullptr;
#pragma omp parallel for if (par(rows * d))
                for (index_t j = 0; j < d; ++j) {
                    T ag = T(0), ad = T(0);
                    for (index_t r = 0; r < rows; ++r) {
                        ag += g[r * d + j] * ph2[r * d + j];
                        ad += g[r * d + j];
                    }
                    if (dg) {
                        dg[j] += ag;
                    }
                    if (dd) {
                        dd[j] += ad;
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> gelu(const TensorPtr<T>& x) {
    auto out = make_result<T>(x->shape, {x});
    const index_t n = x->numel();
    const T* px = x->data.data();
    T* po = out->data.data();
    const T c1 = std::sqrt(T(2) / std::numbers::pi_v<T>);
    const T c2 = T(0.044715);
#pragma omp parallel for if (par(n))
    for (index_t i = 0; i < n; ++i) {
        const T v = px[i];
        const T t = std::tanh(c1 * (v + c2 * v * v * v));
        po[i] = T(0.5) * v * (T(1) + t);
    }
    if (out->requires_grad) {
        out->backward_op = [x, n, c1, c2](Tensor<T>& self) {
            const T* g = self.grad.data();
            const T* px2 = x->data.data();
            T* dx = x->grad.data();
#pragma omp parallel for if (par(n))
            for (index_t i = 0; i < n; ++i) {
                const T v = px2[i];
                const T t = std::tanh(c1 * (v + c2 * v * v * v));
                const T du = c1 * (T(1) + T(3) * c2 * v * v);
                const T dydv = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
                dx[i] += g[i] * dydv;
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> relu(const TensorPtr<T>& x) {
    auto out = make_result<T>(x->shape, {x});
    const index_t n = x->numel();
    const T* px = x->data.data();
    T* po = out->data.data();
#pragma omp parallel for if (par(n))
    for (index_t i = 0; i < n; ++i) {
        po[i] = px[i] > T(0) ? px[i] : T(0);
    }
    if (out->requires_grad) {
        out->backward_op = [x, n](Tensor<T>& self) {
            const T* g = self.grad.data();
            const T* px2 = x->data.data();
            T* dx = x->grad.data();
#pragma omp parallel for if (par(n))
            for (index_t i = 0; i < n; ++i) {
                if (px2[i] > T(0)) {
                    dx[i] += g[i];
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> softmax_ce(const TensorPtr<T>& logits, const TensorPtr<T>& target) {
    require_4d(logits->shape, "softmax_ce logits");
    const index_t b = logits->dim(0), kcls = logits->dim(1);
    const index_t h = logits->dim(2), w = logits->dim(3);
    if (target->shape != std::vector<index_t>{b, h, w}) {
        throw ShapeError("softmax_ce target must be [" + std::to_string(b) + " x " +
                         std::to_string(h) + " x " + std::to_string(w) + "], got " +
                         shape_str(target->shape));
    }
    const index_t hw = h * w;
    const index_t pixels = b * hw;
    const T* pt = target->data.data();
    auto tix = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(pixels));
    for (index_t p = 0; p < pixels; ++p) {
        const auto ti = static_cast<index_t>(std::llround(static_cast<double>(pt[p])));
        if (ti < 0 || ti >= kcls) {
            const index_t bi = p / hw;
            const index_t y = (p % hw) / w;
            const index_t xq = p % w;
            throw DataError("softmax_ce class id " + std::to_string(ti) + " at pixel (b=" +
                            std::to_string(bi) + ", y=" + std::to_string(y) + ", x=" +
                            std::to_string(xq) + ") outside [0, " + std::to_string(kcls) + ")");
        }
        (*tix)[static_cast<std::size_t>(p)] = ti;
    }

    auto out = make_result<T>({1}, {logits});
    const bool rec = out->requires_grad;
    auto probs = std::make_shared<std::vector<T>>();
    if (rec) {
        probs->resize(logits->data.size());
    }
    std::vector<T> pixel_loss(static_cast<std::size_t>(pixels));
    const T* pl = logits->data.data();
    T* pp = probs->data();
    const index_t* ptix = tix->data();
#pragma omp parallel for if (par(pixels * kcls))
    for (index_t p = 0; p < pixels; ++p) {
        const index_t base = (p / hw) * kcls * hw + (p % hw);
        T mx = pl[base];
        for (index_t kk = 1; kk < kcls; ++kk) {
            mx = std::max(mx, pl[base + kk * hw]);
        }
        T se = T(0);
        for (index_t kk = 0; kk < kcls; ++kk) {
            se += std::exp(pl[base + kk * hw] - mx);
        }
        if (rec) {
            for (index_t kk = 0; kk < kcls; ++kk) {
                pp[base + kk * hw] = std::exp(pl[base + kk * hw] - mx) / se;
            }
        }
        pixel_loss[static_cast<std::size_t>(p)] =
            mx + std::log(se) - pl[base + ptix[p] * hw];
    }
    T total = T(0);
    for (index_t p = 0; p < pixels; ++p) {
        total += pixel_loss[static_cast<std::size_t>(p)];
    }
    out->data[0] = total / static_cast<T>(pixels);
    if (rec) {
        out->backward_op = [logits, probs, tix, pixels, kcls, hw](Tensor<T>& self) {
            const T g0 = self.grad[0] / static_cast<T>(pixels);
            T* dl = logits->grad.data();
            const T* pp2 = probs->data();
            const index_t* pt2 = tix->data();
#pragma omp parallel for if (par(pixels * kcls))
            for (index_t p = 0; p < pixels; ++p) {
                const index_t base = (p / hw) * kcls * hw + (p % hw);
                for (index_t kk = 0; kk < kcls; ++kk) {
                    const T ind = kk == pt2[p] ? T(1) : T(0);
                    dl[base + kk * hw] += g0 * (pp2[base + kk * hw] - ind);
                }
            }
        };
    }
    return out;
}

template <class T>
std::vector<TensorPtr<T>> split_channels(const TensorPtr<T>& x,
                                         const std::vector<index_t>& boundaries) {
    require_4d(x->shape, "split_channels");
    const index_t b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    index_t prev = 0;
    for (index_t cut : boundaries) {
        if (cut <= prev || cut >= c) {
            throw ConfigError("split_channels boundaries must be strictly increasing inside (0, " +
                              std::to_string(c) + ")");
        }
        prev = cut;
    }
    const index_t hw = h * w;
    std::vector<TensorPtr<T>> parts;
    index_t lo = 0;
    for (std::size_t i = 0; i <= boundaries.size(); ++i) {
        const index_t hi = i < boundaries.size() ? boundaries[i] : c;
        const index_t len = hi - lo;
        auto part = make_result<T>({b, len, h, w}, {x});
        const T* px = x->data.data();
        T* pp = part->data.data();
        for (index_t bi = 0; bi < b; ++bi) {
            std::copy(px + (bi * c + lo) * hw, px + (bi * c + hi) * hw, pp + bi * len * hw);
        }
        if (part->requires_grad) {
            const index_t lo_c = lo;
            part->backward_op = [x, lo_c, len, b, c, hw](Tensor<T>& self) {
                const T* g = self.grad.data();
                T* dx = x->grad.data();
#pragma omp parallel for if (par(b * len * hw))
                for (index_t bi = 0; bi < b; ++bi) {
                    T* dst = dx + (bi * c + lo_c) * hw;
                    const T* src = g + bi * len * hw;
                    for (index_t j = 0; j < len * hw; ++j) {
                        dst[j] += src[j];
                    }
                }
            };
        }
        parts.push_back(std::move(part));
        lo = hi;
    }
    return parts;
}

template <class T>
TensorPtr<T> concat_channels(const std::vector<TensorPtr<T>>& parts) {
    if (parts.empty()) {
        throw UsageError("concat_channels needs at least one input");
    }
    require_4d(parts[0]->shape, "concat_channels");
    const index_t b = parts[0]->dim(0), h = parts[0]->dim(2), w = parts[0]->dim(3);
    index_t c = 0;
    for (const auto& p : parts) {
        require_4d(p->shape, "concat_channels");
        if (p->dim(0) != b || p->dim(2) != h || p->dim(3) != w) {
            throw ShapeError("concat_channels mismatch: " + shape_str(parts[0]->shape) +
                             " vs " + shape_str(p->shape));
        }
        c += p->dim(1);
    }
    const index_t hw = h * w;
    auto out = Tensor<T>::create({b, c, h, w});
    if (grad_enabled()) {
        for (const auto& p : parts) {
            if (p->requires_grad) {
                out->requires_grad = true;
            }
        }
        if (out->requires_grad) {
            out->parents.assign(parts.begin(), parts.end());
        }
    }
    T* po = out->data.data();
    index_t lo = 0;
    for (const auto& p : parts) {
        const index_t len = p->dim(1);
        const T* pp = p->data.data();
        for (index_t bi = 0; bi < b; ++bi) {
            std::copy(pp + bi * len * hw, pp + (bi + 1) * len * hw, po + (bi * c + lo) * hw);
        }
        lo += len;
    }
    if (out->requires_grad) {
        auto srcs = parts;  // keep the slot order for the sweep
        out->backward_op = [srcs, b, c, hw](Tensor<T>& self) {
            const T* g = self.grad.data();
            index_t lo2 = 0;
            for (const auto& p : srcs) {
                const index_t len = p->dim(1);
                if (p->requires_grad) {
                    T* dp = p->grad.data();
#pragma omp parallel for if (par(b * len * hw))
                    for (index_t bi = 0; bi < b; ++bi) {
                        const T* src = g + (bi * c + lo2) * hw;
                        T* dst = dp + bi * len * hw;
                        for (index_t j = 0; j < len * hw; ++j) {
                            dst[j] += src[j];
                        }
                    }
                }
                lo2 += len;
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> reshape(const TensorPtr<T>& x, std::vector<index_t> new_shape) {
    if (shape_numel(new_shape) != x->numel()) {
        throw ShapeError("reshape from " + shape_str(x->shape) + " to " + shape_str(new_shape) +
                         " changes element count");
    }
    auto out = make_result<T>(std::move(new_shape), {x});
    out->data = x->data;
    if (out->requires_grad) {
        out->backward_op = [x](Tensor<T>& self) {
            x->accumulate_grad(self.grad.data());
        };
    }
    return out;
}

template <class T>
TensorPtr<T> transpose_last2(const TensorPtr<T>& x) {
    if (x->ndim() < 2) {
        throw ShapeError("transpose_last2 needs at least 2 axes, got " + shape_str(x->shape));
    }
    const index_t a = x->dim(x->ndim() - 2);
    const index_t bdim = x->dim(x->ndim() - 1);
    const index_t outer = x->numel() / (a * bdim);
    std::vector<index_t> shp = x->shape;
    std::swap(shp[shp.size() - 1], shp[shp.size() - 2]);
    auto out = make_result<T>(std::move(shp), {x});
    const T* px = x->data.data();
    T* po = out->data.data();
    const index_t n = x->numel();
#pragma omp parallel for if (par(n)) collapse(2)
    for (index_t oi = 0; oi < outer; ++oi) {
        for (index_t r = 0; r < a; ++r) {
            for (index_t cc = 0; cc < bdim; ++cc) {
                po[oi * a * bdim + cc * a + r] = px[oi * a * bdim + r * bdim + cc];
            }
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, outer, a, bdim, n](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = x->grad.data();
#pragma omp parallel for if (par(n)) collapse(2)
            for (index_t oi = 0; oi < outer; ++oi) {
                for (index_t r = 0; r < a; ++r) {
                    for (index_t cc = 0; cc < bdim; ++cc) {
                        dx[oi * a * bdim + r * bdim + cc] += g[oi * a * bdim + cc * a + r];
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> gather_tokens(const TensorPtr<T>& x, const std::vector<index_t>& idx) {
    if (x->ndim() != 3) {
        throw ShapeError("gather_tokens expects [batch x tokens x features], got " +
                         shape_str(x->shape));
    }
    const index_t b = x->dim(0), ntok = x->dim(1), d = x->dim(2);
    for (index_t i : idx) {
        if (i < 0 || i >= ntok) {
            throw UsageError("gather_tokens index " + std::to_string(i) + " outside [0, " +
                             std::to_string(ntok) + ")");
        }
    }
    const auto m = static_cast<index_t>(idx.size());
    auto out = make_result<T>({b, m, d}, {x});
    const T* px = x->data.data();
    T* po = out->data.data();
    const index_t* pidx = idx.data();
#pragma omp parallel for if (par(b * m * d)) collapse(2)
    for (index_t bi = 0; bi < b; ++bi) {
        for (index_t i = 0; i < m; ++i) {
            const T* src = px + (bi * ntok + pidx[i]) * d;
            std::copy(src, src + d, po + (bi * m + i) * d);
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, idx, b, ntok, m, d](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = x->grad.data();
            // indices may repeat, so only the batch axis is safe to split
#pragma omp parallel for if (par(b * m * d))
            for (index_t bi = 0; bi < b; ++bi) {
                for (index_t i = 0; i < m; ++i) {
                    T* dst = dx + (bi * ntok + idx[static_cast<std::size_t>(i)]) * d;
                    const T* src = g + (bi * m + i) * d;
                    for (index_t j = 0; j < d; ++j) {
                        dst[j] += src[j];
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> extract_patches(const TensorPtr<T>& x, index_t s) {
    require_4d(x->shape, "extract_patches");
    const index_t b = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    if (s < 1 || h % s != 0 || w % s != 0) {
        throw ConfigError("extract_patches size " + std::to_string(s) +
                          " must divide spatial dims of " + shape_str(x->shape));
    }
    const index_t gh = h / s, gw = w / s;
    const index_t tokens = gh * gw;
    const index_t feat = c * s * s;
    auto out = make_result<T>({b, tokens, feat}, {x});
    const T* px = x->data.data();
    T* po = out->data.data();
#pragma omp parallel for if (par(b * tokens * feat)) collapse(2)
    for (index_t bi = 0; bi < b; ++bi) {
        for (index_t t = 0; t < tokens; ++t) {
            const index_t gy = t / gw, gx = t % gw;
            T* dst = po + (bi * tokens + t) * feat;
            index_t f = 0;
            for (index_t ci = 0; ci < c; ++ci) {
                for (index_t dy = 0; dy < s; ++dy) {
                    const T* src = px + ((bi * c + ci) * h + gy * s + dy) * w + gx * s;
                    for (index_t dx = 0; dx < s; ++dx) {
                        dst[f++] = src[dx];
                    }
                }
            }
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, b, c, h, w, s, gh, gw, tokens, feat](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = x->grad.data();
#pragma omp parallel for if (par(b * tokens * feat)) collapse(2)
            for (index_t bi = 0; bi < b; ++bi) {
                for (index_t t = 0; t < tokens; ++t) {
                    const index_t gy = t / gw, gx = t % gw;
                    const T* src = g + (bi * tokens + t) * feat;
                    index_t f = 0;
                    for (index_t ci = 0; ci < c; ++ci) {
                        for (index_t dy = 0; dy < s; ++dy) {
                            T* dst = dx + ((bi * c + ci) * h + gy * s + dy) * w + gx * s;
                            for (index_t dxq = 0; dxq < s; ++dxq) {
                                dst[dxq] += src[f++];
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> merge_patches(const TensorPtr<T>& tokens_in, index_t channels, index_t height,
                           index_t width, index_t s) {
    if (tokens_in->ndim() != 3) {
        throw ShapeError("merge_patches expects [batch x tokens x features], got " +
                         shape_str(tokens_in->shape));
    }
    if (s < 1 || height % s != 0 || width % s != 0) {
        throw ConfigError("merge_patches size " + std::to_string(s) + " must divide " +
                          std::to_string(height) + "x" + std::to_string(width));
    }
    const index_t b = tokens_in->dim(0);
    const index_t gh = height / s, gw = width / s;
    const index_t tokens = gh * gw;
    const index_t feat = channels * s * s;
    if (tokens_in->dim(1) != tokens || tokens_in->dim(2) != feat) {
        throw ShapeError("merge_patches input " + shape_str(tokens_in->shape) +
                         " does not match [" + std::to_string(b) + " x " +
                         std::to_string(tokens) + " x " + std::to_string(feat) + "]");
    }
    auto out = make_result<T>({b, channels, height, width}, {tokens_in});
    const T* px = tokens_in->data.data();
    T* po = out->data.data();
#pragma omp parallel for if (par(b * tokens * feat)) collapse(2)
    for (index_t bi = 0; bi < b; ++bi) {
        for (index_t t = 0; t < tokens; ++t) {
            const index_t gy = t / gw, gx = t % gw;
            const T* src = px + (bi * tokens + t) * feat;
            index_t f = 0;
            for (index_t ci = 0; ci < channels; ++ci) {
                for (index_t dy = 0; dy < s; ++dy) {
                    T* dst = po + ((bi * channels + ci) * height + gy * s + dy) * width + gx * s;
                    for (index_t dx = 0; dx < s; ++dx) {
                        dst[dx] = src[f++];
                    }
                }
            }
        }
    }
    if (out->requires_grad) {
        auto tk = tokens_in;
        out->backward_op = [tk, b, channels, height, width, s, gh, gw, tokens,
                            feat](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = tk->grad.data();
#pragma omp parallel for if (par(b * tokens * feat)) collapse(2)
            for (index_t bi = 0; bi < b; ++bi) {
                for (index_t t = 0; t < tokens; ++t) {
                    const index_t gy = t / gw, gx = t % gw;
                    T* dst = dx + (bi * tokens + t) * feat;
                    index_t f = 0;
                    for (index_t ci = 0; ci < channels; ++ci) {
                        for (index_t dy = 0; dy < s; ++dy) {
                            const T* src =
                                g + ((bi * channels + ci) * height + gy * s + dy) * width +
                                gx * s;
                            for (index_t dxq = 0; dxq < s; ++dxq) {
                                dst[f++] += src[dxq];
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
TensorPtr<T> mean_tokens(const TensorPtr<T>& x) {
    if (x->ndim() != 3) {
        throw ShapeError("mean_tokens expects [batch x tokens x features], got " +
                         shape_str(x->shape));
    }
    const index_t b = x->dim(0), ntok = x->dim(1), c = x->dim(2);
    auto out = make_result<T>({b, c}, {x});
    const T* px = x->data.data();
    T* po = out->data.data();
    const T inv = T(1) / static_cast<T>(ntok);
#pragma omp parallel for if (par(b * ntok * c)) collapse(2)
    for (index_t bi = 0; bi < b; ++bi) {
        for (index_t ci = 0; ci < c; ++ci) {
            T acc = T(0);
            for (index_t t = 0; t < ntok; ++t) {
                acc += px[(bi * ntok + t) * c + ci];
            }
            po[bi * c + ci] = acc * inv;
        }
    }
    if (out->requires_grad) {
        out->backward_op = [x, b, ntok, c, inv](Tensor<T>& self) {
            const T* g = self.grad.data();
            T* dx = x->grad.data();
#pragma omp parallel for if (par(b * ntok * c)) collapse(2)
            for (index_t bi = 0; bi < b; ++bi) {
                for (index_t t = 0; t < ntok; ++t) {
                    for (index_t ci = 0; ci < c; ++ci) {
                        dx[(bi * ntok + t) * c + ci] += g[bi * c + ci] * inv;
                    }
                }
            }
        };
    }
    return out;
}

#define MMUNET_INSTANTIATE_OPS(T)                                                              \
    template TensorPtr<T> add<T>(const TensorPtr<T>&, const TensorPtr<T>&);                    \
    template TensorPtr<T> mul<T>(const TensorPtr<T>&, const TensorPtr<T>&);                    \
    template TensorPtr<T> scale<T>(const TensorPtr<T>&, T);                                    \
    template TensorPtr<T> sum<T>(const TensorPtr<T>&);                                         \
    template TensorPtr<T> matmul<T>(const TensorPtr<T>&, const TensorPtr<T>&);                 \
    template TensorPtr<T> linear<T>(const TensorPtr<T>&, const TensorPtr<T>&,                  \
                                    const TensorPtr<T>&);                                      \
    template TensorPtr<T> conv2d<T>(const TensorPtr<T>&, const TensorPtr<T>&,                  \
                                    const TensorPtr<T>&, index_t, index_t);                    \
    template TensorPtr<T> maxpool2<T>(const TensorPtr<T>&);                                    \
    template TensorPtr<T> upsample_bilinear2<T>(const TensorPtr<T>&);                          \
    template TensorPtr<T> layernorm<T>(const TensorPtr<T>&, const TensorPtr<T>&,               \
                                       const TensorPtr<T>&, T);                                \
    template TensorPtr<T> gelu<T>(const TensorPtr<T>&);                                        \
    template TensorPtr<T> relu<T>(const TensorPtr<T>&);                                        \
    template TensorPtr<T> softmax_ce<T>(const TensorPtr<T>&, const TensorPtr<T>&);             \
    template std::vector<TensorPtr<T>> split_channels<T>(const TensorPtr<T>&,                  \
                                                         const std::vector<index_t>&);        \
    template TensorPtr<T> concat_channels<T>(const std::vector<TensorPtr<T>>&);                \
    template TensorPtr<T> reshape<T>(const TensorPtr<T>&, std::vector<index_t>);               \
    template TensorPtr<T> transpose_last2<T>(const TensorPtr<T>&);                             \
    template TensorPtr<T> gather_tokens<T>(const TensorPtr<T>&, const std::vector<index_t>&); \
    template TensorPtr<T> extract_patches<T>(const TensorPtr<T>&, index_t);                    \
    template TensorPtr<T> merge_patches<T>(const TensorPtr<T>&, index_t, index_t, index_t,     \
                                           index_t);                                          \
    template TensorPtr<T> mean_tokens<T>(const TensorPtr<T>&);

MMUNET_INSTANTIATE_OPS(float)
MMUNET_INSTANTIATE_OPS(double)

}  // namespace mmunet::ops
