#include <cstdint>
#include <random>
#include <vector>

#include "doctest.h"
#include "mmunet/kernels.hpp"
#include "mmunet/rng.hpp"

using namespace mmunet;
using i64 = std::int64_t;

namespace {

std::vector<float> random_vec(i64 n, std::mt19937_64& eng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<float> v(n);
    for (auto& x : v) {
        x = static_cast<float>(dist(eng));
    }
    return v;
}

std::vector<double> random_vec_d(i64 n, std::mt19937_64& eng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) {
        x = dist(eng);
    }
    return v;
}

struct ParallelRestore {
    ~ParallelRestore() { kernels::set_parallel(true); }
};

}  // namespace

TEST_CASE("gemm matches the reference on ragged shapes") {
    auto eng = rng::engine(rng::substream(11, "gemm-shapes"));
    const i64 shapes[][3] = {{1, 1, 1},   {2, 3, 4},    {5, 7, 3},   {4, 1, 9},
                             {16, 16, 16}, {33, 29, 65}, {64, 20, 130}};
    for (const auto& s : shapes) {
        const i64 m = s[0], k = s[1], n = s[2];
        const auto a = random_vec(m * k, eng);
        const auto b = random_vec(k * n, eng);
        std::vector<float> c_fast(m * n), c_ref(m * n);
        kernels::gemm(a.data(), b.data(), c_fast.data(), m, k, n, false);
        kernels::ref::gemm(a.data(), b.data(), c_ref.data(), m, k, n, false);
        for (i64 i = 0; i < m * n; ++i) {
            CHECK(c_fast[i] == doctest::Approx(c_ref[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("gemm accumulate adds on top of existing output") {
    auto eng = rng::engine(rng::substream(12, "gemm-acc"));
    const i64 m = 6, k = 5, n = 7;
    const auto a = random_vec(m * k, eng);
    const auto b = random_vec(k * n, eng);
    auto c = random_vec(m * n, eng);
    auto expect = c;
    kernels::gemm(a.data(), b.data(), c.data(), m, k, n, true);
    kernels::ref::gemm(a.data(), b.data(), expect.data(), m, k, n, true);
    for (i64 i = 0; i < m * n; ++i) {
        CHECK(c[i] == doctest::Approx(expect[i]).epsilon(1e-5));
    }
}

TEST_CASE("gemm is bitwise identical with the parallel switch on or off") {
    ParallelRestore restore;
    auto eng = rng::engine(rng::substream(13, "gemm-par"));
    const i64 shapes[][3] = {{5, 13, 37}, {64, 48, 200}, {129, 31, 513}};
    for (const auto& s : shapes) {
        const i64 m = s[0], k = s[1], n = s[2];
        const auto a = random_vec_d(m * k, eng);
        const auto b = random_vec_d(k * n, eng);
        std::vector<double> c_ser(m * n), c_par(m * n);
        kernels::set_parallel(false);
        kernels::gemm(a.data(), b.data(), c_ser.data(), m, k, n, false);
        kernels::set_parallel(true);
        kernels::gemm(a.data(), b.data(), c_par.data(), m, k, n, false);
        CHECK(c_ser == c_par);
    }
}

TEST_CASE("im2row is the transpose of im2col") {
    auto eng = rng::engine(rng::substream(14, "im2"));
    const i64 c = 3, h = 7, w = 6, kh = 3, kw = 3, stride = 2, pad = 1;
    const i64 ho = (h + 2 * pad - kh) / stride + 1;
    const i64 wo = (w + 2 * pad - kw) / stride + 1;
    const auto x = random_vec(c * h * w, eng);
    const i64 taps = c * kh * kw;
    const i64 npos = ho * wo;
    std::vector<float> col(taps * npos), row(npos * taps);
    kernels::im2col(x.data(), col.data(), c, h, w, kh, kw, stride, pad, ho, wo);
    kernels::im2row(x.data(), row.data(), c, h, w, kh, kw, stride, pad, ho, wo);
    for (i64 r = 0; r < taps; ++r) {
        for (i64 p = 0; p < npos; ++p) {
            CHECK(col[r * npos + p] == row[p * taps + r]);
        }
    }
}

TEST_CASE("im2col zero-fills out-of-bounds taps") {
    const i64 c = 1, h = 2, w = 2, kh = 3, kw = 3, stride = 1, pad = 1;
    const i64 ho = 2, wo = 2;
    const std::vector<float> x = {1, 2, 3, 4};
    std::vector<float> col(c * kh * kw * ho * wo, -1.0f);
    kernels::im2col(x.data(), col.data(), c, h, w, kh, kw, stride, pad, ho, wo);
    // top-left output position, top-left kernel tap reads the padded corner
    CHECK(col[0 * ho * wo + 0] == 0.0f);
    // centre tap row reproduces the image in position order
    const i64 centre = (0 * kh + 1) * kw + 1;
    CHECK(col[centre * ho * wo + 0] == 1.0f);
    CHECK(col[centre * ho * wo + 1] == 2.0f);
    CHECK(col[centre * ho * wo + 2] == 3.0f);
    CHECK(col[centre * ho * wo + 3] == 4.0f);
}

TEST_CASE("col2im_add undoes im2col when patches do not overlap") {
    auto eng = rng::engine(rng::substream(15, "col2im"));
    const i64 c = 2, h = 6, w = 4, kh = 2, kw = 2, stride = 2, pad = 0;
    const i64 ho = 3, wo = 2;
    const auto x = random_vec(c * h * w, eng);
    std::vector<float> col(c * kh * kw * ho * wo);
    kernels::im2col(x.data(), col.data(), c, h, w, kh, kw, stride, pad, ho, wo);
    std::vector<float> back(c * h * w, 0.0f);
    kernels::col2im_add(col.data(), back.data(), c, h, w, kh, kw, stride, pad, ho, wo);
    CHECK(back == x);
}

TEST_CASE("col2im_add counts overlaps") {
    // 3x3 kernel, stride 1, pad 1 on a 3x3 image: scattering all-ones patch
    // rows yields, per pixel, the number of windows covering it.
    const i64 c = 1, h = 3, w = 3, kh = 3, kw = 3, stride = 1, pad = 1;
    const i64 ho = 3, wo = 3;
    std::vector<float> col(kh * kw * ho * wo, 1.0f);
    std::vector<float> dx(h * w, 0.0f);
    kernels::col2im_add(col.data(), dx.data(), c, h, w, kh, kw, stride, pad, ho, wo);
    const std::vector<float> expect = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    CHECK(dx == expect);
}

TEST_CASE("reference conv2d matches a hand-computed case") {
    // 1x1 image batch, 2x2 kernel over a 2x2 input, no padding
    const std::vector<float> x = {1, 2, 3, 4};
    const std::vector<float> wgt = {10, 20, 30, 40};
    const std::vector<float> bias = {5};
    std::vector<float> y(1);
    kernels::ref::conv2d_forward(x.data(), wgt.data(), bias.data(), y.data(), 1, 1, 2, 2, 1,
                                 2, 2, 1, 0);
    CHECK(y[0] == 1 * 10 + 2 * 20 + 3 * 30 + 4 * 40 + 5);
}

TEST_CASE("reference conv2d backward recovers a linear map's coefficients") {
    // With a single output position, dy=1 makes dwgt equal to the input patch
    // and dx equal to the kernel.
    const std::vector<float> x = {1, 2, 3, 4};
    const std::vector<float> wgt = {10, 20, 30, 40};
    const std::vector<float> dy = {1};
    std::vector<float> dx(4), dwgt(4), dbias(1);
    kernels::ref::conv2d_backward(x.data(), wgt.data(), dy.data(), dx.data(), dwgt.data(),
                                  dbias.data(), 1, 1, 2, 2, 1, 2, 2, 1, 0);
    CHECK(dx == wgt);
    CHECK(dwgt == x);
    CHECK(dbias[0] == 1.0f);
}
