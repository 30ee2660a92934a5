// Timing harness for the compute kernels: naive reference vs the im2col/GEMM
// fast path, with the fast path run both serial and parallel. The two fast
// modes must agree bit for bit; the reference only to rounding.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "mmunet/kernels.hpp"
#include "mmunet/ops.hpp"
#include "mmunet/rng.hpp"
#include "mmunet/tensor.hpp"

using namespace mmunet;
using Clock = std::chrono::steady_clock;

namespace {

template <class F>
double best_seconds(int reps, F&& fn) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = Clock::now();
        fn();
        const auto t1 = Clock::now();
        best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
}

void fill(std::vector<float>& v, std::mt19937_64& eng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (auto& x : v) {
        x = static_cast<float>(dist(eng));
    }
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, static_cast<double>(std::fabs(a[i] - b[i])));
    }
    return m;
}

void bench_gemm(index_t m, index_t k, index_t n, std::mt19937_64& eng) {
    std::vector<float> a(m * k), b(k * n), c_ref(m * n), c_s(m * n), c_p(m * n);
    fill(a, eng);
    fill(b, eng);

    const double flops = 2.0 * static_cast<double>(m) * k * n;
    const double t_ref =
        best_seconds(2, [&] { kernels::ref::gemm(a.data(), b.data(), c_ref.data(), m, k, n, false); });
    kernels::set_parallel(false);
    const double t_s =
        best_seconds(3, [&] { kernels::gemm(a.data(), b.data(), c_s.data(), m, k, n, false); });
    kernels::set_parallel(true);
    const double t_p =
        best_seconds(3, [&] { kernels::gemm(a.data(), b.data(), c_p.data(), m, k, n, false); });

    std::printf("gemm %4lldx%4lldx%4lld  ref %6.2f  serial %6.2f  parallel %6.2f GF/s"
                "  serial==parallel %s  |ref-fast| %.2e\n",
                static_cast<long long>(m), static_cast<long long>(k),
                static_cast<long long>(n), flops / t_ref / 1e9, flops / t_s / 1e9,
                flops / t_p / 1e9, c_s == c_p ? "yes" : "NO", max_abs_diff(c_ref, c_s));
}

void bench_conv(index_t b, index_t c, index_t h, index_t w, index_t o,
                std::mt19937_64& eng) {
    auto x = Tensor<float>::create({b, c, h, w});
    auto wgt = Tensor<float>::create({o, c, 3, 3});
    auto bias = Tensor<float>::create({o});
    fill(x->data, eng);
    fill(wgt->data, eng);
    fill(bias->data, eng);
    std::vector<float> y_ref(b * o * h * w);

    const double flops = 2.0 * static_cast<double>(b) * o * h * w * c * 9;
    const double t_ref = best_seconds(2, [&] {
        kernels::ref::conv2d_forward(x->data.data(), wgt->data.data(), bias->data.data(),
                                     y_ref.data(), b, c, h, w, o, 3, 3, 1, 1);
    });

    NoGradGuard quiet;
    TensorPtr<float> y_s, y_p;
    kernels::set_parallel(false);
    const double t_s = best_seconds(3, [&] { y_s = ops::conv2d(x, wgt, bias, 1, 1); });
    kernels::set_parallel(true);
    const double t_p = best_seconds(3, [&] { y_p = ops::conv2d(x, wgt, bias, 1, 1); });

    std::printf("conv b=%-2lld c=%-3lld %3lldx%-3lld o=%-3lld  ref %6.2f  serial %6.2f"
                "  parallel %6.2f GF/s  serial==parallel %s  |ref-fast| %.2e\n",
                static_cast<long long>(b), static_cast<long long>(c),
                static_cast<long long>(h), static_cast<long long>(w),
                static_cast<long long>(o), flops / t_ref / 1e9, flops / t_s / 1e9,
                flops / t_p / 1e9, y_s->data == y_p->data ? "yes" : "NO",
                max_abs_diff(y_ref, y_s->data));
}

}  // namespace

int main() {
    std::printf("threads=%d\n", kernels::thread_count());
    auto eng = rng::engine(rng::substream(42, "bench"));

    bench_gemm(64, 576, 4096, eng);
    bench_gemm(128, 1152, 1024, eng);
    bench_gemm(256, 2304, 256, eng);

    bench_conv(16, 16, 64, 64, 16, eng);
    bench_conv(16, 64, 16, 16, 64, eng);
    bench_conv(4, 128, 32, 32, 128, eng);

    kernels::set_parallel(true);
    return 0;
}
