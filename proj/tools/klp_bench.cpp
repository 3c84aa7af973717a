// Serial-vs-OpenMP kernel comparison. Results must agree bit for bit; the
// table reports times and the checksum match.
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "klp/heatmap.hpp"
#include "klp/rng.hpp"
#include "klp/tensor.hpp"

namespace {

using klp::Rng;
using klp::Tensor;

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

double time_ms(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    const double t0 = now_ms();
    for (int i = 0; i < reps; ++i) fn();
    return (now_ms() - t0) / reps;
}

double checksum(const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * static_cast<double>((i % 17) + 1);
    return s;
}

void report(const char* name, double serial_ms, double parallel_ms, bool identical) {
    std::printf("%-24s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx   bit-equal %s\n", name,
                serial_ms, parallel_ms, serial_ms / parallel_ms, identical ? "yes" : "NO");
}

} // namespace

int main() {
#ifdef _OPENMP
    std::printf("threads: %d\n", omp_get_max_threads());
#else
    std::printf("threads: 1 (compiled without OpenMP)\n");
#endif

    Rng rng(42);

    {
        const std::size_t n = 256;
        const Tensor a = Tensor::randn({n, n}, rng);
        const Tensor b = Tensor::randn({n, n}, rng);
        Tensor rs, rp;
        const double ts = time_ms([&] { rs = klp::serial::matmul(a, b); }, 5);
        const double tp = time_ms([&] { rp = klp::matmul(a, b); }, 5);
        report("matmul 256x256", ts, tp, rs.values() == rp.values());
    }

    {
        const Tensor t = Tensor::randn({512, 512}, rng);
        Tensor rs, rp;
        const double ts =
            time_ms([&] { rs = klp::serial::elementwise(t, klp::ScalarMap::Tanh); }, 10);
        const double tp = time_ms([&] { rp = klp::elementwise(t, klp::ScalarMap::Tanh); }, 10);
        report("tanh 512x512", ts, tp, rs.values() == rp.values());
    }

    {
        const Tensor t = Tensor::randn({512, 512, 4}, rng);
        Tensor rs, rp;
        const double ts =
            time_ms([&] { rs = klp::serial::resample2x(t, klp::ResampleDir::Down); }, 10);
        const double tp = time_ms([&] { rp = klp::resample2x(t, klp::ResampleDir::Down); }, 10);
        report("downsample 512x512x4", ts, tp, rs.values() == rp.values());
    }

    {
        std::vector<klp::Keypoint> kps;
        for (int i = 0; i < 400; ++i)
            kps.push_back({4.0 + 1016.0 * rng.next_uniform(), 4.0 + 1016.0 * rng.next_uniform(),
                           0, 0, 0});
        klp::HeatmapStack rs, rp;
        const double ts =
            time_ms([&] { rs = klp::serial::render_gt(kps, 256, 256, 4.0, 7); }, 5);
        const double tp = time_ms([&] { rp = klp::render_gt(kps, 256, 256, 4.0, 7); }, 5);
        const bool same = rs.h.values() == rp.h.values() && rs.ox.values() == rp.ox.values() &&
                          rs.oy.values() == rp.oy.values();
        report("render_gt 400kp 256^2", ts, tp, same);
        std::printf("render checksum %.6f\n", checksum(rp.h));
    }

    return 0;
}
