#include "klp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace klp {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("tensor extent must be positive");
        n *= e;
    }
    return n;
}

[[noreturn]] void shape_error(const std::string& what) {
    throw std::invalid_argument("shape error: " + what);
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size())
        shape_error("data length does not match shape product");
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double scale) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = scale * rng.next_normal();
    return t;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

double Rng::next_normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = next_uniform();
    } while (u1 <= 0.0);
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

Rng Rng::fork(std::uint64_t stream) const {
    // one splitmix step decorrelates (seed, stream) pairs
    std::uint64_t z = seed_ ^ (stream + 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
}

namespace detail {

inline double apply_map(double v, ScalarMap fn) {
    switch (fn) {
        case ScalarMap::Tanh: return std::tanh(v);
        case ScalarMap::Sigmoid: return 1.0 / (1.0 + std::exp(-v));
        case ScalarMap::Relu: return v > 0.0 ? v : 0.0;
        case ScalarMap::Exp: return std::exp(v);
        case ScalarMap::Log: return std::log(v);
    }
    return 0.0;
}

inline void check_map_domain(const Tensor& t, ScalarMap fn) {
    if (fn == ScalarMap::Log) {
        for (std::size_t i = 0; i < t.size(); ++i)
            if (!(t[i] > 0.0))
                throw std::domain_error("log requires strictly positive inputs");
    }
}

inline void check_map_result(const Tensor& t, ScalarMap fn) {
    if (fn == ScalarMap::Exp && !t.all_finite())
        throw std::domain_error("exp overflowed to non-finite values");
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool parallel) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("shape error: matmul expects rank-2 tensors");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k)
        throw std::invalid_argument("shape error: matmul inner dimensions disagree: " +
                                    a.shape_str() + " x " + b.shape_str());
    Tensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (parallel && m * n * k > 16384)
    for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t q = 0; q < k; ++q) acc += pa[i * k + q] * pb[q * n + j];
            pc[i * n + j] = acc;
        }
    }
    return c;
}

Tensor elementwise_impl(const Tensor& t, ScalarMap fn, bool parallel) {
    check_map_domain(t, fn);
    Tensor out(t.shape());
    const double* src = t.data();
    double* dst = out.data();
    const std::size_t n = t.size();
#pragma omp parallel for schedule(static) if (parallel && n > 32768)
    for (long long i = 0; i < static_cast<long long>(n); ++i)
        dst[i] = apply_map(src[i], fn);
    check_map_result(out, fn);
    return out;
}

Tensor resample2x_impl(const Tensor& t, ResampleDir dir, bool parallel) {
    if (t.rank() != 2 && t.rank() != 3)
        throw std::invalid_argument("shape error: resample2x expects rank-2 or rank-3");
    const std::size_t h = t.extent(0), w = t.extent(1);
    const std::size_t c = t.rank() == 3 ? t.extent(2) : 1;
    Tensor out;
    if (dir == ResampleDir::Down) {
        if (h % 2 != 0 || w % 2 != 0)
            throw std::invalid_argument("shape error: down-sampling needs even extents, got " +
                                        t.shape_str());
        const std::size_t oh = h / 2, ow = w / 2;
        out = t.rank() == 3 ? Tensor({oh, ow, c}) : Tensor({oh, ow});
        const double* src = t.data();
        double* dst = out.data();
#pragma omp parallel for schedule(static) if (parallel && oh * ow * c > 16384)
        for (long long yy = 0; yy < static_cast<long long>(oh); ++yy) {
            const std::size_t y = static_cast<std::size_t>(yy);
            for (std::size_t x = 0; x < ow; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t y0 = 2 * y, x0 = 2 * x;
                    double s = src[(y0 * w + x0) * c + ch] + src[(y0 * w + x0 + 1) * c + ch] +
                               src[((y0 + 1) * w + x0) * c + ch] +
                               src[((y0 + 1) * w + x0 + 1) * c + ch];
                    dst[(y * ow + x) * c + ch] = 0.25 * s;
                }
        }
    } else {
        const std::size_t oh = h * 2, ow = w * 2;
        out = t.rank() == 3 ? Tensor({oh, ow, c}) : Tensor({oh, ow});
        const double* src = t.data();
        double* dst = out.data();
#pragma omp parallel for schedule(static) if (parallel && oh * ow * c > 16384)
        for (long long yy = 0; yy < static_cast<long long>(oh); ++yy) {
            const std::size_t y = static_cast<std::size_t>(yy);
            for (std::size_t x = 0; x < ow; ++x)
                for (std::size_t ch = 0; ch < c; ++ch)
                    dst[(y * ow + x) * c + ch] = src[((y / 2) * w + (x / 2)) * c + ch];
        }
    }
    return out;
}

} // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) { return detail::matmul_impl(a, b, true); }
Tensor elementwise(const Tensor& t, ScalarMap fn) { return detail::elementwise_impl(t, fn, true); }
Tensor resample2x(const Tensor& t, ResampleDir dir) { return detail::resample2x_impl(t, dir, true); }

namespace serial {
Tensor matmul(const Tensor& a, const Tensor& b) { return detail::matmul_impl(a, b, false); }
Tensor elementwise(const Tensor& t, ScalarMap fn) { return detail::elementwise_impl(t, fn, false); }
Tensor resample2x(const Tensor& t, ResampleDir dir) { return detail::resample2x_impl(t, dir, false); }
} // namespace serial

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    if (a.rank() != b.rank())
        throw std::invalid_argument("shape error: concat rank mismatch");
    if (axis >= a.rank()) throw std::invalid_argument("shape error: concat axis out of range");
    for (std::size_t d = 0; d < a.rank(); ++d)
        if (d != axis && a.extent(d) != b.extent(d))
            throw std::invalid_argument("shape error: concat extents disagree off-axis: " +
                                        a.shape_str() + " vs " + b.shape_str());

    std::vector<std::size_t> out_shape = a.shape();
    out_shape[axis] += b.extent(axis);
    Tensor out(out_shape);

    // outer = product of extents before axis, inner = product after
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.extent(d);

    const std::size_t a_span = a.extent(axis) * inner;
    const std::size_t b_span = b.extent(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a.data() + o * a_span, a_span, out.data() + o * (a_span + b_span));
        std::copy_n(b.data() + o * b_span, b_span, out.data() + o * (a_span + b_span) + a_span);
    }
    return out;
}

Tensor slice(const Tensor& t, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= t.rank()) throw std::invalid_argument("shape error: slice axis out of range");
    if (start + len > t.extent(axis))
        throw std::invalid_argument("shape error: slice range exceeds extent");
    std::vector<std::size_t> out_shape = t.shape();
    out_shape[axis] = len;
    Tensor out(out_shape);

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= t.extent(d);
    for (std::size_t d = axis + 1; d < t.rank(); ++d) inner *= t.extent(d);

    const std::size_t src_span = t.extent(axis) * inner;
    const std::size_t dst_span = len * inner;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(t.data() + o * src_span + start * inner, dst_span,
                    out.data() + o * dst_span);
    return out;
}

Tensor transpose(const Tensor& t) {
    if (t.rank() != 2) throw std::invalid_argument("shape error: transpose expects rank-2");
    const std::size_t m = t.extent(0), n = t.extent(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = t.at(i, j);
    return out;
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string("shape error: ") + op + " on " + a.shape_str() +
                                    " vs " + b.shape_str());
}
} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor scale(const Tensor& t, double s) {
    Tensor out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] * s;
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

} // namespace klp
