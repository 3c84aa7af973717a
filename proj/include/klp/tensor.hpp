#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "klp/rng.hpp"

namespace klp {

/// Dense row-major tensor of 64-bit floats. Immutable by convention once
/// built: the free operations below return fresh tensors.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    /// i.i.d. N(0, scale^2) entries drawn in row-major order.
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // rank-2 / rank-3 element access
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

enum class ScalarMap { Tanh, Sigmoid, Relu, Exp, Log };

enum class ResampleDir { Up, Down };

/// Standard matrix product with fixed left-to-right accumulation per output
/// element; rows are computed independently so the result is identical
/// whether or not the row loop runs in parallel.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor elementwise(const Tensor& t, ScalarMap fn);

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

/// Contiguous sub-tensor along `axis`: indices [start, start+len).
Tensor slice(const Tensor& t, std::size_t axis, std::size_t start, std::size_t len);

/// Up: nearest-neighbor duplication (H,W doubled). Down: 2x2 mean pooling
/// (H,W halved; extents must be even). Accepts rank-2 {H,W} and rank-3 {H,W,C}.
Tensor resample2x(const Tensor& t, ResampleDir dir);

Tensor transpose(const Tensor& t);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double s);
Tensor hadamard(const Tensor& a, const Tensor& b);

// Serial reference kernels, kept alongside the OpenMP primaries for
// equivalence testing and benchmarking. Results are bit-identical.
namespace serial {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor elementwise(const Tensor& t, ScalarMap fn);
Tensor resample2x(const Tensor& t, ResampleDir dir);
} // namespace serial

} // namespace klp
