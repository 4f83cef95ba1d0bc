#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mext/errors.hpp"
#include "mext/rng.hpp"

namespace mext {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. The scalar type is a template parameter: training
// runs in float, gradient checking instantiates the same code in double.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(size_t(numel_of(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (int64_t(data.size()) != numel_of(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return int64_t(data.size()); }
    int dims() const { return int(shape.size()); }
    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T& at(int64_t r, int64_t c) { return data[size_t(r * cols() + c)]; }
    const T& at(int64_t r, int64_t c) const { return data[size_t(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }
};

template <typename T>
Tensor<T> zeros(Shape s) {
    return Tensor<T>(std::move(s));
}

template <typename T>
Tensor<T> full(Shape s, T v) {
    Tensor<T> t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

template <typename T>
Tensor<T> scalar_tensor(T v) {
    Tensor<T> t(Shape{1});
    t.data[0] = v;
    return t;
}

template <typename T>
Tensor<T> randn(Shape s, Rng& rng, double sigma = 1.0) {
    Tensor<T> t(std::move(s));
    for (T& v : t.data) v = T(rng.normal() * sigma);
    return t;
}

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (sizeof(T) == 4)
        return "f32";
    else
        return "f64";
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && a.data == b.data;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
    return m;
}

}  // namespace mext
