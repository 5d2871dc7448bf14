#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "segface/common.hpp"

namespace segface {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError(cat("non-positive extent ", d, " in shape"));
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense n-dimensional array, row-major. The scalar type selects the working
// precision: float for training, double for gradient checking.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), T(0)) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
            throw ShapeError(cat("data length ", data_.size(), " does not match shape ", shape_str(shape_)));
        }
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError(cat("cannot reshape ", shape_str(shape_), " to ", shape_str(shape)));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    void add_(const Tensor& other) {
        if (!same_shape(other)) {
            throw ShapeError(cat("add_: shape ", shape_str(shape_), " vs ", shape_str(other.shape_)));
        }
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw ShapeError(cat(what, ": shape ", shape_str(a), " vs ", shape_str(b)));
}

}  // namespace segface
