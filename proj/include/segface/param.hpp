#pragma once

#include <map>
#include <string>
#include <utility>

#include "segface/common.hpp"
#include "segface/rng.hpp"
#include "segface/tensor.hpp"

namespace segface {

// Named tensor with a paired gradient buffer; the unit of optimization.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape())) {}
};

// Ordered map of parameters. std::map keeps iteration lexicographic by name,
// which fixes checkpoint layout and optimizer traversal order.
template <typename T>
class ParamSet {
public:
    Parameter<T>& add(const std::string& name, Tensor<T> init) {
        auto [it, inserted] = params_.emplace(name, Parameter<T>(name, std::move(init)));
        if (!inserted) throw ValidationError(cat("duplicate parameter name: ", name));
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Parameter<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValidationError(cat("unknown parameter: ", name));
        return it->second;
    }

    const Parameter<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ValidationError(cat("unknown parameter: ", name));
        return it->second;
    }

    size_t size() const { return params_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [k, p] : params_) n += p.value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [k, p] : params_) p.grad.fill(T(0));
    }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& [k, p] : params_) out.add(k, p.value.template cast<U>());
        return out;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Parameter<T>> params_;
};

// He-style fan-in scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> he_uniform(Shape shape, int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    return t;
}

}  // namespace segface
