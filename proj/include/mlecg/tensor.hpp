#pragma once

#include <cassert>
#include <cstddef>
#include <string>
#include <vector>

#include "mlecg/errors.hpp"

namespace mlecg::num {

// Dense row-major f64 tensor. Plain value type: copies copy the data.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<long long>(data.size()) != numel_of(shape))
            throw DimensionError("tensor data size does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }

    static long long numel_of(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d <= 0) throw DimensionError("tensor dimensions must be positive");
            n *= d;
        }
        return n;
    }

    int ndim() const { return static_cast<int>(shape.size()); }
    long long numel() const { return static_cast<long long>(data.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at2(int i, int j) {
        assert(ndim() == 2);
        return data[static_cast<std::size_t>(i) * dim(1) + j];
    }
    double at2(int i, int j) const { return const_cast<Tensor*>(this)->at2(i, j); }

    double& at3(int i, int j, int k) {
        assert(ndim() == 3);
        return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double at3(int i, int j, int k) const { return const_cast<Tensor*>(this)->at3(i, j, k); }

    Tensor& with_grad() {
        requires_grad = true;
        return *this;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace mlecg::num
