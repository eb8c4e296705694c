#pragma once

// Dense row-major double tensor. All model math runs in double precision;
// checkpoints downcast to float32 at the serialization boundary only.

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pedgen/common.hpp"

namespace pedgen {

struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, double fill)
        : shape(std::move(s)), data(numel_of(shape), fill) {}

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw InvalidArgument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double v) { return Tensor(std::move(s), v); }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from(std::vector<int64_t> s, std::vector<double> d) {
        Tensor t;
        t.shape = std::move(s);
        if (numel_of(t.shape) != int64_t(d.size()))
            throw InvalidArgument("tensor: data size does not match shape");
        t.data = std::move(d);
        return t;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }
    int64_t dim(int i) const { return shape[size_t(i)]; }

    double& operator[](int64_t i) { return data[size_t(i)]; }
    double operator[](int64_t i) const { return data[size_t(i)]; }

    double& at(int64_t i, int64_t j) { return data[size_t(i * shape[1] + j)]; }
    double at(int64_t i, int64_t j) const { return data[size_t(i * shape[1] + j)]; }

    double& at(int64_t i, int64_t j, int64_t k) {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const {
        return data[size_t((i * shape[1] + j) * shape[2] + k)];
    }

    double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int64_t> s) const {
        if (numel_of(s) != numel())
            throw InvalidArgument("reshape: element count mismatch " + shape_str() + " -> " +
                                  shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const { return shape_str(shape); }

    static std::string shape_str(const std::vector<int64_t>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }
};

inline Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * stddev;
    return t;
}

inline Tensor rand_uniform(std::vector<int64_t> shape, Rng& rng, double lo = 0.0,
                           double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace pedgen
