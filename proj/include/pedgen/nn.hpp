#pragma once

// Parameter storage, initialization, layer helpers and Adam. Parameters are
// created lazily on first use; each one draws from an RNG substream derived
// from the store seed and the parameter name, so adding or reordering layers
// never perturbs the init of unrelated parameters.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pedgen/autodiff.hpp"
#include "pedgen/common.hpp"
#include "pedgen/tensor.hpp"

namespace pedgen::nn {

using ad::Var;

struct Init {
    enum Kind { kZeros, kOnes, kKaimingUniform, kNormal } kind = kZeros;
    double arg = 0.0;  // fan_in for kaiming, stddev for normal

    static Init zeros() { return {kZeros, 0.0}; }
    static Init ones() { return {kOnes, 0.0}; }
    static Init kaiming(int64_t fan_in) { return {kKaimingUniform, double(fan_in)}; }
    static Init normal(double stddev) { return {kNormal, stddev}; }
};

class ParamStore {
public:
    explicit ParamStore(uint64_t seed) : seed_(seed) {}

    Var get(const std::string& name, const std::vector<int64_t>& shape, const Init& init) {
        auto it = params_.find(name);
        if (it != params_.end()) {
            if (it->second->val.shape != shape)
                throw InvalidState("parameter shape changed: " + name);
            return it->second;
        }
        Tensor t(shape);
        Rng rng(fnv1a64_mix(seed_, name));
        switch (init.kind) {
            case Init::kZeros:
                break;
            case Init::kOnes:
                t.fill(1.0);
                break;
            case Init::kKaimingUniform: {
                double bound = std::sqrt(6.0 / std::max(1.0, init.arg));
                for (double& v : t.data) v = rng.uniform(-bound, bound);
                break;
            }
            case Init::kNormal:
                for (double& v : t.data) v = rng.normal() * init.arg;
                break;
        }
        Var p = ad::leaf(std::move(t), true);
        params_.emplace(name, p);
        return p;
    }

    bool has(const std::string& name) const { return params_.count(name) > 0; }

    Var at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw InvalidState("unknown parameter: " + name);
        return it->second;
    }

    const std::map<std::string, Var>& all() const { return params_; }

    void zero_grads() {
        for (auto& [name, p] : params_) {
            (void)name;
            p->ensure_grad();
            p->grad.fill(0.0);
        }
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, p] : params_) {
            (void)name;
            n += p->val.numel();
        }
        return n;
    }

    // Overwrite an existing (or create a fixed) parameter; used by checkpoint load.
    void assign(const std::string& name, Tensor value) {
        auto it = params_.find(name);
        if (it != params_.end()) {
            if (it->second->val.shape != value.shape)
                throw SchemaError("checkpoint tensor shape mismatch for " + name + ": " +
                                  it->second->val.shape_str() + " vs " + value.shape_str());
            it->second->val = std::move(value);
        } else {
            params_.emplace(name, ad::leaf(std::move(value), true));
        }
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::map<std::string, Var> params_;  // ordered: deterministic serialization
};

// --- layer helpers -----------------------------------------------------------

inline Var linear(ParamStore& ps, const std::string& name, const Var& x, int64_t in, int64_t out,
                  bool bias = true, bool zero_init = false) {
    Var w = ps.get(name + ".weight", {out, in},
                   zero_init ? Init::zeros() : Init::kaiming(in));
    Var b = bias ? ps.get(name + ".bias", {out}, Init::zeros()) : nullptr;
    return ad::linear(x, w, b);
}

inline Var conv2d(ParamStore& ps, const std::string& name, const Var& x, int64_t in_c,
                  int64_t out_c, int k, int stride, int pad, bool zero_init = false) {
    Var w = ps.get(name + ".weight", {out_c, in_c, k, k},
                   zero_init ? Init::zeros() : Init::kaiming(in_c * k * k));
    Var b = ps.get(name + ".bias", {out_c}, Init::zeros());
    return ad::conv2d(x, w, b, stride, pad);
}

inline Var group_norm(ParamStore& ps, const std::string& name, const Var& x, int64_t channels,
                      int groups) {
    Var g = ps.get(name + ".gamma", {channels}, Init::ones());
    Var b = ps.get(name + ".beta", {channels}, Init::zeros());
    return ad::group_norm(x, g, b, groups);
}

inline Var layer_norm(ParamStore& ps, const std::string& name, const Var& x, int64_t dim) {
    Var g = ps.get(name + ".gamma", {dim}, Init::ones());
    Var b = ps.get(name + ".beta", {dim}, Init::zeros());
    return ad::layer_norm(x, g, b);
}

// --- optimizer -----------------------------------------------------------------

class Adam {
public:
    Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }

    void step(ParamStore& ps) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, double(t_));
        double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (auto& [name, p] : ps.all()) {
            if (p->grad.shape != p->val.shape) continue;  // never touched by backward
            Tensor& m = m_[name];
            Tensor& v = v_[name];
            if (m.shape != p->val.shape) m = Tensor::zeros(p->val.shape);
            if (v.shape != p->val.shape) v = Tensor::zeros(p->val.shape);
            for (int64_t i = 0; i < p->val.numel(); ++i) {
                double g = p->grad[i];
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                double mh = m[i] / bc1;
                double vh = v[i] / bc2;
                p->val[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

    std::map<std::string, Tensor>& moment1() { return m_; }
    std::map<std::string, Tensor>& moment2() { return v_; }

private:
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace pedgen::nn
