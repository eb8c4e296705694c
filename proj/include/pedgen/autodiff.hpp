#pragma once

// Reverse-mode automatic differentiation over pedgen::Tensor. Eager ops build
// a tape of shared nodes; backward() walks it once in reverse topological
// order. Double precision throughout so finite-difference checks at 1e-4
// relative error are meaningful.

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "pedgen/tensor.hpp"

namespace pedgen::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> back;

    void ensure_grad() {
        if (grad.shape != val.shape) grad = Tensor::zeros(val.shape);
    }
};

// --- grad mode -------------------------------------------------------------

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGrad() { grad_mode() = prev; }
};

// --- node construction -----------------------------------------------------

inline Var leaf(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline Var constant(Tensor v) { return leaf(std::move(v), false); }

inline Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (grad_mode()) {
        bool any = false;
        for (const auto& p : parents) any |= p->requires_grad;
        if (any) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->back = std::move(back);
        }
    }
    return n;
}

// --- backward --------------------------------------------------------------

inline void backward(const Var& loss) {
    if (loss->val.numel() != 1) throw InvalidArgument("backward: loss must be scalar");
    // iterative post-order DFS over grad-requiring subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.get(), 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad.data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back) n->back(*n);
    }
}

// --- elementwise -----------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw InvalidArgument(std::string(op) + ": shape mismatch " + a->val.shape_str() + " vs " +
                              b->val.shape_str());
}

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *self.parents[size_t(k)];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) p.grad[i] += self.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                pa.grad[i] += self.grad[i] * pb.val[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                pb.grad[i] += self.grad[i] * pa.val[i];
        }
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out = a->val;
    for (double& v : out.data) v *= c;
    return make(std::move(out), {a}, [c](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) p.grad[i] += c * self.grad[i];
    });
}

inline Var add_scalar(const Var& a, double c) {
    Tensor out = a->val;
    for (double& v : out.data) v += c;
    return make(std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) p.grad[i] += self.grad[i];
    });
}

// --- activations -----------------------------------------------------------

inline Var silu(const Var& x) {
    Tensor out = x->val;
    auto sig = std::make_shared<Tensor>(x->val);
    for (int64_t i = 0; i < out.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x->val[i]));
        sig->data[size_t(i)] = s;
        out[i] = x->val[i] * s;
    }
    return make(std::move(out), {x}, [sig](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            double s = (*sig)[i];
            double xv = p.val[i];
            p.grad[i] += self.grad[i] * s * (1.0 + xv * (1.0 - s));
        }
    });
}

inline Var relu(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.data) v = v > 0 ? v : 0.0;
    return make(std::move(out), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (p.val[i] > 0) p.grad[i] += self.grad[i];
    });
}

inline Var sigmoid(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    auto y = std::make_shared<Tensor>(out);
    return make(std::move(out), {x}, [y](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            double s = (*y)[i];
            p.grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

// --- shape ops ---------------------------------------------------------------

inline Var reshape(const Var& x, std::vector<int64_t> shape) {
    Tensor out = x->val.reshaped(std::move(shape));
    return make(std::move(out), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) p.grad[i] += self.grad[i];
    });
}

namespace detail {
inline std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = int(shape.size()) - 2; i >= 0; --i) st[size_t(i)] = st[size_t(i) + 1] * shape[size_t(i) + 1];
    return st;
}

// out[idx] = in[perm applied]; returns mapping out_flat -> in_flat
inline void permute_copy(const Tensor& in, const std::vector<int>& perm, Tensor& out,
                         std::vector<int64_t>* map_out) {
    const auto& ishape = in.shape;
    std::vector<int64_t> oshape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) oshape[i] = ishape[size_t(perm[i])];
    out = Tensor(oshape);
    auto istr = strides_of(ishape);
    auto ostr = strides_of(oshape);
    int nd = int(perm.size());
    std::vector<int64_t> idx(size_t(nd), 0);
    int64_t n = out.numel();
    if (map_out) map_out->resize(size_t(n));
    for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o;
        int64_t iflat = 0;
        for (int d = 0; d < nd; ++d) {
            int64_t c = rem / ostr[size_t(d)];
            rem %= ostr[size_t(d)];
            iflat += c * istr[size_t(perm[size_t(d)])];
        }
        out[o] = in[iflat];
        if (map_out) (*map_out)[size_t(o)] = iflat;
    }
}
}  // namespace detail

inline Var permute(const Var& x, const std::vector<int>& perm) {
    if (perm.size() != x->val.shape.size()) throw InvalidArgument("permute: rank mismatch");
    Tensor out;
    auto map = std::make_shared<std::vector<int64_t>>();
    detail::permute_copy(x->val, perm, out, map.get());
    return make(std::move(out), {x}, [map](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t o = 0; o < self.grad.numel(); ++o) p.grad[(*map)[size_t(o)]] += self.grad[o];
    });
}

inline Var concat(const std::vector<Var>& parts, int dim) {
    if (parts.empty()) throw InvalidArgument("concat: no inputs");
    auto shape = parts[0]->val.shape;
    int nd = int(shape.size());
    if (dim < 0 || dim >= nd) throw InvalidArgument("concat: bad dim");
    int64_t total = 0;
    for (const auto& p : parts) {
        if (int(p->val.shape.size()) != nd) throw InvalidArgument("concat: rank mismatch");
        for (int d = 0; d < nd; ++d)
            if (d != dim && p->val.shape[size_t(d)] != shape[size_t(d)])
                throw InvalidArgument("concat: shape mismatch");
        total += p->val.shape[size_t(dim)];
    }
    auto oshape = shape;
    oshape[size_t(dim)] = total;
    Tensor out(oshape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < dim; ++d) outer *= shape[size_t(d)];
    for (int d = dim + 1; d < nd; ++d) inner *= shape[size_t(d)];
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t len = p->val.shape[size_t(dim)];
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(p->val.data.begin() + o * len * inner, len * inner,
                        out.data.begin() + (o * total + off) * inner);
        off += len;
    }
    std::vector<Var> parents = parts;
    return make(std::move(out), std::move(parents), [dim, outer, inner, total](Node& self) {
        int64_t off = 0;
        for (auto& pp : self.parents) {
            Node& p = *pp;
            int64_t len = p.val.shape[size_t(dim)];
            if (p.requires_grad) {
                p.ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const double* g = self.grad.data.data() + (o * total + off) * inner;
                    double* dst = p.grad.data.data() + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                }
            }
            off += len;
        }
    });
}

inline Var slice(const Var& x, int dim, int64_t start, int64_t len) {
    const auto& shape = x->val.shape;
    int nd = int(shape.size());
    if (dim < 0 || dim >= nd) throw InvalidArgument("slice: bad dim");
    if (start < 0 || start + len > shape[size_t(dim)]) throw InvalidArgument("slice: out of range");
    auto oshape = shape;
    oshape[size_t(dim)] = len;
    Tensor out(oshape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < dim; ++d) outer *= shape[size_t(d)];
    for (int d = dim + 1; d < nd; ++d) inner *= shape[size_t(d)];
    int64_t full = shape[size_t(dim)];
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(x->val.data.begin() + (o * full + start) * inner, len * inner,
                    out.data.begin() + o * len * inner);
    return make(std::move(out), {x}, [dim, start, len, outer, inner, full](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data.data() + o * len * inner;
            double* dst = p.grad.data.data() + (o * full + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
        }
    });
}

// --- matmul / linear ---------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.shape[1] != b->val.shape[0])
        throw InvalidArgument("matmul: incompatible shapes " + a->val.shape_str() + " x " +
                              b->val.shape_str());
    int64_t m = a->val.shape[0], k = a->val.shape[1], n = b->val.shape[1];
    Tensor out({m, n});
    CMapMat A(a->val.data.data(), m, k), B(b->val.data.data(), k, n);
    MapMat(out.data.data(), m, n).noalias() = A * B;
    return make(std::move(out), {a, b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        CMapMat G(self.grad.data.data(), m, n);
        if (pa.requires_grad) {
            pa.ensure_grad();
            CMapMat B(pb.val.data.data(), k, n);
            MapMat(pa.grad.data.data(), m, k).noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            CMapMat A(pa.val.data.data(), m, k);
            MapMat(pb.grad.data.data(), k, n).noalias() += A.transpose() * G;
        }
    });
}

// x:[T,in] W:[out,in] b:[out] -> [T,out]
inline Var linear(const Var& x, const Var& w, const Var& b) {
    if (x->val.ndim() != 2 || w->val.ndim() != 2 || x->val.shape[1] != w->val.shape[1])
        throw InvalidArgument("linear: incompatible shapes");
    int64_t t = x->val.shape[0], in = x->val.shape[1], out_dim = w->val.shape[0];
    Tensor out({t, out_dim});
    CMapMat X(x->val.data.data(), t, in), W(w->val.data.data(), out_dim, in);
    MapMat O(out.data.data(), t, out_dim);
    O.noalias() = X * W.transpose();
    if (b) {
        if (b->val.numel() != out_dim) throw InvalidArgument("linear: bias size");
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j < out_dim; ++j) out.at(i, j) += b->val[j];
    }
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    return make(std::move(out), std::move(parents), [t, in, out_dim](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        CMapMat G(self.grad.data.data(), t, out_dim);
        if (px.requires_grad) {
            px.ensure_grad();
            CMapMat W(pw.val.data.data(), out_dim, in);
            MapMat(px.grad.data.data(), t, in).noalias() += G * W;
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            CMapMat X(px.val.data.data(), t, in);
            MapMat(pw.grad.data.data(), out_dim, in).noalias() += G.transpose() * X;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Node& pb = *self.parents[2];
            pb.ensure_grad();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < out_dim; ++j) pb.grad[j] += self.grad[i * out_dim + j];
        }
    });
}

// --- conv2d ------------------------------------------------------------------

namespace detail {
inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int64_t oh, int64_t ow,
                   Tensor& cols) {
    int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    cols = Tensor({c * kh * kw, oh * ow});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int64_t row = (ci * kh + ki) * kw + kj;
                double* dst = cols.data.data() + row * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ki - pad;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kj - pad;
                        dst[oy * ow + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at(ci, iy, ix) : 0.0;
                    }
                }
            }
}

inline void col2im_add(const Tensor& cols, int kh, int kw, int stride, int pad, int64_t oh,
                       int64_t ow, Tensor& x) {
    int64_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    for (int64_t ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int64_t row = (ci * kh + ki) * kw + kj;
                const double* src = cols.data.data() + row * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        int64_t ix = ox * stride + kj - pad;
                        if (ix < 0 || ix >= w) continue;
                        x.at(ci, iy, ix) += src[oy * ow + ox];
                    }
                }
            }
}
}  // namespace detail

// x:[C,H,W] w:[O,C,kh,kw] b:[O] -> [O,H',W']
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    if (x->val.ndim() != 3 || w->val.ndim() != 4 || x->val.shape[0] != w->val.shape[1])
        throw InvalidArgument("conv2d: incompatible shapes " + x->val.shape_str() + " w " +
                              w->val.shape_str());
    int64_t o = w->val.shape[0];
    int kh = int(w->val.shape[2]), kw = int(w->val.shape[3]);
    int64_t h = x->val.shape[1], wv = x->val.shape[2];
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (wv + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw InvalidArgument("conv2d: output would be empty");
    auto cols = std::make_shared<Tensor>();
    detail::im2col(x->val, kh, kw, stride, pad, oh, ow, *cols);
    Tensor out({o, oh, ow});
    int64_t ck = x->val.shape[0] * kh * kw;
    CMapMat W(w->val.data.data(), o, ck), C(cols->data.data(), ck, oh * ow);
    MapMat O(out.data.data(), o, oh * ow);
    O.noalias() = W * C;
    if (b) {
        for (int64_t oi = 0; oi < o; ++oi) {
            double bv = b->val[oi];
            double* row = out.data.data() + oi * oh * ow;
            for (int64_t i = 0; i < oh * ow; ++i) row[i] += bv;
        }
    }
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    return make(std::move(out), std::move(parents),
                [cols, kh, kw, stride, pad, oh, ow, o, ck](Node& self) {
                    Node& px = *self.parents[0];
                    Node& pw = *self.parents[1];
                    CMapMat G(self.grad.data.data(), o, oh * ow);
                    if (pw.requires_grad) {
                        pw.ensure_grad();
                        CMapMat C(cols->data.data(), ck, oh * ow);
                        MapMat(pw.grad.data.data(), o, ck).noalias() += G * C.transpose();
                    }
                    if (px.requires_grad) {
                        px.ensure_grad();
                        Tensor dcols({ck, oh * ow});
                        CMapMat W(pw.val.data.data(), o, ck);
                        MapMat(dcols.data.data(), ck, oh * ow).noalias() = W.transpose() * G;
                        detail::col2im_add(dcols, kh, kw, stride, pad, oh, ow, px.grad);
                    }
                    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                        Node& pb = *self.parents[2];
                        pb.ensure_grad();
                        for (int64_t oi = 0; oi < o; ++oi) {
                            const double* row = self.grad.data.data() + oi * oh * ow;
                            double s = 0;
                            for (int64_t i = 0; i < oh * ow; ++i) s += row[i];
                            pb.grad[oi] += s;
                        }
                    }
                });
}

inline Var upsample_nearest2(const Var& x) {
    if (x->val.ndim() != 3) throw InvalidArgument("upsample: expected [C,H,W]");
    int64_t c = x->val.shape[0], h = x->val.shape[1], w = x->val.shape[2];
    Tensor out({c, 2 * h, 2 * w});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < 2 * h; ++y)
            for (int64_t xx = 0; xx < 2 * w; ++xx) out.at(ci, y, xx) = x->val.at(ci, y / 2, xx / 2);
    return make(std::move(out), {x}, [c, h, w](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t xx = 0; xx < 2 * w; ++xx)
                    p.grad.at(ci, y / 2, xx / 2) += self.grad.at(ci, y, xx);
    });
}

// --- normalization -----------------------------------------------------------

// x:[C,H,W], per-group statistics over (C/G, H, W); per-channel affine
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      double eps = 1e-5) {
    if (x->val.ndim() != 3) throw InvalidArgument("group_norm: expected [C,H,W]");
    int64_t c = x->val.shape[0], h = x->val.shape[1], w = x->val.shape[2];
    if (c % groups != 0) throw InvalidArgument("group_norm: channels not divisible by groups");
    int64_t cg = c / groups, sp = h * w, m = cg * sp;
    auto xhat = std::make_shared<Tensor>(x->val.shape);
    auto invstd = std::make_shared<std::vector<double>>(size_t(groups));
    Tensor out(x->val.shape);
    for (int g = 0; g < groups; ++g) {
        const double* xs = x->val.data.data() + g * m;
        double mean = 0;
        for (int64_t i = 0; i < m; ++i) mean += xs[i];
        mean /= double(m);
        double var = 0;
        for (int64_t i = 0; i < m; ++i) {
            double d = xs[i] - mean;
            var += d * d;
        }
        var /= double(m);
        double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[size_t(g)] = is;
        double* xh = xhat->data.data() + g * m;
        double* os = out.data.data() + g * m;
        for (int64_t i = 0; i < m; ++i) {
            xh[i] = (xs[i] - mean) * is;
            int64_t ch = g * cg + i / sp;
            os[i] = xh[i] * gamma->val[ch] + beta->val[ch];
        }
    }
    return make(std::move(out), {x, gamma, beta}, [xhat, invstd, groups, cg, sp, m](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (int g = 0; g < groups; ++g) {
            const double* xh = xhat->data.data() + g * m;
            const double* gr = self.grad.data.data() + g * m;
            // channel affine grads
            for (int64_t i = 0; i < m; ++i) {
                int64_t ch = g * cg + i / sp;
                if (pg.requires_grad) pg.grad[ch] += gr[i] * xh[i];
                if (pb.requires_grad) pb.grad[ch] += gr[i];
            }
            if (!px.requires_grad) continue;
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int64_t i = 0; i < m; ++i) {
                int64_t ch = g * cg + i / sp;
                double dxh = gr[i] * pg.val[ch];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[i];
            }
            double is = (*invstd)[size_t(g)];
            double* dx = px.grad.data.data() + g * m;
            for (int64_t i = 0; i < m; ++i) {
                int64_t ch = g * cg + i / sp;
                double dxh = gr[i] * pg.val[ch];
                dx[i] += is / double(m) * (double(m) * dxh - sum_dxhat - xh[i] * sum_dxhat_xhat);
            }
        }
    });
}

// x:[T,C], per-row statistics; per-column affine
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    if (x->val.ndim() != 2) throw InvalidArgument("layer_norm: expected [T,C]");
    int64_t t = x->val.shape[0], c = x->val.shape[1];
    auto xhat = std::make_shared<Tensor>(x->val.shape);
    auto invstd = std::make_shared<std::vector<double>>(size_t(t));
    Tensor out(x->val.shape);
    for (int64_t r = 0; r < t; ++r) {
        const double* xs = x->val.data.data() + r * c;
        double mean = 0;
        for (int64_t i = 0; i < c; ++i) mean += xs[i];
        mean /= double(c);
        double var = 0;
        for (int64_t i = 0; i < c; ++i) {
            double d = xs[i] - mean;
            var += d * d;
        }
        var /= double(c);
        double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[size_t(r)] = is;
        double* xh = xhat->data.data() + r * c;
        double* os = out.data.data() + r * c;
        for (int64_t i = 0; i < c; ++i) {
            xh[i] = (xs[i] - mean) * is;
            os[i] = xh[i] * gamma->val[i] + beta->val[i];
        }
    }
    return make(std::move(out), {x, gamma, beta}, [xhat, invstd, t, c](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (int64_t r = 0; r < t; ++r) {
            const double* xh = xhat->data.data() + r * c;
            const double* gr = self.grad.data.data() + r * c;
            for (int64_t i = 0; i < c; ++i) {
                if (pg.requires_grad) pg.grad[i] += gr[i] * xh[i];
                if (pb.requires_grad) pb.grad[i] += gr[i];
            }
            if (!px.requires_grad) continue;
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int64_t i = 0; i < c; ++i) {
                double dxh = gr[i] * pg.val[i];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[i];
            }
            double is = (*invstd)[size_t(r)];
            double* dx = px.grad.data.data() + r * c;
            for (int64_t i = 0; i < c; ++i) {
                double dxh = gr[i] * pg.val[i];
                dx[i] += is / double(c) * (double(c) * dxh - sum_dxhat - xh[i] * sum_dxhat_xhat);
            }
        }
    });
}

// --- softmax -----------------------------------------------------------------

// Row-wise softmax of x:[T,S]; optional additive mask [S] applied to every row
// before normalization (use large negatives to exclude positions).
inline Var softmax_rows(const Var& x, const Tensor* add_mask = nullptr) {
    if (x->val.ndim() != 2) throw InvalidArgument("softmax_rows: expected [T,S]");
    int64_t t = x->val.shape[0], s = x->val.shape[1];
    if (add_mask && add_mask->numel() != s) throw InvalidArgument("softmax_rows: mask size");
    Tensor out(x->val.shape);
    for (int64_t r = 0; r < t; ++r) {
        const double* xs = x->val.data.data() + r * s;
        double* os = out.data.data() + r * s;
        double mx = -1e300;
        for (int64_t i = 0; i < s; ++i) {
            double v = xs[i] + (add_mask ? (*add_mask)[i] : 0.0);
            os[i] = v;
            mx = std::max(mx, v);
        }
        double sum = 0;
        for (int64_t i = 0; i < s; ++i) {
            os[i] = std::exp(os[i] - mx);
            sum += os[i];
        }
        for (int64_t i = 0; i < s; ++i) os[i] /= sum;
    }
    auto y = std::make_shared<Tensor>(out);
    return make(std::move(out), {x}, [y, t, s](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t r = 0; r < t; ++r) {
            const double* ys = y->data.data() + r * s;
            const double* gs = self.grad.data.data() + r * s;
            double dot = 0;
            for (int64_t i = 0; i < s; ++i) dot += gs[i] * ys[i];
            double* dx = p.grad.data.data() + r * s;
            for (int64_t i = 0; i < s; ++i) dx[i] += (gs[i] - dot) * ys[i];
        }
    });
}

// --- reductions / losses -------------------------------------------------------

inline Var mean_all(const Var& x) {
    double s = 0;
    for (double v : x->val.data) s += v;
    int64_t n = x->val.numel();
    return make(Tensor::scalar(s / double(n)), {x}, [n](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        double g = self.grad[0] / double(n);
        for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += g;
    });
}

inline Var sum_all(const Var& x) {
    double s = 0;
    for (double v : x->val.data) s += v;
    return make(Tensor::scalar(s), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        double g = self.grad[0];
        for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += g;
    });
}

inline Var mse(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse");
    int64_t n = a->val.numel();
    double s = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = a->val[i] - b->val[i];
        s += d * d;
    }
    return make(Tensor::scalar(s / double(n)), {a, b}, [n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        double g = 2.0 * self.grad[0] / double(n);
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            double d = pa.val[i] - pb.val[i];
            if (pa.requires_grad) pa.grad[i] += g * d;
            if (pb.requires_grad) pb.grad[i] -= g * d;
        }
    });
}

// logits:[B,K], mean negative log-likelihood
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    if (logits->val.ndim() != 2 || int64_t(labels.size()) != logits->val.shape[0])
        throw InvalidArgument("cross_entropy: shape mismatch");
    int64_t bsz = logits->val.shape[0], k = logits->val.shape[1];
    auto probs = std::make_shared<Tensor>(logits->val.shape);
    double loss = 0;
    for (int64_t b = 0; b < bsz; ++b) {
        const double* xs = logits->val.data.data() + b * k;
        double* ps = probs->data.data() + b * k;
        double mx = *std::max_element(xs, xs + k);
        double sum = 0;
        for (int64_t i = 0; i < k; ++i) {
            ps[i] = std::exp(xs[i] - mx);
            sum += ps[i];
        }
        for (int64_t i = 0; i < k; ++i) ps[i] /= sum;
        loss -= std::log(std::max(ps[labels[size_t(b)]], 1e-300));
    }
    auto lab = std::make_shared<std::vector<int>>(labels);
    return make(Tensor::scalar(loss / double(bsz)), {logits}, [probs, lab, bsz, k](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        double g = self.grad[0] / double(bsz);
        for (int64_t b = 0; b < bsz; ++b) {
            const double* ps = probs->data.data() + b * k;
            double* dx = p.grad.data.data() + b * k;
            for (int64_t i = 0; i < k; ++i)
                dx[i] += g * (ps[i] - (i == (*lab)[size_t(b)] ? 1.0 : 0.0));
        }
    });
}

// --- broadcast helpers --------------------------------------------------------

// x:[C,H,W] + b:[C]
inline Var add_channel_bias(const Var& x, const Var& b) {
    if (x->val.ndim() != 3 || b->val.numel() != x->val.shape[0])
        throw InvalidArgument("add_channel_bias: shapes");
    int64_t c = x->val.shape[0], sp = x->val.shape[1] * x->val.shape[2];
    Tensor out = x->val;
    for (int64_t ci = 0; ci < c; ++ci) {
        double bv = b->val[ci];
        double* row = out.data.data() + ci * sp;
        for (int64_t i = 0; i < sp; ++i) row[i] += bv;
    }
    return make(std::move(out), {x, b}, [c, sp](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) px.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t ci = 0; ci < c; ++ci) {
                const double* row = self.grad.data.data() + ci * sp;
                double s = 0;
                for (int64_t i = 0; i < sp; ++i) s += row[i];
                pb.grad[ci] += s;
            }
        }
    });
}

// x:[N,C,H,W] (or [C,H,W]) scaled per channel by gate:[C]
inline Var scale_channels(const Var& x, const Var& gate) {
    int nd = x->val.ndim();
    if (nd != 3 && nd != 4) throw InvalidArgument("scale_channels: expected 3D or 4D");
    int64_t n = nd == 4 ? x->val.shape[0] : 1;
    int64_t c = x->val.shape[size_t(nd - 3)];
    int64_t sp = x->val.shape[size_t(nd - 2)] * x->val.shape[size_t(nd - 1)];
    if (gate->val.numel() != c) throw InvalidArgument("scale_channels: gate size");
    Tensor out = x->val;
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            double gv = gate->val[ci];
            double* row = out.data.data() + (ni * c + ci) * sp;
            for (int64_t i = 0; i < sp; ++i) row[i] *= gv;
        }
    return make(std::move(out), {x, gate}, [n, c, sp](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
                const double* g = self.grad.data.data() + (ni * c + ci) * sp;
                const double* xv = px.val.data.data() + (ni * c + ci) * sp;
                if (px.requires_grad) {
                    double gv = pg.val[ci];
                    double* dx = px.grad.data.data() + (ni * c + ci) * sp;
                    for (int64_t i = 0; i < sp; ++i) dx[i] += g[i] * gv;
                }
                if (pg.requires_grad) {
                    double s = 0;
                    for (int64_t i = 0; i < sp; ++i) s += g[i] * xv[i];
                    pg.grad[ci] += s;
                }
            }
    });
}

// --- masked reference pooling ---------------------------------------------------

namespace detail {
inline int64_t count_mask(const std::vector<uint8_t>& mask) {
    int64_t c = 0;
    for (uint8_t m : mask) c += m ? 1 : 0;
    return c;
}
}  // namespace detail

// x:[N,C,H,W], mask:[N] -> [C]; mean over unmasked slots and all spatial positions
inline Var masked_global_avg(const Var& x, const std::vector<uint8_t>& mask) {
    if (x->val.ndim() != 4 || int64_t(mask.size()) != x->val.shape[0])
        throw InvalidArgument("masked_global_avg: shapes");
    int64_t n = x->val.shape[0], c = x->val.shape[1], sp = x->val.shape[2] * x->val.shape[3];
    int64_t cnt = detail::count_mask(mask);
    if (cnt == 0) throw InvalidArgument("masked_global_avg: all-false mask");
    Tensor out({c});
    for (int64_t ni = 0; ni < n; ++ni) {
        if (!mask[size_t(ni)]) continue;
        for (int64_t ci = 0; ci < c; ++ci) {
            const double* row = x->val.data.data() + (ni * c + ci) * sp;
            double s = 0;
            for (int64_t i = 0; i < sp; ++i) s += row[i];
            out[ci] += s;
        }
    }
    double inv = 1.0 / double(cnt * sp);
    for (int64_t ci = 0; ci < c; ++ci) out[ci] *= inv;
    auto m = std::make_shared<std::vector<uint8_t>>(mask);
    return make(std::move(out), {x}, [m, n, c, sp, inv](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t ni = 0; ni < n; ++ni) {
            if (!(*m)[size_t(ni)]) continue;
            for (int64_t ci = 0; ci < c; ++ci) {
                double g = self.grad[ci] * inv;
                double* dx = p.grad.data.data() + (ni * c + ci) * sp;
                for (int64_t i = 0; i < sp; ++i) dx[i] += g;
            }
        }
    });
}

// x:[N,C,H,W], mask:[N] -> [C]; max over unmasked slots and spatial positions
inline Var masked_global_max(const Var& x, const std::vector<uint8_t>& mask) {
    if (x->val.ndim() != 4 || int64_t(mask.size()) != x->val.shape[0])
        throw InvalidArgument("masked_global_max: shapes");
    int64_t n = x->val.shape[0], c = x->val.shape[1], sp = x->val.shape[2] * x->val.shape[3];
    if (detail::count_mask(mask) == 0) throw InvalidArgument("masked_global_max: all-false mask");
    Tensor out({c});
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(c));
    for (int64_t ci = 0; ci < c; ++ci) {
        double best = -1e300;
        int64_t bi = -1;
        for (int64_t ni = 0; ni < n; ++ni) {
            if (!mask[size_t(ni)]) continue;
            const double* row = x->val.data.data() + (ni * c + ci) * sp;
            for (int64_t i = 0; i < sp; ++i)
                if (row[i] > best) {
                    best = row[i];
                    bi = (ni * c + ci) * sp + i;
                }
        }
        out[ci] = best;
        (*argmax)[size_t(ci)] = bi;
    }
    return make(std::move(out), {x}, [argmax, c](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t ci = 0; ci < c; ++ci) p.grad[(*argmax)[size_t(ci)]] += self.grad[ci];
    });
}

// x:[N,C,H,W], mask:[N] -> [C,H,W]; mean over unmasked reference slots
inline Var masked_mean_refs(const Var& x, const std::vector<uint8_t>& mask) {
    if (x->val.ndim() != 4 || int64_t(mask.size()) != x->val.shape[0])
        throw InvalidArgument("masked_mean_refs: shapes");
    int64_t n = x->val.shape[0], csp = x->val.shape[1] * x->val.shape[2] * x->val.shape[3];
    int64_t cnt = detail::count_mask(mask);
    if (cnt == 0) throw InvalidArgument("masked_mean_refs: all-false mask");
    Tensor out({x->val.shape[1], x->val.shape[2], x->val.shape[3]});
    for (int64_t ni = 0; ni < n; ++ni) {
        if (!mask[size_t(ni)]) continue;
        const double* row = x->val.data.data() + ni * csp;
        for (int64_t i = 0; i < csp; ++i) out[i] += row[i];
    }
    double inv = 1.0 / double(cnt);
    for (int64_t i = 0; i < csp; ++i) out[i] *= inv;
    auto m = std::make_shared<std::vector<uint8_t>>(mask);
    return make(std::move(out), {x}, [m, n, csp, inv](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t ni = 0; ni < n; ++ni) {
            if (!(*m)[size_t(ni)]) continue;
            double* dx = p.grad.data.data() + ni * csp;
            for (int64_t i = 0; i < csp; ++i) dx[i] += self.grad[i] * inv;
        }
    });
}

// --- misc ---------------------------------------------------------------------

// rows of table:[V,d] gathered by ids -> [T,d]
inline Var embedding(const Var& table, const std::vector<int>& ids) {
    if (table->val.ndim() != 2) throw InvalidArgument("embedding: table must be [V,d]");
    int64_t v = table->val.shape[0], d = table->val.shape[1];
    Tensor out({int64_t(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= v) throw InvalidArgument("embedding: id out of range");
        std::copy_n(table->val.data.begin() + ids[t] * d, d, out.data.begin() + int64_t(t) * d);
    }
    auto idc = std::make_shared<std::vector<int>>(ids);
    return make(std::move(out), {table}, [idc, d](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t t = 0; t < idc->size(); ++t) {
            const double* g = self.grad.data.data() + int64_t(t) * d;
            double* dst = p.grad.data.data() + (*idc)[t] * d;
            for (int64_t i = 0; i < d; ++i) dst[i] += g[i];
        }
    });
}

// y = x / ||x||  (any shape, treated as a flat vector)
inline Var l2_normalize(const Var& x) {
    double n2 = 0;
    for (double v : x->val.data) n2 += v * v;
    double r = std::sqrt(n2);
    if (r < 1e-300) throw InvalidArgument("l2_normalize: zero vector");
    Tensor out = x->val;
    for (double& v : out.data) v /= r;
    auto y = std::make_shared<Tensor>(out);
    return make(std::move(out), {x}, [y, r](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        double dot = 0;
        for (int64_t i = 0; i < self.grad.numel(); ++i) dot += self.grad[i] * (*y)[i];
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            p.grad[i] += (self.grad[i] - (*y)[i] * dot) / r;
    });
}

}  // namespace pedgen::ad
