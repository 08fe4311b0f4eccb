#pragma once

// Tape-based reverse-mode automatic differentiation over row-major double
// tensors. A Tape is rebuilt for every forward pass; nodes are appended in
// execution order, which is already a topological order, so backward is a
// single reverse sweep.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gendebias/tensor.hpp"

namespace gendebias::autograd {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
  public:
    Var() = default;
    Var(Tape *tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape &tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor &value() const;
    const Shape &shape() const { return value().shape; }
    bool requires_grad() const;
    double item() const { return value().item(); }

  private:
    Tape *tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
  public:
    using BackwardFn = std::function<void(Tape &, std::size_t self)>;

    Tape() = default;
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    /// Records a parameter. Gradients reaching this node are added to
    /// `param.grad` during backward when the parameter requires grad.
    Var leaf(Tensor &param) {
        Node n;
        n.value = Tensor(param.shape, param.data);
        n.requires_grad = param.requires_grad;
        n.bound = param.requires_grad ? &param : nullptr;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    /// Records a value that never receives gradients.
    Var constant(Tensor value) {
        Node n;
        value.grad.reset();
        value.requires_grad = false;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    /// Appends the output of a primitive. The backward rule is kept only when
    /// at least one input requires grad.
    Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn backward) {
        return record(std::move(out), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
    }

    Var record(Tensor out, std::span<const Var> inputs, BackwardFn backward) {
        bool needs = false;
        for (const auto &in : inputs) {
            if (&in.tape() != this) throw std::logic_error("autograd: inputs recorded on different tapes");
            needs = needs || nodes_[in.id()].requires_grad;
        }
        Node n;
        n.value = std::move(out);
        n.requires_grad = needs;
        if (needs) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor &value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, allocated as zeros on first access.
    std::vector<double> &grad(std::size_t id) {
        auto &n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    std::size_t size() const { return nodes_.size(); }

    /// Populates gradients of every requires-grad leaf reachable from `loss`.
    void backward(const Var &loss) {
        if (&loss.tape() != this) throw std::logic_error("autograd: loss recorded on a different tape");
        const auto &lv = nodes_[loss.id()].value;
        if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape));
        if (!nodes_[loss.id()].requires_grad) {
            throw std::logic_error("backward: loss does not depend on any requires-grad tensor");
        }
        grad(loss.id())[0] += 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto &n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.bound) {
                auto &g = n.bound->ensure_grad();
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
            }
        }
    }

  private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        Tensor *bound = nullptr;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

inline const Tensor &Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

[[noreturn]] inline void shape_fail(const std::string &op, const std::string &what) {
    throw ShapeError(op + ": " + what);
}

inline void require_rank(const std::string &op, const Var &v, std::size_t rank) {
    if (v.shape().size() != rank) {
        shape_fail(op, "expected rank " + std::to_string(rank) + " operand, got " + shape_str(v.shape()));
    }
}

inline void require_same(const std::string &op, const Var &a, const Var &b) {
    if (a.shape() != b.shape()) shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline ConstMatMap cmap(const Tensor &t) { return ConstMatMap(t.data.data(), t.rows(), t.cols()); }
inline MatMap gmap(std::vector<double> &g, const Tensor &like) { return MatMap(g.data(), like.rows(), like.cols()); }

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(const Var &a, const Var &b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const auto &av = a.value();
    const auto &bv = b.value();
    if (av.shape[1] != bv.shape[0]) {
        detail::shape_fail("matmul", "inner dimensions differ: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    }
    Tensor out({av.shape[0], bv.shape[1]});
    MatMap(out.data.data(), av.shape[0], bv.shape[1]).noalias() = detail::cmap(av) * detail::cmap(bv);
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape &t, std::size_t self) {
        const auto &av = t.value(ia);
        const auto &bv = t.value(ib);
        ConstMatMap g(t.grad(self).data(), av.shape[0], bv.shape[1]);
        if (t.requires_grad(ia)) detail::gmap(t.grad(ia), av).noalias() += g * detail::cmap(bv).transpose();
        if (t.requires_grad(ib)) detail::gmap(t.grad(ib), bv).noalias() += detail::cmap(av).transpose() * g;
    });
}

inline Var transpose(const Var &a) {
    detail::require_rank("transpose", a, 2);
    const auto &av = a.value();
    Tensor out({av.shape[1], av.shape[0]});
    MatMap(out.data.data(), av.shape[1], av.shape[0]) = detail::cmap(av).transpose();
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia](Tape &t, std::size_t self) {
        const auto &av = t.value(ia);
        ConstMatMap g(t.grad(self).data(), av.shape[1], av.shape[0]);
        detail::gmap(t.grad(ia), av) += g.transpose();
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var &a, const Var &b) {
    detail::require_same("add", a, b);
    Tensor out(a.shape());
    const auto &x = a.value().data;
    const auto &y = b.value().data;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x[i] + y[i];
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        for (auto id : {ia, ib}) {
            if (!t.requires_grad(id)) continue;
            auto &d = t.grad(id);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    });
}

inline Var sub(const Var &a, const Var &b) {
    detail::require_same("sub", a, b);
    Tensor out(a.shape());
    const auto &x = a.value().data;
    const auto &y = b.value().data;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x[i] - y[i];
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto &d = t.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto &d = t.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
    });
}

inline Var mul(const Var &a, const Var &b) {
    detail::require_same("mul", a, b);
    Tensor out(a.shape());
    const auto &x = a.value().data;
    const auto &y = b.value().data;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x[i] * y[i];
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &x = t.value(ia).data;
        const auto &y = t.value(ib).data;
        if (t.requires_grad(ia)) {
            auto &d = t.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
        }
        if (t.requires_grad(ib)) {
            auto &d = t.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
        }
    });
}

inline Var scale(const Var &a, double c) {
    Tensor out(a.shape());
    const auto &x = a.value().data;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x[i] * c;
    const auto ia = a.id();
    return a.tape().record(std::move(out), {a}, [ia, c](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        auto &d = t.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
    });
}

/// x[m,n] + bias[n], the only broadcast the engine supports.
inline Var add_bias(const Var &x, const Var &bias) {
    detail::require_rank("add_bias", x, 2);
    detail::require_rank("add_bias", bias, 1);
    const auto &xv = x.value();
    const auto &bv = bias.value();
    if (xv.shape[1] != bv.shape[0]) {
        detail::shape_fail("add_bias", "bias " + shape_str(bv.shape) + " does not match last axis of " + shape_str(xv.shape));
    }
    const std::size_t m = xv.shape[0], n = xv.shape[1];
    Tensor out(xv.shape);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = xv.data[r * n + c] + bv.data[c];
    const auto ix = x.id(), ib = bias.id();
    return x.tape().record(std::move(out), {x, bias}, [ix, ib, m, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        if (t.requires_grad(ix)) {
            auto &d = t.grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto &d = t.grad(ib);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) d[c] += g[r * n + c];
        }
    });
}

inline Var relu(const Var &x) {
    Tensor out(x.shape());
    const auto &v = x.value().data;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = v[i] > 0.0 ? v[i] : 0.0;
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &v = t.value(ix).data;
        auto &d = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (v[i] > 0.0) d[i] += g[i];
    });
}

/// Tanh approximation of GELU.
inline Var gelu(const Var &x) {
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    constexpr double c = 0.044715;
    Tensor out(x.shape());
    const auto &v = x.value().data;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double u = v[i];
        out.data[i] = 0.5 * u * (1.0 + std::tanh(k * (u + c * u * u * u)));
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &v = t.value(ix).data;
        auto &d = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double u = v[i];
            const double th = std::tanh(k * (u + c * u * u * u));
            const double dudx = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * k * (1.0 + 3.0 * c * u * u);
            d[i] += g[i] * dudx;
        }
    });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers. Operate along the last axis; a vector is one row.

namespace detail {

inline double row_max(const double *p, std::size_t n) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, p[i]);
    return m;
}

/// log(sum(exp(p))) with max subtraction; all -inf rows give -inf.
inline double row_lse(const double *p, std::size_t n) {
    const double m = row_max(p, n);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(p[i] - m);
    return m + std::log(s);
}

} // namespace detail

inline Var softmax(const Var &x) {
    const auto &xv = x.value();
    if (xv.shape.empty()) detail::shape_fail("softmax", "needs at least one axis");
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out(xv.shape);
    for (std::size_t r = 0; r < m; ++r) {
        const double *p = xv.data.data() + r * n;
        double *o = out.data.data() + r * n;
        const double mx = detail::row_max(p, n);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (o[i] = std::exp(p[i] - mx));
        for (std::size_t i = 0; i < n; ++i) o[i] /= s;
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix, m, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &y = t.value(self).data;
        auto &d = t.grad(ix);
        for (std::size_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
            for (std::size_t i = 0; i < n; ++i) d[r * n + i] += y[r * n + i] * (g[r * n + i] - dot);
        }
    });
}

inline Var log_softmax(const Var &x) {
    const auto &xv = x.value();
    if (xv.shape.empty()) detail::shape_fail("log_softmax", "needs at least one axis");
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out(xv.shape);
    for (std::size_t r = 0; r < m; ++r) {
        const double *p = xv.data.data() + r * n;
        const double mx = detail::row_max(p, n);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp(p[i] - mx);
        const double ls = std::log(s);
        for (std::size_t i = 0; i < n; ++i) out.data[r * n + i] = std::isfinite(mx) ? (p[i] - mx) - ls : p[i] - mx;
    }
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix, m, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &y = t.value(self).data;
        auto &d = t.grad(ix);
        for (std::size_t r = 0; r < m; ++r) {
            double gs = 0.0;
            for (std::size_t i = 0; i < n; ++i) gs += g[r * n + i];
            for (std::size_t i = 0; i < n; ++i) d[r * n + i] += g[r * n + i] - std::exp(y[r * n + i]) * gs;
        }
    });
}

/// [m,n] -> [m]; a vector reduces to a scalar.
inline Var log_sum_exp(const Var &x) {
    const auto &xv = x.value();
    if (xv.shape.empty()) detail::shape_fail("log_sum_exp", "needs at least one axis");
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out = xv.shape.size() >= 2 ? Tensor({m}) : Tensor::scalar(0.0);
    for (std::size_t r = 0; r < m; ++r) out.data[r] = detail::row_lse(xv.data.data() + r * n, n);
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix, m, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &l = t.value(self).data;
        const auto &v = t.value(ix).data;
        auto &d = t.grad(ix);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t i = 0; i < n; ++i) d[r * n + i] += g[r] * std::exp(v[r * n + i] - l[r]);
    });
}

inline Var layer_norm(const Var &x, const Var &gamma, const Var &beta, double eps = 1e-5) {
    detail::require_rank("layer_norm", x, 2);
    detail::require_rank("layer_norm", gamma, 1);
    detail::require_same("layer_norm", gamma, beta);
    const auto &xv = x.value();
    const std::size_t m = xv.shape[0], n = xv.shape[1];
    if (gamma.shape()[0] != n) {
        detail::shape_fail("layer_norm", "gain " + shape_str(gamma.shape()) + " does not match " + shape_str(xv.shape));
    }
    const auto &gv = gamma.value().data;
    const auto &bv = beta.value().data;
    Tensor out(xv.shape);
    auto saved = std::make_shared<std::vector<double>>(m * n + m); // xhat then inverse std
    for (std::size_t r = 0; r < m; ++r) {
        const double *p = xv.data.data() + r * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += p[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (p[i] - mu) * (p[i] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*saved)[m * n + r] = inv;
        for (std::size_t i = 0; i < n; ++i) {
            const double xh = (p[i] - mu) * inv;
            (*saved)[r * n + i] = xh;
            out.data[r * n + i] = xh * gv[i] + bv[i];
        }
    }
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    return x.tape().record(std::move(out), {x, gamma, beta}, [ix, ig, ib, m, n, saved](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &xh = *saved;
        if (t.requires_grad(ig)) {
            auto &dg = t.grad(ig);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t i = 0; i < n; ++i) dg[i] += g[r * n + i] * xh[r * n + i];
        }
        if (t.requires_grad(ib)) {
            auto &db = t.grad(ib);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t i = 0; i < n; ++i) db[i] += g[r * n + i];
        }
        if (t.requires_grad(ix)) {
            const auto &gv = t.value(ig).data;
            auto &dx = t.grad(ix);
            const double invn = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < m; ++r) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double dxh = g[r * n + i] * gv[i];
                    s1 += dxh;
                    s2 += dxh * xh[r * n + i];
                }
                const double inv = xh[m * n + r];
                for (std::size_t i = 0; i < n; ++i) {
                    const double dxh = g[r * n + i] * gv[i];
                    dx[r * n + i] += inv * (dxh - s1 * invn - xh[r * n + i] * s2 * invn);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Indexing and structure

/// Gathers rows of table[V,d] for each id -> [ids.size(), d].
inline Var embedding(const Var &table, std::span<const int> ids) {
    detail::require_rank("embedding", table, 2);
    const auto &tv = table.value();
    const std::size_t vocab = tv.shape[0], d = tv.shape[1];
    if (ids.empty()) detail::shape_fail("embedding", "empty id list");
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            detail::shape_fail("embedding", "id " + std::to_string(id) + " outside table " + shape_str(tv.shape));
        }
    }
    Tensor out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    const auto it = table.id();
    auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
    return table.tape().record(std::move(out), {table}, [it, idx, d](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        auto &dt = t.grad(it);
        for (std::size_t r = 0; r < idx->size(); ++r)
            for (std::size_t c = 0; c < d; ++c) dt[(*idx)[r] * d + c] += g[r * d + c];
    });
}

/// Concatenates along axis 0 (rows) or axis 1 (columns) of rank-2 operands.
inline Var concat(std::span<const Var> parts, std::size_t axis = 0) {
    if (parts.empty()) detail::shape_fail("concat", "no operands");
    for (const auto &p : parts) detail::require_rank("concat", p, 2);
    if (axis > 1) detail::shape_fail("concat", "axis must be 0 or 1");
    const std::size_t other = 1 - axis;
    std::size_t total = 0;
    for (const auto &p : parts) {
        if (p.shape()[other] != parts[0].shape()[other]) {
            detail::shape_fail("concat", "operands " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                                             " differ off the concatenation axis");
        }
        total += p.shape()[axis];
    }
    const std::size_t m = axis == 0 ? total : parts[0].shape()[0];
    const std::size_t n = axis == 0 ? parts[0].shape()[1] : total;
    Tensor out({m, n});
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const auto &p : parts) {
        const auto &pv = p.value();
        const std::size_t pm = pv.shape[0], pn = pv.shape[1];
        for (std::size_t r = 0; r < pm; ++r)
            for (std::size_t c = 0; c < pn; ++c) {
                const std::size_t orow = axis == 0 ? off + r : r;
                const std::size_t ocol = axis == 0 ? c : off + c;
                out.data[orow * n + ocol] = pv.data[r * pn + c];
            }
        ids.push_back(p.id());
        offsets.push_back(off);
        off += p.shape()[axis];
    }
    return parts[0].tape().record(std::move(out), parts, [ids, offsets, axis, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            const auto &pv = t.value(ids[k]);
            const std::size_t pm = pv.shape[0], pn = pv.shape[1];
            auto &d = t.grad(ids[k]);
            for (std::size_t r = 0; r < pm; ++r)
                for (std::size_t c = 0; c < pn; ++c) {
                    const std::size_t orow = axis == 0 ? offsets[k] + r : r;
                    const std::size_t ocol = axis == 0 ? c : offsets[k] + c;
                    d[r * pn + c] += g[orow * n + ocol];
                }
        }
    });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis = 0) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Rows [begin, begin + count) of a rank-2 operand.
inline Var slice_rows(const Var &x, std::size_t begin, std::size_t count) {
    detail::require_rank("slice", x, 2);
    const auto &xv = x.value();
    if (count == 0 || begin + count > xv.shape[0]) {
        detail::shape_fail("slice", "rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                                        ") out of range for " + shape_str(xv.shape));
    }
    const std::size_t n = xv.shape[1];
    Tensor out({count, n});
    std::copy_n(xv.data.begin() + static_cast<std::ptrdiff_t>(begin * n), count * n, out.data.begin());
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix, begin, count, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        auto &d = t.grad(ix);
        for (std::size_t i = 0; i < count * n; ++i) d[begin * n + i] += g[i];
    });
}

inline Var reshape(const Var &x, Shape shape) {
    if (shape_numel(shape) != x.value().numel()) {
        detail::shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), x.value().data);
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        auto &d = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var &x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    const auto ix = x.id();
    return x.tape().record(Tensor::scalar(s), {x}, [ix](Tape &t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (auto &d : t.grad(ix)) d += g;
    });
}

inline Var mean(const Var &x) {
    const double n = static_cast<double>(x.value().numel());
    return scale(sum(x), 1.0 / n);
}

/// out[r] = x[r, idx[r]] for a rank-2 operand.
inline Var pick(const Var &x, std::span<const int> idx) {
    detail::require_rank("pick", x, 2);
    const auto &xv = x.value();
    const std::size_t m = xv.shape[0], n = xv.shape[1];
    if (idx.size() != m) {
        detail::shape_fail("pick", std::to_string(idx.size()) + " indices for operand " + shape_str(xv.shape));
    }
    Tensor out({m});
    for (std::size_t r = 0; r < m; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) {
            detail::shape_fail("pick", "index " + std::to_string(idx[r]) + " outside " + shape_str(xv.shape));
        }
        out.data[r] = xv.data[r * n + static_cast<std::size_t>(idx[r])];
    }
    const auto ix = x.id();
    auto saved = std::make_shared<std::vector<int>>(idx.begin(), idx.end());
    return x.tape().record(std::move(out), {x}, [ix, saved, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        auto &d = t.grad(ix);
        for (std::size_t r = 0; r < saved->size(); ++r) d[r * n + static_cast<std::size_t>((*saved)[r])] += g[r];
    });
}

/// Mean negative log-likelihood of integer targets under row-wise softmax of logits.
inline Var cross_entropy(const Var &logits, std::span<const int> targets) {
    detail::require_rank("cross_entropy", logits, 2);
    if (targets.size() != logits.shape()[0]) {
        detail::shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
    }
    return scale(mean(pick(log_softmax(logits), targets)), -1.0);
}

/// Sums consecutive row groups. `offsets` has one entry per segment plus the
/// final end row. Rank-1 operands are treated as column vectors.
inline Var segment_sum(const Var &x, std::span<const std::size_t> offsets) {
    const auto &xv = x.value();
    if (xv.shape.empty() || xv.shape.size() > 2) detail::shape_fail("segment_sum", "operand " + shape_str(xv.shape));
    const bool vec = xv.shape.size() == 1;
    const std::size_t m = xv.shape[0], n = vec ? 1 : xv.shape[1];
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != m) {
        detail::shape_fail("segment_sum", "offsets do not cover " + std::to_string(m) + " rows");
    }
    const std::size_t segs = offsets.size() - 1;
    Tensor out = vec ? Tensor({segs}) : Tensor({segs, n});
    for (std::size_t s = 0; s < segs; ++s) {
        if (offsets[s + 1] <= offsets[s]) detail::shape_fail("segment_sum", "empty or decreasing segment");
        for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
            for (std::size_t c = 0; c < n; ++c) out.data[s * n + c] += xv.data[r * n + c];
    }
    const auto ix = x.id();
    auto off = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
    return x.tape().record(std::move(out), {x}, [ix, off, n](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        auto &d = t.grad(ix);
        for (std::size_t s = 0; s + 1 < off->size(); ++s)
            for (std::size_t r = (*off)[s]; r < (*off)[s + 1]; ++r)
                for (std::size_t c = 0; c < n; ++c) d[r * n + c] += g[s * n + c];
    });
}

/// Mean over consecutive row groups of a rank-2 operand -> [segments, cols].
inline Var segment_mean(const Var &x, std::span<const std::size_t> offsets) {
    Var s = segment_sum(x, offsets);
    const std::size_t n = x.shape().size() == 1 ? 1 : x.shape()[1];
    Tensor w(s.shape());
    for (std::size_t k = 0; k + 1 < offsets.size(); ++k)
        for (std::size_t c = 0; c < n; ++c) w.data[k * n + c] = 1.0 / static_cast<double>(offsets[k + 1] - offsets[k]);
    return mul(s, x.tape().constant(std::move(w)));
}

// ---------------------------------------------------------------------------
// Attention

/// One attention block: query rows [q_begin, q_begin + q_len) attend to key
/// rows [k_begin, k_begin + k_len).
struct AttentionSegment {
    std::size_t q_begin = 0;
    std::size_t q_len = 0;
    std::size_t k_begin = 0;
    std::size_t k_len = 0;
};

/// Multi-head scaled dot-product attention over packed sequences.
/// q is [Nq, d], k and v are [Nk, d]; each segment is an independent sequence.
/// With `causal`, query i of a segment only sees keys 0..i of the same segment.
/// Non-empty `distance_slopes` (one per head) subtract slope * |i - j| from the
/// attention logits of head h, a parameter-free relative position signal.
inline Var attention(const Var &q, const Var &k, const Var &v, std::size_t heads,
                     std::span<const AttentionSegment> segments, bool causal,
                     std::span<const double> distance_slopes = {}) {
    detail::require_rank("attention", q, 2);
    detail::require_rank("attention", k, 2);
    detail::require_same("attention", k, v);
    const std::size_t d = q.shape()[1];
    if (k.shape()[1] != d) detail::shape_fail("attention", "query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
    if (heads == 0 || d % heads != 0) {
        detail::shape_fail("attention", std::to_string(heads) + " heads do not divide width " + std::to_string(d));
    }
    if (!distance_slopes.empty() && distance_slopes.size() != heads) {
        detail::shape_fail("attention", std::to_string(distance_slopes.size()) + " distance slopes for " + std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nq = q.shape()[0], nk = k.shape()[0];
    std::size_t prob_size = 0;
    for (const auto &s : segments) {
        if (s.q_len == 0 || s.k_len == 0 || s.q_begin + s.q_len > nq || s.k_begin + s.k_len > nk) {
            detail::shape_fail("attention", "segment out of range for query " + shape_str(q.shape()) + " key " + shape_str(k.shape()));
        }
        if (causal && s.q_len != s.k_len) detail::shape_fail("attention", "causal segment needs equal query and key lengths");
        prob_size += s.q_len * s.k_len * heads;
    }
    const auto &qv = q.value().data;
    const auto &kv = k.value().data;
    const auto &vv = v.value().data;
    Tensor out({nq, d});
    auto probs = std::make_shared<std::vector<double>>(prob_size);
    std::size_t poff = 0;
    for (const auto &s : segments) {
        for (std::size_t h = 0; h < heads; ++h) {
            ConstStridedMap qh(qv.data() + s.q_begin * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap kh(kv.data() + s.k_begin * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap vh(vv.data() + s.k_begin * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
            MatMap p(probs->data() + poff, s.q_len, s.k_len);
            p.noalias() = (qh * kh.transpose()) * sc;
            if (!distance_slopes.empty()) {
                const double m = distance_slopes[h];
                for (std::size_t i = 0; i < s.q_len; ++i)
                    for (std::size_t j = 0; j < s.k_len; ++j) p(i, j) -= m * static_cast<double>(i > j ? i - j : j - i);
            }
            for (std::size_t i = 0; i < s.q_len; ++i) {
                const std::size_t visible = causal ? i + 1 : s.k_len;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, p(i, j));
                double z = 0.0;
                for (std::size_t j = 0; j < visible; ++j) z += (p(i, j) = std::exp(p(i, j) - mx));
                for (std::size_t j = 0; j < visible; ++j) p(i, j) /= z;
                for (std::size_t j = visible; j < s.k_len; ++j) p(i, j) = 0.0;
            }
            StridedMap oh(out.data.data() + s.q_begin * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
            oh.noalias() = p * vh;
            poff += s.q_len * s.k_len;
        }
    }
    const auto iq = q.id(), ik = k.id(), iv = v.id();
    auto segs = std::make_shared<std::vector<AttentionSegment>>(segments.begin(), segments.end());
    return q.tape().record(std::move(out), {q, k, v}, [iq, ik, iv, segs, probs, heads, d, dh, sc](Tape &t, std::size_t self) {
        const auto &g = t.grad(self);
        const auto &qv = t.value(iq).data;
        const auto &kv = t.value(ik).data;
        const auto &vv = t.value(iv).data;
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        double *dq = gq ? t.grad(iq).data() : nullptr;
        double *dk = gk ? t.grad(ik).data() : nullptr;
        double *dv = gv ? t.grad(iv).data() : nullptr;
        RowMat dp, ds;
        std::size_t poff = 0;
        for (const auto &s : *segs) {
            for (std::size_t h = 0; h < heads; ++h) {
                ConstMatMap p(probs->data() + poff, s.q_len, s.k_len);
                poff += s.q_len * s.k_len;
                ConstStridedMap go(g.data() + s.q_begin * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
                ConstStridedMap vh(vv.data() + s.k_begin * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
                if (dv) {
                    StridedMap dvh(dv + s.k_begin * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
                    dvh.noalias() += p.transpose() * go;
                }
                if (!dq && !dk) continue;
                dp.noalias() = go * vh.transpose();
                ds.resize(s.q_len, s.k_len);
                for (std::size_t i = 0; i < s.q_len; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < s.k_len; ++j) dot += dp(i, j) * p(i, j);
                    for (std::size_t j = 0; j < s.k_len; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * sc;
                }
                if (dq) {
                    ConstStridedMap kh(kv.data() + s.k_begin * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
                    StridedMap dqh(dq + s.q_begin * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
                    dqh.noalias() += ds * kh;
                }
                if (dk) {
                    ConstStridedMap qh(qv.data() + s.q_begin * d + h * dh, s.q_len, dh, Eigen::OuterStride<>(d));
                    StridedMap dkh(dk + s.k_begin * d + h * dh, s.k_len, dh, Eigen::OuterStride<>(d));
                    dkh.noalias() += ds.transpose() * qh;
                }
            }
        }
    });
}

} // namespace gendebias::autograd
