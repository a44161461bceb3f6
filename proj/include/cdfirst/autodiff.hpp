#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace cdfirst::ad {

class Tape;

/// Handle to a scalar node on a tape.
struct Expr {
    Tape* tape = nullptr;
    std::uint32_t id = 0;
};

namespace detail {

// Shared soft-extremum kernels. Max-subtracted log-sum-exp; `weights`,
// when non-null, receives the softmax weights (the local partials).
inline double lse_value(std::span<const double> v, double beta, double* weights = nullptr) {
    assert(!v.empty() && beta > 0.0);
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        double e = std::exp(beta * (v[i] - m));
        if (weights) weights[i] = e;
        s += e;
    }
    if (weights) {
        for (std::size_t i = 0; i < v.size(); ++i) weights[i] /= s;
    }
    return m + std::log(s) / beta;
}

inline double nse_value(std::span<const double> v, double beta, double* weights = nullptr) {
    assert(!v.empty() && beta > 0.0);
    double m = v[0];
    for (double x : v) m = std::min(m, x);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        double e = std::exp(-beta * (v[i] - m));
        if (weights) weights[i] = e;
        s += e;
    }
    if (weights) {
        for (std::size_t i = 0; i < v.size(); ++i) weights[i] /= s;
    }
    return m - std::log(s) / beta;
}

}  // namespace detail

/// Append-only reverse-mode tape over scalar nodes.
///
/// Node ids are topological by construction: backward() sweeps ids in
/// reverse and visits each node exactly once. Parameter leaves occupy
/// ids [0, n_params) and survive reset(), so one tape can be reused
/// across many per-sample graphs within an optimization step.
class Tape {
public:
    Tape() = default;

    /// Create (or refresh) the parameter leaf section. Must be called
    /// before any graph is built; re-calling updates leaf values.
    void bind_params(std::span<const double> params) {
        if (n_params_ == 0) {
            n_params_ = params.size();
            val_.assign(params.begin(), params.end());
            abeg_.assign(n_params_, 0);
            acnt_.assign(n_params_, 0);
        } else {
            assert(params.size() == n_params_);
            reset();
            for (std::size_t i = 0; i < n_params_; ++i) val_[i] = params[i];
        }
    }

    /// Drop every non-leaf node; leaf values are kept.
    void reset() {
        val_.resize(n_params_);
        abeg_.resize(n_params_);
        acnt_.resize(n_params_);
        apar_.clear();
        apw_.clear();
    }

    std::size_t size() const { return val_.size(); }
    std::size_t num_params() const { return n_params_; }

    Expr leaf(std::size_t param_index) {
        assert(param_index < n_params_);
        return Expr{this, static_cast<std::uint32_t>(param_index)};
    }

    double value(Expr e) const { return val_[e.id]; }
    double adjoint(Expr e) const { return adj_[e.id]; }
    double leaf_value(std::size_t i) const { return val_[i]; }

    Expr constant(double c) {
        std::uint32_t id = begin_node(c);
        return Expr{this, id};
    }

    // ----- unary / binary ops -----

    Expr add(Expr a, Expr b) {
        std::uint32_t id = begin_node(val_[a.id] + val_[b.id]);
        push_arg(a.id, 1.0);
        push_arg(b.id, 1.0);
        return finish(id);
    }
    Expr add_c(Expr a, double c) {
        std::uint32_t id = begin_node(val_[a.id] + c);
        push_arg(a.id, 1.0);
        return finish(id);
    }
    Expr sub(Expr a, Expr b) {
        std::uint32_t id = begin_node(val_[a.id] - val_[b.id]);
        push_arg(a.id, 1.0);
        push_arg(b.id, -1.0);
        return finish(id);
    }
    Expr rsub_c(double c, Expr a) {  // c - a
        std::uint32_t id = begin_node(c - val_[a.id]);
        push_arg(a.id, -1.0);
        return finish(id);
    }
    Expr mul(Expr a, Expr b) {
        std::uint32_t id = begin_node(val_[a.id] * val_[b.id]);
        push_arg(a.id, val_[b.id]);
        push_arg(b.id, val_[a.id]);
        return finish(id);
    }
    Expr mul_c(Expr a, double c) {
        std::uint32_t id = begin_node(val_[a.id] * c);
        push_arg(a.id, c);
        return finish(id);
    }
    Expr neg(Expr a) { return mul_c(a, -1.0); }
    Expr div(Expr a, Expr b) {
        double bv = val_[b.id];
        if (bv == 0.0) throw std::domain_error("autodiff: division by zero");
        std::uint32_t id = begin_node(val_[a.id] / bv);
        push_arg(a.id, 1.0 / bv);
        push_arg(b.id, -val_[a.id] / (bv * bv));
        return finish(id);
    }
    Expr exp_(Expr a) {
        double v = std::exp(val_[a.id]);
        std::uint32_t id = begin_node(v);
        push_arg(a.id, v);
        return finish(id);
    }
    Expr log_(Expr a) {
        double av = val_[a.id];
        if (!(av > 0.0)) throw std::domain_error("autodiff: log of non-positive value");
        std::uint32_t id = begin_node(std::log(av));
        push_arg(a.id, 1.0 / av);
        return finish(id);
    }
    Expr tanh_(Expr a) {
        double t = std::tanh(val_[a.id]);
        std::uint32_t id = begin_node(t);
        push_arg(a.id, 1.0 - t * t);
        return finish(id);
    }

    // ----- fused n-ary ops -----

    /// Temperature-scaled log-sum-exp (smooth max). Local partials are the
    /// softmax weights; the temperature gets (sum_i w_i v_i - value) / beta.
    Expr lse(std::span<const Expr> v, Expr beta) {
        scratch_.resize(v.size());
        wscratch_.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) scratch_[i] = val_[v[i].id];
        double bv = val_[beta.id];
        double value = detail::lse_value(scratch_, bv, wscratch_.data());
        std::uint32_t id = begin_node(value);
        double wv = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            push_arg(v[i].id, wscratch_[i]);
            wv += wscratch_[i] * scratch_[i];
        }
        push_arg(beta.id, (wv - value) / bv);
        return finish(id);
    }

    /// Smooth min: -lse(-v, beta), fused.
    Expr nse(std::span<const Expr> v, Expr beta) {
        scratch_.resize(v.size());
        wscratch_.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) scratch_[i] = val_[v[i].id];
        double bv = val_[beta.id];
        double value = detail::nse_value(scratch_, bv, wscratch_.data());
        std::uint32_t id = begin_node(value);
        double wv = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            push_arg(v[i].id, wscratch_[i]);
            wv += wscratch_[i] * scratch_[i];
        }
        push_arg(beta.id, (wv - value) / bv);
        return finish(id);
    }

    /// Exact max over a set; subgradient routed to the first argmax.
    Expr hard_max(std::span<const Expr> v) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
            if (val_[v[i].id] > val_[v[best].id]) best = i;
        std::uint32_t id = begin_node(val_[v[best].id]);
        push_arg(v[best].id, 1.0);
        return finish(id);
    }
    Expr hard_min(std::span<const Expr> v) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
            if (val_[v[i].id] < val_[v[best].id]) best = i;
        std::uint32_t id = begin_node(val_[v[best].id]);
        push_arg(v[best].id, 1.0);
        return finish(id);
    }

    /// sum_i exp(p[logw0+i]) * h_i + addend, with exp(logw) supplied from a
    /// per-step cache aligned to the contiguous id row; the chain rule
    /// through exp is folded into the partials so no per-weight exp node
    /// is materialized.
    Expr pos_linear(std::uint32_t logw0, std::span<const double> expw,
                    std::span<const Expr> h, Expr addend) {
        assert(expw.size() == h.size());
        double value = val_[addend.id];
        for (std::size_t i = 0; i < h.size(); ++i) value += expw[i] * val_[h[i].id];
        std::uint32_t id = begin_node(value);
        for (std::size_t i = 0; i < h.size(); ++i) {
            push_arg(logw0 + static_cast<std::uint32_t>(i), expw[i] * val_[h[i].id]);
            push_arg(h[i].id, expw[i]);
        }
        push_arg(addend.id, 1.0);
        return finish(id);
    }

    /// sum_i w_i * x_i + b over parameter leaves w, b and nodes x.
    Expr linear(std::span<const std::uint32_t> w_ids, std::span<const Expr> x,
                std::uint32_t b_id) {
        assert(w_ids.size() == x.size());
        double value = val_[b_id];
        for (std::size_t i = 0; i < x.size(); ++i) value += val_[w_ids[i]] * val_[x[i].id];
        std::uint32_t id = begin_node(value);
        for (std::size_t i = 0; i < x.size(); ++i) {
            push_arg(w_ids[i], val_[x[i].id]);
            push_arg(x[i].id, val_[w_ids[i]]);
        }
        push_arg(b_id, 1.0);
        return finish(id);
    }

    /// linear over a contiguous weight row: sum_i p[w0+i] * x_i + p[b_id].
    Expr linear_rows(std::uint32_t w0, std::span<const Expr> x, std::uint32_t b_id) {
        double value = val_[b_id];
        for (std::size_t i = 0; i < x.size(); ++i) value += val_[w0 + i] * val_[x[i].id];
        std::uint32_t id = begin_node(value);
        for (std::size_t i = 0; i < x.size(); ++i) {
            push_arg(w0 + static_cast<std::uint32_t>(i), val_[x[i].id]);
            push_arg(x[i].id, val_[w0 + i]);
        }
        push_arg(b_id, 1.0);
        return finish(id);
    }

    /// dot over a contiguous weight row, no bias.
    Expr dot_rows(std::uint32_t w0, std::span<const Expr> x) {
        double value = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) value += val_[w0 + i] * val_[x[i].id];
        std::uint32_t id = begin_node(value);
        for (std::size_t i = 0; i < x.size(); ++i) {
            push_arg(w0 + static_cast<std::uint32_t>(i), val_[x[i].id]);
            push_arg(x[i].id, val_[w0 + i]);
        }
        return finish(id);
    }

    /// Fused a*x + c with constant a, c.
    Expr affine(Expr x, double a, double c) {
        std::uint32_t id = begin_node(a * val_[x.id] + c);
        push_arg(x.id, a);
        return finish(id);
    }

    // ----- backward -----

    /// Reverse sweep from `root`. Zeroes all adjoints first, so repeated
    /// calls give identical results.
    void backward(Expr root) {
        assert(root.tape == this);
        adj_.assign(val_.size(), 0.0);
        adj_[root.id] = 1.0;
        for (std::uint32_t i = root.id; i >= n_params_ && i != UINT32_MAX; --i) {
            double a = adj_[i];
            if (a == 0.0) continue;
            std::uint32_t b = abeg_[i];
            std::uint32_t e = b + acnt_[i];
            for (std::uint32_t k = b; k < e; ++k) adj_[apar_[k]] += a * apw_[k];
            if (i == 0) break;
        }
    }

    void zero_adjoints() { adj_.assign(val_.size(), 0.0); }

    /// grad[k] += scale * d(root)/d(param_k) for every parameter leaf.
    void accumulate_leaf_grads(std::span<double> grad, double scale = 1.0) const {
        assert(grad.size() >= n_params_);
        for (std::size_t k = 0; k < n_params_; ++k) grad[k] += scale * adj_[k];
    }

private:
    std::uint32_t begin_node(double value) {
        std::uint32_t id = static_cast<std::uint32_t>(val_.size());
        val_.push_back(value);
        abeg_.push_back(static_cast<std::uint32_t>(apar_.size()));
        acnt_.push_back(0);
        return id;
    }
    void push_arg(std::uint32_t parent, double w) {
        apar_.push_back(parent);
        apw_.push_back(w);
        ++acnt_.back();
    }
    Expr finish(std::uint32_t id) { return Expr{this, id}; }

    std::vector<double> val_;
    std::vector<double> adj_;
    std::vector<std::uint32_t> abeg_;
    std::vector<std::uint32_t> acnt_;
    std::vector<std::uint32_t> apar_;
    std::vector<double> apw_;
    std::size_t n_params_ = 0;

    std::vector<double> scratch_, wscratch_;
};

// Operator sugar so composed formulas read naturally in graph-building code.

inline Expr operator+(Expr a, Expr b) { return a.tape->add(a, b); }
inline Expr operator+(Expr a, double c) { return a.tape->add_c(a, c); }
inline Expr operator+(double c, Expr a) { return a.tape->add_c(a, c); }
inline Expr operator-(Expr a, Expr b) { return a.tape->sub(a, b); }
inline Expr operator-(Expr a, double c) { return a.tape->add_c(a, -c); }
inline Expr operator-(double c, Expr a) { return a.tape->rsub_c(c, a); }
inline Expr operator-(Expr a) { return a.tape->neg(a); }
inline Expr operator*(Expr a, Expr b) { return a.tape->mul(a, b); }
inline Expr operator*(Expr a, double c) { return a.tape->mul_c(a, c); }
inline Expr operator*(double c, Expr a) { return a.tape->mul_c(a, c); }
inline Expr operator/(Expr a, Expr b) { return a.tape->div(a, b); }
inline Expr operator/(Expr a, double c) { return a.tape->mul_c(a, 1.0 / c); }
inline Expr exp(Expr a) { return a.tape->exp_(a); }
inline Expr log(Expr a) { return a.tape->log_(a); }
inline Expr tanh(Expr a) { return a.tape->tanh_(a); }

}  // namespace cdfirst::ad
