#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdfirst/autodiff.hpp"
#include "cdfirst/common.hpp"
#include "cdfirst/rng.hpp"

namespace cdfirst {

// Named soft-extremum entry points; the kernels live next to the tape ops
// so plain evaluation and autodiff cannot drift apart.
inline double soft_max_group(std::span<const double> values, double beta) {
    return ad::detail::lse_value(values, beta);
}
inline double soft_min_group(std::span<const double> values, double beta) {
    return ad::detail::nse_value(values, beta);
}

// soft: smooth min-of-max blocks; hard: exact min/max (monotone, not smooth);
// mlp: positive-weight tanh network (monotone baseline, no extremum blocks).
enum class HeadKind { soft, hard, mlp };

inline const char* head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::soft: return "soft";
        case HeadKind::hard: return "hard";
        case HeadKind::mlp: return "mlp";
    }
    return "?";
}

struct ModelShape {
    int d_x = 1;
    int d_y = 2;
    // Monotone feature widths per layer; the last must be 1 (the raw output).
    std::vector<int> stack_widths = {16, 16, 1};
    // Context embedding widths, one per layer.
    std::vector<int> cond_widths = {8, 8, 2};
    // Unit block sizes: every feature of an inner layer owns
    // act_groups x act_group_size pre-activation units; the final scalar
    // feature owns final_groups x final_group_size. The min-max kinds
    // reduce a block via min-of-max, the mlp kind via the block mean, so
    // all three share one parameterization.
    int act_groups = 2;
    int act_group_size = 2;
    int final_groups = 32;
    int final_group_size = 32;
    HeadKind kind = HeadKind::soft;
    bool batch_norm = false;

    int n_layers() const { return static_cast<int>(stack_widths.size()); }
    int layer_in(int l) const { return l == 0 ? 1 : stack_widths[l - 1]; }
    int layer_out(int l) const { return stack_widths[l]; }
    int layer_groups(int l) const {
        return l + 1 == n_layers() ? final_groups : act_groups;
    }
    int layer_group_size(int l) const {
        return l + 1 == n_layers() ? final_group_size : act_group_size;
    }
    int layer_units(int l) const {
        return layer_out(l) * layer_groups(l) * layer_group_size(l);
    }
    int cond_in(int l) const { return l == 0 ? d_x : cond_widths[l - 1]; }

    void validate() const {
        if (d_x < 1 || d_y < 1) throw ConfigError("model: d_x and d_y must be >= 1");
        if (stack_widths.empty()) throw ConfigError("model: stack_widths must be nonempty");
        if (stack_widths.back() != 1)
            throw ConfigError("model: last stack width must be 1 (scalar raw output)");
        for (int w : stack_widths)
            if (w < 1) throw ConfigError("model: stack widths must be >= 1");
        if (cond_widths.size() != stack_widths.size())
            throw ConfigError("model: cond_widths must match stack_widths in length");
        for (int w : cond_widths)
            if (w < 1) throw ConfigError("model: cond widths must be >= 1");
        if (act_groups < 1 || act_group_size < 1 || final_groups < 1 || final_group_size < 1)
            throw ConfigError("model: group knobs must be >= 1");
    }
};

/// Contiguous index range inside the flat parameter vector.
struct Slice {
    std::size_t off = 0;
    std::size_t len = 0;
    std::uint32_t id0() const { return static_cast<std::uint32_t>(off); }
};

struct LayerSlices {
    Slice logWz;   // units x layer_in, stored as logs; effective weight exp(.)
    Slice Wc;      // units x cond_width
    Slice Wy;      // units x i : weights on the i preceding responses only
    Slice b;       // units
    Slice log_bmax, log_bmin;      // soft kind: per-layer temperatures
    Slice bn_logscale, bn_shift;   // batch_norm: per-feature affine
};

struct EmbedSlices {
    Slice W, b;
};

struct ModelLayout {
    ModelShape shape;
    std::vector<EmbedSlices> embed;               // per layer, shared by heads
    std::vector<std::vector<LayerSlices>> head;   // [d_y][n_layers]
    Slice log_alpha_x, log_alpha_y;               // noise scales, stored as logs
    std::size_t n_params = 0;

    static ModelLayout build(ModelShape s) {
        s.validate();
        ModelLayout lay;
        lay.shape = s;
        std::size_t off = 0;
        auto take = [&off](std::size_t n) {
            Slice sl{off, n};
            off += n;
            return sl;
        };
        const int L = s.n_layers();
        lay.embed.resize(L);
        for (int l = 0; l < L; ++l) {
            lay.embed[l].W = take(static_cast<std::size_t>(s.cond_widths[l]) * s.cond_in(l));
            lay.embed[l].b = take(static_cast<std::size_t>(s.cond_widths[l]));
        }
        lay.head.resize(s.d_y);
        for (int i = 0; i < s.d_y; ++i) {
            lay.head[i].resize(L);
            for (int l = 0; l < L; ++l) {
                auto& hs = lay.head[i][l];
                const auto units = static_cast<std::size_t>(s.layer_units(l));
                hs.logWz = take(units * s.layer_in(l));
                hs.Wc = take(units * s.cond_widths[l]);
                hs.Wy = take(units * static_cast<std::size_t>(i));
                hs.b = take(units);
                if (s.kind == HeadKind::soft) {
                    hs.log_bmax = take(1);
                    hs.log_bmin = take(1);
                }
                if (s.batch_norm) {
                    hs.bn_logscale = take(static_cast<std::size_t>(s.layer_out(l)));
                    hs.bn_shift = take(static_cast<std::size_t>(s.layer_out(l)));
                }
            }
        }
        lay.log_alpha_x = take(static_cast<std::size_t>(s.d_x));
        lay.log_alpha_y = take(static_cast<std::size_t>(s.d_y));
        lay.n_params = off;
        return lay;
    }
};

/// Visit every named parameter array in layout order (checkpoint order).
template <class F>
void for_each_param_array(const ModelLayout& lay, F&& fn) {
    const auto& s = lay.shape;
    for (int l = 0; l < s.n_layers(); ++l) {
        fn("embed." + std::to_string(l) + ".W", lay.embed[l].W);
        fn("embed." + std::to_string(l) + ".b", lay.embed[l].b);
    }
    for (int i = 0; i < s.d_y; ++i) {
        for (int l = 0; l < s.n_layers(); ++l) {
            std::string base = "head." + std::to_string(i) + ".layer." + std::to_string(l) + ".";
            const auto& hs = lay.head[i][l];
            fn(base + "logWz", hs.logWz);
            fn(base + "Wc", hs.Wc);
            if (hs.Wy.len > 0) fn(base + "Wy", hs.Wy);
            fn(base + "b", hs.b);
            if (s.kind == HeadKind::soft) {
                fn(base + "log_beta_max", hs.log_bmax);
                fn(base + "log_beta_min", hs.log_bmin);
            }
            if (s.batch_norm) {
                fn(base + "bn_log_scale", hs.bn_logscale);
                fn(base + "bn_shift", hs.bn_shift);
            }
        }
    }
    fn("log_alpha_x", lay.log_alpha_x);
    fn("log_alpha_y", lay.log_alpha_y);
}

/// Fresh parameter vector. logWz ~ N(-1, 0.5) gives small positive effective
/// weights; dense weights and biases U(+-1/sqrt(fan_in)); temperatures start
/// at 1 (log 0); noise scales at exp(log_alpha_init).
inline std::vector<double> init_params(const ModelLayout& lay, Rng& rng,
                                       double log_alpha_init = -2.0) {
    const auto& s = lay.shape;
    std::vector<double> p(lay.n_params, 0.0);
    auto fill_uniform = [&](Slice sl, int fan_in) {
        double a = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
        for (std::size_t k = 0; k < sl.len; ++k) p[sl.off + k] = rng.uniform(-a, a);
    };
    for (int l = 0; l < s.n_layers(); ++l) {
        fill_uniform(lay.embed[l].W, s.cond_in(l));
        fill_uniform(lay.embed[l].b, s.cond_in(l));
    }
    for (int i = 0; i < s.d_y; ++i) {
        for (int l = 0; l < s.n_layers(); ++l) {
            const auto& hs = lay.head[i][l];
            for (std::size_t k = 0; k < hs.logWz.len; ++k)
                p[hs.logWz.off + k] = rng.normal(-1.0, 0.5);
            fill_uniform(hs.Wc, s.cond_widths[l]);
            if (hs.Wy.len > 0) fill_uniform(hs.Wy, i);
            fill_uniform(hs.b, s.layer_in(l) + s.cond_widths[l] + i);
        }
    }
    for (std::size_t k = 0; k < lay.log_alpha_x.len; ++k)
        p[lay.log_alpha_x.off + k] = log_alpha_init;
    for (std::size_t k = 0; k < lay.log_alpha_y.len; ++k)
        p[lay.log_alpha_y.off + k] = log_alpha_init;
    return p;
}

/// exp of every parameter, rebuilt whenever parameters change; indexed by
/// parameter id so positive-weight rows and temperatures read straight out.
inline std::vector<double> exp_cache(std::span<const double> p) {
    std::vector<double> e(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) e[i] = std::exp(p[i]);
    return e;
}

/// Frozen feature statistics for the optional per-layer normalizer.
/// Buffers, not parameters: collected once from data, then held fixed so
/// every forward pass stays a pure function of the parameters.
struct BnStats {
    std::vector<std::vector<std::vector<double>>> mean, inv_std;  // [head][layer][feature]

    static BnStats identity(const ModelShape& s) {
        BnStats bn;
        bn.mean.resize(static_cast<std::size_t>(s.d_y));
        bn.inv_std.resize(static_cast<std::size_t>(s.d_y));
        for (int i = 0; i < s.d_y; ++i) {
            bn.mean[i].resize(static_cast<std::size_t>(s.n_layers()));
            bn.inv_std[i].resize(static_cast<std::size_t>(s.n_layers()));
            for (int l = 0; l < s.n_layers(); ++l) {
                bn.mean[i][l].assign(static_cast<std::size_t>(s.layer_out(l)), 0.0);
                bn.inv_std[i][l].assign(static_cast<std::size_t>(s.layer_out(l)), 1.0);
            }
        }
        return bn;
    }
};

// ----- evaluation engines -----
// The forward code is written once against this interface; S is double for
// plain evaluation and ad::Expr when building the training graph.

struct ValueEngine {
    using S = double;
    std::span<const double> p;
    std::span<const double> expw;

    double leaf(std::uint32_t i) const { return p[i]; }
    double exp_leaf(std::uint32_t i) const { return expw[i]; }
    double constant(double c) const { return c; }
    double tanh_s(double v) const { return std::tanh(v); }
    double affine(double x, double a, double c) const { return a * x + c; }
    double add(double a, double b) const { return a + b; }
    double linear_rows(std::uint32_t w0, std::span<const double> x, std::uint32_t b) const {
        double v = p[b];
        for (std::size_t i = 0; i < x.size(); ++i) v += p[w0 + i] * x[i];
        return v;
    }
    double dot_rows(std::uint32_t w0, std::span<const double> x) const {
        double v = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) v += p[w0 + i] * x[i];
        return v;
    }
    double pos_linear(std::uint32_t w0, std::span<const double> h, double add_v) const {
        double v = add_v;
        for (std::size_t i = 0; i < h.size(); ++i) v += expw[w0 + i] * h[i];
        return v;
    }
    double lse(std::span<const double> v, double beta) const {
        return ad::detail::lse_value(v, beta);
    }
    double nse(std::span<const double> v, double beta) const {
        return ad::detail::nse_value(v, beta);
    }
    double hard_max(std::span<const double> v) const {
        return *std::max_element(v.begin(), v.end());
    }
    double hard_min(std::span<const double> v) const {
        return *std::min_element(v.begin(), v.end());
    }
};

struct TapeEngine {
    using S = ad::Expr;
    ad::Tape* t = nullptr;
    std::span<const double> expw;

    S leaf(std::uint32_t i) const { return t->leaf(i); }
    S exp_leaf(std::uint32_t i) const { return ad::exp(t->leaf(i)); }
    S constant(double c) const { return t->constant(c); }
    S tanh_s(S v) const { return ad::tanh(v); }
    S affine(S x, double a, double c) const { return t->affine(x, a, c); }
    S add(S a, S b) const { return a + b; }
    S linear_rows(std::uint32_t w0, std::span<const S> x, std::uint32_t b) const {
        return t->linear_rows(w0, x, b);
    }
    S dot_rows(std::uint32_t w0, std::span<const S> x) const { return t->dot_rows(w0, x); }
    S pos_linear(std::uint32_t w0, std::span<const S> h, S add_v) const {
        return t->pos_linear(w0, expw.subspan(w0, h.size()), h, add_v);
    }
    S lse(std::span<const S> v, S beta) const { return t->lse(v, beta); }
    S nse(std::span<const S> v, S beta) const { return t->nse(v, beta); }
    S hard_max(std::span<const S> v) const { return t->hard_max(v); }
    S hard_min(std::span<const S> v) const { return t->hard_min(v); }
};

/// Context embedding chain: c(0) = tanh(W x_hat + b), c(l+1) = tanh(W c(l) + b).
/// Shared across heads; every component lies strictly inside (-1, 1).
template <class E, class S = typename E::S>
std::vector<std::vector<S>> embed_forward(const E& eng, const ModelLayout& lay,
                                          std::span<const S> x_hat) {
    const auto& s = lay.shape;
    std::vector<std::vector<S>> ctx(static_cast<std::size_t>(s.n_layers()));
    std::span<const S> prev = x_hat;
    for (int l = 0; l < s.n_layers(); ++l) {
        const int out = s.cond_widths[l];
        const int in = s.cond_in(l);
        ctx[l].reserve(static_cast<std::size_t>(out));
        for (int f = 0; f < out; ++f) {
            std::uint32_t w0 = lay.embed[l].W.id0() + static_cast<std::uint32_t>(f * in);
            std::uint32_t b = lay.embed[l].b.id0() + static_cast<std::uint32_t>(f);
            ctx[l].push_back(eng.tanh_s(eng.linear_rows(w0, prev, b)));
        }
        prev = ctx[l];
    }
    return ctx;
}

/// Head evaluator with context and preceding responses bound once; eval()
/// then maps a monotone input to the raw output O. The evaluations behind
/// one CDF factor (y+-delta and the two boundaries) share one binding, so
/// boundary normalization sees identical context by construction.
///
/// Not thread-safe per instance (scratch reuse); use one per thread.
template <class E>
struct BoundHead {
    using S = typename E::S;
    const E* eng = nullptr;
    const ModelLayout* lay = nullptr;
    int head = 0;
    std::vector<std::vector<S>> ctx;              // [layer][unit]
    std::vector<S> bmax, bmin;                    // per layer, soft kind
    std::vector<std::vector<S>> bn_scale, bn_shift;
    std::vector<std::vector<double>> bn_a, bn_c;  // x -> a*x + c pre-affine
    // when set, eval() appends each layer's post-normalizer features here
    mutable std::vector<std::vector<S>>* capture_features = nullptr;

    S eval(S y_mono) const {
        const auto& s = lay->shape;
        h_.assign(1, y_mono);
        for (int l = 0; l < s.n_layers(); ++l) {
            const auto& hs = lay->head[head][l];
            const int units = s.layer_units(l);
            const int in = s.layer_in(l);
            pre_.clear();
            pre_.reserve(static_cast<std::size_t>(units));
            for (int u = 0; u < units; ++u)
                pre_.push_back(eng->pos_linear(
                    hs.logWz.id0() + static_cast<std::uint32_t>(u * in),
                    std::span<const S>(h_), ctx[l][u]));
            const int out = s.layer_out(l);
            feat_.clear();
            feat_.reserve(static_cast<std::size_t>(out));
            const int K = s.layer_groups(l);
            const int G = s.layer_group_size(l);
            if (s.kind == HeadKind::mlp) {
                // plain monotone units over the same blocks: tanh then mean on
                // inner layers, mean of the affine units on the last (a linear
                // output layer with redundant parameterization)
                const bool last = l + 1 == s.n_layers();
                const double inv = 1.0 / static_cast<double>(K * G);
                for (int f = 0; f < out; ++f) {
                    S acc = last ? pre_[f * K * G] : eng->tanh_s(pre_[f * K * G]);
                    for (int u = 1; u < K * G; ++u) {
                        S v = pre_[static_cast<std::size_t>(f * K * G + u)];
                        acc = eng->add(acc, last ? v : eng->tanh_s(v));
                    }
                    feat_.push_back(eng->affine(acc, inv, 0.0));
                }
            } else {
                for (int f = 0; f < out; ++f) {
                    gv_.clear();
                    gv_.reserve(static_cast<std::size_t>(K));
                    for (int k = 0; k < K; ++k) {
                        auto grp = std::span<const S>(pre_).subspan(
                            static_cast<std::size_t>((f * K + k) * G),
                            static_cast<std::size_t>(G));
                        gv_.push_back(s.kind == HeadKind::soft ? eng->lse(grp, bmax[l])
                                                               : eng->hard_max(grp));
                    }
                    feat_.push_back(s.kind == HeadKind::soft
                                        ? eng->nse(std::span<const S>(gv_), bmin[l])
                                        : eng->hard_min(std::span<const S>(gv_)));
                }
            }
            if (s.batch_norm) {
                for (int f = 0; f < out; ++f) {
                    S g = eng->affine(feat_[f], bn_a[l][f], bn_c[l][f]);
                    feat_[f] = bn_scale[l][f] * g + bn_shift[l][f];
                }
            }
            if (capture_features) capture_features->push_back(feat_);
            h_ = feat_;
        }
        return h_[0];
    }

private:
    mutable std::vector<S> h_, pre_, gv_, feat_;
};

template <class E, class S = typename E::S>
BoundHead<E> bind_head(const E& eng, const ModelLayout& lay, int i,
                       const std::vector<std::vector<S>>& ctx_embed,
                       std::span<const S> y_hat, const BnStats* bn = nullptr) {
    const auto& s = lay.shape;
    assert(i >= 0 && i < s.d_y);
    BoundHead<E> bh;
    bh.eng = &eng;
    bh.lay = &lay;
    bh.head = i;
    bh.ctx.resize(static_cast<std::size_t>(s.n_layers()));
    auto y_prev = y_hat.first(static_cast<std::size_t>(i));  // masked dims never read
    for (int l = 0; l < s.n_layers(); ++l) {
        const auto& hs = lay.head[i][l];
        const int units = s.layer_units(l);
        const int hc = s.cond_widths[l];
        bh.ctx[l].reserve(static_cast<std::size_t>(units));
        for (int u = 0; u < units; ++u) {
            S c = eng.linear_rows(hs.Wc.id0() + static_cast<std::uint32_t>(u * hc),
                                  std::span<const S>(ctx_embed[l]),
                                  hs.b.id0() + static_cast<std::uint32_t>(u));
            if (i > 0)
                c = eng.add(c, eng.dot_rows(hs.Wy.id0() + static_cast<std::uint32_t>(u * i),
                                            y_prev));
            bh.ctx[l].push_back(c);
        }
        if (s.kind == HeadKind::soft) {
            bh.bmax.push_back(eng.exp_leaf(hs.log_bmax.id0()));
            bh.bmin.push_back(eng.exp_leaf(hs.log_bmin.id0()));
        }
        if (s.batch_norm) {
            const int out = s.layer_out(l);
            bh.bn_scale.emplace_back();
            bh.bn_shift.emplace_back();
            bh.bn_a.emplace_back();
            bh.bn_c.emplace_back();
            for (int f = 0; f < out; ++f) {
                bh.bn_scale[l].push_back(eng.exp_leaf(
                    hs.bn_logscale.id0() + static_cast<std::uint32_t>(f)));
                bh.bn_shift[l].push_back(eng.leaf(
                    hs.bn_shift.id0() + static_cast<std::uint32_t>(f)));
                double m = bn ? bn->mean[i][l][f] : 0.0;
                double is = bn ? bn->inv_std[i][l][f] : 1.0;
                bh.bn_a[l].push_back(is);
                bh.bn_c[l].push_back(-m * is);
            }
        }
    }
    return bh;
}

}  // namespace cdfirst
