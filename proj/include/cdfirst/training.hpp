#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cdfirst/model.hpp"

namespace cdfirst {

struct EarlyStop {
    std::string metric = "auto";  // auto | sse | nll
    int patience = 50;            // evaluations without improvement before stopping
    int eval_every = 5;           // epochs between evaluations
};

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 128;
    int max_epochs = 2000;
    double beta_x = 0.005;
    double beta_y = 0.005;
    double delta = 5e-6;
    double log_alpha_init = -2.0;
    std::string variant = "full";  // full | no-noise | hard-minmax | mono-mlp
    bool perturb_boundaries = false;
    EarlyStop early_stop;
    std::uint64_t seed = 1;
    int shards = 1;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
        if (beta_x < 0.0 || beta_y < 0.0) throw ConfigError("noise penalties must be >= 0");
        if (!(delta > 0.0)) throw ConfigError("delta must be positive");
        if (variant != "full" && variant != "no-noise" && variant != "hard-minmax" &&
            variant != "mono-mlp")
            throw ConfigError("unknown variant: " + variant);
        if (early_stop.metric != "auto" && early_stop.metric != "sse" &&
            early_stop.metric != "nll")
            throw ConfigError("unknown early-stop metric: " + early_stop.metric);
        if (early_stop.patience < 1) throw ConfigError("patience must be at least 1");
        if (early_stop.eval_every < 1) throw ConfigError("eval_every must be at least 1");
        if (shards < 1) throw ConfigError("shards must be at least 1");
    }

    // hard-minmax and mono-mlp swap the head architecture but keep the
    // noise channel; no-noise keeps the soft heads and drops the noise.
    HeadKind head_kind() const {
        if (variant == "hard-minmax") return HeadKind::hard;
        if (variant == "mono-mlp") return HeadKind::mlp;
        return HeadKind::soft;
    }
    bool noise_enabled() const { return variant != "no-noise"; }
    bool kl_enabled() const { return variant != "no-noise"; }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<double> m, v;
    long long t = 0;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grad, AdamState& st,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    st.t += 1;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        params[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
    }
}

// ---------------------------------------------------------------------------
// Loss

// Closed form of the noise-scale penalty: beta * sum_j 0.5 (a^2 - 1 - 2 log a)
// with a = exp(log_alpha_j).  Zero exactly at a = 1, strictly positive elsewhere.
inline double noise_penalty_value(std::span<const double> params, Slice log_alpha,
                                  double beta) {
    double s = 0.0;
    for (std::size_t j = 0; j < log_alpha.len; ++j) {
        const double la = params[log_alpha.off + j];
        s += 0.5 * (std::exp(2.0 * la) - 1.0 - 2.0 * la);
    }
    return beta * s;
}

namespace detail {

inline ad::Expr noise_penalty_expr(ad::Tape& t, Slice log_alpha, double beta) {
    ad::Expr acc = t.constant(0.0);
    for (std::size_t j = 0; j < log_alpha.len; ++j) {
        ad::Expr la = t.leaf(log_alpha.id0() + static_cast<std::uint32_t>(j));
        ad::Expr term = ad::exp(la * 2.0) - 1.0 - la * 2.0;
        acc = acc + term * 0.5;
    }
    return acc * beta;
}

}  // namespace detail

struct BatchLossOpts {
    double delta = 5e-6;
    bool noise = true;
    bool kl = true;
    bool perturb_boundaries = false;
    double beta_x = 0.005;
    double beta_y = 0.005;
};

struct StepStats {
    double loss = 0.0;      // nll + kl, the optimized quantity
    double nll = 0.0;       // mean per-sample NLL in original units
    double kl = 0.0;        // noise-scale penalty
    long long underflow = 0;
};

// One differentiable pass over a batch.  xs_all/ys_all are the full row-major
// feature and normalized-response matrices; batch_idx selects rows.  eps_x and
// eps_y hold one pre-drawn standard-normal vector per batch row (ignored when
// opts.noise is false).  log_c holds per-dimension log Jacobian factors of the
// response normalization.  When grad is non-null the parameter gradient of the
// returned loss is accumulated into it (caller zeroes).
inline StepStats batch_pass(ad::Tape& tape, const ModelLayout& lay, const BnStats& bn,
                            std::span<const double> params, std::span<const double> xs_all,
                            std::span<const double> ys_all,
                            std::span<const std::size_t> batch_idx,
                            std::span<const double> eps_x, std::span<const double> eps_y,
                            std::span<const double> log_c, const BatchLossOpts& opts,
                            std::vector<double>* grad) {
    const auto& s = lay.shape;
    const int dx = s.d_x;
    const int dy = s.d_y;
    const double inv_b = 1.0 / static_cast<double>(batch_idx.size());
    const std::vector<double> expw = exp_cache(params);

    tape.bind_params(params);
    TapeEngine eng{&tape, expw};
    const BnStats* bnp = s.batch_norm ? &bn : nullptr;

    StepStats st;
    std::vector<ad::Expr> xh(dx);
    std::vector<ad::Expr> yh(dy);
    std::vector<ad::Expr> yoff(dy);
    std::vector<ad::Expr> terms;
    terms.reserve(dy);

    for (std::size_t b = 0; b < batch_idx.size(); ++b) {
        tape.reset();
        const std::size_t r = batch_idx[b];
        const double* x = xs_all.data() + r * dx;
        const double* y = ys_all.data() + r * dy;

        if (opts.noise) {
            for (int j = 0; j < dx; ++j) {
                ad::Expr a = eng.exp_leaf(lay.log_alpha_x.id0() + static_cast<std::uint32_t>(j));
                xh[j] = a * eps_x[b * dx + j] + x[j];
            }
            // each response gets one noise node per sample, shared by every
            // factor evaluation below so the perturbed prefix is consistent
            for (int i = 0; i < dy; ++i) {
                ad::Expr a = eng.exp_leaf(lay.log_alpha_y.id0() + static_cast<std::uint32_t>(i));
                yoff[i] = a * eps_y[b * dy + i];
                yh[i] = yoff[i] + y[i];
            }
        } else {
            for (int j = 0; j < dx; ++j) xh[j] = eng.constant(x[j]);
            for (int i = 0; i < dy; ++i) yh[i] = eng.constant(y[i]);
        }

        auto ctx = embed_forward(eng, lay, std::span<const ad::Expr>(xh));
        double sample_const = 0.0;
        terms.clear();
        for (int i = 0; i < dy; ++i) {
            auto bh = bind_head(eng, lay, i, ctx, std::span<const ad::Expr>(yh), bnp);
            ad::Expr up = bh.eval(yh[i] + opts.delta);
            ad::Expr dn = bh.eval(yh[i] - opts.delta);
            ad::Expr lo, hi;
            if (opts.perturb_boundaries && opts.noise) {
                // reuse the sample's own noise shift so ordering vs yh is kept
                lo = bh.eval(yoff[i] + (-1.0));
                hi = bh.eval(yoff[i] + 1.0);
            } else {
                lo = bh.eval(eng.constant(-1.0));
                hi = bh.eval(eng.constant(1.0));
            }
            ad::Expr diff = up - dn;
            ad::Expr range = hi - lo;
            if (!(tape.value(diff) > 0.0) || !(tape.value(range) > 0.0)) {
                st.underflow += 1;
                sample_const += kUnderflowPenalty;
                continue;
            }
            // -log p_i = log(range) - log(diff) + log(2 delta) - log(c_i)
            terms.push_back(ad::log(range) - ad::log(diff));
            sample_const += std::log(2.0 * opts.delta) - log_c[i];
        }

        double sample_loss = sample_const;
        if (!terms.empty()) {
            ad::Expr acc = terms[0];
            for (std::size_t k = 1; k < terms.size(); ++k) acc = acc + terms[k];
            sample_loss += tape.value(acc);
            if (grad) {
                tape.backward(acc);
                tape.accumulate_leaf_grads(*grad, inv_b);
            }
        }
        st.nll += sample_loss * inv_b;
    }

    if (opts.kl) {
        tape.reset();
        ad::Expr kx = detail::noise_penalty_expr(tape, lay.log_alpha_x, opts.beta_x);
        ad::Expr ky = detail::noise_penalty_expr(tape, lay.log_alpha_y, opts.beta_y);
        ad::Expr k = kx + ky;
        st.kl = tape.value(k);
        if (grad) {
            tape.backward(k);
            tape.accumulate_leaf_grads(*grad, 1.0);
        }
    }
    st.loss = st.nll + st.kl;
    return st;
}

// ---------------------------------------------------------------------------
// Frozen feature normalizer statistics

// Mean and inverse stddev of every layer's post-extremum features over the
// training set, evaluated once at the initial parameters with the normalizer
// disabled.  The affine stays fixed afterwards; only scale/shift train.
inline BnStats collect_bn_stats(const ModelLayout& lay, std::span<const double> params,
                                std::span<const double> xs, std::span<const double> ys,
                                std::size_t n) {
    const auto& s = lay.shape;
    BnStats stats = BnStats::identity(s);
    if (!s.batch_norm || n == 0) return stats;
    const std::vector<double> expw = exp_cache(params);
    ValueEngine eng{params, expw};

    auto sum = BnStats::identity(s).mean;  // zero-filled [head][layer][feature]
    auto sq = sum;
    std::vector<std::vector<double>> feats;
    for (std::size_t r = 0; r < n; ++r) {
        std::span<const double> x(xs.data() + r * s.d_x, static_cast<std::size_t>(s.d_x));
        std::span<const double> y(ys.data() + r * s.d_y, static_cast<std::size_t>(s.d_y));
        auto ctx = embed_forward(eng, lay, x);
        for (int i = 0; i < s.d_y; ++i) {
            auto bh = bind_head(eng, lay, i, ctx, y, nullptr);
            feats.clear();
            bh.capture_features = &feats;
            bh.eval(y[i]);
            for (int l = 0; l < s.n_layers(); ++l)
                for (int f = 0; f < s.layer_out(l); ++f) {
                    sum[i][l][f] += feats[l][f];
                    sq[i][l][f] += feats[l][f] * feats[l][f];
                }
        }
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    for (int i = 0; i < s.d_y; ++i)
        for (int l = 0; l < s.n_layers(); ++l)
            for (int f = 0; f < s.layer_out(l); ++f) {
                const double m = sum[i][l][f] * inv_n;
                const double v = sq[i][l][f] * inv_n - m * m;
                stats.mean[i][l][f] = m;
                stats.inv_std[i][l][f] = 1.0 / std::sqrt(std::max(v, 0.0) + 1e-5);
            }
    return stats;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    CondDensityModel model;  // parameters of the best evaluation
    std::vector<std::string> log;
    double best_metric = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int epochs_run = 0;
    long long underflow = 0;
};

using MetricFn = std::function<double(const CondDensityModel&)>;

namespace detail {

inline double slice_norm(std::span<const double> p, Slice sl) {
    double s = 0.0;
    for (std::size_t j = 0; j < sl.len; ++j) s += p[sl.off + j] * p[sl.off + j];
    return std::sqrt(s);
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
        if (j >= i) j = i - 1;
        std::swap(idx[i - 1], idx[j]);
    }
}

}  // namespace detail

// Penalized maximum-likelihood fit.  The response normalization comes from the
// training split; the model handed back carries the parameters of the best
// evaluation under the early-stopping metric (`sse` needs metric_fn, `nll`
// scores the test split, `auto` picks sse when a metric_fn is given).
// Deterministic for a fixed config: one generator seeds initialization,
// shuffling, and noise in a fixed draw order.
inline TrainResult train(const Dataset& train_ds, const Dataset& test_ds,
                         const TrainConfig& cfg, ModelShape shape,
                         const MetricFn& metric_fn = nullptr) {
    cfg.validate();
    shape.kind = cfg.head_kind();
    shape.validate();
    if (shape.d_x != train_ds.d_x || shape.d_y != train_ds.d_y)
        throw ConfigError("model shape does not match dataset dimensions");
    if (train_ds.n() == 0) throw DataError("train: empty training split");

    std::string metric_name = cfg.early_stop.metric;
    if (metric_name == "auto") metric_name = metric_fn ? "sse" : "nll";
    if (metric_name == "sse" && !metric_fn)
        throw ConfigError("early-stop metric sse requires an evaluation callback");
    if (metric_name == "nll" && test_ds.n() == 0)
        throw ConfigError("early-stop metric nll requires a nonempty test split");

    const NormStats norm = compute_norm_stats(train_ds);
    Rng rng(cfg.seed);
    CondDensityModel model = make_model(shape, norm, rng, cfg.log_alpha_init, cfg.delta);

    const std::size_t n = train_ds.n();
    const auto dx = static_cast<std::size_t>(shape.d_x);
    const auto dy = static_cast<std::size_t>(shape.d_y);
    std::vector<double> ys_norm(n * dy);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < dy; ++i)
            ys_norm[r * dy + i] = norm.normalize(train_ds.y_row(r)[i], static_cast<int>(i));

    if (shape.batch_norm) {
        model.bn = collect_bn_stats(model.layout, model.params, train_ds.x, ys_norm, n);
        model.sync();
    }

    std::vector<double> log_c(dy);
    for (std::size_t i = 0; i < dy; ++i)
        log_c[i] = std::log(norm.jacobian_factor(static_cast<int>(i)));

    BatchLossOpts opts;
    opts.delta = cfg.delta;
    opts.noise = cfg.noise_enabled();
    opts.kl = cfg.kl_enabled();
    opts.perturb_boundaries = cfg.perturb_boundaries;
    opts.beta_x = cfg.beta_x;
    opts.beta_y = cfg.beta_y;

    ad::Tape tape;
    AdamState adam(model.params.size());
    std::vector<double> grad(model.params.size(), 0.0);
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < n; ++r) order[r] = r;
    std::vector<double> eps_x, eps_y;

    TrainResult res;
    res.model = model;
    std::vector<double> best_params = model.params;
    int strikes = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        detail::shuffle_indices(order, rng);
        double ep_loss = 0.0, ep_nll = 0.0, ep_kl = 0.0;
        std::size_t nb = 0;
        for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t bsz = std::min(static_cast<std::size_t>(cfg.batch_size), n - at);
            std::span<const std::size_t> batch(order.data() + at, bsz);
            if (opts.noise) {
                eps_x.resize(bsz * dx);
                eps_y.resize(bsz * dy);
                for (double& e : eps_x) e = rng.normal();
                for (double& e : eps_y) e = rng.normal();
            }
            std::fill(grad.begin(), grad.end(), 0.0);
            StepStats st = batch_pass(tape, model.layout, model.bn, model.params,
                                      train_ds.x, ys_norm, batch, eps_x, eps_y, log_c, opts,
                                      &grad);
            if (!finite(st.loss))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   " (|alpha_x|=" +
                                   fmt_double(detail::slice_norm(model.params,
                                                                 model.layout.log_alpha_x)) +
                                   ", underflow=" + std::to_string(st.underflow) + ")");
            adam_step(model.params, grad, adam, cfg.learning_rate);
            model.sync();
            res.underflow += st.underflow;
            ep_loss += st.loss;
            ep_nll += st.nll;
            ep_kl += st.kl;
            nb += 1;
        }
        ep_loss /= static_cast<double>(nb);
        ep_nll /= static_cast<double>(nb);
        ep_kl /= static_cast<double>(nb);

        if (epoch % cfg.early_stop.eval_every == 0 || epoch == cfg.max_epochs) {
            const double metric =
                metric_name == "sse" ? metric_fn(model) : dataset_nll(model, test_ds);
            if (!finite(metric))
                throw NumericError("non-finite early-stop metric at epoch " +
                                   std::to_string(epoch));
            res.log.push_back(
                "epoch=" + std::to_string(epoch) + " train_loss=" + fmt_double(ep_loss) +
                " nll=" + fmt_double(ep_nll) + " kl=" + fmt_double(ep_kl) +
                " eval_metric=" + fmt_double(metric) +
                " alpha_x=" + fmt_double(detail::slice_norm(model.params, model.layout.log_alpha_x)) +
                " alpha_y=" + fmt_double(detail::slice_norm(model.params, model.layout.log_alpha_y)) +
                " underflow=" + std::to_string(res.underflow));
            if (metric < res.best_metric) {
                res.best_metric = metric;
                res.best_epoch = epoch;
                best_params = model.params;
                strikes = 0;
            } else {
                strikes += 1;
            }
            res.epochs_run = epoch;
            if (strikes >= cfg.early_stop.patience) break;
        }
        res.epochs_run = epoch;
    }

    model.params = best_params;
    model.sync();
    res.model = std::move(model);
    return res;
}

}  // namespace cdfirst
