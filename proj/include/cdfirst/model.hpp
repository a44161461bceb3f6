#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "cdfirst/data.hpp"
#include "cdfirst/smm.hpp"

namespace cdfirst {

struct EvalCounters {
    long long underflow = 0;  // density factors that hit zero
    long long clamped = 0;    // response components clamped into [-1,1]
};

// Substituted for -log p when a density factor underflows, so losses and
// NLL summaries stay finite while remaining obviously terrible.
inline constexpr double kUnderflowPenalty = 1e6;

/// Trained (or freshly initialized) conditional density model: masked
/// monotone heads + shared embedding + normalization stats + the
/// finite-difference step used for density recovery.
struct CondDensityModel {
    ModelLayout layout;
    std::vector<double> params;
    NormStats norm;
    BnStats bn;
    double fd_step = 5e-6;
    // echo of the settings that produced this model, for self-description
    std::vector<std::pair<std::string, std::string>> config_echo;

    std::vector<double> expw;  // exp(params), kept in sync by sync()

    int d_x() const { return layout.shape.d_x; }
    int d_y() const { return layout.shape.d_y; }

    void sync() { expw = exp_cache(params); }

    ValueEngine engine() const {
        return ValueEngine{std::span<const double>(params), std::span<const double>(expw)};
    }
};

/// Repeated conditional evaluations at one conditioning point: the context
/// embedding binds once per x, each head once per response prefix; the raw
/// outputs at the two boundaries are cached so every CDF/PDF value shares
/// identical context with its own normalizer.
class FactorEval {
public:
    FactorEval(const CondDensityModel& m, std::span<const double> x)
        : m_(&m), eng_(m.engine()) {
        ctx_ = embed_forward(eng_, m.layout, x);
    }

    /// Bind head i; y_hat_prefix must hold at least i normalized responses.
    void bind(int i, std::span<const double> y_hat_prefix) {
        head_ = bind_head(eng_, m_->layout, i, ctx_, y_hat_prefix,
                          m_->layout.shape.batch_norm ? &m_->bn : nullptr);
        o_lo_ = head_.eval(-1.0);
        o_hi_ = head_.eval(1.0);
        range_ = o_hi_ - o_lo_;
        if (!(range_ >= 1e-12))
            throw NumericError("collapsed head: raw output range " + fmt_double(range_) +
                               " at factor " + fmt_int(i));
    }

    double raw(double t) const { return head_.eval(t); }

    /// F in [0,1]; division (not a cached reciprocal) makes the boundary
    /// values exactly 0 and 1.
    double cdf(double t) const {
        double v = (head_.eval(t) - o_lo_) / range_;
        return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }

    /// Central-difference density in normalized units; nonnegative.
    double pdf(double t) const {
        double d = m_->fd_step;
        double num = head_.eval(t + d) - head_.eval(t - d);
        double v = num / (range_ * 2.0 * d);
        return v < 0.0 ? 0.0 : v;
    }

private:
    const CondDensityModel* m_;
    ValueEngine eng_;
    std::vector<std::vector<double>> ctx_;
    BoundHead<ValueEngine> head_;
    double o_lo_ = 0.0, o_hi_ = 0.0, range_ = 0.0;
};

inline double conditional_cdf(const CondDensityModel& m, std::span<const double> x,
                              std::span<const double> y_hat, int i) {
    FactorEval fe(m, x);
    fe.bind(i, y_hat);
    return fe.cdf(y_hat[i]);
}

inline double conditional_pdf(const CondDensityModel& m, std::span<const double> x,
                              std::span<const double> y_hat, int i) {
    FactorEval fe(m, x);
    fe.bind(i, y_hat);
    return fe.pdf(y_hat[i]);
}

/// log p(y | x) in original units: sum of normalized log factors plus the
/// change-of-variables terms log c_j. Returns -inf when a factor underflows
/// to zero; out-of-range responses are clamped into [-1,1] and counted.
inline double joint_log_density(const CondDensityModel& m, std::span<const double> x,
                                std::span<const double> y, EvalCounters* counters = nullptr) {
    const int dy = m.d_y();
    std::vector<double> y_hat(dy);
    for (int j = 0; j < dy; ++j) {
        double t = m.norm.normalize(y[j], j);
        if (t < -1.0 || t > 1.0) {
            t = t < -1.0 ? -1.0 : 1.0;
            if (counters) counters->clamped += 1;
        }
        y_hat[j] = t;
    }
    FactorEval fe(m, x);
    double lp = m.norm.log_jacobian();
    for (int i = 0; i < dy; ++i) {
        fe.bind(i, y_hat);
        double p = fe.pdf(y_hat[i]);
        if (!(p > 0.0)) {
            if (counters) counters->underflow += 1;
            return -std::numeric_limits<double>::infinity();
        }
        lp += std::log(p);
    }
    return lp;
}

/// Invert F_i by bisection on [-1,1]; the bracket is guaranteed because
/// F(-1) = 0 < u < 1 = F(1) and F is continuous and increasing.
inline double cdf_inverse(const CondDensityModel& m, std::span<const double> x,
                          std::span<const double> y_prev, double u, double tol = 1e-9) {
    FactorEval fe(m, x);
    fe.bind(static_cast<int>(y_prev.size()), y_prev);
    double lo = -1.0, hi = 1.0;
    while (hi - lo > tol) {
        double mid = 0.5 * (lo + hi);
        double f = fe.cdf(mid);
        if (std::fabs(f - u) <= tol) return mid;
        (f < u ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

/// n response vectors in original units via sequential inverse-CDF sampling.
inline std::vector<double> sample(const CondDensityModel& m, std::span<const double> x,
                                  std::size_t count, Rng& rng, double tol = 1e-9) {
    const int dy = m.d_y();
    std::vector<double> out;
    out.reserve(count * dy);
    FactorEval fe(m, x);
    std::vector<double> y_hat(dy);
    for (std::size_t s = 0; s < count; ++s) {
        for (int i = 0; i < dy; ++i) {
            double u = rng.uniform();
            u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
            fe.bind(i, y_hat);
            double lo = -1.0, hi = 1.0;
            while (hi - lo > tol) {
                double mid = 0.5 * (lo + hi);
                double f = fe.cdf(mid);
                if (std::fabs(f - u) <= tol) {
                    lo = hi = mid;
                    break;
                }
                (f < u ? lo : hi) = mid;
            }
            y_hat[i] = 0.5 * (lo + hi);
        }
        for (int i = 0; i < dy; ++i) out.push_back(m.norm.denormalize(y_hat[i], i));
    }
    return out;
}

/// Fresh model with randomly initialized parameters.
inline CondDensityModel make_model(const ModelShape& shape, const NormStats& norm, Rng& rng,
                                   double log_alpha_init = -2.0, double fd_step = 5e-6) {
    CondDensityModel m;
    m.layout = ModelLayout::build(shape);
    m.params = init_params(m.layout, rng, log_alpha_init);
    m.norm = norm;
    m.bn = BnStats::identity(shape);
    m.fd_step = fd_step;
    m.sync();
    return m;
}

// Mean negative log density over a dataset, original units.  Rows whose
// density underflows contribute the same large penalty used during training
// so the mean stays finite; counters record how often that happened.
inline double dataset_nll(const CondDensityModel& m, const Dataset& ds,
                          EvalCounters* counters = nullptr) {
    if (ds.n() == 0) throw DataError("dataset_nll: empty dataset");
    EvalCounters local;
    EvalCounters& c = counters ? *counters : local;
    double sum = 0.0;
    for (std::size_t r = 0; r < ds.n(); ++r) {
        double lp = joint_log_density(m, ds.x_row(r), ds.y_row(r), &c);
        sum += std::isinf(lp) ? kUnderflowPenalty : -lp;
    }
    return sum / static_cast<double>(ds.n());
}

}  // namespace cdfirst
