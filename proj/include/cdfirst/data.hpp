#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cdfirst/common.hpp"
#include "cdfirst/rng.hpp"

namespace cdfirst {

inline constexpr double kPi = 3.14159265358979323846;

/// Response normalization: psi(y) = 2 (y - ymin)/(ymax - ymin) - 1 maps the
/// training range onto [-1, 1]; the per-dimension Jacobian factor
/// c_j = 2/(ymax_j - ymin_j) converts normalized densities back to
/// original units.
struct NormStats {
    std::vector<double> y_min, y_max;

    int dims() const { return static_cast<int>(y_min.size()); }
    double jacobian_factor(int j) const { return 2.0 / (y_max[j] - y_min[j]); }
    double log_jacobian() const {
        double s = 0.0;
        for (int j = 0; j < dims(); ++j) s += std::log(jacobian_factor(j));
        return s;
    }
    double normalize(double y, int j) const {
        return 2.0 * (y - y_min[j]) / (y_max[j] - y_min[j]) - 1.0;
    }
    double denormalize(double t, int j) const {
        return y_min[j] + (t + 1.0) * 0.5 * (y_max[j] - y_min[j]);
    }
};

struct Dataset {
    int d_x = 0, d_y = 0;
    std::vector<double> x, y;  // row-major, n() by d_x / d_y
    std::string provenance;

    std::size_t n() const { return d_x > 0 ? x.size() / d_x : 0; }
    std::span<const double> x_row(std::size_t i) const {
        return {x.data() + i * d_x, static_cast<std::size_t>(d_x)};
    }
    std::span<const double> y_row(std::size_t i) const {
        return {y.data() + i * d_y, static_cast<std::size_t>(d_y)};
    }
};

inline NormStats compute_norm_stats(const Dataset& ds) {
    if (ds.n() < 2) throw DataError("norm stats: need at least 2 rows");
    NormStats st;
    st.y_min.assign(ds.d_y, 0.0);
    st.y_max.assign(ds.d_y, 0.0);
    for (int j = 0; j < ds.d_y; ++j) {
        double lo = ds.y[j], hi = ds.y[j];
        for (std::size_t i = 1; i < ds.n(); ++i) {
            double v = ds.y[i * ds.d_y + j];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (!(hi > lo))
            throw DataError("norm stats: response dimension " + fmt_int(j) +
                            " is constant; range is degenerate");
        st.y_min[j] = lo;
        st.y_max[j] = hi;
    }
    return st;
}

// ----- toy tasks (all have d_x = 1 with x ~ U(-1,1), d_y = 2) -----

enum class ToyKind { squares, half_gaussian, gaussian_stick, elastic_ring };

inline const char* toy_name(ToyKind k) {
    switch (k) {
        case ToyKind::squares: return "squares";
        case ToyKind::half_gaussian: return "half-gaussian";
        case ToyKind::gaussian_stick: return "gaussian-stick";
        case ToyKind::elastic_ring: return "elastic-ring";
    }
    return "?";
}

inline ToyKind toy_from_name(const std::string& name) {
    for (ToyKind k : {ToyKind::squares, ToyKind::half_gaussian, ToyKind::gaussian_stick,
                      ToyKind::elastic_ring})
        if (name == toy_name(k)) return k;
    throw ConfigError("unknown toy task '" + name +
                      "' (expected squares, half-gaussian, gaussian-stick, elastic-ring)");
}

namespace detail {

inline double std_normal_pdf(double t) {
    return std::exp(-0.5 * t * t) / std::sqrt(2.0 * kPi);
}

// Rotation by angle th of (u, v).
inline void rotate(double u, double v, double th, double& o1, double& o2) {
    double c = std::cos(th), s = std::sin(th);
    o1 = u * c - v * s;
    o2 = u * s + v * c;
}

}  // namespace detail

/// Draw one response for the task at conditioning value x.
inline void toy_sample(ToyKind kind, double x, Rng& rng, double& y1, double& y2) {
    switch (kind) {
        case ToyKind::squares: {
            // equal mixture of uniforms on [-5+x,-1+x]^2 and [1-x,5-x]^2
            bool low = rng.bernoulli(0.5);
            double lo = low ? -5.0 + x : 1.0 - x;
            double hi = low ? -1.0 + x : 5.0 - x;
            y1 = rng.uniform(lo, hi);
            y2 = rng.uniform(lo, hi);
            return;
        }
        case ToyKind::half_gaussian: {
            // (|a|, b), a,b ~ N(0, sd 2), rotated by x*pi
            double a = rng.normal(0.0, 2.0);
            double b = rng.normal(0.0, 2.0);
            detail::rotate(std::fabs(a), b, x * kPi, y1, y2);
            return;
        }
        case ToyKind::gaussian_stick: {
            // (a, b), a ~ N(0,1), b ~ U(-6,6), rotated by c*pi, c = (-0.75+x)/2
            double a = rng.normal(0.0, 1.0);
            double b = rng.uniform(-6.0, 6.0);
            detail::rotate(a, b, (-0.75 + x) / 2.0 * kPi, y1, y2);
            return;
        }
        case ToyKind::elastic_ring: {
            // y = ((4+2x+d) cos th, (4-2x+d) sin th), d ~ U(0,2), th ~ U(0,2pi)
            double d = rng.uniform(0.0, 2.0);
            double th = rng.uniform(0.0, 2.0 * kPi);
            y1 = (4.0 + 2.0 * x + d) * std::cos(th);
            y2 = (4.0 - 2.0 * x + d) * std::sin(th);
            return;
        }
    }
}

/// Analytic conditional density p(y | x) for the task.
inline double toy_true_density(ToyKind kind, double x, double y1, double y2) {
    switch (kind) {
        case ToyKind::squares: {
            double p = 0.0;
            if (y1 >= -5.0 + x && y1 <= -1.0 + x && y2 >= -5.0 + x && y2 <= -1.0 + x)
                p += 0.5 / 16.0;
            if (y1 >= 1.0 - x && y1 <= 5.0 - x && y2 >= 1.0 - x && y2 <= 5.0 - x)
                p += 0.5 / 16.0;
            return p;
        }
        case ToyKind::half_gaussian: {
            // un-rotate, then half-normal(sd 2) x normal(sd 2); |det| = 1
            double u, v;
            detail::rotate(y1, y2, -x * kPi, u, v);
            if (u < 0.0) return 0.0;
            return detail::std_normal_pdf(u / 2.0) * detail::std_normal_pdf(v / 2.0) * 0.5;
        }
        case ToyKind::gaussian_stick: {
            double u, v;
            detail::rotate(y1, y2, -(-0.75 + x) / 2.0 * kPi, u, v);
            if (v < -6.0 || v > 6.0) return 0.0;
            return detail::std_normal_pdf(u) / 12.0;
        }
        case ToyKind::elastic_ring: {
            // Invert y1 = (A+d) cos th, y2 = (B+d) sin th for d in [0,2]:
            // g(d) = (y1/(A+d))^2 + (y2/(B+d))^2 - 1 is strictly decreasing.
            const double A = 4.0 + 2.0 * x;
            const double B = 4.0 - 2.0 * x;
            auto g = [&](double d) {
                double c = y1 / (A + d), s = y2 / (B + d);
                return c * c + s * s - 1.0;
            };
            if (g(0.0) < 0.0 || g(2.0) > 0.0) return 0.0;  // off the band
            double lo = 0.0, hi = 2.0;
            for (int it = 0; it < 60; ++it) {
                double mid = 0.5 * (lo + hi);
                (g(mid) >= 0.0 ? lo : hi) = mid;
            }
            double d = 0.5 * (lo + hi);
            double c = y1 / (A + d), s = y2 / (B + d);
            // Jacobian of (d, th) -> y is R2 cos^2 th + R1 sin^2 th
            double den = (B + d) * (c * c) + (A + d) * (s * s);
            return (1.0 / (4.0 * kPi)) / den;
        }
    }
    return 0.0;
}

/// Square bounding box {y1lo, y1hi, y2lo, y2hi} covering the task's support
/// for every x in [-1,1]; Gaussian axes truncated at 3 scale units.
inline std::array<double, 4> toy_bbox(ToyKind kind) {
    switch (kind) {
        case ToyKind::squares: return {-6.0, 6.0, -6.0, 6.0};
        case ToyKind::half_gaussian: return {-8.5, 8.5, -8.5, 8.5};
        case ToyKind::gaussian_stick: return {-6.75, 6.75, -6.75, 6.75};
        case ToyKind::elastic_ring: return {-8.0, 8.0, -8.0, 8.0};
    }
    return {0, 0, 0, 0};
}

/// Mean of the true density over a rectangle, m x m midpoint subsamples.
/// Used by histogram validation, where bin counts estimate cell averages,
/// not point values.
inline double toy_cell_average(ToyKind kind, double x, double y1lo, double y1hi,
                               double y2lo, double y2hi, int m = 16) {
    double s = 0.0;
    for (int a = 0; a < m; ++a) {
        double y1 = y1lo + (a + 0.5) * (y1hi - y1lo) / m;
        for (int b = 0; b < m; ++b) {
            double y2 = y2lo + (b + 0.5) * (y2hi - y2lo) / m;
            s += toy_true_density(kind, x, y1, y2);
        }
    }
    return s / (static_cast<double>(m) * m);
}

/// Dataset of n rows: x ~ U(-1,1), y ~ task(x). Deterministic in the rng.
inline Dataset sample_toy(ToyKind kind, std::size_t n, Rng& rng) {
    Dataset ds;
    ds.d_x = 1;
    ds.d_y = 2;
    ds.provenance = toy_name(kind);
    ds.x.reserve(n);
    ds.y.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = rng.uniform(-1.0, 1.0);
        double y1, y2;
        toy_sample(kind, x, rng, y1, y2);
        ds.x.push_back(x);
        ds.y.push_back(y1);
        ds.y.push_back(y2);
    }
    return ds;
}

// ----- CSV interface: header x0..x{dx-1},y0..y{dy-1}, one row per sample -----

inline Dataset load_csv(const std::string& path, int d_x, int d_y) {
    if (d_x < 1 || d_y < 1) throw ConfigError("load_csv: dx and dy must be >= 1");
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    Dataset ds;
    ds.d_x = d_x;
    ds.d_y = d_y;
    ds.provenance = path;

    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "': empty file");
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : s) {
            if (ch == ',') {
                out.push_back(cur);
                cur.clear();
            } else if (ch != '\r') {
                cur += ch;
            }
        }
        out.push_back(cur);
        return out;
    };
    auto header = split(line);
    const std::size_t want = static_cast<std::size_t>(d_x) + d_y;
    if (header.size() != want)
        throw DataError("'" + path + "': header has " + fmt_int(header.size()) +
                        " columns, expected " + fmt_int(want));

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cells = split(line);
        if (cells.size() != want)
            throw DataError("'" + path + "' line " + fmt_int(lineno) + ": got " +
                            fmt_int(cells.size()) + " columns, expected " + fmt_int(want));
        for (std::size_t c = 0; c < want; ++c) {
            double v;
            try {
                std::size_t used = 0;
                v = std::stod(cells[c], &used);
                if (used != cells[c].size()) throw std::invalid_argument("trailing junk");
            } catch (const std::exception&) {
                throw DataError("'" + path + "' line " + fmt_int(lineno) +
                                ": cannot parse '" + cells[c] + "' as a number");
            }
            if (!std::isfinite(v))
                throw DataError("'" + path + "' line " + fmt_int(lineno) +
                                ": non-finite value in column " + fmt_int(c));
            (c < static_cast<std::size_t>(d_x) ? ds.x : ds.y).push_back(v);
        }
    }
    if (ds.n() == 0) throw DataError("'" + path + "': no data rows");
    return ds;
}

inline void write_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (int j = 0; j < ds.d_x; ++j) out << (j ? ",x" : "x") << j;
    for (int j = 0; j < ds.d_y; ++j) out << ",y" << j;
    out << "\n";
    for (std::size_t i = 0; i < ds.n(); ++i) {
        for (int j = 0; j < ds.d_x; ++j) out << (j ? "," : "") << fmt_double(ds.x[i * ds.d_x + j]);
        for (int j = 0; j < ds.d_y; ++j) out << "," << fmt_double(ds.y[i * ds.d_y + j]);
        out << "\n";
    }
    if (!out) throw DataError("short write to '" + path + "'");
}

/// Sidecar metadata next to an exported toy CSV.
inline void write_toy_meta(const std::string& csv_path, const std::string& task,
                           std::uint64_t seed, std::size_t n) {
    std::ofstream out(csv_path + ".meta", std::ios::binary);
    if (!out) throw DataError("cannot write '" + csv_path + ".meta'");
    out << "task=" << task << "\nseed=" << fmt_int(static_cast<long long>(seed))
        << "\nn=" << fmt_int(static_cast<long long>(n)) << "\n";
}

/// Deterministic head/tail split: first n_train rows train, rest test.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t n_train) {
    if (n_train == 0 || n_train >= ds.n())
        throw DataError("split: n_train must be in (0, n)");
    Dataset tr, te;
    tr.d_x = te.d_x = ds.d_x;
    tr.d_y = te.d_y = ds.d_y;
    tr.provenance = ds.provenance + "[train]";
    te.provenance = ds.provenance + "[test]";
    tr.x.assign(ds.x.begin(), ds.x.begin() + n_train * ds.d_x);
    tr.y.assign(ds.y.begin(), ds.y.begin() + n_train * ds.d_y);
    te.x.assign(ds.x.begin() + n_train * ds.d_x, ds.x.end());
    te.y.assign(ds.y.begin() + n_train * ds.d_y, ds.y.end());
    return {tr, te};
}

}  // namespace cdfirst
