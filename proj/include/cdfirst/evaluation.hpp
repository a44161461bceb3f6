#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdfirst/training.hpp"

namespace cdfirst {

struct GridAxis {
    double lo = 0.0, hi = 0.0;
    int count = 0;

    double at(int j) const {
        return lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(count - 1);
    }
};

struct GridSpec {
    std::vector<GridAxis> axes;    // one per response dimension
    std::vector<double> x_values;  // conditioning points (scalar feature tasks)

    void validate() const {
        if (axes.empty()) throw ConfigError("grid: need at least one axis");
        for (const auto& a : axes) {
            if (a.count < 2) throw ConfigError("grid: axis count must be at least 2");
            if (!(a.hi > a.lo)) throw ConfigError("grid: axis needs hi > lo");
        }
    }
};

// 50x50 evaluation grid over the task's support bounding box, padded by 5%
// of the range on each side (10% total growth).  Every SSE figure in this
// codebase is tied to this one convention.
inline GridSpec default_sse_grid(ToyKind task, std::vector<double> x_values,
                                 int count = 50) {
    auto bb = toy_bbox(task);
    GridSpec g;
    for (int d = 0; d < 2; ++d) {
        double lo = bb[static_cast<std::size_t>(2 * d)];
        double hi = bb[static_cast<std::size_t>(2 * d + 1)];
        double pad = 0.05 * (hi - lo);
        g.axes.push_back({lo - pad, hi + pad, count});
    }
    g.x_values = std::move(x_values);
    return g;
}

struct EvalReport {
    std::string metric;
    std::vector<std::pair<std::string, double>> entries;  // per-condition values
    double mean = 0.0;
    long long underflow = 0, clamped = 0;
    std::vector<std::pair<std::string, std::string>> config_echo;
    std::vector<std::pair<double, double>> curve;  // (nominal, empirical) pairs
    double wall_time_sec = 0.0;  // stderr-only; never serialized (reports must
                                 // be byte-identical across reruns)

    void finalize() {
        mean = 0.0;
        for (const auto& e : entries) mean += e.second;
        if (!entries.empty()) mean /= static_cast<double>(entries.size());
    }
};

// Key-value lines, one per datum.  Entry labels use ':' internally so the
// first '=' always splits key from value.
inline void write_report(const EvalReport& r, const std::string& path) {
    std::string out = "metric=" + r.metric + "\n";
    for (const auto& [k, v] : r.config_echo) out += k + "=" + v + "\n";
    for (const auto& [label, v] : r.entries) out += label + "=" + fmt_double(v) + "\n";
    out += "mean=" + fmt_double(r.mean) + "\n";
    out += "underflow=" + std::to_string(r.underflow) + "\n";
    out += "clamped=" + std::to_string(r.clamped) + "\n";
    for (const auto& [q, c] : r.curve)
        out += "curve:" + fmt_double(q) + "=" + fmt_double(c) + "\n";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open report file: " + path);
    f << out;
    if (!f) throw DataError("failed writing report file: " + path);
}

// "sse_elastic-ring_full_d5e-06_s7.txt" style; every axis that
// distinguishes runs lands in the name.
inline std::string report_filename(const std::string& metric, const std::string& task,
                                   const std::string& variant, double delta,
                                   std::uint64_t seed) {
    char d[32];
    std::snprintf(d, sizeof d, "%g", delta);
    return metric + "_" + task + "_" + variant + "_d" + d + "_s" + std::to_string(seed) +
           ".txt";
}

// ---------------------------------------------------------------------------
// SSE against analytic truth

// Joint model density over a 2-D response grid, original units, row-major
// (outer axis 0).  One factor-0 bind serves the whole grid; factor 1 rebinds
// once per axis-0 value.  The model's CDF carries all its mass inside the
// normalized box, so points outside [y_min, y_max] get density zero.
inline std::vector<double> model_density_grid(const CondDensityModel& m, double x,
                                              const GridSpec& g) {
    const GridAxis& a0 = g.axes[0];
    const GridAxis& a1 = g.axes[1];
    const double c0 = m.norm.jacobian_factor(0);
    const double c1 = m.norm.jacobian_factor(1);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(a0.count) * static_cast<std::size_t>(a1.count));

    std::vector<double> xv = {x};
    FactorEval f0(m, xv);
    FactorEval f1(m, xv);
    f0.bind(0, {});
    std::vector<double> prefix(1);
    for (int j0 = 0; j0 < a0.count; ++j0) {
        const double t0 = m.norm.normalize(a0.at(j0), 0);
        const double p0 = t0 < -1.0 || t0 > 1.0 ? 0.0 : c0 * f0.pdf(t0);
        if (p0 == 0.0) {
            out.insert(out.end(), static_cast<std::size_t>(a1.count), 0.0);
            continue;
        }
        prefix[0] = t0;
        f1.bind(1, prefix);
        for (int j1 = 0; j1 < a1.count; ++j1) {
            const double t1 = m.norm.normalize(a1.at(j1), 1);
            out.push_back(t1 < -1.0 || t1 > 1.0 ? 0.0 : p0 * c1 * f1.pdf(t1));
        }
    }
    return out;
}

// Estimated joint density at one (x, y1, y2); lets tests plug the analytic
// truth itself in place of a model.
using DensityFn = std::function<double(double x, double y1, double y2)>;

inline EvalReport sse_against_truth(const DensityFn& est, ToyKind task, const GridSpec& g) {
    g.validate();
    if (g.axes.size() != 2) throw ConfigError("sse: analytic truth is two-dimensional");
    EvalReport r;
    r.metric = "sse";
    r.config_echo.emplace_back("task", toy_name(task));
    for (double x : g.x_values) {
        double sse = 0.0;
        for (int j0 = 0; j0 < g.axes[0].count; ++j0)
            for (int j1 = 0; j1 < g.axes[1].count; ++j1) {
                const double y1 = g.axes[0].at(j0);
                const double y2 = g.axes[1].at(j1);
                const double d = est(x, y1, y2) - toy_true_density(task, x, y1, y2);
                sse += d * d;
            }
        r.entries.emplace_back("x:" + fmt_double(x), sse);
    }
    r.finalize();
    return r;
}

inline EvalReport sse_on_grid(const CondDensityModel& m, ToyKind task, const GridSpec& g) {
    g.validate();
    if (m.d_y() != 2 || g.axes.size() != 2)
        throw ConfigError("sse: analytic truth is two-dimensional");
    EvalReport r;
    r.metric = "sse";
    r.config_echo.emplace_back("task", toy_name(task));
    for (double x : g.x_values) {
        auto dens = model_density_grid(m, x, g);
        double sse = 0.0;
        std::size_t at = 0;
        for (int j0 = 0; j0 < g.axes[0].count; ++j0)
            for (int j1 = 0; j1 < g.axes[1].count; ++j1) {
                double d = dens[at++] - toy_true_density(task, x, g.axes[0].at(j0),
                                                         g.axes[1].at(j1));
                sse += d * d;
            }
        r.entries.emplace_back("x:" + fmt_double(x), sse);
    }
    r.finalize();
    return r;
}

inline MetricFn sse_metric(ToyKind task, const GridSpec& g) {
    return [task, g](const CondDensityModel& m) { return sse_on_grid(m, task, g).mean; };
}

// ---------------------------------------------------------------------------
// Held-out NLL and calibration

inline EvalReport test_nll(const CondDensityModel& m, const Dataset& ds) {
    EvalReport r;
    r.metric = "nll";
    r.config_echo.emplace_back("rows", std::to_string(ds.n()));
    EvalCounters c;
    double v = dataset_nll(m, ds, &c);
    r.entries.emplace_back("split:test", v);
    r.underflow = c.underflow;
    r.clamped = c.clamped;
    r.finalize();
    return r;
}

// Fraction-per-bin calibration error: 10 equal bins over [0,1], ECE is the
// mean absolute deviation of each bin's mass from 0.1.  All mass in one bin
// (e.g. every u = 0.5) gives the maximal value 0.18.
inline double pit_ece(std::span<const double> u, int bins = 10) {
    if (u.empty()) throw DataError("ece: no PIT values");
    std::vector<double> mass(static_cast<std::size_t>(bins), 0.0);
    for (double v : u) {
        int k = static_cast<int>(v * bins);
        if (k < 0) k = 0;
        if (k >= bins) k = bins - 1;
        mass[static_cast<std::size_t>(k)] += 1.0;
    }
    const double n = static_cast<double>(u.size());
    const double nominal = 1.0 / static_cast<double>(bins);
    double ece = 0.0;
    for (double m : mass) ece += std::abs(m / n - nominal);
    return ece / static_cast<double>(bins);
}

// PIT values of each autoregressive factor on held-out rows.  The report
// carries one ECE per factor (mean across factors for d_y > 1, a recorded
// convention) plus the pooled coverage curve at nominal levels (k-0.5)/bins.
inline EvalReport reliability_ece(const CondDensityModel& m, const Dataset& ds,
                                  int bins = 10) {
    if (ds.n() == 0) throw DataError("ece: empty dataset");
    if (ds.d_x != m.d_x() || ds.d_y != m.d_y())
        throw DataError("ece: dataset does not match model dimensions");
    EvalReport r;
    r.metric = "ece";
    r.config_echo.emplace_back("rows", std::to_string(ds.n()));
    r.config_echo.emplace_back("bins", std::to_string(bins));

    const int dy = m.d_y();
    std::vector<std::vector<double>> pit(static_cast<std::size_t>(dy));
    std::vector<double> y_hat(static_cast<std::size_t>(dy));
    for (std::size_t row = 0; row < ds.n(); ++row) {
        FactorEval fe(m, ds.x_row(row));
        auto y = ds.y_row(row);
        for (int i = 0; i < dy; ++i) {
            double t = m.norm.normalize(y[i], i);
            if (t < -1.0 || t > 1.0) {
                t = t < -1.0 ? -1.0 : 1.0;
                r.clamped += 1;
            }
            y_hat[static_cast<std::size_t>(i)] = t;
            fe.bind(i, std::span<const double>(y_hat).first(static_cast<std::size_t>(i)));
            pit[static_cast<std::size_t>(i)].push_back(fe.cdf(t));
        }
    }
    std::vector<double> pooled;
    for (int i = 0; i < dy; ++i) {
        r.entries.emplace_back("factor:" + std::to_string(i), pit_ece(pit[i], bins));
        pooled.insert(pooled.end(), pit[i].begin(), pit[i].end());
    }
    for (int k = 1; k <= bins; ++k) {
        double q = (static_cast<double>(k) - 0.5) / static_cast<double>(bins);
        double covered = 0.0;
        for (double v : pooled) covered += v <= q ? 1.0 : 0.0;
        r.curve.emplace_back(q, covered / static_cast<double>(pooled.size()));
    }
    r.finalize();
    return r;
}

// ---------------------------------------------------------------------------
// Protocol runs: one trained model per configuration

struct ProtocolConfig {
    ToyKind task = ToyKind::elastic_ring;
    std::size_t n_samples = 1000;  // generated, then split in half
    std::uint64_t data_seed = 1;
    TrainConfig train;
    ModelShape shape;
    std::vector<double> x_eval = {-0.75, 0.0, 0.75};
};

struct ToyRun {
    TrainResult result;
    EvalReport sse;
};

// Generate -> split 50/50 -> train with SSE early stopping -> final SSE.
inline ToyRun run_toy_protocol(const ProtocolConfig& pc) {
    Rng rng(pc.data_seed);
    Dataset all = sample_toy(pc.task, pc.n_samples, rng);
    auto [train_ds, test_ds] = split_dataset(all, pc.n_samples / 2);
    GridSpec grid = default_sse_grid(pc.task, pc.x_eval);
    ToyRun run;
    run.result = train(train_ds, test_ds, pc.train, pc.shape, sse_metric(pc.task, grid));
    run.sse = sse_on_grid(run.result.model, pc.task, grid);
    return run;
}

// One full training run per step size, identical data and seeds otherwise.
// Summary entries carry each delta's mean SSE; detail holds the full
// per-condition reports keyed by the delta's printed value.
struct SweepResult {
    EvalReport summary;
    std::vector<std::pair<std::string, EvalReport>> detail;
};

inline SweepResult delta_sweep(const ProtocolConfig& pc, std::span<const double> deltas) {
    if (deltas.empty()) throw ConfigError("delta sweep: empty delta list");
    SweepResult out;
    out.summary.metric = "delta-sweep";
    out.summary.config_echo.emplace_back("task", toy_name(pc.task));
    out.summary.config_echo.emplace_back("variant", pc.train.variant);
    out.summary.config_echo.emplace_back("seed", std::to_string(pc.train.seed));
    for (double d : deltas) {
        ProtocolConfig run_pc = pc;
        run_pc.train.delta = d;
        ToyRun run = run_toy_protocol(run_pc);
        char label[32];
        std::snprintf(label, sizeof label, "%g", d);
        out.summary.entries.emplace_back("delta:" + std::string(label), run.sse.mean);
        out.detail.emplace_back(label, std::move(run.sse));
    }
    out.summary.finalize();
    return out;
}

inline const std::vector<double>& default_delta_list() {
    static const std::vector<double> deltas = {5e-7, 1e-6, 5e-6, 1e-5, 3e-5};
    return deltas;
}

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> variants = {"full", "no-noise", "hard-minmax",
                                                      "mono-mlp"};
    return variants;
}

struct AblationResult {
    EvalReport summary;
    std::vector<std::pair<std::string, EvalReport>> detail;  // per variant
};

// Four architectures under one data/seed protocol; summary entries carry
// each variant's mean SSE.
inline AblationResult ablation_suite(const ProtocolConfig& pc) {
    AblationResult out;
    out.summary.metric = "ablation";
    out.summary.config_echo.emplace_back("task", toy_name(pc.task));
    out.summary.config_echo.emplace_back("seed", std::to_string(pc.train.seed));
    for (const std::string& v : ablation_variants()) {
        ProtocolConfig run_pc = pc;
        run_pc.train.variant = v;
        ToyRun run = run_toy_protocol(run_pc);
        out.summary.entries.emplace_back("variant:" + v, run.sse.mean);
        out.detail.emplace_back(v, std::move(run.sse));
    }
    out.summary.finalize();
    return out;
}

// ---------------------------------------------------------------------------
// Plot-ready density tables

// Row-major (y..., p) table with a CSV header; densities come from the same
// code path as joint_log_density so the two agree exactly.
inline void emit_density_grid(const CondDensityModel& m, std::span<const double> x,
                              const GridSpec& g, const std::string& path) {
    g.validate();
    if (static_cast<int>(g.axes.size()) != m.d_y())
        throw ConfigError("density grid: axis count must match response dimensions");
    std::string out;
    for (std::size_t d = 0; d < g.axes.size(); ++d)
        out += "y" + std::to_string(d) + ",";
    out += "p\n";

    std::vector<double> y(g.axes.size(), 0.0);
    std::vector<int> idx(g.axes.size(), 0);
    for (;;) {
        for (std::size_t d = 0; d < g.axes.size(); ++d) y[d] = g.axes[d].at(idx[d]);
        double p = std::exp(joint_log_density(m, x, y));
        for (double v : y) out += fmt_double(v) + ",";
        out += fmt_double(p) + "\n";
        std::size_t d = g.axes.size();
        while (d > 0) {
            d -= 1;
            if (++idx[d] < g.axes[d].count) break;
            idx[d] = 0;
            if (d == 0) {
                std::ofstream f(path, std::ios::binary | std::ios::trunc);
                if (!f) throw DataError("cannot open grid file: " + path);
                f << out;
                if (!f) throw DataError("failed writing grid file: " + path);
                return;
            }
        }
    }
}

}  // namespace cdfirst
