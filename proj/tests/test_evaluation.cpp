#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cdfirst/evaluation.hpp"

using namespace cdfirst;

namespace {

CondDensityModel identity_model(double y_lo, double y_hi) {
    ModelShape s;
    s.d_x = 1;
    s.d_y = 1;
    s.stack_widths = {1};
    s.cond_widths = {1};
    s.final_groups = 1;
    s.final_group_size = 1;
    CondDensityModel m;
    m.layout = ModelLayout::build(s);
    m.params.assign(m.layout.n_params, 0.0);
    m.norm.y_min = {y_lo};
    m.norm.y_max = {y_hi};
    m.bn = BnStats::identity(s);
    m.sync();
    return m;
}

CondDensityModel random_2d_model(std::uint64_t seed) {
    ModelShape s;
    s.d_x = 1;
    s.d_y = 2;
    s.stack_widths = {4, 1};
    s.cond_widths = {3, 2};
    s.act_groups = 2;
    s.act_group_size = 2;
    s.final_groups = 3;
    s.final_group_size = 2;
    Rng rng(seed);
    NormStats st;
    st.y_min = {-6.0, -6.0};
    st.y_max = {6.0, 6.0};
    return make_model(s, st, rng);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

ModelShape tiny_shape() {
    ModelShape s;
    s.d_x = 1;
    s.d_y = 2;
    s.stack_widths = {2, 1};
    s.cond_widths = {2, 1};
    s.final_groups = 2;
    s.final_group_size = 2;
    return s;
}

// Fast settings for plumbing tests: two epochs, one evaluation.
ProtocolConfig tiny_protocol() {
    ProtocolConfig pc;
    pc.n_samples = 60;
    pc.data_seed = 3;
    pc.shape = tiny_shape();
    pc.train.batch_size = 30;
    pc.train.max_epochs = 2;
    pc.train.early_stop.eval_every = 2;
    pc.train.seed = 9;
    pc.x_eval = {0.0};
    return pc;
}

}  // namespace

TEST_CASE("oracle plug gives exactly zero SSE") {
    GridSpec g = default_sse_grid(ToyKind::squares, {-0.75, 0.25});
    DensityFn oracle = [](double x, double y1, double y2) {
        return toy_true_density(ToyKind::squares, x, y1, y2);
    };
    EvalReport r = sse_against_truth(oracle, ToyKind::squares, g);
    REQUIRE(r.entries.size() == 2);
    for (const auto& e : r.entries) REQUIRE(e.second == 0.0);
    REQUIRE(r.mean == 0.0);
}

TEST_CASE("zero estimate recovers the truth's squared mass on the grid") {
    // bbox +-6 padded 5% per side -> [-6.6, 6.6], 50 inclusive points per axis
    const double x = 0.25;
    GridSpec g = default_sse_grid(ToyKind::squares, {x});
    REQUIRE(g.axes[0].lo == -6.0 - 0.05 * 12.0);
    REQUIRE(g.axes[0].hi == 6.0 + 0.05 * 12.0);

    // independent count of grid points inside the two 4x4 squares
    auto inside = [&](double lo, double hi) {
        int c = 0;
        for (int j = 0; j < 50; ++j) {
            double v = g.axes[0].at(j);
            if (v >= lo && v <= hi) ++c;
        }
        return c;
    };
    int a = inside(-5.0 + x, -1.0 + x);
    int b = inside(1.0 - x, 5.0 - x);
    double expect = (static_cast<double>(a) * a + static_cast<double>(b) * b) *
                    (0.03125 * 0.03125);

    DensityFn zero = [](double, double, double) { return 0.0; };
    EvalReport r = sse_against_truth(zero, ToyKind::squares, g);
    REQUIRE_THAT(r.entries[0].second, Catch::Matchers::WithinRel(expect, 1e-12));
}

TEST_CASE("structured grid densities match the joint log density path") {
    auto m = random_2d_model(17);
    GridSpec g;
    g.axes = {{-5.0, 5.0, 7}, {-5.0, 5.0, 7}};  // strictly inside the model range
    g.x_values = {0.4};
    auto dens = model_density_grid(m, 0.4, g);
    std::vector<double> xv = {0.4};
    std::size_t at = 0;
    for (int j0 = 0; j0 < 7; ++j0)
        for (int j1 = 0; j1 < 7; ++j1) {
            std::vector<double> y = {g.axes[0].at(j0), g.axes[1].at(j1)};
            double ref = std::exp(joint_log_density(m, xv, y));
            REQUIRE_THAT(dens[at++], Catch::Matchers::WithinRel(ref, 1e-12));
        }
}

TEST_CASE("model density vanishes outside its normalized support") {
    auto m = random_2d_model(23);  // carries mass only over [-6, 6]^2
    GridSpec g;
    g.axes = {{-9.0, 9.0, 5}, {-9.0, 9.0, 5}};
    g.x_values = {0.0};
    auto dens = model_density_grid(m, 0.0, g);
    std::size_t at = 0;
    for (int j0 = 0; j0 < 5; ++j0)
        for (int j1 = 0; j1 < 5; ++j1) {
            double y0 = g.axes[0].at(j0), y1 = g.axes[1].at(j1);
            if (std::abs(y0) > 6.0 || std::abs(y1) > 6.0) REQUIRE(dens[at] == 0.0);
            at += 1;
        }
}

TEST_CASE("calibration error of PIT samples") {
    SECTION("uniform sample is nearly calibrated") {
        Rng rng(64);
        std::vector<double> u(100000);
        for (double& v : u) v = rng.uniform();
        REQUIRE(pit_ece(u) < 0.01);
    }

    SECTION("all mass at 0.5 is maximal") {
        std::vector<double> u(1000, 0.5);
        // one bin holds everything: (0.9 + 9 * 0.1) / 10
        REQUIRE_THAT(pit_ece(u), Catch::Matchers::WithinAbs(0.18, 1e-12));
    }

    SECTION("boundary values fall into the edge bins") {
        std::vector<double> u = {0.0, 1.0};
        REQUIRE_THAT(pit_ece(u), Catch::Matchers::WithinAbs((2 * 0.4 + 8 * 0.1) / 10.0, 1e-12));
    }

    SECTION("empty input is an error") {
        REQUIRE_THROWS_AS(pit_ece({}), DataError);
    }
}

TEST_CASE("reliability report on the identity model") {
    auto m = identity_model(0.0, 10.0);
    Rng rng(5);
    Dataset ds;
    ds.d_x = 1;
    ds.d_y = 1;
    for (int i = 0; i < 10000; ++i) {
        ds.x.push_back(rng.uniform(-1.0, 1.0));
        ds.y.push_back(rng.uniform(0.0, 10.0));  // PIT is y/10, uniform
    }
    EvalReport r = reliability_ece(m, ds);
    REQUIRE(r.entries.size() == 1);
    REQUIRE(r.entries[0].first == "factor:0");
    REQUIRE(r.mean < 0.01);
    REQUIRE(r.clamped == 0);
    REQUIRE(r.curve.size() == 10);
    for (const auto& [q, c] : r.curve) REQUIRE_THAT(c, Catch::Matchers::WithinAbs(q, 0.02));

    SECTION("out-of-range responses are clamped and counted") {
        ds.x.push_back(0.0);
        ds.y.push_back(15.0);
        EvalReport r2 = reliability_ece(m, ds);
        REQUIRE(r2.clamped == 1);
    }
}

TEST_CASE("held-out NLL report on the uniform degenerate model") {
    auto m = identity_model(0.0, 10.0);
    Rng rng(8);
    Dataset ds;
    ds.d_x = 1;
    ds.d_y = 1;
    for (int i = 0; i < 50; ++i) {
        ds.x.push_back(rng.uniform(-1.0, 1.0));
        ds.y.push_back(rng.uniform(0.0, 10.0));
    }
    EvalReport r = test_nll(m, ds);
    REQUIRE_THAT(r.mean, Catch::Matchers::WithinRel(std::log(10.0), 1e-10));
    REQUIRE(r.underflow == 0);

    // mean invariance up to summation rounding: 2n terms fold differently
    Dataset doubled = ds;
    doubled.x.insert(doubled.x.end(), ds.x.begin(), ds.x.end());
    doubled.y.insert(doubled.y.end(), ds.y.begin(), ds.y.end());
    REQUIRE_THAT(test_nll(m, doubled).mean, Catch::Matchers::WithinRel(r.mean, 1e-13));
}

TEST_CASE("report arithmetic and serialization") {
    EvalReport r;
    r.metric = "sse";
    r.config_echo.emplace_back("task", "squares");
    r.entries.emplace_back("x:-0.75", 1.0);
    r.entries.emplace_back("x:0.25", 2.0);
    r.entries.emplace_back("x:0.75", 4.0);
    r.finalize();
    REQUIRE_THAT(r.mean, Catch::Matchers::WithinRel(7.0 / 3.0, 1e-15));

    std::string path = "eval_report_test.txt";
    write_report(r, path);
    std::string body = slurp(path);
    REQUIRE(body ==
            "metric=sse\n"
            "task=squares\n"
            "x:-0.75=1\n"
            "x:0.25=2\n"
            "x:0.75=4\n"
            "mean=" + fmt_double(7.0 / 3.0) + "\n"
            "underflow=0\n"
            "clamped=0\n");
    std::remove(path.c_str());

    REQUIRE(report_filename("sse", "elastic-ring", "full", 5e-6, 7) ==
            "sse_elastic-ring_full_d5e-06_s7.txt");
}

TEST_CASE("density grid files are row-major with nonnegative densities") {
    auto m = random_2d_model(31);
    GridSpec g;
    g.axes = {{-3.0, 3.0, 3}, {-3.0, 3.0, 3}};
    std::vector<double> x = {0.1};
    std::string path = "eval_grid_test.csv";
    emit_density_grid(m, x, g, path);
    std::string body = slurp(path);
    std::remove(path.c_str());

    std::istringstream in(body);
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "y0,y1,p");
    int rows = 0;
    double first_y0 = 0.0;
    while (std::getline(in, line)) {
        double y0, y1, p;
        REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf", &y0, &y1, &p) == 3);
        if (rows == 0) first_y0 = y0;
        REQUIRE(p >= 0.0);
        if (rows < 3) REQUIRE(y0 == first_y0);  // outer axis varies slowest
        std::vector<double> y = {y0, y1};
        REQUIRE(p == std::exp(joint_log_density(m, x, y)));
        rows += 1;
    }
    REQUIRE(rows == 9);
}

TEST_CASE("toy protocol runs deterministically end to end") {
    ProtocolConfig pc = tiny_protocol();
    ToyRun a = run_toy_protocol(pc);
    ToyRun b = run_toy_protocol(pc);
    REQUIRE(a.result.model.params == b.result.model.params);
    REQUIRE(a.sse.entries.size() == 1);
    REQUIRE(a.sse.mean == b.sse.mean);
    REQUIRE(cdfirst::finite(a.sse.mean));
}

TEST_CASE("delta sweep trains one model per step and repeats exactly") {
    ProtocolConfig pc = tiny_protocol();
    std::vector<double> deltas = {5e-6, 5e-6};
    SweepResult res = delta_sweep(pc, deltas);
    REQUIRE(res.summary.entries.size() == 2);
    REQUIRE(res.summary.entries[0].second == res.summary.entries[1].second);
    REQUIRE(res.detail.size() == 2);
    REQUIRE(res.summary.entries[0].first == "delta:5e-06");

    REQUIRE_THROWS_AS(delta_sweep(pc, {}), ConfigError);
    REQUIRE(default_delta_list().size() == 5);
}

TEST_CASE("ablation suite trains all four variants under one protocol") {
    ProtocolConfig pc = tiny_protocol();
    AblationResult res = ablation_suite(pc);
    REQUIRE(res.detail.size() == 4);
    REQUIRE(res.summary.entries.size() == 4);
    REQUIRE(res.detail[0].first == "full");
    REQUIRE(res.detail[1].first == "no-noise");
    REQUIRE(res.detail[2].first == "hard-minmax");
    REQUIRE(res.detail[3].first == "mono-mlp");
    for (const auto& e : res.summary.entries) REQUIRE(cdfirst::finite(e.second));
    double mean = 0.0;
    for (const auto& e : res.summary.entries) mean += e.second;
    REQUIRE_THAT(res.summary.mean, Catch::Matchers::WithinRel(mean / 4.0, 1e-15));
}

TEST_CASE("grid validation rejections") {
    GridSpec g;
    g.axes = {{0.0, 1.0, 1}};
    REQUIRE_THROWS_AS(g.validate(), ConfigError);
    g.axes = {{2.0, 1.0, 10}};
    REQUIRE_THROWS_AS(g.validate(), ConfigError);
    g.axes.clear();
    REQUIRE_THROWS_AS(g.validate(), ConfigError);
}
