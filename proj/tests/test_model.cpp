#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cdfirst/checkpoint.hpp"
#include "cdfirst/model.hpp"

using namespace cdfirst;

namespace {

ModelShape small_shape(HeadKind kind = HeadKind::soft) {
    ModelShape s;
    s.d_x = 1;
    s.d_y = 2;
    s.stack_widths = {4, 1};
    s.cond_widths = {3, 2};
    s.act_groups = 2;
    s.act_group_size = 2;
    s.final_groups = 3;
    s.final_group_size = 2;
    s.kind = kind;
    return s;
}

// Degenerate model whose raw head is the identity: F(t) = (t+1)/2.
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

CondDensityModel random_model(std::uint64_t seed, HeadKind kind = HeadKind::soft) {
    Rng rng(seed);
    NormStats st;
    st.y_min = {-1.0, 0.0};
    st.y_max = {1.0, 4.0};
    return make_model(small_shape(kind), st, rng);
}

}  // namespace

TEST_CASE("boundary exactness and monotone CDF for random models") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto m = random_model(seed);
        std::vector<double> x = {0.3};
        std::vector<double> y_hat = {0.2, -0.4};
        for (int i = 0; i < 2; ++i) {
            FactorEval fe(m, x);
            fe.bind(i, y_hat);
            REQUIRE(fe.cdf(-1.0) == 0.0);
            REQUIRE(fe.cdf(1.0) == 1.0);
            double prev = 0.0;
            for (int k = 0; k <= 100; ++k) {
                double f = fe.cdf(-1.0 + 2.0 * k / 100.0);
                REQUIRE(f >= prev);
                REQUIRE(f >= 0.0);
                REQUIRE(f <= 1.0);
                prev = f;
            }
        }
    }
}

TEST_CASE("identity head gives the linear CDF and flat density") {
    auto m = identity_model(0.0, 10.0);
    std::vector<double> x = {0.0};
    for (double t : {-1.0, -0.5, 0.0, 0.37, 1.0}) {
        std::vector<double> y_hat = {t};
        REQUIRE_THAT(conditional_cdf(m, x, y_hat, 0),
                     Catch::Matchers::WithinAbs((t + 1.0) / 2.0, 1e-15));
    }
    // flat density is exact under central differences for any step
    for (double step : {5e-6, 1e-4, 1e-2}) {
        m.fd_step = step;
        std::vector<double> y_hat = {0.21};
        REQUIRE_THAT(conditional_pdf(m, x, y_hat, 0),
                     Catch::Matchers::WithinAbs(0.5, 1e-9));
    }
}

TEST_CASE("normalized density integrates to one") {
    for (std::uint64_t seed = 20; seed < 26; ++seed) {
        auto m = random_model(seed);
        std::vector<double> x = {-0.6};
        std::vector<double> y_hat = {0.1, 0.0};
        for (int i = 0; i < 2; ++i) {
            FactorEval fe(m, x);
            fe.bind(i, y_hat);
            const int n = 2000;  // 2001 grid points
            double h = 2.0 / n;
            double s = 0.5 * (fe.pdf(-1.0) + fe.pdf(1.0));
            for (int k = 1; k < n; ++k) s += fe.pdf(-1.0 + k * h);
            s *= h;
            REQUIRE(s > 0.999);
            REQUIRE(s < 1.001);
        }
    }
}

TEST_CASE("densities are nonnegative everywhere") {
    for (std::uint64_t seed = 40; seed < 45; ++seed) {
        for (HeadKind kind : {HeadKind::soft, HeadKind::hard, HeadKind::mlp}) {
            auto m = random_model(seed, kind);
            std::vector<double> x = {0.8};
            std::vector<double> y_hat = {-0.3, 0.9};
            FactorEval fe(m, x);
            for (int i = 0; i < 2; ++i) {
                fe.bind(i, y_hat);
                for (int k = 0; k <= 200; ++k)
                    REQUIRE(fe.pdf(-1.0 + 2.0 * k / 200.0) >= 0.0);
            }
        }
    }
}

TEST_CASE("joint log density composes factors and Jacobian terms") {
    auto m = identity_model(0.0, 10.0);
    // Jacobian term alone: c = 0.2; flat factor contributes log 0.5
    std::vector<double> x = {0.0};
    std::vector<double> y = {7.3};
    double lp = joint_log_density(m, x, y);
    REQUIRE_THAT(lp, Catch::Matchers::WithinAbs(std::log(0.5 * 0.2), 1e-9));
    REQUIRE_THAT(lp, Catch::Matchers::WithinAbs(-std::log(10.0), 1e-9));
}

TEST_CASE("out-of-range responses are clamped and counted") {
    auto m = identity_model(0.0, 10.0);
    std::vector<double> x = {0.0};
    std::vector<double> y = {12.5};
    EvalCounters c;
    double lp = joint_log_density(m, x, y, &c);
    REQUIRE(std::isfinite(lp));
    REQUIRE(c.clamped == 1);
    REQUIRE(c.underflow == 0);
}

TEST_CASE("factor i never sees later response dimensions") {
    auto m = random_model(3);
    std::vector<double> x = {0.1};
    std::vector<double> a = {0.4, -0.7};
    std::vector<double> b = {0.4, 0.95};  // differs only in dim 1
    REQUIRE(conditional_pdf(m, x, a, 0) == conditional_pdf(m, x, b, 0));
    REQUIRE(conditional_cdf(m, x, a, 0) == conditional_cdf(m, x, b, 0));
}

TEST_CASE("collapsed heads raise a numeric error") {
    auto m = identity_model(0.0, 1.0);
    // effective monotone weight exp(-60) flattens the head below threshold
    const auto& hs = m.layout.head[0][0];
    for (std::size_t k = 0; k < hs.logWz.len; ++k) m.params[hs.logWz.off + k] = -60.0;
    m.sync();
    std::vector<double> x = {0.0};
    REQUIRE_THROWS_AS(FactorEval(m, x).bind(0, std::vector<double>{0.0}), NumericError);
}

TEST_CASE("cdf inversion round trips") {
    auto id = identity_model(0.0, 1.0);
    std::vector<double> x = {0.0};
    REQUIRE_THAT(cdf_inverse(id, x, {}, 0.5, 1e-10),
                 Catch::Matchers::WithinAbs(0.0, 1e-9));

    auto m = random_model(8);
    std::vector<double> y_hat = {0.37, 0.0};
    double u = conditional_cdf(m, x, y_hat, 0);
    double back = cdf_inverse(m, x, std::span<const double>(y_hat).first(0), u, 1e-9);
    REQUIRE(std::fabs(back - 0.37) < 1e-6);

    Rng rng(99);
    FactorEval fe(m, x);
    for (int rep = 0; rep < 1000; ++rep) {
        double uu = std::min(std::max(rng.uniform(), 1e-9), 1.0 - 1e-9);
        double t = cdf_inverse(m, x, std::span<const double>(y_hat).first(1), uu, 1e-9);
        fe.bind(1, y_hat);
        REQUIRE(std::fabs(fe.cdf(t) - uu) < 1e-5);
    }
}

TEST_CASE("sampling the degenerate model is uniform on the response range") {
    auto m = identity_model(2.0, 5.0);
    std::vector<double> x = {0.0};
    Rng rng(7);
    auto ys = sample(m, x, 1000, rng);
    REQUIRE(ys.size() == 1000);
    for (double v : ys) {
        REQUIRE(v >= 2.0);
        REQUIRE(v <= 5.0);
    }
    std::sort(ys.begin(), ys.end());
    double ks = 0.0;
    for (std::size_t k = 0; k < ys.size(); ++k) {
        double emp_hi = static_cast<double>(k + 1) / ys.size();
        double emp_lo = static_cast<double>(k) / ys.size();
        double f = (ys[k] - 2.0) / 3.0;
        ks = std::max({ks, std::fabs(emp_hi - f), std::fabs(f - emp_lo)});
    }
    REQUIRE(ks < 0.05);

    Rng r3(7), r4(7);
    REQUIRE(sample(m, x, 50, r3) == sample(m, x, 50, r4));
}

TEST_CASE("multivariate samples stay in range and respect the seed") {
    auto m = random_model(12);
    std::vector<double> x = {-0.2};
    Rng a(31), b(31), c(32);
    auto sa = sample(m, x, 200, a);
    auto sb = sample(m, x, 200, b);
    auto sc = sample(m, x, 200, c);
    REQUIRE(sa == sb);
    REQUIRE(sa != sc);
    for (std::size_t k = 0; k < sa.size(); k += 2) {
        REQUIRE(sa[k] >= m.norm.y_min[0]);
        REQUIRE(sa[k] <= m.norm.y_max[0]);
        REQUIRE(sa[k + 1] >= m.norm.y_min[1]);
        REQUIRE(sa[k + 1] <= m.norm.y_max[1]);
    }
}

TEST_CASE("checkpoints round trip bit-exactly and write deterministically") {
    namespace fs = std::filesystem;
    auto m = random_model(77);
    m.config_echo = {{"train.variant", "full"}, {"train.seed", "77"}};
    auto p1 = fs::temp_directory_path() / "cdfirst_ckpt_a.json";
    auto p2 = fs::temp_directory_path() / "cdfirst_ckpt_b.json";
    save_checkpoint(m, p1.string());
    auto back = load_checkpoint(p1.string());
    REQUIRE(back.params == m.params);
    REQUIRE(back.norm.y_min == m.norm.y_min);
    REQUIRE(back.norm.y_max == m.norm.y_max);
    REQUIRE(back.fd_step == m.fd_step);
    REQUIRE(back.layout.n_params == m.layout.n_params);
    REQUIRE(back.config_echo == m.config_echo);

    save_checkpoint(back, p2.string());
    std::ifstream f1(p1), f2(p2);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);
    REQUIRE(!fs::exists(p1.string() + ".tmp"));
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("checkpoint loader rejects foreign or damaged files") {
    namespace fs = std::filesystem;
    auto p = fs::temp_directory_path() / "cdfirst_ckpt_bad.json";
    std::ofstream(p) << "{\"format\":\"something-else\"}";
    REQUIRE_THROWS_AS(load_checkpoint(p.string()), ConfigError);
    std::ofstream(p) << "not json at all";
    REQUIRE_THROWS_AS(load_checkpoint(p.string()), ConfigError);
    REQUIRE_THROWS_AS(load_checkpoint("/nonexistent/ckpt.json"), DataError);
    fs::remove(p);
}
