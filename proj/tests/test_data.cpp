#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cdfirst/data.hpp"

using namespace cdfirst;

namespace {

const ToyKind kAllTasks[] = {ToyKind::squares, ToyKind::half_gaussian,
                             ToyKind::gaussian_stick, ToyKind::elastic_ring};

std::filesystem::path tmp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

// Midpoint quadrature of the true density over the task bounding box.
double density_mass(ToyKind k, double x, int side) {
    auto bb = toy_bbox(k);
    double h1 = (bb[1] - bb[0]) / side, h2 = (bb[3] - bb[2]) / side;
    double s = 0.0;
    for (int a = 0; a < side; ++a) {
        double y1 = bb[0] + (a + 0.5) * h1;
        for (int b = 0; b < side; ++b) {
            double y2 = bb[2] + (b + 0.5) * h2;
            s += toy_true_density(k, x, y1, y2);
        }
    }
    return s * h1 * h2;
}

}  // namespace

TEST_CASE("norm stats follow the affine map and reject degenerate ranges") {
    Dataset ds;
    ds.d_x = 1;
    ds.d_y = 1;
    ds.x = {0.0, 0.0};
    ds.y = {0.0, 10.0};
    auto st = compute_norm_stats(ds);
    REQUIRE(st.y_min[0] == 0.0);
    REQUIRE(st.y_max[0] == 10.0);
    REQUIRE(st.jacobian_factor(0) == 0.2);
    REQUIRE(st.normalize(0.0, 0) == -1.0);
    REQUIRE(st.normalize(10.0, 0) == 1.0);
    REQUIRE(st.normalize(5.0, 0) == 0.0);
    REQUIRE(st.normalize(15.0, 0) == 2.0);  // affine extension, no clamping

    Dataset flat = ds;
    flat.y = {3.0, 3.0};
    REQUIRE_THROWS_AS(compute_norm_stats(flat), DataError);
}

TEST_CASE("normalize and denormalize round trip") {
    NormStats st;
    st.y_min = {-2.5, 7.0};
    st.y_max = {4.0, 7.1};
    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        for (int j = 0; j < 2; ++j) {
            double y = rng.uniform(st.y_min[j], st.y_max[j]);
            double t = st.normalize(y, j);
            REQUIRE(std::fabs(st.denormalize(t, j) - y) < 1e-12);
        }
    }
    REQUIRE_THAT(st.log_jacobian(),
                 Catch::Matchers::WithinRel(std::log(2.0 / 6.5) + std::log(20.0), 1e-12));
}

TEST_CASE("squares samples stay on the two squares") {
    Rng rng(17);
    for (int rep = 0; rep < 5000; ++rep) {
        double y1, y2;
        toy_sample(ToyKind::squares, 0.0, rng, y1, y2);
        bool low = y1 >= -5.0 && y1 <= -1.0 && y2 >= -5.0 && y2 <= -1.0;
        bool high = y1 >= 1.0 && y1 <= 5.0 && y2 >= 1.0 && y2 <= 5.0;
        REQUIRE((low || high));
    }
}

TEST_CASE("elastic ring at x=0 has radius in [4,6]") {
    Rng rng(19);
    for (int rep = 0; rep < 5000; ++rep) {
        double y1, y2;
        toy_sample(ToyKind::elastic_ring, 0.0, rng, y1, y2);
        double r = std::sqrt(y1 * y1 + y2 * y2);
        REQUIRE(r >= 4.0);
        REQUIRE(r <= 6.0);
    }
}

TEST_CASE("gaussian stick is centered") {
    Rng rng(23);
    double m1 = 0.0, m2 = 0.0;
    const int n = 10000;
    for (int rep = 0; rep < n; ++rep) {
        double y1, y2;
        toy_sample(ToyKind::gaussian_stick, 0.4, rng, y1, y2);
        m1 += y1;
        m2 += y2;
    }
    REQUIRE(std::fabs(m1 / n) < 0.2);
    REQUIRE(std::fabs(m2 / n) < 0.2);
}

TEST_CASE("squares density closed-form values") {
    REQUIRE(toy_true_density(ToyKind::squares, 0.0, 0.0, 0.0) == 0.0);
    REQUIRE(toy_true_density(ToyKind::squares, 0.0, -3.0, -3.0) == 0.03125);
    REQUIRE(toy_true_density(ToyKind::squares, 0.0, 3.0, 3.0) == 0.03125);
    REQUIRE(toy_true_density(ToyKind::squares, 0.0, -3.0, 3.0) == 0.0);
    // squares shift with x
    REQUIRE(toy_true_density(ToyKind::squares, 0.5, -3.0 + 0.5, -3.0 + 0.5) == 0.03125);
}

TEST_CASE("half gaussian density vanishes on the wrong half plane") {
    // at x = 0 there is no rotation: u = y1, zero density for y1 < 0
    REQUIRE(toy_true_density(ToyKind::half_gaussian, 0.0, -0.5, 1.0) == 0.0);
    REQUIRE(toy_true_density(ToyKind::half_gaussian, 0.0, 0.5, 1.0) > 0.0);
    // peak value: half-normal(2) at 0 times normal(2) at 0
    double peak = toy_true_density(ToyKind::half_gaussian, 0.0, 0.0, 0.0);
    REQUIRE_THAT(peak, Catch::Matchers::WithinRel(0.5 / (2.0 * kPi), 1e-12));
}

TEST_CASE("ring density is zero off the band and matches the Jacobian on it") {
    // x = 0: band is 4 <= r <= 6, density (1/4pi)/(4+d) at radius 4+d
    REQUIRE(toy_true_density(ToyKind::elastic_ring, 0.0, 0.0, 0.0) == 0.0);
    REQUIRE(toy_true_density(ToyKind::elastic_ring, 0.0, 3.9, 0.0) == 0.0);
    REQUIRE(toy_true_density(ToyKind::elastic_ring, 0.0, 6.1, 0.0) == 0.0);
    double p = toy_true_density(ToyKind::elastic_ring, 0.0, 5.0, 0.0);
    REQUIRE_THAT(p, Catch::Matchers::WithinRel(1.0 / (4.0 * kPi * 5.0), 1e-9));
    double q = toy_true_density(ToyKind::elastic_ring, 0.0, 0.0, 4.5);
    REQUIRE_THAT(q, Catch::Matchers::WithinRel(1.0 / (4.0 * kPi * 4.5), 1e-9));
}

TEST_CASE("true densities integrate to one") {
    for (ToyKind k : kAllTasks)
        for (double x : {-0.75, 0.25}) {
            double mass = density_mass(k, x, 500);
            REQUIRE(mass > 0.98);
            REQUIRE(mass < 1.02);
        }
}

TEST_CASE("sampler histograms agree with the analytic densities") {
    // Criterion scale runs in the acceptance suite; this is the same check
    // at reduced n for fast feedback.
    const std::size_t n = 200000;
    const int side = 50;
    for (ToyKind k : kAllTasks) {
        double x = 0.25;
        auto bb = toy_bbox(k);
        double h1 = (bb[1] - bb[0]) / side, h2 = (bb[3] - bb[2]) / side;
        double cell_area = h1 * h2;
        std::vector<double> count(side * side, 0.0);
        Rng rng(777 + static_cast<int>(k));
        for (std::size_t i = 0; i < n; ++i) {
            double y1, y2;
            toy_sample(k, x, rng, y1, y2);
            int a = static_cast<int>(std::floor((y1 - bb[0]) / h1));
            int b = static_cast<int>(std::floor((y2 - bb[2]) / h2));
            if (a < 0 || a >= side || b < 0 || b >= side) continue;
            count[a * side + b] += 1.0;
        }
        double sum_dev = 0.0, sum_se = 0.0;
        for (int a = 0; a < side; ++a)
            for (int b = 0; b < side; ++b) {
                double lo1 = bb[0] + a * h1, lo2 = bb[2] + b * h2;
                double truth = toy_cell_average(k, x, lo1, lo1 + h1, lo2, lo2 + h2, 8);
                double hist = count[a * side + b] / (static_cast<double>(n) * cell_area);
                double pc = truth * cell_area;
                double se = std::sqrt(std::max(pc * (1.0 - pc), 0.0) /
                                      static_cast<double>(n)) /
                            cell_area;
                sum_dev += std::fabs(hist - truth);
                sum_se += se;
            }
        INFO("task " << toy_name(k));
        REQUIRE(sum_dev < 3.0 * sum_se);
    }
}

TEST_CASE("support correctness: density is zero where the sampler cannot reach") {
    // squares gap and ring interior checked pointwise along rays
    for (double t = -0.99; t < 1.0; t += 0.07) {
        REQUIRE(toy_true_density(ToyKind::squares, 0.0, t, -t) == 0.0);
        REQUIRE(toy_true_density(ToyKind::elastic_ring, 0.25, 0.3 * t, 0.2 * t) == 0.0);
    }
}

TEST_CASE("toy datasets are deterministic in the seed") {
    Rng a(42), b(42), c(43);
    auto da = sample_toy(ToyKind::half_gaussian, 500, a);
    auto db = sample_toy(ToyKind::half_gaussian, 500, b);
    auto dc = sample_toy(ToyKind::half_gaussian, 500, c);
    REQUIRE(da.x == db.x);
    REQUIRE(da.y == db.y);
    REQUIRE(da.x != dc.x);
    for (double v : da.x) {
        REQUIRE(v >= -1.0);
        REQUIRE(v < 1.0);
    }
}

TEST_CASE("csv round trip preserves values exactly") {
    Rng rng(5);
    auto ds = sample_toy(ToyKind::gaussian_stick, 100, rng);
    auto path = tmp_file("cdfirst_test_roundtrip.csv");
    write_csv(ds, path.string());
    auto back = load_csv(path.string(), 1, 2);
    REQUIRE(back.n() == 100);
    REQUIRE(back.x == ds.x);
    REQUIRE(back.y == ds.y);
    std::filesystem::remove(path);
}

TEST_CASE("csv loader rejects malformed input") {
    auto path = tmp_file("cdfirst_test_bad.csv");

    std::ofstream(path) << "x0,y0,y1\n1,2,3\n4,5\n";
    REQUIRE_THROWS_AS(load_csv(path.string(), 1, 2), DataError);

    std::ofstream(path) << "x0,y0\n1,2\n";
    REQUIRE_THROWS_AS(load_csv(path.string(), 1, 2), DataError);  // missing column

    std::ofstream(path) << "x0,y0,y1\n1,NaN,3\n";
    REQUIRE_THROWS_AS(load_csv(path.string(), 1, 2), DataError);

    std::ofstream(path) << "x0,y0,y1\n1,two,3\n";
    REQUIRE_THROWS_AS(load_csv(path.string(), 1, 2), DataError);

    REQUIRE_THROWS_AS(load_csv("/nonexistent/nowhere.csv", 1, 2), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("toy metadata sidecar") {
    auto path = tmp_file("cdfirst_test_meta.csv");
    write_toy_meta(path.string(), "elastic-ring", 7, 2000);
    std::ifstream in(path.string() + ".meta");
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(all == "task=elastic-ring\nseed=7\nn=2000\n");
    std::filesystem::remove(path.string() + ".meta");
}

TEST_CASE("dataset split is a clean head and tail") {
    Rng rng(9);
    auto ds = sample_toy(ToyKind::squares, 10, rng);
    auto [tr, te] = split_dataset(ds, 4);
    REQUIRE(tr.n() == 4);
    REQUIRE(te.n() == 6);
    REQUIRE(tr.x[0] == ds.x[0]);
    REQUIRE(te.x[0] == ds.x[4]);
    REQUIRE(te.y[0] == ds.y[8]);
    REQUIRE_THROWS_AS(split_dataset(ds, 0), DataError);
    REQUIRE_THROWS_AS(split_dataset(ds, 10), DataError);
}
