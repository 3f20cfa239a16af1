#include "softconf/errors.hpp"
#include "softconf/estimators.hpp"
#include "softconf/geometry.hpp"
#include "softconf/structure.hpp"

#include "support.hpp"

#include <algorithm>
#include <numbers>
#include <numeric>

using namespace softconf;
using testing::cols;
using testing::vec;

namespace {

GaussianClassModel symmetric_model(double var = 0.01) {
    return GaussianClassModel{{vec({1, 0}), vec({-1, 0})},
                              {Matrix::Identity(2, 2) * var, Matrix::Identity(2, 2) * var},
                              vec({0.5, 0.5})};
}

SoftmaxHead k2_head(double scale = 1.0) { return SoftmaxHead(cols({{scale, 0}, {-scale, 0}})); }

/// Converts a u_max threshold into the K=2 exact-slab offset for w_1 = -w_2.
double alpha_from_u_star(double u_star, const SoftmaxHead& head) {
    const double p = -u_star;
    const double g = std::log(p / (1.0 - p));  // logit gap 2 w_1.z
    return g / (2.0 * head.column(0).squaredNorm());
}

FeatureMatrix sample_features(const Sampler& s, std::size_t n, std::uint64_t seed) {
    auto rng = shard_rng(seed, 0);
    Matrix x(static_cast<Index>(n), s(rng).size());
    for (std::size_t i = 0; i < n; ++i) x.row(static_cast<Index>(i)) = s(rng).transpose();
    return FeatureMatrix(std::move(x));
}

Matrix rotation2(double angle) {
    Matrix r(2, 2);
    r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    return r;
}

}  // namespace

TEST_CASE("empirical threshold examples") {
    std::vector<double> s(100);
    std::iota(s.begin(), s.end(), 1.0);
    CHECK(empirical_threshold(s, 0.05) == 95.0);
    std::vector<double> c(37, 2.5);
    const double u = empirical_threshold(c, 0.1);
    CHECK(u == 2.5);
    CHECK(std::none_of(c.begin(), c.end(), [&](double v) { return v > u; }));
    std::shuffle(s.begin(), s.end(), std::mt19937_64(1));
    CHECK(empirical_threshold(s, 0.999999) == 1.0);
    CHECK_THROWS_AS(empirical_threshold({}, 0.1), ConfigError);
    CHECK_THROWS_AS(empirical_threshold(s, 0.0), ConfigError);
    CHECK_THROWS_AS(empirical_threshold(s, 1.0), ConfigError);
}

TEST_CASE("empirical threshold leaves at most an epsilon fraction above it") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng() % 500;
        std::vector<double> v(n);
        for (auto& x : v) x = std::floor(unif(rng) * 20.0);
        const double eps = 0.01 + 0.98 * unif(rng);
        const double u = empirical_threshold(v, eps);
        const auto above = std::count_if(v.begin(), v.end(), [&](double x) { return x > u; });
        const auto at_or_below = static_cast<double>(n) - static_cast<double>(above);
        REQUIRE(at_or_below >= (1.0 - eps) * static_cast<double>(n) - 1e-9);
    }
}

TEST_CASE("exact K=2 slab matches the analytic value and a Monte-Carlo quantile") {
    const auto model = symmetric_model();
    const auto head = k2_head();
    const auto sol = solve_alpha_exact_k2(model, head, 0.05);
    // Projected class sd is 0.1, so the inner tail quantile is 1 - 0.1 * z_{0.95}.
    CHECK(sol.alpha == doctest::Approx(1.0 - 0.1 * 1.6448536269514722).epsilon(1e-6));
    CHECK(sol.separable);

    const auto sampler = class_model_sampler(model);
    auto rng = shard_rng(7, 0);
    std::vector<double> scores;
    for (int i = 0; i < 1000000; ++i) scores.push_back(u_max(head, sampler(rng)).value);
    const double mc_alpha = alpha_from_u_star(empirical_threshold(scores, 0.05), head);
    CHECK(std::abs(mc_alpha - sol.alpha) / sol.alpha < 1e-2);

    const double n = 400000;
    const double mass = mc_region_mass([&](const Vector& z) { return sol.slab.contains(z); }, sampler,
                                       static_cast<std::size_t>(n), 11);
    CHECK(std::abs(mass - 0.05) < 3.0 * std::sqrt(0.05 * 0.95 / n));
    CHECK(k2_slab_mass(model, head, sol.alpha) == doctest::Approx(0.05).epsilon(1e-8));
}

TEST_CASE("exact K=2 slab in the small-epsilon limit") {
    const auto model = symmetric_model();
    const auto sol = solve_alpha_exact_k2(model, k2_head(), 1e-7);
    const double outside = mc_region_mass([&](const Vector& z) { return !sol.slab.contains(z); },
                                          class_model_sampler(model), 100000, 3);
    CHECK(outside == 1.0);
    CHECK(sol.alpha < 1.0);
    CHECK(sol.alpha > 0.4);
}

TEST_CASE("exact K=2 slab is scale consistent") {
    const auto model = symmetric_model();
    const auto a1 = solve_alpha_exact_k2(model, k2_head(1.0), 0.05);
    const auto a2 = solve_alpha_exact_k2(model, k2_head(2.0), 0.05);
    CHECK(a2.alpha == doctest::Approx(a1.alpha / 2.0).epsilon(1e-9));
    std::mt19937_64 rng(4);
    for (int t = 0; t < 10000; ++t) {
        const Vector z = testing::gaussian_vector(rng, 2, 1.0);
        REQUIRE(a1.slab.contains(z) == a2.slab.contains(z));
    }
}

TEST_CASE("exact K=2 slab with a bias shifts the anchor") {
    const SoftmaxHead head(cols({{1, 0}, {-1, 0}}), vec({0.4, 0.0}));
    GaussianClassModel model{{vec({0.8, 0}), vec({-1.2, 0})},
                             {Matrix::Identity(2, 2) * 0.01, Matrix::Identity(2, 2) * 0.01},
                             vec({0.5, 0.5})};
    const auto sol = solve_alpha_exact_k2(model, head, 0.05);
    CHECK(sol.slab.anchor[0] == doctest::Approx(-0.2));
    CHECK(sol.alpha == doctest::Approx(1.0 - 0.1 * 1.6448536269514722).epsilon(1e-6));
}

TEST_CASE("exact K=2 slab errors and warnings") {
    const auto model = symmetric_model();
    CHECK_THROWS_AS(solve_alpha_exact_k2(model, SoftmaxHead(cols({{1, 0}, {0, 1}})), 0.05), ConfigError);
    CHECK_THROWS_AS(solve_alpha_exact_k2(model, SoftmaxHead(cols({{1, 0}, {-1, 0}, {0, 1}})), 0.05), ConfigError);
    const auto wide = solve_alpha_exact_k2(symmetric_model(1.0), k2_head(), 0.05);
    CHECK_FALSE(wide.separable);
    CHECK(wide.alpha > 0.0);
}

TEST_CASE("linear region for K=2 coincides with the exact slab") {
    const auto model = symmetric_model();
    const auto head = k2_head();
    const auto exact = solve_alpha_exact_k2(model, head, 0.05);
    const auto train = sample_features(class_model_sampler(model), 400000, 5);
    const auto region = fit_linear_region(head, train, 0.05);
    const auto& s = region.slab(0, 1);
    CHECK(s.alpha_lo == doctest::Approx(s.alpha_hi).epsilon(1e-12));
    CHECK(std::abs(s.alpha_hi - exact.slab.alpha_hi) / exact.slab.alpha_hi < 1e-2);
}

TEST_CASE("optimal K=3 head needs a single global alpha") {
    const auto head = gen_optimal_head({3, 5, 1.0, 5.0}, 9);
    const auto region = fit_linear_region(head, -0.9, 0.05);
    const double a = region.slabs().front().alpha_hi;
    CHECK(a > 0.0);
    for (const auto& s : region.slabs()) {
        CHECK(std::abs(s.alpha_hi - a) < 1e-8);
        CHECK(std::abs(s.alpha_lo - a) < 1e-8);
    }
}

TEST_CASE("points inside the linear region are more uncertain than the threshold") {
    std::mt19937_64 rng(10);
    std::size_t checked = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const Index k = 3 + trial % 3;
        const Index h = 2 + static_cast<Index>(rng() % 5);
        const auto head = testing::random_head(rng, h, k, 0.5);
        Matrix x(300, h);
        for (Index r = 0; r < 300; ++r)
            x.row(r) = (3.0 * head.column(r % k) + testing::gaussian_vector(rng, h, 0.7)).transpose();
        const auto region = fit_linear_region(head, FeatureMatrix(x), 0.05);
        const double u_star = region.spec().u_star;
        for (int s = 0; s < 4000; ++s) {
            const auto& slab = region.slabs()[rng() % region.slabs().size()];
            const Vector z = sample_slab_point(slab, rng, std::pow(10.0, -1.0 + 3.0 * (s % 7) / 6.0));
            if (!region.contains(z)) continue;
            REQUIRE(u_max(head, z).value > u_star);
            ++checked;
        }
    }
    CHECK(checked > 10000);
}

TEST_CASE("linear slab edges converge to the exact contour far from the origin") {
    std::mt19937_64 rng(12);
    const auto head = gen_optimal_head({4, 6, 1.0, 5.0}, 3);
    const double p_star = 0.9;
    const auto region = fit_linear_region(head, -p_star, 0.05);
    int tested = 0;
    for (Index i = 0; i < head.k(); ++i)
        for (Index j = i + 1; j < head.k(); ++j) {
            const auto& slab = region.slab(i, j);
            const Vector n = slab.normal;
            for (int t = 0; t < 20; ++t) {
                // Random direction along the boundary, kept inside the (i, j) cells.
                Vector d = testing::gaussian_vector(rng, head.h());
                d -= (d.dot(n) / n.squaredNorm()) * n;
                d.normalize();
                double margin = 1e300;
                for (Index q = 0; q < head.k(); ++q)
                    if (q != i && q != j) margin = std::min(margin, (head.column(i) - head.column(q)).dot(d));
                if (margin < 0.2) continue;
                double prev = 1e300;
                for (double mag : {10.0, 100.0, 1000.0}) {
                    const Vector base = slab.anchor + mag * d;
                    const double exact = contour_offset(head, i, j, base, p_star, 1.0);
                    const double linear = slab.alpha_hi * n.norm();
                    const double dist = std::abs(exact - linear);
                    REQUIRE(dist <= prev + 1e-9);
                    prev = dist;
                }
                ++tested;
            }
        }
    CHECK(tested > 10);
}

TEST_CASE("optimal K=3 region is symmetric under 120 degree rotation") {
    const auto gh = gen_counterfactual_head(StructureKind::optimal, 3, 2, 1);
    const auto region = fit_linear_region(gh.head, -0.8, 0.05);
    // The head lives in its own plane basis; rotate in that plane.
    const Matrix rot = gh.basis * rotation2(2.0 * std::numbers::pi / 3.0) * gh.basis.transpose();
    std::mt19937_64 rng(13);
    int agree = 0, total = 0;
    for (int t = 0; t < 20000; ++t) {
        const Vector z = testing::gaussian_vector(rng, 2, 3.0);
        agree += region.contains(z) == region.contains(rot * z) ? 1 : 0;
        ++total;
    }
    CHECK(static_cast<double>(agree) / total > 0.999);
}

TEST_CASE("density region") {
    const GaussianMixture g1(vec({1.0}), Matrix::Zero(1, 1), {Matrix::Identity(1, 1)}, 0.0);
    const auto r = density_region(g1, 0.05);
    CHECK(r.thresholds()[0] == doctest::Approx(1.959963984540054 * 1.959963984540054).epsilon(1e-9));
    CHECK_FALSE(r.contains(vec({0.0})));
    CHECK_FALSE(r.contains(vec({1.95})));
    CHECK(r.contains(vec({1.97})));
    CHECK(r.contains(vec({-1.97})));
    // MC: the boundary found by scanning matches the standard-normal quantile.
    const double mass =
        mc_region_mass([&](const Vector& z) { return r.contains(z); }, mixture_sampler(g1), 200000, 1);
    CHECK(std::abs(mass - 0.05) < 3.0 * std::sqrt(0.05 * 0.95 / 200000.0));

    Matrix means(2, 2);
    means << -2, 0, 2, 1;
    const GaussianMixture g2(vec({0.4, 0.6}), means, {Matrix::Identity(2, 2), Matrix::Identity(2, 2) * 0.5}, 0.0);
    const auto tight = density_region(g2, 0.01);
    const auto loose = density_region(g2, 0.10);
    CHECK_FALSE(tight.contains(vec({-2, 0})));
    CHECK_FALSE(loose.contains(vec({2, 1})));
    std::mt19937_64 rng(14);
    for (int t = 0; t < 10000; ++t) {
        const Vector z = testing::gaussian_vector(rng, 2, 4.0);
        if (tight.contains(z)) REQUIRE(loose.contains(z));
    }
}

TEST_CASE("Monte-Carlo mass basics") {
    const auto normal2 = [](std::mt19937_64& rng) {
        std::normal_distribution<double> nd(0.0, 1.0);
        return vec({nd(rng), nd(rng)});
    };
    CHECK(mc_region_mass([](const Vector&) { return true; }, normal2, 1000, 1) == 1.0);
    const std::size_t n = 300000;
    const double half = mc_region_mass([](const Vector& z) { return z[0] + 0.3 * z[1] > 0.0; }, normal2, n, 2);
    CHECK(std::abs(half - 0.5) < 3.0 * std::sqrt(0.25 / static_cast<double>(n)));
    const auto pred = [](const Vector& z) { return z.norm() < 1.0; };
    CHECK(mc_region_mass(pred, normal2, n, 3, 1) == mc_region_mass(pred, normal2, n, 3, 3));
    CHECK_THROWS_AS(mc_region_mass(pred, normal2, 0, 3), ConfigError);
}

TEST_CASE("region JSON exports carry their parameters") {
    const auto head = gen_optimal_head({3, 4, 1.0, 5.0}, 2);
    const auto region = fit_linear_region(head, -0.9, 0.05);
    const auto j = to_json(region);
    CHECK(j.at("type") == "linear_approx");
    CHECK(j.at("slabs").size() == 3);
    CHECK(j.at("u_star").get<double>() == -0.9);
}
