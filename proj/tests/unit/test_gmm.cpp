#include "softconf/errors.hpp"
#include "softconf/gmm.hpp"

#include "support.hpp"

#include <numbers>

using namespace softconf;
using testing::vec;

namespace {

double normal_pdf(const Vector& z, const Vector& mu, const Matrix& cov) {
    const Index h = z.size();
    const Vector d = z - mu;
    const double q = d.dot(cov.inverse() * d);
    return std::exp(-0.5 * q) / std::sqrt(std::pow(2.0 * std::numbers::pi, static_cast<double>(h)) * cov.determinant());
}

double brute_density(const GaussianMixture& g, const Vector& z) {
    double s = 0.0;
    for (Index c = 0; c < g.k(); ++c)
        s += g.weights()[c] * normal_pdf(z, g.means().row(c).transpose(), g.covariances()[static_cast<std::size_t>(c)]);
    return s;
}

struct Planted {
    FeatureMatrix x;
    LabelVector y;
};

Planted planted_blobs(std::mt19937_64& rng, const std::vector<Vector>& means, double sd, int per_class) {
    const Index h = means.front().size();
    Matrix x(static_cast<Index>(means.size()) * per_class, h);
    std::vector<std::uint32_t> y;
    Index r = 0;
    for (std::size_t c = 0; c < means.size(); ++c)
        for (int i = 0; i < per_class; ++i) {
            x.row(r++) = (means[c] + testing::gaussian_vector(rng, h, sd)).transpose();
            y.push_back(static_cast<std::uint32_t>(c));
        }
    return {FeatureMatrix(x), LabelVector(y, static_cast<std::uint32_t>(means.size()))};
}

}  // namespace

TEST_CASE("log_density of a standard normal at the origin") {
    const GaussianMixture g(vec({1.0}), Matrix::Zero(1, 1), {Matrix::Identity(1, 1)}, 0.0);
    CHECK(log_density(g, vec({0.0})) == doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-15));
}

TEST_CASE("log_density matches direct summation") {
    Matrix means(2, 2);
    means << -1, 0, 1, 0;
    const GaussianMixture g(vec({0.5, 0.5}), means, {Matrix::Identity(2, 2), Matrix::Identity(2, 2)}, 0.0);
    CHECK(std::abs(log_density(g, vec({0, 0})) - std::log(brute_density(g, vec({0, 0})))) < 1e-12);

    std::mt19937_64 rng(1);
    std::vector<Matrix> covs;
    for (int c = 0; c < 3; ++c) {
        const Matrix a = testing::gaussian_matrix(rng, 3, 3);
        covs.push_back(a * a.transpose() + 0.5 * Matrix::Identity(3, 3));
    }
    const GaussianMixture g3(vec({0.2, 0.5, 0.3}), testing::gaussian_matrix(rng, 3, 3, 2.0), covs, 0.0);
    std::vector<std::pair<double, double>> pairs;
    for (int t = 0; t < 100; ++t) {
        const Vector z = testing::gaussian_vector(rng, 3, 2.0);
        const double direct = std::log(brute_density(g3, z));
        REQUIRE(std::abs(log_density(g3, z) - direct) < 1e-10 * std::max(1.0, std::abs(direct)));
        pairs.emplace_back(direct, u_density(g3, z).value);
    }
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t i = 1; i < pairs.size(); ++i) REQUIRE(pairs[i].second < pairs[i - 1].second);
}

TEST_CASE("a tight component dominates at its mean") {
    Matrix means(2, 2);
    means << 0, 0, 10, 0;
    const GaussianMixture g(vec({0.3, 0.7}), means, {Matrix::Identity(2, 2) * 1e-3, Matrix::Identity(2, 2)}, 0.0);
    const double peak = -0.5 * (2.0 * std::log(2.0 * std::numbers::pi) + 2.0 * std::log(1e-3));
    CHECK(std::abs(log_density(g, vec({0, 0})) - (std::log(0.3) + peak)) < 1e-6);
}

TEST_CASE("u_density is radially monotone for spherical components") {
    Matrix means(2, 2);
    means << 0, 0, 0.5, 0;
    const GaussianMixture g(vec({0.5, 0.5}), means, {Matrix::Identity(2, 2), Matrix::Identity(2, 2)}, 0.0);
    double prev = -1e300;
    for (int i = 0; i < 50; ++i) {
        const double s = u_density(g, vec({1.0 + 0.5 * i, 0.3 * i})).value;
        REQUIRE(s > prev);
        prev = s;
    }
}

TEST_CASE("u_density is minimal at the mean of the dominant component") {
    Matrix means(2, 2);
    means << -3, 0, 3, 0;
    const GaussianMixture g(vec({0.5, 0.5}), means, {Matrix::Identity(2, 2), Matrix::Identity(2, 2)}, 0.0);
    const double at_mean = u_density(g, vec({3, 0})).value;
    for (int i = -40; i <= 40; ++i)
        for (int j = -20; j <= 20; ++j) {
            const Vector z = vec({3.0 + 0.05 * i, 0.05 * j});
            if (i == 0 && j == 0) continue;
            REQUIRE(u_density(g, z).value >= at_mean);
        }
}

TEST_CASE("mixture construction validation") {
    CHECK_THROWS_AS(GaussianMixture(vec({1.0}), Matrix::Zero(1, 2), {Matrix::Zero(2, 2)}, 0.0), SingularModelError);
    CHECK_THROWS_AS(GaussianMixture(vec({0.5}), Matrix::Zero(1, 2), {Matrix::Identity(2, 2)}, 0.0), NumericalError);
    Matrix asym = Matrix::Identity(2, 2);
    asym(0, 1) = 0.1;
    CHECK_THROWS_AS(GaussianMixture(vec({1.0}), Matrix::Zero(1, 2), {asym}, 0.0), NumericalError);
    const GaussianMixture g(vec({1.0}), Matrix::Zero(1, 2), {Matrix::Identity(2, 2)}, 0.0);
    CHECK_THROWS_AS(log_density(g, vec({1, 2, 3})), DimensionError);
}

TEST_CASE("EM recovers two planted spherical Gaussians") {
    std::mt19937_64 rng(2);
    const auto data = planted_blobs(rng, {vec({5, 0}), vec({-5, 0})}, 1.0, 1000);
    EmConfig cfg;
    cfg.k_components = 2;
    cfg.init = EmInit::kmeans_pp;
    cfg.seed = 4;
    const auto fit = fit_em(data.x, nullptr, cfg);
    const auto& m = fit.model;
    const Index first = m.means()(0, 0) > 0 ? 0 : 1;
    CHECK((m.means().row(first).transpose() - vec({5, 0})).norm() < 0.1);
    CHECK((m.means().row(1 - first).transpose() - vec({-5, 0})).norm() < 0.1);
    CHECK(std::abs(m.weights()[0] - 0.5) < 0.05);
    CHECK(fit.converged);
}

TEST_CASE("single-component EM is the sample moments") {
    std::mt19937_64 rng(3);
    const FeatureMatrix x(testing::gaussian_matrix(rng, 300, 3) * 2.0);
    EmConfig cfg;
    cfg.k_components = 1;
    cfg.init = EmInit::kmeans_pp;
    cfg.reg = 1e-3;
    const auto fit = fit_em(x, nullptr, cfg);
    const Vector mean = x.data().colwise().mean().transpose();
    const Matrix centered = x.data().rowwise() - mean.transpose();
    Matrix cov = centered.transpose() * centered / 300.0;
    cov.diagonal().array() += 1e-3;
    CHECK((fit.model.means().row(0).transpose() - mean).norm() < 1e-12);
    CHECK((fit.model.covariances()[0] - cov).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(fit.model.weights()[0] == 1.0);

    // With one component, density order is Mahalanobis order.
    std::vector<std::pair<double, double>> pairs;
    for (int t = 0; t < 200; ++t) {
        const Vector z = testing::gaussian_vector(rng, 3, 3.0);
        pairs.emplace_back(fit.model.mahalanobis_sq(0, z), u_density(fit.model, z).value);
    }
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t i = 1; i < pairs.size(); ++i) REQUIRE(pairs[i].second >= pairs[i - 1].second);
}

TEST_CASE("label init on separated classes is already a fixed point") {
    std::mt19937_64 rng(5);
    const auto data = planted_blobs(rng, {vec({100, 0, 0}), vec({0, 100, 0}), vec({0, 0, 100})}, 0.5, 200);
    const auto mm = moment_match(data.x, data.y, 1e-5);
    const auto fit = fit_em(data.x, &data.y, EmConfig{});
    for (Index c = 0; c < 3; ++c) {
        CHECK((fit.model.means().row(c) - mm.means().row(c)).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((fit.model.covariances()[static_cast<std::size_t>(c)] - mm.covariances()[static_cast<std::size_t>(c)])
                  .cwiseAbs()
                  .maxCoeff() < 1e-8);
        CHECK(std::abs(fit.model.weights()[c] - mm.weights()[c]) < 1e-8);
    }
}

TEST_CASE("EM log-likelihood never decreases") {
    std::mt19937_64 rng(6);
    int stopped = 0;
    for (int t = 0; t < 50; ++t) {
        const Index h = 1 + static_cast<Index>(rng() % 4);
        const Index k = 1 + static_cast<Index>(rng() % 4);
        std::vector<Vector> means;
        for (Index c = 0; c < k; ++c) means.push_back(testing::gaussian_vector(rng, h, 3.0));
        const auto data = planted_blobs(rng, means, 1.0, 60);
        EmConfig cfg;
        cfg.k_components = static_cast<std::size_t>(k + static_cast<Index>(rng() % 2));
        cfg.init = EmInit::kmeans_pp;
        cfg.seed = static_cast<std::uint64_t>(t);
        cfg.rel_tol = 1e-10;
        const auto fit = fit_em(data.x, nullptr, cfg);
        for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i) {
            const bool after_reinit =
                std::find(fit.reinit_points.begin(), fit.reinit_points.end(), i) != fit.reinit_points.end();
            if (!after_reinit) REQUIRE(fit.log_likelihood[i] >= fit.log_likelihood[i - 1] - 1e-9);
        }
        stopped += fit.stopped_on_decrease ? 1 : 0;
    }
    MESSAGE("fits stopped by a non-improving regularized step: " << stopped);
}

TEST_CASE("EM is deterministic and order invariant with label init") {
    std::mt19937_64 rng(7);
    const auto data = planted_blobs(rng, {vec({2, 0}), vec({-2, 0}), vec({0, 3})}, 1.0, 150);
    const auto a = fit_em(data.x, &data.y, EmConfig{});
    const auto b = fit_em(data.x, &data.y, EmConfig{});
    CHECK(a.model.means() == b.model.means());
    CHECK(a.log_likelihood == b.log_likelihood);

    std::vector<Index> perm(static_cast<std::size_t>(data.x.n()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix px(data.x.n(), data.x.h());
    std::vector<std::uint32_t> py;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        px.row(static_cast<Index>(i)) = data.x.data().row(perm[i]);
        py.push_back(data.y[static_cast<std::size_t>(perm[i])]);
    }
    const LabelVector ply(py, 3);
    const auto c = fit_em(FeatureMatrix(px), &ply, EmConfig{});
    CHECK((a.model.means() - c.model.means()).cwiseAbs().maxCoeff() < 1e-8);
    for (std::size_t k = 0; k < 3; ++k)
        CHECK((a.model.covariances()[k] - c.model.covariances()[k]).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((a.model.weights() - c.model.weights()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("EM config validation") {
    const FeatureMatrix x(Matrix::Random(10, 2));
    EmConfig cfg;
    CHECK_THROWS_AS(fit_em(x, nullptr, cfg), ConfigError);
    cfg.k_components = 2;
    cfg.max_iter = 0;
    CHECK_THROWS_AS(fit_em(x, nullptr, cfg), ConfigError);
    cfg.max_iter = 10;
    cfg.rel_tol = 0.0;
    CHECK_THROWS_AS(fit_em(x, nullptr, cfg), ConfigError);
    cfg.rel_tol = 1e-6;
    cfg.reg = -1.0;
    CHECK_THROWS_AS(fit_em(x, nullptr, cfg), ConfigError);
}

TEST_CASE("zero regularization on degenerate data is a singular model") {
    Matrix x(6, 2);
    x << 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5;
    EmConfig cfg;
    cfg.k_components = 1;
    cfg.init = EmInit::kmeans_pp;
    cfg.reg = 0.0;
    CHECK_THROWS_AS(fit_em(FeatureMatrix(x), nullptr, cfg), SingularModelError);
}

TEST_CASE("log transform fits on log features") {
    std::mt19937_64 rng(8);
    Matrix x = (testing::gaussian_matrix(rng, 200, 2, 0.3).array() + 1.0).exp().matrix();
    EmConfig cfg;
    cfg.k_components = 1;
    cfg.init = EmInit::kmeans_pp;
    cfg.transform = FeatureTransform::log;
    const auto fit = fit_em(FeatureMatrix(x), nullptr, cfg);
    CHECK(fit.model.transform() == FeatureTransform::log);
    CHECK((fit.model.means().row(0).array() - 1.0).abs().maxCoeff() < 0.1);
}

TEST_CASE("JSON round-trip is exact on scores") {
    std::mt19937_64 rng(9);
    const auto data = planted_blobs(rng, {vec({1, 0, 0}), vec({-1, 0.5, 0})}, 0.7, 100);
    const auto fit = fit_em(data.x, &data.y, EmConfig{});
    const auto dir = testing::scratch_dir("gmm_json");
    save_gmm(dir / "g.json", fit.model);
    const auto back = load_gmm(dir / "g.json");
    for (int t = 0; t < 100; ++t) {
        const Vector z = testing::gaussian_vector(rng, 3, 2.0);
        REQUIRE(u_density(back, z).value == u_density(fit.model, z).value);
    }
    auto j = to_json(fit.model);
    j["version"] = 99;
    CHECK_THROWS_AS(gmm_from_json(j), IoError);
    j = to_json(fit.model);
    j.erase("means");
    CHECK_THROWS_AS(gmm_from_json(j), IoError);
}
