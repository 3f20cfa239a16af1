#include "softconf/errors.hpp"
#include "softconf/structure.hpp"

#include "support.hpp"

#include <algorithm>
#include <numeric>

using namespace softconf;
using testing::cols;
using testing::vec;

namespace {

std::vector<double> sorted_copy(const Vector& v) {
    std::vector<double> out(v.data(), v.data() + v.size());
    std::sort(out.begin(), out.end());
    return out;
}

Matrix random_orthogonal(std::mt19937_64& rng, Index h) {
    const Eigen::HouseholderQR<Matrix> qr(testing::gaussian_matrix(rng, h, h));
    return qr.householderQ();
}

}  // namespace

TEST_CASE("optimal head is exact for a range of sizes") {
    for (Index k : {2, 3, 5, 10, 50})
        for (Index h : {k - 1, 2 * k, Index{512}}) {
            if (h < 1) continue;
            CAPTURE(k);
            CAPTURE(h);
            const auto head = gen_optimal_head({k, h, 2.5, 5.0}, 17);
            const auto r = audit_head(head);
            CHECK(r.max_abs_cos_deviation < 1e-10);
            CHECK(r.norm_cv < 1e-10);
            CHECK((r.weight_norms.array() - 2.5).abs().maxCoeff() < 1e-10);
            CHECK(r.max_abs_bias == 0.0);
            CHECK(head.weights().rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
        }
}

TEST_CASE("optimal head depends only on the seed") {
    const auto a = gen_optimal_head({4, 9, 1.0, 5.0}, 3);
    const auto b = gen_optimal_head({4, 9, 1.0, 5.0}, 3);
    const auto c = gen_optimal_head({4, 9, 1.0, 5.0}, 4);
    CHECK(a.weights() == b.weights());
    CHECK((a.weights() - c.weights()).norm() > 1e-3);
}

TEST_CASE("optimal structure spec validation") {
    CHECK_THROWS_AS(gen_optimal_head({1, 4, 1.0, 5.0}, 0), ConfigError);
    CHECK_THROWS_AS(gen_optimal_head({5, 3, 1.0, 5.0}, 0), ConfigError);
    CHECK_THROWS_AS(gen_optimal_head({3, 4, 0.0, 5.0}, 0), ConfigError);
    CHECK_THROWS_AS(gen_optimal_head({3, 4, 1.0, -1.0}, 0), ConfigError);
}

TEST_CASE("embedding basis is orthonormal") {
    const Matrix q = embedding_basis(20, 4, 9);
    CHECK((q.transpose() * q - Matrix::Identity(4, 4)).norm() < 1e-12);
    CHECK(embedding_basis(20, 4, 9) == q);
    CHECK_THROWS_AS(embedding_basis(3, 4, 0), ConfigError);
}

TEST_CASE("counterfactual heads have their defining properties") {
    const double c = 1.5;
    const auto opt = gen_counterfactual_head(StructureKind::optimal, 3, 8, 2, c);
    const auto ro = audit_head(opt.head);
    CHECK(ro.max_abs_cos_deviation < 1e-12);
    CHECK((ro.weight_norms.array() - c).abs().maxCoeff() < 1e-12);

    const auto sw = gen_counterfactual_head(StructureKind::sandwich, 3, 8, 2, c);
    const auto rs = audit_head(sw.head);
    CHECK(sorted_copy(rs.pairwise_cos)[0] == doctest::Approx(-1.0));
    CHECK(rs.max_abs_cos_deviation == doctest::Approx(0.5));
    CHECK(rs.norm_cv < 1e-12);

    const auto st = gen_counterfactual_head(StructureKind::stack, 3, 8, 2, c);
    const auto rt = audit_head(st.head);
    for (Index p = 0; p < 3; ++p) CHECK(rt.pairwise_cos[p] == doctest::Approx(1.0));
    CHECK(st.head.bias()[1] == doctest::Approx(-c * c));
    CHECK(st.head.bias()[2] == doctest::Approx(-3.0 * c * c));
    // Every class still owns a region along the shared direction.
    for (Index i = 0; i < 3; ++i) {
        const Vector z = st.basis.col(0) * (c * (0.5 + static_cast<double>(i)) + (i == 0 ? -3.0 : 0.0));
        CHECK(argmax_lowest(st.head.logits(z)) == i);
    }

    const auto lo = gen_counterfactual_head(StructureKind::lopsided, 3, 8, 2, c);
    const auto rl = audit_head(lo.head);
    CHECK(rl.max_abs_cos_deviation < 1e-12);
    CHECK(rl.weight_norms[2] == doctest::Approx(4.0 * c));
    CHECK(rl.norm_cv > 0.5);

    for (auto kind : {StructureKind::optimal, StructureKind::sandwich, StructureKind::stack, StructureKind::lopsided}) {
        const auto g = gen_counterfactual_head(kind, 3, 8, 2, c);
        CHECK(parse_structure(to_string(kind)) == kind);
        CHECK((g.basis - opt.basis).norm() == 0.0);
        CHECK(g.constants.at("c").get<double>() == c);
    }
    CHECK_THROWS_AS(gen_counterfactual_head(StructureKind::optimal, 4, 8, 2), ConfigError);
    CHECK_THROWS_AS(parse_structure("tetra"), ConfigError);
}

TEST_CASE("audit of the 2-D sandwich head") {
    const auto r = audit_head(testing::sandwich_head_2d());
    CHECK(r.target_cos == doctest::Approx(-0.5));
    CHECK(r.pairwise_cos[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.pairwise_cos[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.pairwise_cos[2] == doctest::Approx(-1.0));
    CHECK(r.max_abs_cos_deviation == doctest::Approx(0.5));
    CHECK(r.mean_abs_cos_deviation == doctest::Approx(0.5));
    std::size_t total = std::accumulate(r.cos_histogram.counts.begin(), r.cos_histogram.counts.end(), std::size_t{0});
    CHECK(total == 3);
    CHECK(r.cos_histogram.counts.front() == 1);
    const auto j = to_json(r);
    CHECK(j.at("pairwise_cos").size() == 3);
    CHECK(j.at("cos_histogram").at("edges").size() == 21);
}

TEST_CASE("random wide heads look nearly orthogonal") {
    std::mt19937_64 rng(5);
    const auto head = testing::random_head(rng, 512, 100, 0.0);
    const auto r = audit_head(head);
    const double mean_cos = r.pairwise_cos.mean();
    CHECK(std::abs(mean_cos) < 0.01);
    CHECK(r.max_abs_cos_deviation < 0.3);
    CHECK(r.target_cos == doctest::Approx(-1.0 / 99.0));
}

TEST_CASE("audit is invariant to rotation and class permutation") {
    std::mt19937_64 rng(6);
    const auto head = testing::random_head(rng, 7, 5, 0.3);
    const auto base = audit_head(head);
    const Matrix q = random_orthogonal(rng, 7);
    const auto rotated = audit_head(SoftmaxHead(q * head.weights(), head.bias()));
    CHECK((rotated.pairwise_cos - base.pairwise_cos).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(rotated.norm_cv == doctest::Approx(base.norm_cv).epsilon(1e-12));

    std::vector<Index> perm{3, 0, 4, 1, 2};
    Matrix w(7, 5);
    Vector b(5);
    for (Index i = 0; i < 5; ++i) {
        w.col(i) = head.column(perm[static_cast<std::size_t>(i)]);
        b[i] = head.bias()[perm[static_cast<std::size_t>(i)]];
    }
    const auto permuted = audit_head(SoftmaxHead(w, b));
    const auto a = sorted_copy(base.pairwise_cos), p = sorted_copy(permuted.pairwise_cos);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(p[i]).epsilon(1e-12));
    CHECK(permuted.mean_abs_cos_deviation == doctest::Approx(base.mean_abs_cos_deviation).epsilon(1e-12));
    CHECK(permuted.max_abs_bias == base.max_abs_bias);
}

TEST_CASE("audit rejects zero columns") {
    CHECK_THROWS_AS(audit_head(SoftmaxHead(cols({{1, 0}, {0, 0}, {0, 1}}))), DegenerateWeightError);
}

TEST_CASE("target cosine rises toward zero with more classes") {
    double prev = -2.0;
    for (Index k = 2; k <= 100; ++k) {
        const auto r = audit_head(gen_optimal_head({k, k + 1, 1.0, 5.0}, static_cast<std::uint64_t>(k)));
        REQUIRE(r.target_cos > prev);
        REQUIRE(std::abs(r.pairwise_cos.mean() - r.target_cos) < 1e-10);
        prev = r.target_cos;
    }
    CHECK(prev == doctest::Approx(-1.0 / 99.0));
}

TEST_CASE("histograms and summaries") {
    const auto h = make_histogram({-5.0, 0.0, 0.49, 0.5, 1.0, 9.0}, 2, 0.0, 1.0);
    CHECK(h.edges == std::vector<double>{0.0, 0.5, 1.0});
    CHECK(h.counts == std::vector<std::size_t>{3, 3});
    const auto d = make_histogram({2.0, 2.0}, 4, 2.0, 2.0);
    CHECK(std::accumulate(d.counts.begin(), d.counts.end(), std::size_t{0}) == 2);
    CHECK_THROWS_AS(make_histogram({1.0}, 0, 0.0, 1.0), ConfigError);

    std::vector<double> v(101);
    std::iota(v.begin(), v.end(), 0.0);
    const auto s = summarize(v, 10, 0.0, 100.0);
    CHECK(s.mean == doctest::Approx(50.0));
    CHECK(s.min == 0.0);
    CHECK(s.max == 100.0);
    CHECK(s.quantiles == std::vector<double>{5.0, 25.0, 50.0, 75.0, 95.0});
    CHECK(s.std_dev == doctest::Approx(std::sqrt((101.0 * 101.0 - 1.0) / 12.0)));
    CHECK_THROWS_AS(summarize({}, 10, 0.0, 1.0), ConfigError);
}

TEST_CASE("angle statistics of points on the class directions") {
    const auto head = gen_optimal_head({3, 4, 2.0, 5.0}, 1);
    const auto data = structured_clusters(head, 3.0, 0.0, 10, 2);
    const auto st = angle_stats(data.features, head);
    REQUIRE(st.z_norm.size() == 30);
    for (std::size_t i = 0; i < 30; ++i) {
        CHECK(st.z_norm[i] == doctest::Approx(6.0));
        CHECK(st.max_cos[i] == doctest::Approx(1.0));
    }
    CHECK(st.max_cos_summary.quantiles[2] == doctest::Approx(1.0));
    const auto j = to_json(st);
    CHECK(j.at("n") == 30);
    CHECK(j.at("max_cos").at("quantiles").size() == 5);
    CHECK_THROWS_AS(angle_stats(FeatureMatrix(Matrix::Zero(2, 3)), head), DimensionError);
}

TEST_CASE("structured clusters") {
    const auto head = gen_optimal_head({4, 6, 1.0, 5.0}, 8);
    const auto data = structured_clusters(head, 5.0, 0.3, 50, 9);
    CHECK(data.features.n() == 200);
    CHECK(data.labels.counts() == std::vector<std::size_t>{50, 50, 50, 50});
    for (Index c = 0; c < 4; ++c) {
        Vector m = Vector::Zero(6);
        for (Index i = 0; i < 50; ++i) m += data.features.row(c * 50 + i).transpose();
        m /= 50.0;
        CHECK((m - 5.0 * head.column(c)).norm() < 0.3);
    }
    const auto again = structured_clusters(head, 5.0, 0.3, 50, 9);
    CHECK(again.features.data() == data.features.data());
}

TEST_CASE("regularized cross-entropy examples") {
    // Two points on opposite sides with a symmetric head.
    const SoftmaxHead head(cols({{1, 0}, {-1, 0}}), vec({0.5, -0.5}));
    const FeatureMatrix x(Matrix{{2.0, 0.0}, {-2.0, 0.0}});
    const LabelVector y({0, 1}, 2);
    const double ce0 = std::log1p(std::exp(-5.0));
    const double ce1 = std::log1p(std::exp(-3.0));
    CHECK(regularized_xent(x, y, head, 0.0) == doctest::Approx(0.5 * (ce0 + ce1)).epsilon(1e-12));
    CHECK(regularized_xent(x, y, head, 0.1) == doctest::Approx(0.5 * (ce0 + ce1) + 0.1 * 2.5).epsilon(1e-12));

    const SoftmaxHead zero(Matrix::Zero(2, 3));
    const FeatureMatrix any(Matrix{{1.0, 2.0}, {3.0, -4.0}});
    CHECK(regularized_xent(any, LabelVector({0, 2}, 3), zero, 1.0) == doctest::Approx(std::log(3.0)));

    CHECK_THROWS_AS(regularized_xent(x, LabelVector({0}, 2), head, 0.0), DimensionError);
    CHECK_THROWS_AS(regularized_xent(x, y, head, -1.0), ConfigError);
}

TEST_CASE("optimal structure has the lowest regularized loss") {
    const double lambda1 = 0.01;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        const auto opt = gen_counterfactual_head(StructureKind::optimal, 3, 6, seed);
        const auto data = structured_clusters(opt.head, 5.0, 1.0, 200, seed + 100);
        const double l_opt = regularized_xent(data.features, data.labels, opt.head, lambda1);
        for (auto kind : {StructureKind::sandwich, StructureKind::stack, StructureKind::lopsided}) {
            CAPTURE(to_string(kind));
            const auto other = gen_counterfactual_head(kind, 3, 6, seed);
            CHECK(l_opt < regularized_xent(data.features, data.labels, other.head, lambda1));
        }
    }
}
