#include "softconf/geometry.hpp"

#include "softconf/errors.hpp"
#include "softconf/estimators.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

namespace softconf {

namespace {

constexpr double kAlphaTol = 1e-10;
constexpr int kMaxIter = 60;
constexpr int kMaxDoublings = 60;
constexpr double kSeparableMass = 1e-4;

void check_epsilon(double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must lie in (0, 1)");
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Boundary point closest to the origin for the (i, j) pair.
Vector boundary_anchor(const SoftmaxHead& head, Index i, Index j) {
    const Vector n = head.column(i) - head.column(j);
    const double nn = n.squaredNorm();
    if (nn == 0.0)
        throw DegenerateWeightError("classes " + std::to_string(i) + " and " + std::to_string(j) +
                                    " have identical weights");
    return -(head.bias()[i] - head.bias()[j]) / nn * n;
}

double logit_threshold(double p_star) {
    if (!(p_star < 1.0)) return std::numeric_limits<double>::infinity();
    if (p_star <= 0.5) return 0.0;
    return std::log(p_star / (1.0 - p_star));
}

std::vector<double> to_std(const VecRef& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

double empirical_threshold(std::vector<double> scores, double epsilon) {
    if (scores.empty()) throw ConfigError("empirical threshold needs at least one score");
    check_epsilon(epsilon);
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericalError("non-finite training score");
    std::sort(scores.begin(), scores.end());
    const double n = static_cast<double>(scores.size());
    // The small slack keeps exact products such as 0.95 * 100 from rounding up a rank.
    auto rank = static_cast<std::size_t>(std::ceil((1.0 - epsilon) * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, scores.size());
    return scores[rank - 1];
}

void GaussianClassModel::validate() const {
    if (means.empty()) throw ConfigError("class model has no classes");
    if (covariances.size() != means.size() || priors.size() != k())
        throw DimensionError("class model means, covariances and priors disagree on class count");
    for (std::size_t c = 0; c < means.size(); ++c) {
        if (means[c].size() != h() || covariances[c].rows() != h() || covariances[c].cols() != h())
            throw DimensionError("class model component " + std::to_string(c) + " has the wrong dimension");
        Eigen::LLT<Matrix> llt(covariances[c]);
        if (llt.info() != Eigen::Success) throw SingularModelError("class covariance is not positive definite");
    }
    if ((priors.array() <= 0.0).any() || std::abs(priors.sum() - 1.0) > 1e-9)
        throw ConfigError("class priors must be positive and sum to 1");
}

bool SlabRegion::contains(const VecRef& z) const {
    const double g = gap(z);
    const double nn = normal.squaredNorm();
    return g > -alpha_lo * nn && g < alpha_hi * nn;
}

namespace {

void check_k2_head(const SoftmaxHead& head) {
    if (head.k() != 2) throw ConfigError("the exact slab needs exactly two classes");
    const double scale = std::max(1.0, head.column(0).norm());
    if ((head.column(0) + head.column(1)).norm() > 1e-8 * scale)
        throw ConfigError("the exact slab needs w_1 = -w_2");
    if (head.column(0).squaredNorm() == 0.0) throw DegenerateWeightError("w_1 has zero norm");
}

struct ProjectedClass {
    double mean;
    double sd;
    double prior;
};

std::vector<ProjectedClass> project_classes(const GaussianClassModel& model, const SoftmaxHead& head,
                                            const Vector& z0) {
    const Vector w = head.column(0);
    std::vector<ProjectedClass> out;
    for (Index c = 0; c < model.k(); ++c) {
        const auto& mu = model.means[static_cast<std::size_t>(c)];
        const auto& cov = model.covariances[static_cast<std::size_t>(c)];
        out.push_back({w.dot(mu - z0), std::sqrt(w.dot(cov * w)), model.priors[c]});
    }
    return out;
}

double slab_mass(const std::vector<ProjectedClass>& pc, double half_width) {
    double m = 0.0;
    for (const auto& c : pc)
        m += c.prior * (normal_cdf((half_width - c.mean) / c.sd) - normal_cdf((-half_width - c.mean) / c.sd));
    return m;
}

}  // namespace

double k2_slab_mass(const GaussianClassModel& model, const SoftmaxHead& head, double alpha) {
    model.validate();
    check_k2_head(head);
    if (model.k() != 2 || model.h() != head.h()) throw DimensionError("class model does not match the head");
    const Vector z0 = boundary_anchor(head, 0, 1);
    return slab_mass(project_classes(model, head, z0), alpha * head.column(0).squaredNorm());
}

ExactSlabSolution solve_alpha_exact_k2(const GaussianClassModel& model, const SoftmaxHead& head, double epsilon) {
    model.validate();
    check_epsilon(epsilon);
    check_k2_head(head);
    if (model.k() != 2) throw ConfigError("the exact slab needs a two-class model");
    if (model.h() != head.h()) throw DimensionError("class model dimension does not match the head");

    const Vector w = head.column(0);
    const double ww = w.squaredNorm();
    const Vector z0 = boundary_anchor(head, 0, 1);
    const auto pc = project_classes(model, head, z0);

    ExactSlabSolution sol;
    for (const auto& c : pc) {
        // Mass of the class on the far side of the boundary from its own mean.
        const double crossing = normal_cdf(-std::abs(c.mean) / c.sd);
        sol.max_crossing_mass = std::max(sol.max_crossing_mass, crossing);
    }
    sol.separable = sol.max_crossing_mass < kSeparableMass;

    const auto f = [&](double alpha) { return slab_mass(pc, alpha * ww) - epsilon; };
    double lo = 0.0, hi = 1.0;
    if (!(f(lo) < 0.0)) throw NumericalError("slab mass at alpha = 0 is not below epsilon");
    int doublings = 0;
    while (f(hi) < 0.0) {
        if (++doublings > kMaxDoublings) throw NumericalError("no sign change while bracketing alpha");
        lo = hi;
        hi *= 2.0;
    }
    int it = 0;
    while (hi - lo > kAlphaTol && it < kMaxIter) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) < 0.0 ? lo : hi) = mid;
        ++it;
    }
    sol.alpha = 0.5 * (lo + hi);
    sol.iterations = it;
    // In gap units (n = w_1 - w_2 = 2 w_1), |w_1.(z - z0)| < alpha |w_1|^2 is |g| < alpha / 2 |n|^2.
    sol.slab = SlabRegion{w - head.column(1), z0, 0.5 * sol.alpha, 0.5 * sol.alpha, 0, 1};
    return sol;
}

LinearApproxRegion::LinearApproxRegion(SoftmaxHead head, std::vector<SlabRegion> slabs, RegionSpec spec)
    : head_(std::move(head)), slabs_(std::move(slabs)), spec_(spec) {
    const auto k = static_cast<std::size_t>(head_.k());
    if (slabs_.size() != k * (k - 1) / 2) throw DimensionError("linear region needs one slab per class pair");
    for (const auto& s : slabs_) {
        if (s.normal.size() != head_.h() || s.anchor.size() != head_.h())
            throw DimensionError("slab dimension does not match the head");
        if (!(s.alpha_lo >= 0.0) || !(s.alpha_hi >= 0.0)) throw ConfigError("slab offsets must be >= 0");
    }
}

const SlabRegion& LinearApproxRegion::slab(Index i, Index j) const {
    for (const auto& s : slabs_)
        if ((s.class_i == i && s.class_j == j) || (s.class_i == j && s.class_j == i)) return s;
    throw ConfigError("no slab for classes " + std::to_string(i) + ", " + std::to_string(j));
}

bool LinearApproxRegion::contains(const VecRef& z) const {
    const Index a = argmax_lowest(head_.logits(z));
    for (const auto& s : slabs_) {
        if (s.class_i != a && s.class_j != a) continue;
        if (s.contains(z)) return true;
    }
    return false;
}

double contour_offset(const SoftmaxHead& head, Index i, Index j, const VecRef& base, double p_star,
                      double direction) {
    const Vector n = (head.column(i) - head.column(j)).normalized();
    const auto conf = [&](double s) { return softmax(head, base + direction * s * n).maxCoeff(); };
    if (conf(0.0) >= p_star) return 0.0;
    double lo = 0.0, hi = 1.0;
    int doublings = 0;
    while (conf(hi) < p_star) {
        if (++doublings > kMaxDoublings) return std::numeric_limits<double>::infinity();
        lo = hi;
        hi *= 2.0;
    }
    const double tol = kAlphaTol * std::max(1.0, (head.column(i) - head.column(j)).norm());
    for (int it = 0; it < kMaxIter && hi - lo > tol; ++it) {
        const double mid = 0.5 * (lo + hi);
        (conf(mid) < p_star ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

std::optional<Vector> far_field_direction(const SoftmaxHead& head, Index i, Index j) {
    const Vector n = head.column(i) - head.column(j);
    const double nn = n.squaredNorm();
    if (nn == 0.0) throw DegenerateWeightError("identical weight columns");
    Vector e = head.column(i) - (head.column(i).dot(n) / nn) * n;
    if (e.norm() <= 1e-12 * std::sqrt(nn)) {
        // w_i and w_j are parallel: any direction perpendicular to n follows the boundary.
        if (head.h() < 2) return std::nullopt;
        Index axis = 0;
        n.cwiseAbs().minCoeff(&axis);
        e = Vector::Unit(head.h(), axis);
        e -= (e.dot(n) / nn) * n;
    }
    e.normalize();
    for (double sign : {1.0, -1.0}) {
        const Vector d = sign * e;
        const double mine = head.column(i).dot(d);
        double margin = std::numeric_limits<double>::infinity();
        for (Index k = 0; k < head.k(); ++k)
            if (k != i && k != j) margin = std::min(margin, mine - head.column(k).dot(d));
        if (margin > 0.0) return d;
    }
    return std::nullopt;
}

LinearApproxRegion fit_linear_region(const SoftmaxHead& head, double u_star, double epsilon,
                                     const LinearFitOptions& opts) {
    check_epsilon(epsilon);
    if (!std::isfinite(u_star)) throw NumericalError("u_star must be finite");
    if (!(opts.far_scale > 0.0)) throw ConfigError("far_scale must be positive");
    const double p_star = -u_star;
    const double far = opts.far_scale * head.weights().colwise().norm().maxCoeff();

    std::vector<SlabRegion> slabs;
    for (Index i = 0; i < head.k(); ++i)
        for (Index j = i + 1; j < head.k(); ++j) {
            const Vector n = head.column(i) - head.column(j);
            const double n_norm = n.norm();
            const Vector anchor = boundary_anchor(head, i, j);
            // Two-class limit of the contour: sigma = 1 / (1 + exp(-g)) = p_star. Shrunk by a few ulps so
            // slab points stay strictly below p_star after rounding.
            const double asymptotic = logit_threshold(p_star) / (n_norm * n_norm) * (1.0 - 1e-12);
            double lo = asymptotic, hi = asymptotic;
            if (const auto e = far_field_direction(head, i, j)) {
                const Vector base = anchor + far * *e;
                hi = std::min(asymptotic, contour_offset(head, i, j, base, p_star, 1.0) / n_norm);
                lo = std::min(asymptotic, contour_offset(head, i, j, base, p_star, -1.0) / n_norm);
            }
            slabs.push_back(SlabRegion{n, anchor, lo, hi, i, j});
        }
    return LinearApproxRegion(head, std::move(slabs), RegionSpec{epsilon, u_star, EstimatorId::max});
}

LinearApproxRegion fit_linear_region(const SoftmaxHead& head, const FeatureMatrix& train, double epsilon,
                                     const LinearFitOptions& opts) {
    const Vector scores = score_all(EstimatorId::max, head, nullptr, train);
    return fit_linear_region(head, empirical_threshold(to_std(scores), epsilon), epsilon, opts);
}

DensityRegion::DensityRegion(GaussianMixture gmm, Vector thresholds, double epsilon)
    : gmm_(std::move(gmm)), thresholds_(std::move(thresholds)), epsilon_(epsilon) {
    if (thresholds_.size() != gmm_.k()) throw DimensionError("one threshold per mixture component is required");
    if ((thresholds_.array() <= 0.0).any()) throw ConfigError("density thresholds must be positive");
}

bool DensityRegion::contains(const VecRef& z) const {
    const Vector x = gmm_.transform_point(z);
    for (Index c = 0; c < gmm_.k(); ++c)
        if (!(gmm_.mahalanobis_sq(c, x) > thresholds_[c])) return false;
    return true;
}

DensityRegion density_region(const GaussianMixture& gmm, double epsilon) {
    check_epsilon(epsilon);
    const boost::math::chi_squared_distribution<double> chi2(static_cast<double>(gmm.h()));
    const double c = boost::math::quantile(chi2, 1.0 - epsilon);
    return DensityRegion(gmm, Vector::Constant(gmm.k(), c), epsilon);
}

std::mt19937_64 shard_rng(std::uint64_t seed, std::uint64_t shard) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(shard), static_cast<std::uint32_t>(shard >> 32)};
    return std::mt19937_64(seq);
}

double mc_region_mass(const Predicate& contains, const Sampler& sampler, std::size_t n, std::uint64_t seed,
                      unsigned threads) {
    if (n == 0) throw ConfigError("Monte-Carlo sample count must be >= 1");
    const std::size_t shards = (n + kMcShardSize - 1) / kMcShardSize;
    std::vector<std::size_t> hits(shards, 0);
    const auto run_shard = [&](std::size_t s) {
        auto rng = shard_rng(seed, s);
        const std::size_t count = std::min(kMcShardSize, n - s * kMcShardSize);
        std::size_t h = 0;
        for (std::size_t i = 0; i < count; ++i)
            if (contains(sampler(rng))) ++h;
        hits[s] = h;
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(shards)));
    if (threads == 1) {
        for (std::size_t s = 0; s < shards; ++s) run_shard(s);
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t s = t; s < shards; s += threads) run_shard(s);
            });
        for (auto& th : pool) th.join();
    }
    return static_cast<double>(std::accumulate(hits.begin(), hits.end(), std::size_t{0})) / static_cast<double>(n);
}

Vector sample_slab_point(const SlabRegion& slab, std::mt19937_64& rng, double spread) {
    const double nn = slab.normal.squaredNorm();
    std::uniform_real_distribution<double> unif(-slab.alpha_lo * nn, slab.alpha_hi * nn);
    std::normal_distribution<double> normal(0.0, spread);
    Vector t(slab.normal.size());
    for (Index i = 0; i < t.size(); ++i) t[i] = normal(rng);
    t -= (t.dot(slab.normal) / nn) * slab.normal;
    const double g = slab.alpha_lo + slab.alpha_hi > 0.0 ? unif(rng) : 0.0;
    return slab.anchor + (g / nn) * slab.normal + t;
}

Sampler class_model_sampler(const GaussianClassModel& model) {
    model.validate();
    std::vector<Matrix> chol;
    for (const auto& c : model.covariances) chol.push_back(Eigen::LLT<Matrix>(c).matrixL());
    return [means = model.means, chol = std::move(chol), priors = model.priors](std::mt19937_64& rng) {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        double u = unif(rng);
        std::size_t c = means.size() - 1;
        for (std::size_t i = 0; i < means.size(); ++i) {
            if (u < priors[static_cast<Index>(i)]) {
                c = i;
                break;
            }
            u -= priors[static_cast<Index>(i)];
        }
        Vector e(means[c].size());
        for (Index j = 0; j < e.size(); ++j) e[j] = normal(rng);
        return Vector(means[c] + chol[c] * e);
    };
}

Sampler mixture_sampler(const GaussianMixture& gmm) {
    if (gmm.transform() != FeatureTransform::none)
        throw ConfigError("sampling is only defined for mixtures on raw features");
    return [gmm](std::mt19937_64& rng) { return gmm.sample(rng); };
}

nlohmann::json to_json(const SlabRegion& slab) {
    return {{"class_i", slab.class_i}, {"class_j", slab.class_j},   {"normal", to_std(slab.normal)},
            {"anchor", to_std(slab.anchor)}, {"alpha_lo", slab.alpha_lo}, {"alpha_hi", slab.alpha_hi}};
}

nlohmann::json to_json(const LinearApproxRegion& region) {
    nlohmann::json slabs = nlohmann::json::array();
    for (const auto& s : region.slabs()) slabs.push_back(to_json(s));
    return {{"type", "linear_approx"},
            {"estimator", to_string(region.spec().estimator)},
            {"epsilon", region.spec().epsilon},
            {"u_star", region.spec().u_star},
            {"slabs", std::move(slabs)}};
}

nlohmann::json to_json(const DensityRegion& region) {
    return {{"type", "density"},
            {"epsilon", region.epsilon()},
            {"thresholds", to_std(region.thresholds())},
            {"gmm", to_json(region.gmm())}};
}

nlohmann::json to_json(const ExactSlabSolution& sol, double epsilon) {
    return {{"type", "exact_k2"},
            {"epsilon", epsilon},
            {"alpha", sol.alpha},
            {"separable", sol.separable},
            {"max_crossing_mass", sol.max_crossing_mass},
            {"iterations", sol.iterations},
            {"slab", to_json(sol.slab)}};
}

}  // namespace softconf
