#pragma once

#include "softconf/core.hpp"
#include "softconf/gmm.hpp"
#include "softconf/score.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace softconf {

/// A point is in the valid OOD region when its score exceeds u_star.
struct RegionSpec {
    double epsilon = 0.05;
    double u_star = 0.0;
    EstimatorId estimator = EstimatorId::max;
};

/// (1 - epsilon) quantile under the nearest-rank convention: the ceil((1 - epsilon) N)-th smallest score.
double empirical_threshold(std::vector<double> scores, double epsilon);

/// One Gaussian per class, used by the closed-form two-class region.
struct GaussianClassModel {
    std::vector<Vector> means;
    std::vector<Matrix> covariances;
    Vector priors;

    void validate() const;
    Index k() const { return static_cast<Index>(means.size()); }
    Index h() const { return means.empty() ? 0 : means.front().size(); }
};

/// Region between two hyperplanes parallel to a decision boundary.
///
/// With gap g(z) = normal . (z - anchor), the slab is -alpha_lo |n|^2 < g < alpha_hi |n|^2.
/// Positive gap points toward class_i.
struct SlabRegion {
    Vector normal;
    Vector anchor;
    double alpha_lo = 0.0;
    double alpha_hi = 0.0;
    Index class_i = 0;
    Index class_j = 1;

    double gap(const VecRef& z) const { return normal.dot(z - anchor); }
    bool contains(const VecRef& z) const;
};

struct ExactSlabSolution {
    SlabRegion slab;
    /// Offset in units of w_1: the slab is |w_1 . (z - z0)| < alpha |w_1|^2.
    double alpha = 0.0;
    /// Largest per-class probability mass on the wrong side of the decision boundary.
    double max_crossing_mass = 0.0;
    /// False when that mass exceeds 1e-4; the solution is still returned.
    bool separable = true;
    int iterations = 0;
};

/// Solves for the slab whose mass under the two-class Gaussian model equals epsilon.
/// Requires K = 2 and w_1 = -w_2 within 1e-8.
ExactSlabSolution solve_alpha_exact_k2(const GaussianClassModel& model, const SoftmaxHead& head, double epsilon);

/// Probability mass the two-class Gaussian model puts inside a slab |w_1.(z - z0)| < alpha |w_1|^2.
double k2_slab_mass(const GaussianClassModel& model, const SoftmaxHead& head, double alpha);

/// Union over class pairs of slab-intersect-argmax-cell.
class LinearApproxRegion {
public:
    LinearApproxRegion(SoftmaxHead head, std::vector<SlabRegion> slabs, RegionSpec spec);

    const SoftmaxHead& head() const { return head_; }
    const std::vector<SlabRegion>& slabs() const { return slabs_; }
    const RegionSpec& spec() const { return spec_; }
    const SlabRegion& slab(Index i, Index j) const;

    bool contains(const VecRef& z) const;

private:
    SoftmaxHead head_;
    std::vector<SlabRegion> slabs_;
    RegionSpec spec_;
};

struct LinearFitOptions {
    /// Far-field distance as a multiple of the largest weight norm.
    double far_scale = 1e3;
};

/// Offset s >= 0 along n = w_i - w_j (unit length) from `base` where max softmax reaches p_star.
/// Returns 0 when max softmax at `base` is already above p_star.
double contour_offset(const SoftmaxHead& head, Index i, Index j, const VecRef& base, double p_star, double direction);

/// In-plane unit vector along the (i, j) decision boundary pointing where i and j beat every other class.
/// Empty when no such direction exists in the plane of w_i and w_j.
std::optional<Vector> far_field_direction(const SoftmaxHead& head, Index i, Index j);

/// Fits per-pair offsets so slab edges sit on the u_max = u_star contour far along each boundary.
LinearApproxRegion fit_linear_region(const SoftmaxHead& head, double u_star, double epsilon,
                                     const LinearFitOptions& opts = {});
/// Same, with u_star taken as the empirical threshold of u_max over training features.
LinearApproxRegion fit_linear_region(const SoftmaxHead& head, const FeatureMatrix& train, double epsilon,
                                     const LinearFitOptions& opts = {});

/// Points far (in Mahalanobis terms) from every mixture component.
class DensityRegion {
public:
    DensityRegion(GaussianMixture gmm, Vector thresholds, double epsilon);

    const GaussianMixture& gmm() const { return gmm_; }
    const Vector& thresholds() const { return thresholds_; }
    double epsilon() const { return epsilon_; }

    bool contains(const VecRef& z) const;

private:
    GaussianMixture gmm_;
    Vector thresholds_;
    double epsilon_;
};

/// Thresholds c_i are the chi-square(H) quantile at 1 - epsilon for every component.
DensityRegion density_region(const GaussianMixture& gmm, double epsilon);

using Predicate = std::function<bool(const Vector&)>;
using Sampler = std::function<Vector(std::mt19937_64&)>;

inline constexpr std::size_t kMcShardSize = 65536;
inline constexpr std::size_t kDefaultMcSamples = 1000000;
inline constexpr std::uint64_t kDefaultMcSeed = 20240601;

/// Fraction of n sampler draws satisfying the predicate. Samples are drawn in fixed shards,
/// each with its own stream seeded from (seed, shard index), so the estimate does not depend on `threads`.
double mc_region_mass(const Predicate& contains, const Sampler& sampler, std::size_t n, std::uint64_t seed,
                      unsigned threads = 1);

/// Seeded stream for shard `shard` of a run with base seed `seed`.
std::mt19937_64 shard_rng(std::uint64_t seed, std::uint64_t shard);

/// Point drawn uniformly across the slab width, with an isotropic Gaussian offset of scale `spread`
/// parallel to the boundary. It may land outside the pair's argmax cells; filter with contains().
Vector sample_slab_point(const SlabRegion& slab, std::mt19937_64& rng, double spread);

Sampler class_model_sampler(const GaussianClassModel& model);
Sampler mixture_sampler(const GaussianMixture& gmm);

nlohmann::json to_json(const SlabRegion& slab);
nlohmann::json to_json(const LinearApproxRegion& region);
nlohmann::json to_json(const DensityRegion& region);
nlohmann::json to_json(const ExactSlabSolution& sol, double epsilon);

}  // namespace softconf
