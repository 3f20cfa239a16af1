#pragma once

#include "softconf/core.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace softconf {

struct OptimalStructureSpec {
    Index k = 3;
    Index h = 16;
    /// Norm of every weight column.
    double c1 = 1.0;
    /// Cluster centers sit at c3 * w_i when generating synthetic features.
    double c3 = 5.0;

    void validate() const;
};

/// Equal-norm, zero-bias columns with pairwise cosine -1/(K-1) and zero sum, randomly oriented in R^H.
SoftmaxHead gen_optimal_head(const OptimalStructureSpec& spec, std::uint64_t seed);

/// H x d matrix with orthonormal columns, drawn from the seed.
Matrix embedding_basis(Index h, Index d, std::uint64_t seed);

enum class StructureKind { optimal, sandwich, stack, lopsided };

std::string to_string(StructureKind kind);
StructureKind parse_structure(const std::string& name);

/// A three-class head built in a plane and embedded into R^H.
struct GeneratedHead {
    SoftmaxHead head;
    /// H x 2 basis of the plane holding the weights.
    Matrix basis;
    StructureKind kind;
    /// Planar columns, biases and scale that define the head.
    nlohmann::json constants;
};

/// Three-class heads for the frozen-head experiment, all sharing the plane embedding_basis(h, 2, seed).
///   optimal:  unit directions at 90, 210 and 330 degrees, norm c
///   sandwich: (0, c), (-c, 0), (c, 0)
///   stack:    (c, 0), (2c, 0), (3c, 0) with biases 0, -c^2, -3c^2
///   lopsided: optimal directions with norms c, c, 4c
GeneratedHead gen_counterfactual_head(StructureKind kind, Index k, Index h, std::uint64_t seed, double c = 1.0);

struct Histogram {
    std::vector<double> edges;
    std::vector<std::size_t> counts;
};

/// Equal-width bins over [lo, hi]; the last bin is closed. Values outside are clamped to the end bins.
Histogram make_histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi);

struct StructureReport {
    Vector weight_norms;
    Vector biases;
    /// Cosines for pairs (i, j), i < j, in row-major order.
    Vector pairwise_cos;
    double target_cos = 0.0;
    double mean_abs_cos_deviation = 0.0;
    double max_abs_cos_deviation = 0.0;
    double norm_cv = 0.0;
    double max_abs_bias = 0.0;
    Histogram cos_histogram;
    Histogram norm_histogram;
};

StructureReport audit_head(const SoftmaxHead& head);
nlohmann::json to_json(const StructureReport& report);

struct DistributionSummary {
    double mean = 0.0;
    double std_dev = 0.0;
    double min = 0.0;
    double max = 0.0;
    /// Quantiles at 0.05, 0.25, 0.5, 0.75, 0.95.
    std::vector<double> quantiles;
    Histogram histogram;
};

DistributionSummary summarize(const std::vector<double>& values, std::size_t bins, double lo, double hi);

struct AngleStats {
    std::vector<double> z_norm;
    std::vector<double> max_cos;
    DistributionSummary z_norm_summary;
    DistributionSummary max_cos_summary;
};

AngleStats angle_stats(const FeatureMatrix& features, const SoftmaxHead& head);
nlohmann::json to_json(const AngleStats& stats);

/// Mean cross-entropy plus lambda1 * sum_i (|w_i|^2 + b_i^2).
double regularized_xent(const FeatureMatrix& features, const LabelVector& labels, const SoftmaxHead& head,
                        double lambda1);

struct LabeledSet {
    FeatureMatrix features;
    LabelVector labels;
};

/// Isotropic Gaussian clusters at c3 * w_i, `per_class` points each.
LabeledSet structured_clusters(const SoftmaxHead& head, double c3, double noise, Index per_class, std::uint64_t seed);

}  // namespace softconf
