#pragma once

#include "softconf/core.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace softconf {

/// P(score_out > score_in) with ties counted 1/2. Higher scores mean more uncertain.
/// Computed from midranks of the pooled sample in O(n log n).
double auroc(const std::vector<double>& scores_in, const std::vector<double>& scores_out);

/// Subsamples the larger side without replacement to the size of the smaller one, then computes auroc.
double balanced_auroc(const std::vector<double>& scores_in, const std::vector<double>& scores_out,
                      std::uint64_t seed);

/// Indices of a seeded random subset of size m from [0, n), in ascending order.
std::vector<std::size_t> balanced_subset(std::size_t n, std::size_t m, std::uint64_t seed);

/// Sample mean and standard error (sample standard deviation over sqrt(n)); se is 0 for one value.
struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& values);

struct AttributionReport {
    double auroc_max = 0.0;
    double auroc_entropy = 0.0;
    double auroc_cool = 0.0;
    double auroc_density = 0.0;
    /// Gain from fixing the decision-boundary structure: cool minus entropy.
    double cause1 = 0.0;
    /// Gain from leaving softmax for a density model: density minus cool.
    double cause2 = 0.0;
    /// What even the density model misses: 1 minus density.
    double cause3 = 0.0;

    /// True when some estimator underperformed the one it is compared against.
    bool has_negative_cause() const { return cause1 < 0.0 || cause2 < 0.0 || cause3 < 0.0; }
};

AttributionReport attribute(double auroc_max, double auroc_entropy, double auroc_cool, double auroc_density);

nlohmann::json to_json(const AttributionReport& r);
std::string attribution_csv_header();
/// Columns in header order: the four AUROCs then the three causes.
std::string attribution_csv_row(const AttributionReport& r, const std::string& name);

struct PcaResult {
    Vector mean;
    /// H x dims, orthonormal columns, ordered by decreasing variance.
    Matrix components;
    /// Per-component sample variance.
    Vector explained_variance;
    /// Variance share of each kept component relative to the total.
    Vector explained_ratio;
    /// N x dims projection of the fitted data.
    Matrix projection;

    Matrix project(const Matrix& x) const;
};

/// Top-dims principal components of the sample covariance. The largest-magnitude entry of each
/// component is made positive. Throws NumericalError when the covariance has rank below dims.
PcaResult pca_project(const Matrix& x, Index dims = 2);

/// One point in a 2-D scatter.
struct ScatterPoint {
    double x = 0.0;
    double y = 0.0;
    std::string source;
    double uncertainty = 0.0;
};

/// Regular grid of values shaded behind a scatter, row-major with y varying slowest.
struct ShadeGrid {
    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    Index nx = 0, ny = 0;
    std::vector<double> values;
};

/// Self-contained SVG scatter. Points are coloured by source; the optional grid is shaded
/// from white (lowest value) to blue (highest).
std::string scatter_svg(const std::vector<ScatterPoint>& points, const std::optional<ShadeGrid>& grid,
                        const std::string& title, int width = 640, int height = 640);

}  // namespace softconf
