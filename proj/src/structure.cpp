#include "softconf/structure.hpp"

#include "softconf/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace softconf {

namespace {

std::vector<double> to_std(const VecRef& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

/// K x (K-1) matrix whose rows form a regular simplex centred at the origin, each row of unit norm.
Matrix simplex_frame(Index k) {
    const Matrix centering = Matrix::Identity(k, k) - Matrix::Constant(k, k, 1.0 / static_cast<double>(k));
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(centering);
    // Eigenvalues ascend: one zero (the all-ones direction) then K-1 ones.
    Matrix frame = eig.eigenvectors().rightCols(k - 1);
    for (Index i = 0; i < k; ++i) frame.row(i).normalize();
    return frame;
}

/// Unit directions at 90, 210 and 330 degrees.
Matrix planar_optimal_directions() {
    Matrix d(2, 3);
    const double s = std::sqrt(3.0) / 2.0;
    d << 0.0, -s, s, 1.0, -0.5, -0.5;
    return d;
}

nlohmann::json planar_json(const Matrix& w2, const Vector& b, double c) {
    nlohmann::json cols = nlohmann::json::array();
    for (Index j = 0; j < w2.cols(); ++j) cols.push_back({w2(0, j), w2(1, j)});
    return {{"planar_columns", cols}, {"bias", to_std(b)}, {"c", c}};
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    // Linear interpolation between order statistics.
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

nlohmann::json histogram_json(const Histogram& h) { return {{"edges", h.edges}, {"counts", h.counts}}; }

nlohmann::json summary_json(const DistributionSummary& s) {
    return {{"mean", s.mean},   {"std", s.std_dev},       {"min", s.min},
            {"max", s.max},     {"quantile_levels", {0.05, 0.25, 0.5, 0.75, 0.95}},
            {"quantiles", s.quantiles}, {"histogram", histogram_json(s.histogram)}};
}

}  // namespace

void OptimalStructureSpec::validate() const {
    if (k < 2) throw ConfigError("optimal structure needs k >= 2");
    if (h < k - 1) throw ConfigError("optimal structure needs h >= k - 1");
    if (!(c1 > 0.0) || !std::isfinite(c1)) throw ConfigError("c1 must be positive");
    if (!(c3 > 0.0) || !std::isfinite(c3)) throw ConfigError("c3 must be positive");
}

Matrix embedding_basis(Index h, Index d, std::uint64_t seed) {
    if (d < 1 || h < d) throw ConfigError("embedding needs 1 <= d <= h");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix g(h, d);
    for (Index j = 0; j < d; ++j)
        for (Index i = 0; i < h; ++i) g(i, j) = normal(rng);
    const Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(h, d);
    // Fix the sign ambiguity of QR so the basis is a function of the seed alone.
    const Matrix r = qr.matrixQR().topRows(d).triangularView<Eigen::Upper>();
    for (Index j = 0; j < d; ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    return q;
}

SoftmaxHead gen_optimal_head(const OptimalStructureSpec& spec, std::uint64_t seed) {
    spec.validate();
    const Matrix frame = simplex_frame(spec.k) * spec.c1;
    const Matrix q = embedding_basis(spec.h, spec.k - 1, seed);
    Matrix w = q * frame.transpose();
    // Remove the rounding residue of the column sum without disturbing norms beyond 1e-15.
    const Vector mean = w.rowwise().mean();
    w.colwise() -= mean;
    return SoftmaxHead(w, Vector::Zero(spec.k));
}

std::string to_string(StructureKind kind) {
    switch (kind) {
        case StructureKind::optimal: return "optimal";
        case StructureKind::sandwich: return "sandwich";
        case StructureKind::stack: return "stack";
        case StructureKind::lopsided: return "lopsided";
    }
    return "unknown";
}

StructureKind parse_structure(const std::string& name) {
    if (name == "optimal") return StructureKind::optimal;
    if (name == "sandwich") return StructureKind::sandwich;
    if (name == "stack") return StructureKind::stack;
    if (name == "lopsided") return StructureKind::lopsided;
    throw ConfigError("unknown structure kind '" + name + "'");
}

GeneratedHead gen_counterfactual_head(StructureKind kind, Index k, Index h, std::uint64_t seed, double c) {
    if (k != 3) throw ConfigError("counterfactual structures are defined for k = 3 only");
    if (h < 2) throw ConfigError("counterfactual structures need h >= 2");
    if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("structure scale c must be positive");

    Matrix w2(2, 3);
    Vector b = Vector::Zero(3);
    switch (kind) {
        case StructureKind::optimal: w2 = c * planar_optimal_directions(); break;
        case StructureKind::sandwich: w2 << 0.0, -c, c, c, 0.0, 0.0; break;
        case StructureKind::stack:
            w2 << c, 2.0 * c, 3.0 * c, 0.0, 0.0, 0.0;
            b << 0.0, -c * c, -3.0 * c * c;
            break;
        case StructureKind::lopsided:
            w2 = planar_optimal_directions();
            w2.col(0) *= c;
            w2.col(1) *= c;
            w2.col(2) *= 4.0 * c;
            break;
    }
    const Matrix basis = embedding_basis(h, 2, seed);
    return GeneratedHead{SoftmaxHead(basis * w2, b), basis, kind, planar_json(w2, b, c)};
}

Histogram make_histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi) {
    if (bins == 0) throw ConfigError("histogram needs at least one bin");
    if (!(hi > lo)) {
        // Degenerate range: widen symmetrically so every value lands in a bin.
        const double pad = std::max(1e-12, std::abs(lo) * 1e-9);
        lo -= pad;
        hi += pad;
    }
    Histogram h;
    h.edges.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i)
        h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
    h.counts.assign(bins, 0);
    for (double v : values) {
        auto idx = static_cast<std::ptrdiff_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
        idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(bins) - 1);
        ++h.counts[static_cast<std::size_t>(idx)];
    }
    return h;
}

StructureReport audit_head(const SoftmaxHead& head) {
    const Index k = head.k();
    StructureReport r;
    r.weight_norms = head.weights().colwise().norm().transpose();
    for (Index i = 0; i < k; ++i)
        if (r.weight_norms[i] == 0.0) throw DegenerateWeightError("weight column " + std::to_string(i) + " is zero");
    r.biases = head.bias();
    r.target_cos = -1.0 / static_cast<double>(k - 1);
    r.pairwise_cos.resize(k * (k - 1) / 2);
    Index p = 0;
    for (Index i = 0; i < k; ++i)
        for (Index j = i + 1; j < k; ++j) {
            const double c = head.column(i).dot(head.column(j)) / (r.weight_norms[i] * r.weight_norms[j]);
            r.pairwise_cos[p++] = std::clamp(c, -1.0, 1.0);
        }
    const Vector dev = (r.pairwise_cos.array() - r.target_cos).abs();
    r.mean_abs_cos_deviation = dev.mean();
    r.max_abs_cos_deviation = dev.maxCoeff();
    const double norm_mean = r.weight_norms.mean();
    const double norm_var = (r.weight_norms.array() - norm_mean).square().mean();
    r.norm_cv = std::sqrt(norm_var) / norm_mean;
    r.max_abs_bias = r.biases.cwiseAbs().maxCoeff();
    r.cos_histogram = make_histogram(to_std(r.pairwise_cos), 20, -1.0, 1.0);
    r.norm_histogram = make_histogram(to_std(r.weight_norms), 20, r.weight_norms.minCoeff(), r.weight_norms.maxCoeff());
    return r;
}

nlohmann::json to_json(const StructureReport& r) {
    return {{"k", r.weight_norms.size()},
            {"weight_norms", to_std(r.weight_norms)},
            {"biases", to_std(r.biases)},
            {"pairwise_cos", to_std(r.pairwise_cos)},
            {"target_cos", r.target_cos},
            {"mean_abs_cos_deviation", r.mean_abs_cos_deviation},
            {"max_abs_cos_deviation", r.max_abs_cos_deviation},
            {"norm_cv", r.norm_cv},
            {"max_abs_bias", r.max_abs_bias},
            {"cos_histogram", histogram_json(r.cos_histogram)},
            {"norm_histogram", histogram_json(r.norm_histogram)}};
}

DistributionSummary summarize(const std::vector<double>& values, std::size_t bins, double lo, double hi) {
    if (values.empty()) throw ConfigError("cannot summarize an empty sample");
    DistributionSummary s;
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double v : sorted) sum += v;
    s.mean = sum / static_cast<double>(sorted.size());
    double ss = 0.0;
    for (double v : sorted) ss += (v - s.mean) * (v - s.mean);
    s.std_dev = std::sqrt(ss / static_cast<double>(sorted.size()));
    s.min = sorted.front();
    s.max = sorted.back();
    for (double q : {0.05, 0.25, 0.5, 0.75, 0.95}) s.quantiles.push_back(quantile_sorted(sorted, q));
    s.histogram = make_histogram(sorted, bins, lo, hi);
    return s;
}

AngleStats angle_stats(const FeatureMatrix& features, const SoftmaxHead& head) {
    if (features.h() != head.h()) throw DimensionError("feature dimension does not match the head");
    AngleStats st;
    for (Index n = 0; n < features.n(); ++n) {
        const auto d = decompose(head, features.row(n));
        st.z_norm.push_back(d.z_norm);
        st.max_cos.push_back(d.max_cos());
    }
    const double zmax = *std::max_element(st.z_norm.begin(), st.z_norm.end());
    st.z_norm_summary = summarize(st.z_norm, 30, 0.0, zmax);
    st.max_cos_summary = summarize(st.max_cos, 30, -1.0, 1.0);
    return st;
}

nlohmann::json to_json(const AngleStats& st) {
    return {{"n", st.z_norm.size()}, {"z_norm", summary_json(st.z_norm_summary)},
            {"max_cos", summary_json(st.max_cos_summary)}};
}

double regularized_xent(const FeatureMatrix& features, const LabelVector& labels, const SoftmaxHead& head,
                        double lambda1) {
    if (labels.size() != static_cast<std::size_t>(features.n()))
        throw DimensionError("label count does not match sample count");
    if (static_cast<Index>(labels.num_classes()) > head.k())
        throw ConfigError("labels reference more classes than the head has");
    if (!(lambda1 >= 0.0)) throw ConfigError("lambda1 must be >= 0");
    if (features.h() != head.h()) throw DimensionError("feature dimension does not match the head");
    double ce = 0.0;
    for (Index n = 0; n < features.n(); ++n) {
        const Vector ls = log_softmax_from_logits(head.logits(features.row(n)));
        ce -= ls[labels[static_cast<std::size_t>(n)]];
    }
    ce /= static_cast<double>(features.n());
    const double penalty = head.weights().squaredNorm() + head.bias().squaredNorm();
    return ce + lambda1 * penalty;
}

LabeledSet structured_clusters(const SoftmaxHead& head, double c3, double noise, Index per_class, std::uint64_t seed) {
    if (per_class < 1) throw ConfigError("per_class must be >= 1");
    if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Index k = head.k();
    Matrix x(k * per_class, head.h());
    std::vector<std::uint32_t> y;
    y.reserve(static_cast<std::size_t>(k * per_class));
    Index r = 0;
    for (Index c = 0; c < k; ++c)
        for (Index i = 0; i < per_class; ++i) {
            for (Index j = 0; j < head.h(); ++j) x(r, j) = c3 * head.weights()(j, c) + noise * normal(rng);
            y.push_back(static_cast<std::uint32_t>(c));
            ++r;
        }
    return {FeatureMatrix(std::move(x)), LabelVector(std::move(y), static_cast<std::uint32_t>(k))};
}

}  // namespace softconf
