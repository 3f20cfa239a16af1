#include "softconf/estimators.hpp"

#include "softconf/errors.hpp"

#include <cmath>
#include <limits>

namespace softconf {

std::string to_string(EstimatorId id) {
    switch (id) {
        case EstimatorId::max: return "max";
        case EstimatorId::entropy: return "entropy";
        case EstimatorId::cool: return "cool";
        case EstimatorId::density: return "density";
        case EstimatorId::mental: return "mental";
    }
    return "unknown";
}

EstimatorId parse_estimator(const std::string& name) {
    if (name == "max") return EstimatorId::max;
    if (name == "entropy") return EstimatorId::entropy;
    if (name == "cool") return EstimatorId::cool;
    if (name == "density") return EstimatorId::density;
    if (name == "mental") return EstimatorId::mental;
    throw ConfigError("unknown estimator '" + name + "'");
}

namespace {

double entropy_from_logits(const VecRef& logits) {
    const Vector ls = log_softmax_from_logits(logits);
    const Vector p = ls.array().exp();
    // p_i * log p_i with p_i underflowed to 0 contributes exactly 0 here, since ls_i stays finite.
    return std::max(0.0, -(p.array() * ls.array()).sum());
}

}  // namespace

double entropy_of_probs(const VecRef& p) {
    double h = 0.0;
    for (Index i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h;
}

UncertaintyScore u_max(const SoftmaxHead& head, const VecRef& z) {
    return {-softmax(head, z).maxCoeff(), EstimatorId::max};
}

UncertaintyScore u_max_from_angles(const VecRef& weight_norms, double z_norm, const VecRef& cos_theta) {
    if (weight_norms.size() != cos_theta.size()) throw DimensionError("weight norms and cosines differ in length");
    if (weight_norms.size() < 2) throw DimensionError("need at least two classes");
    const Vector logits = z_norm * weight_norms.cwiseProduct(cos_theta);
    return {-softmax_from_logits(logits).maxCoeff(), EstimatorId::max};
}

UncertaintyScore u_entropy(const SoftmaxHead& head, const VecRef& z) {
    return {entropy_from_logits(head.logits(z)), EstimatorId::entropy};
}

UncertaintyScore u_cool(const SoftmaxHead& head, const VecRef& z, const CoolOptions& opts) {
    if (!(opts.factor > 0.0) || !std::isfinite(opts.factor)) throw ConfigError("cooling factor must be positive");
    const Vector logits = opts.mode == CoolMode::logits ? Vector(opts.factor * head.logits(z))
                                                        : head.logits(opts.factor * z);
    return {entropy_from_logits(logits), EstimatorId::cool};
}

UncertaintyScore u_mental(Index k, double z_norm, double max_cos) {
    if (k < 2) throw ConfigError("mental model needs at least two classes");
    if (!(z_norm >= 0.0) || !std::isfinite(z_norm)) throw ConfigError("z_norm must be finite and >= 0");
    if (!(max_cos >= -1.0 && max_cos <= 1.0)) throw ConfigError("max_cos must lie in [-1, 1]");
    const double km1 = static_cast<double>(k - 1);
    const double v = -1.0 / (1.0 + km1 * std::exp(-z_norm * (1.0 / km1 + max_cos)));
    return {v, EstimatorId::mental};
}

Vector grad_u_max(const SoftmaxHead& head, const VecRef& z) {
    const Vector logits = head.logits(z);
    const Index i = argmax_lowest(logits);
    for (Index j = 0; j < logits.size(); ++j)
        if (j != i && logits[j] == logits[i])
            throw OnBoundaryError("argmax tie between classes " + std::to_string(i) + " and " + std::to_string(j));
    const Vector s = softmax_from_logits(logits);
    const auto& w = head.weights();
    return s[i] * (w * s - w.col(i));
}

Vector grad_u_entropy(const SoftmaxHead& head, const VecRef& z) {
    const Vector logits = head.logits(z);
    const Vector ls = log_softmax_from_logits(logits);
    const Vector s = ls.array().exp();
    const Vector c = (ls.array() + 1.0) * s.array();
    const auto& w = head.weights();
    return c.sum() * (w * s) - w * c;
}

Vector grad_u_density(const GaussianMixture& gmm, const VecRef& z) {
    const Vector x = gmm.transform_point(z);
    const Vector r = gmm.responsibilities(x);
    Vector g = Vector::Zero(gmm.h());
    for (Index c = 0; c < gmm.k(); ++c) {
        if (r[c] == 0.0) continue;
        g += r[c] * gmm.solve(c, x - gmm.means().row(c).transpose());
    }
    if (gmm.transform() == FeatureTransform::log) {
        for (Index j = 0; j < g.size(); ++j) g[j] = z[j] > kLogTransformFloor ? g[j] / z[j] : 0.0;
    }
    return g;
}

std::vector<ScoreRow> score_batch(const SoftmaxHead& head, const GaussianMixture* gmm, const FeatureMatrix& features,
                                  const CoolOptions& opts) {
    if (features.h() != head.h())
        throw DimensionError("feature dimension " + std::to_string(features.h()) + " does not match head dimension " +
                             std::to_string(head.h()));
    if (gmm && gmm->h() != features.h()) throw DimensionError("mixture dimension does not match features");
    std::vector<ScoreRow> rows;
    rows.reserve(static_cast<std::size_t>(features.n()));
    for (Index n = 0; n < features.n(); ++n) {
        const Vector z = features.row(n);
        const auto d = decompose(head, z);
        ScoreRow row;
        row.u_max = u_max(head, z).value;
        row.u_entropy = u_entropy(head, z).value;
        row.u_cool = u_cool(head, z, opts).value;
        row.u_density = gmm ? u_density(*gmm, z).value : std::numeric_limits<double>::quiet_NaN();
        row.z_norm = d.z_norm;
        row.max_cos = d.max_cos();
        row.argmax_class = d.argmax_class;
        rows.push_back(row);
    }
    return rows;
}

Vector score_all(EstimatorId id, const SoftmaxHead& head, const GaussianMixture* gmm, const FeatureMatrix& features,
                 const CoolOptions& opts) {
    Vector out(features.n());
    if (id == EstimatorId::density && !gmm) throw ConfigError("density scores need a fitted mixture");
    for (Index n = 0; n < features.n(); ++n) {
        const Vector z = features.row(n);
        switch (id) {
            case EstimatorId::max: out[n] = u_max(head, z).value; break;
            case EstimatorId::entropy: out[n] = u_entropy(head, z).value; break;
            case EstimatorId::cool: out[n] = u_cool(head, z, opts).value; break;
            case EstimatorId::density: out[n] = u_density(*gmm, z).value; break;
            case EstimatorId::mental: {
                const auto d = decompose(head, z);
                out[n] = u_mental(head.k(), d.z_norm, d.max_cos()).value;
                break;
            }
        }
    }
    return out;
}

}  // namespace softconf
