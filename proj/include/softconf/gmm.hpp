#pragma once

#include "softconf/core.hpp"
#include "softconf/score.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace softconf {

/// Applied to features before fitting and before every density evaluation.
enum class FeatureTransform { none, log };

/// Floor used by the log transform so that zero activations (post-ReLU) stay finite.
inline constexpr double kLogTransformFloor = 1e-8;

/// Full-covariance Gaussian mixture q(z) = sum_i pi_i N(z; mu_i, Sigma_i).
///
/// The stored covariances already include the diagonal regularization; `reg` records the amount.
/// Cholesky factors are computed once at construction and reused by every query.
class GaussianMixture {
public:
    GaussianMixture(Vector weights, Matrix means, std::vector<Matrix> covariances, double reg,
                    FeatureTransform transform = FeatureTransform::none);

    Index k() const { return means_.rows(); }
    Index h() const { return means_.cols(); }
    const Vector& weights() const { return weights_; }
    const Matrix& means() const { return means_; }
    const std::vector<Matrix>& covariances() const { return covs_; }
    double reg() const { return reg_; }
    FeatureTransform transform() const { return transform_; }

    /// Maps a raw feature vector into the space the mixture lives in.
    Vector transform_point(const VecRef& z) const;

    /// log q(z) via log-sum-exp over components.
    double log_density(const VecRef& z) const;
    /// log pi_i + log N(z; mu_i, Sigma_i) for each component, on an already transformed point.
    Vector component_log_joint(const VecRef& x) const;
    /// component_log_joint for every row of an already transformed N x H matrix.
    Matrix component_log_joint_rows(const Matrix& x) const;
    /// Posterior component probabilities for an already transformed point.
    Vector responsibilities(const VecRef& x) const;
    /// (x - mu_i)^T Sigma_i^{-1} (x - mu_i) on an already transformed point.
    double mahalanobis_sq(Index component, const VecRef& x) const;
    /// Sigma_i^{-1} v.
    Vector solve(Index component, const VecRef& v) const;
    /// Draws one raw-space sample (only for the identity transform).
    template <typename Rng>
    Vector sample(Rng& rng) const;

private:
    Vector weights_;
    Matrix means_;
    std::vector<Matrix> covs_;
    double reg_;
    FeatureTransform transform_;
    std::vector<Matrix> chol_lower_;
    std::vector<double> log_norm_;
};

enum class EmInit { labels, kmeans_pp };

struct EmConfig {
    /// 0 means "one component per class" and requires labels.
    std::size_t k_components = 0;
    int max_iter = 200;
    double rel_tol = 1e-6;
    double reg = 1e-5;
    std::uint64_t seed = 0;
    EmInit init = EmInit::labels;
    FeatureTransform transform = FeatureTransform::none;
    int kmeans_iters = 10;

    void validate() const;
};

struct EmFit {
    GaussianMixture model;
    /// Total log-likelihood of the training data under each accepted parameter set, in order.
    std::vector<double> log_likelihood;
    /// Trace positions right after a component was reinitialized (the likelihood may drop there).
    std::vector<std::size_t> reinit_points;
    int iterations = 0;
    bool converged = false;
    /// Set when a regularized M-step failed to improve the likelihood; the previous parameters are kept.
    bool stopped_on_decrease = false;
    /// Likelihood of the discarded parameters when stopped_on_decrease is set.
    double rejected_log_likelihood = 0.0;
};

/// Fits a mixture by expectation-maximization. With labels and EmInit::labels the
/// parameters start at per-class moments; otherwise k-means++ seeding plus Lloyd iterations.
EmFit fit_em(const FeatureMatrix& features, const LabelVector* labels, const EmConfig& cfg);

/// Closed-form moment match: weights are class frequencies, covariances are ML estimates plus reg*I.
GaussianMixture moment_match(const FeatureMatrix& features, const LabelVector& labels, double reg,
                             FeatureTransform transform = FeatureTransform::none);

double log_density(const GaussianMixture& gmm, const VecRef& z);
/// Negative log-likelihood score.
UncertaintyScore u_density(const GaussianMixture& gmm, const VecRef& z);

nlohmann::json to_json(const GaussianMixture& gmm);
GaussianMixture gmm_from_json(const nlohmann::json& j);
void save_gmm(const std::filesystem::path& path, const GaussianMixture& gmm);
GaussianMixture load_gmm(const std::filesystem::path& path);

template <typename Rng>
Vector GaussianMixture::sample(Rng& rng) const {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    double u = unif(rng);
    Index comp = k() - 1;
    for (Index i = 0; i < k(); ++i) {
        if (u < weights_[i]) {
            comp = i;
            break;
        }
        u -= weights_[i];
    }
    Vector e(h());
    for (Index j = 0; j < h(); ++j) e[j] = normal(rng);
    return means_.row(comp).transpose() + chol_lower_[static_cast<std::size_t>(comp)] * e;
}

}  // namespace softconf
