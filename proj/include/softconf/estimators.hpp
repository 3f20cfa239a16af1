#pragma once

#include "softconf/core.hpp"
#include "softconf/gmm.hpp"
#include "softconf/score.hpp"

namespace softconf {

inline constexpr double kDefaultCoolTemperature = 0.1;

/// How the cooling factor is applied.
enum class CoolMode {
    /// Scale the whole logit w_i.z + b_i (temperature scaling).
    logits,
    /// Scale only z, leaving the bias untouched.
    features,
};

struct CoolOptions {
    double factor = kDefaultCoolTemperature;
    CoolMode mode = CoolMode::logits;
};

/// -max_i softmax(z)_i.
UncertaintyScore u_max(const SoftmaxHead& head, const VecRef& z);
/// Shannon entropy (natural log) of the softmax output.
UncertaintyScore u_entropy(const SoftmaxHead& head, const VecRef& z);
/// Entropy after multiplying the logits (or z) by a cooling factor.
UncertaintyScore u_cool(const SoftmaxHead& head, const VecRef& z, const CoolOptions& opts = {});
/// -1 / (1 + (K-1) exp(-|z| (1/(K-1) + max_cos))).
UncertaintyScore u_mental(Index k, double z_norm, double max_cos);

double entropy_of_probs(const VecRef& p);

/// u_max written in magnitudes and angles: logits_i = |w_i| |z| cos_i (bias-free head).
UncertaintyScore u_max_from_angles(const VecRef& weight_norms, double z_norm, const VecRef& cos_theta);

/// d u_max / dz = s_i sum_j s_j (w_j - w_i), i the argmax class. Throws OnBoundaryError on ties.
Vector grad_u_max(const SoftmaxHead& head, const VecRef& z);
/// d u_entropy / dz = sum_i (log s_i + 1) s_i sum_j s_j (w_j - w_i).
Vector grad_u_entropy(const SoftmaxHead& head, const VecRef& z);
/// Gradient of -log q(z), evaluated in the mixture's input space.
Vector grad_u_density(const GaussianMixture& gmm, const VecRef& z);

/// One row of batch scoring output.
struct ScoreRow {
    double u_max = 0.0;
    double u_entropy = 0.0;
    double u_cool = 0.0;
    /// NaN when no mixture was supplied.
    double u_density = 0.0;
    double z_norm = 0.0;
    double max_cos = 0.0;
    Index argmax_class = 0;
};

/// Scores every row of `features`; `gmm` may be null.
std::vector<ScoreRow> score_batch(const SoftmaxHead& head, const GaussianMixture* gmm, const FeatureMatrix& features,
                                  const CoolOptions& opts = {});

/// Single estimator applied to all rows.
Vector score_all(EstimatorId id, const SoftmaxHead& head, const GaussianMixture* gmm, const FeatureMatrix& features,
                 const CoolOptions& opts = {});

}  // namespace softconf
