#pragma once

#include <string>

namespace softconf {

enum class EstimatorId { max, entropy, cool, density, mental };

std::string to_string(EstimatorId id);
EstimatorId parse_estimator(const std::string& name);

/// Higher value means more uncertain, for every estimator.
struct UncertaintyScore {
    double value = 0.0;
    EstimatorId estimator = EstimatorId::max;
};

}  // namespace softconf
