#include "softconf/core.hpp"

#include "softconf/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace softconf {

void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
    if (!m.allFinite())
        throw NumericalError(std::string(what) + " contains non-finite entries");
}

FeatureMatrix::FeatureMatrix(Matrix data) : data_(std::move(data)) {
    if (data_.rows() < 1 || data_.cols() < 1)
        throw DimensionError("feature matrix needs at least one row and one column");
    require_finite(data_, "feature matrix");
}

LabelVector::LabelVector(std::vector<std::uint32_t> labels, std::uint32_t num_classes)
    : labels_(std::move(labels)), num_classes_(num_classes) {
    if (num_classes_ < 1)
        throw ConfigError("label vector needs at least one class");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (labels_[i] >= num_classes_)
            throw ConfigError("label " + std::to_string(labels_[i]) + " at row " + std::to_string(i) +
                              " is out of range for " + std::to_string(num_classes_) + " classes");
    }
}

LabelVector LabelVector::infer(std::vector<std::uint32_t> labels) {
    if (labels.empty())
        throw ConfigError("cannot infer class count from an empty label vector");
    const auto k = *std::max_element(labels.begin(), labels.end()) + 1;
    return LabelVector(std::move(labels), k);
}

std::vector<std::size_t> LabelVector::counts() const {
    std::vector<std::size_t> c(num_classes_, 0);
    for (auto y : labels_) ++c[y];
    return c;
}

SoftmaxHead::SoftmaxHead(Matrix weights, Vector bias) : w_(std::move(weights)), b_(std::move(bias)) {
    if (w_.cols() < 2)
        throw DimensionError("softmax head needs at least two classes");
    if (w_.rows() < 1)
        throw DimensionError("softmax head needs at least one feature dimension");
    if (b_.size() != w_.cols())
        throw DimensionError("bias length " + std::to_string(b_.size()) + " does not match class count " +
                             std::to_string(w_.cols()));
    require_finite(w_, "head weights");
    require_finite(b_, "head bias");
}

SoftmaxHead::SoftmaxHead(Matrix weights) : SoftmaxHead(weights, Vector::Zero(weights.cols())) {}

Vector SoftmaxHead::logits(const VecRef& z) const {
    if (z.size() != w_.rows())
        throw DimensionError("feature length " + std::to_string(z.size()) + " does not match head dimension " +
                             std::to_string(w_.rows()));
    require_finite(z, "feature vector");
    return w_.transpose() * z + b_;
}

Index argmax_lowest(const VecRef& v) {
    Index best = 0;
    for (Index i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

Vector softmax_from_logits(const VecRef& logits) {
    Vector e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

Vector log_softmax_from_logits(const VecRef& logits) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return logits.array() - lse;
}

Vector softmax(const SoftmaxHead& head, const VecRef& z) { return softmax_from_logits(head.logits(z)); }

AngleDecomposition decompose(const SoftmaxHead& head, const VecRef& z) {
    const Vector logits = head.logits(z);
    const Vector norms = head.weights().colwise().norm().transpose();
    for (Index i = 0; i < norms.size(); ++i)
        if (norms[i] == 0.0)
            throw DegenerateWeightError("weight column " + std::to_string(i) + " has zero norm");

    AngleDecomposition out;
    out.z_norm = z.norm();
    out.argmax_class = argmax_lowest(logits);
    out.cos_theta = Vector::Zero(head.k());
    if (out.z_norm > 0.0) {
        const Vector dots = head.weights().transpose() * z;
        out.cos_theta = (dots.array() / (norms.array() * out.z_norm)).max(-1.0).min(1.0);
    }
    return out;
}

}  // namespace softconf
