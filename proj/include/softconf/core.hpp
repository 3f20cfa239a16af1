#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace softconf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
/// Read-only view accepted by every per-point operation; rows of a FeatureMatrix bind to it directly.
using VecRef = Eigen::Ref<const Vector>;

/// N x H matrix of final-layer activations, one sample per row.
class FeatureMatrix {
public:
    explicit FeatureMatrix(Matrix data);

    Index n() const { return data_.rows(); }
    Index h() const { return data_.cols(); }
    const Matrix& data() const { return data_; }
    Vector row(Index i) const { return data_.row(i).transpose(); }

private:
    Matrix data_;
};

/// Class labels in [0, num_classes).
class LabelVector {
public:
    LabelVector(std::vector<std::uint32_t> labels, std::uint32_t num_classes);
    /// Class count taken as max label + 1.
    static LabelVector infer(std::vector<std::uint32_t> labels);

    std::size_t size() const { return labels_.size(); }
    std::uint32_t operator[](std::size_t i) const { return labels_[i]; }
    std::uint32_t num_classes() const { return num_classes_; }
    const std::vector<std::uint32_t>& values() const { return labels_; }
    /// Per-class sample counts.
    std::vector<std::size_t> counts() const;

private:
    std::vector<std::uint32_t> labels_;
    std::uint32_t num_classes_;
};

/// Final linear layer: logit_i = w_i . z + b_i, with w_i the columns of an H x K matrix.
class SoftmaxHead {
public:
    SoftmaxHead(Matrix weights, Vector bias);
    explicit SoftmaxHead(Matrix weights);

    Index h() const { return w_.rows(); }
    Index k() const { return w_.cols(); }
    const Matrix& weights() const { return w_; }
    const Vector& bias() const { return b_; }
    Vector column(Index i) const { return w_.col(i); }

    /// Throws DimensionError when z has the wrong length and NumericalError when it is not finite.
    Vector logits(const VecRef& z) const;

private:
    Matrix w_;
    Vector b_;
};

/// Magnitude / angle view of a feature vector relative to the head's weight columns.
struct AngleDecomposition {
    double z_norm = 0.0;
    Vector cos_theta;
    Index argmax_class = 0;

    double max_cos() const { return cos_theta.maxCoeff(); }
};

/// Index of the largest entry; ties go to the lowest index.
Index argmax_lowest(const VecRef& v);

Vector softmax_from_logits(const VecRef& logits);
Vector log_softmax_from_logits(const VecRef& logits);

/// Class probabilities, computed with max-logit subtraction.
Vector softmax(const SoftmaxHead& head, const VecRef& z);

AngleDecomposition decompose(const SoftmaxHead& head, const VecRef& z);

/// Throws NumericalError naming `what` if any entry is NaN or infinite.
void require_finite(const Eigen::Ref<const Matrix>& m, const char* what);

}  // namespace softconf
