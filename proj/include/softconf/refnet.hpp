#pragma once

#include "softconf/core.hpp"
#include "softconf/score.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace softconf {

enum class Activation { relu, tanh };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

/// Fully connected network: input D, hidden layers, final feature width H, then a softmax head over K classes.
struct MlpSpec {
    /// {D, hidden..., H}; every entry after the first is a hidden layer with an activation.
    std::vector<Index> layer_widths{2, 32, 16};
    Activation activation = Activation::relu;
    Index k = 3;

    void validate() const;
    Index input_dim() const { return layer_widths.front(); }
    Index feature_dim() const { return layer_widths.back(); }
    Index hidden_layers() const { return static_cast<Index>(layer_widths.size()) - 1; }
};

class Mlp {
public:
    Mlp(MlpSpec spec, std::vector<Matrix> weights, std::vector<Vector> biases, SoftmaxHead head);

    /// He-scaled Gaussian weights (variance 2 / fan_in for relu, 1 / fan_in for tanh), zero biases.
    static Mlp initialize(const MlpSpec& spec, std::uint64_t seed);

    const MlpSpec& spec() const { return spec_; }
    const SoftmaxHead& head() const { return head_; }
    void set_head(SoftmaxHead head);
    /// Layer l maps width l to width l + 1; weights are (out x in).
    const std::vector<Matrix>& weights() const { return w_; }
    const std::vector<Vector>& biases() const { return b_; }

    /// Final hidden-layer activations, N x H.
    Matrix features(const Matrix& x) const;
    Vector feature_vector(const VecRef& x) const;
    Matrix logits(const Matrix& x) const;
    /// N x K class probabilities.
    Matrix probabilities(const Matrix& x) const;
    std::vector<Index> predict(const Matrix& x) const;
    double accuracy(const Matrix& x, const LabelVector& y) const;

    /// Parameters in a fixed order: per layer weights then bias, then head weights and head bias.
    Vector flat_parameters() const;
    void set_flat_parameters(const VecRef& p);
    Index num_parameters() const;

private:
    MlpSpec spec_;
    std::vector<Matrix> w_;
    std::vector<Vector> b_;
    SoftmaxHead head_;
};

struct LossGradient {
    double loss = 0.0;
    /// Same layout as Mlp::flat_parameters.
    Vector gradient;
};

/// Mean cross-entropy plus lambda1 * (|W_head|^2 + |b_head|^2) and its gradient.
LossGradient loss_and_gradient(const Mlp& model, const Matrix& x, const LabelVector& y, double lambda1);

/// Mean cross-entropy plus the head penalty, without the gradient.
double training_loss(const Mlp& model, const Matrix& x, const LabelVector& y, double lambda1);

struct TrainConfig {
    int epochs = 50;
    Index batch_size = 64;
    double learning_rate = 0.05;
    /// lambda1 on the head weights and bias.
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    /// When set, the head is fixed to this matrix and never updated.
    std::optional<SoftmaxHead> frozen_head;

    void validate() const;
};

struct TrainResult {
    Mlp model;
    /// Full-data loss before the first epoch.
    double initial_loss = 0.0;
    /// Full-data loss after each epoch.
    std::vector<double> epoch_loss;
};

/// Mini-batch SGD with a fresh seeded shuffle each epoch. Throws NumericalError if the loss stops being finite.
TrainResult train(const Matrix& x, const LabelVector& y, const MlpSpec& spec, const TrainConfig& cfg);

nlohmann::json to_json(const Mlp& model);
Mlp mlp_from_json(const nlohmann::json& j);
void save_mlp(const std::filesystem::path& path, const Mlp& model);
Mlp load_mlp(const std::filesystem::path& path);

enum class TaskKind { gaussian_blobs, two_d_toy, ring_ood, uniform_hypercube_ood, binary_grid };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

/// Parameters for the synthetic generators. Each kind reads only the fields it needs.
struct SyntheticTask {
    TaskKind kind = TaskKind::gaussian_blobs;
    /// Classes for labelled kinds.
    Index k = 3;
    /// Informative input dimensions (binary_grid uses side * side).
    Index dim = 2;
    /// Extra dimensions of pure N(0, nuisance_sigma^2) noise appended to every input.
    Index nuisance_dims = 0;
    double nuisance_sigma = 1.0;
    /// Samples per class for labelled kinds, total samples otherwise.
    Index count = 300;
    /// Blob standard deviation.
    double sigma = 0.5;
    /// Distance between neighbouring blob means in units of sigma.
    double separation = 6.0;
    /// Resample blob points further than this many sigma from their mean; 0 disables.
    double max_radius_sigma = 0.0;
    /// Annulus radii for ring_ood.
    double r_inner = 6.0;
    double r_outer = 8.0;
    /// Box for uniform_hypercube_ood.
    double lo = -1.0;
    double hi = 1.0;
    /// binary_grid: side of the square grid and per-pixel flip probability around the class prototypes.
    Index side = 9;
    double flip_prob = 0.1;
    /// binary_grid: draw unlabelled pixels uniformly instead of noisy prototypes.
    bool uniform = false;
    std::uint64_t seed = 0;

    void validate() const;
    Index input_dim() const;
    bool labelled() const;
};

nlohmann::json to_json(const SyntheticTask& task);
/// Starts from `base` and overrides every key present; unknown keys throw ConfigError.
SyntheticTask task_from_json(const nlohmann::json& j, const SyntheticTask& base = {});

struct Dataset {
    Matrix inputs;
    std::optional<LabelVector> labels;
};

/// Deterministic given the task seed.
Dataset generate(const SyntheticTask& task);

/// K x dim blob centres: a regular polygon in the first two coordinates (a line when dim = 1).
Matrix blob_means(const SyntheticTask& task);

/// K x side^2 binary class prototypes drawn from the task seed.
Matrix grid_prototypes(const SyntheticTask& task);

inline SyntheticTask with_nuisance(SyntheticTask t, Index dims) {
    t.nuisance_dims = dims;
    return t;
}

/// Three blobs in the plane, 300 points each, sigma 0.5, neighbours 6 sigma apart.
inline SyntheticTask default_blob_task() { return SyntheticTask{}; }

/// 900 points uniform on the annulus 2.5 <= r <= 4.5, which encloses the default blobs.
inline SyntheticTask default_ring_task() {
    SyntheticTask t;
    t.kind = TaskKind::ring_ood;
    t.count = 900;
    t.r_inner = 2.5;
    t.r_outer = 4.5;
    return t;
}

struct SweepEntry {
    double confidence = 0.0;
    Vector input;
};

/// Keeps the top_m most confident inputs per argmax class. The kept set depends only on the
/// multiset of offered inputs: ties in confidence are broken by the input's lexicographic order.
class TopConfident {
public:
    TopConfident(Index k, Index top_m);

    void offer(const VecRef& input, const VecRef& probs);
    void merge(const TopConfident& other);
    /// Per class, most confident first.
    std::vector<std::vector<SweepEntry>> sorted() const;

private:
    void push(std::size_t c, SweepEntry e);

    Index top_m_;
    std::vector<std::vector<SweepEntry>> heaps_;
};

struct SweepResult {
    std::vector<std::vector<SweepEntry>> per_class;
    double mean_confidence_all = 0.0;
    std::size_t n_samples = 0;
};

/// Streams n_samples inputs from the (unlabelled) sampler task in chunks and keeps the most confident per class.
SweepResult confidence_sweep(const Mlp& model, const SyntheticTask& sampler, std::size_t n_samples, Index top_m);

/// Mean and standard error of a per-seed metric.
struct SeedStats {
    std::vector<double> values;
    double mean = 0.0;
    double se = 0.0;
};

SeedStats seed_stats(std::vector<double> values);

/// Defaults: the blob task with four N(0, 1) nuisance dimensions against the ring, tanh features.
struct DepthStudyConfig {
    SyntheticTask in_task = with_nuisance(default_blob_task(), 4);
    SyntheticTask ood_task = with_nuisance(default_ring_task(), 4);
    std::vector<Index> depths{1, 4};
    Index width = 32;
    Index feature_dim = 16;
    Activation activation = Activation::tanh;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    EstimatorId estimator = EstimatorId::entropy;
};

struct DepthRow {
    Index depth = 0;
    SeedStats accuracy;
    SeedStats auroc;
};

/// Hidden widths for a depth: depth - 1 layers of `width` followed by the feature layer.
MlpSpec depth_spec(Index input_dim, Index depth, Index width, Index feature_dim, Activation act, Index k);

std::vector<DepthRow> depth_study(const DepthStudyConfig& cfg);

/// Per-seed data seeds shared by the experiment pipelines.
struct SeedPlan {
    std::uint64_t train;
    std::uint64_t test;
    std::uint64_t ood;
    std::uint64_t init;
};

SeedPlan seed_plan(std::uint64_t seed);

struct SplitData {
    Dataset train;
    Dataset test;
    Matrix ood;
};

/// Train, test and OOD draws of the two tasks using the plan's seeds.
SplitData make_split(const SyntheticTask& in_task, const SyntheticTask& ood_task, const SeedPlan& plan);

/// AUROC of `estimator` scores, OOD versus in-distribution, on a trained model.
double ood_auroc(const Mlp& model, const Matrix& in_inputs, const Matrix& ood_inputs, EstimatorId estimator,
                 std::uint64_t balance_seed);

/// Defaults: one hidden layer of 32, sixteen tanh features, frozen heads of norm 0.25.
struct CounterfactualConfig {
    SyntheticTask in_task = default_blob_task();
    SyntheticTask ood_task = default_ring_task();
    /// Any of optimal, sandwich, stack, lopsided (frozen heads) and trainable.
    std::vector<std::string> structures{"optimal", "trainable", "sandwich", "stack", "lopsided"};
    /// Hidden widths between the input and the feature layer.
    std::vector<Index> hidden{32};
    Index feature_dim = 16;
    Activation activation = Activation::tanh;
    /// Norm scale of the frozen heads.
    double head_scale = 0.25;
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    EstimatorId estimator = EstimatorId::entropy;
};

struct CounterfactualRow {
    std::string structure;
    SeedStats accuracy;
    SeedStats auroc;
    /// Final training loss (cross-entropy plus head penalty).
    SeedStats final_loss;
};

std::vector<CounterfactualRow> counterfactual_experiment(const CounterfactualConfig& cfg);

}  // namespace softconf
