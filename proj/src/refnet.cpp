#include "softconf/refnet.hpp"

#include "softconf/errors.hpp"
#include "softconf/estimators.hpp"
#include "softconf/metrics.hpp"
#include "softconf/structure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace softconf {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + name + "'");
}

void MlpSpec::validate() const {
    if (layer_widths.size() < 2) throw ConfigError("network needs an input width and at least one hidden layer");
    for (Index w : layer_widths)
        if (w < 1) throw ConfigError("layer widths must be >= 1");
    if (k < 2) throw ConfigError("network needs k >= 2 classes");
}

namespace {

Matrix activate(const Matrix& z, Activation a) {
    return a == Activation::relu ? Matrix(z.cwiseMax(0.0)) : Matrix(z.array().tanh().matrix());
}

/// Derivative of the activation given its pre-activation input and output.
Matrix activation_grad(const Matrix& pre, const Matrix& post, Activation a) {
    if (a == Activation::relu) return (pre.array() > 0.0).cast<double>().matrix();
    return (1.0 - post.array().square()).matrix();
}

Matrix row_softmax(const Matrix& logits) {
    Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
    p = p.array().exp().matrix();
    return p.array().colwise() / p.rowwise().sum().array();
}

}  // namespace

Mlp::Mlp(MlpSpec spec, std::vector<Matrix> weights, std::vector<Vector> biases, SoftmaxHead head)
    : spec_(std::move(spec)), w_(std::move(weights)), b_(std::move(biases)), head_(std::move(head)) {
    spec_.validate();
    const auto layers = static_cast<std::size_t>(spec_.hidden_layers());
    if (w_.size() != layers || b_.size() != layers) throw DimensionError("one weight matrix and bias per layer");
    for (std::size_t l = 0; l < layers; ++l) {
        if (w_[l].rows() != spec_.layer_widths[l + 1] || w_[l].cols() != spec_.layer_widths[l] ||
            b_[l].size() != spec_.layer_widths[l + 1])
            throw DimensionError("layer " + std::to_string(l) + " does not match the widths");
        require_finite(w_[l], "layer weights");
    }
    if (head_.h() != spec_.feature_dim() || head_.k() != spec_.k)
        throw DimensionError("head is not H x K for this network");
}

Mlp Mlp::initialize(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Matrix> w;
    std::vector<Vector> b;
    const double gain = spec.activation == Activation::relu ? 2.0 : 1.0;
    for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const Index in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
        const double sd = std::sqrt(gain / static_cast<double>(in));
        Matrix m(out, in);
        for (Index j = 0; j < in; ++j)
            for (Index i = 0; i < out; ++i) m(i, j) = sd * normal(rng);
        w.push_back(std::move(m));
        b.push_back(Vector::Zero(out));
    }
    const Index h = spec.feature_dim();
    const double sd = std::sqrt(1.0 / static_cast<double>(h));
    Matrix hw(h, spec.k);
    for (Index j = 0; j < spec.k; ++j)
        for (Index i = 0; i < h; ++i) hw(i, j) = sd * normal(rng);
    return Mlp(spec, std::move(w), std::move(b), SoftmaxHead(hw, Vector::Zero(spec.k)));
}

void Mlp::set_head(SoftmaxHead head) {
    if (head.h() != spec_.feature_dim() || head.k() != spec_.k)
        throw DimensionError("head is not H x K for this network");
    head_ = std::move(head);
}

Matrix Mlp::features(const Matrix& x) const {
    if (x.cols() != spec_.input_dim()) throw DimensionError("input width does not match the network");
    Matrix a = x;
    for (std::size_t l = 0; l < w_.size(); ++l) {
        Matrix z = a * w_[l].transpose();
        z.rowwise() += b_[l].transpose();
        a = activate(z, spec_.activation);
    }
    return a;
}

Vector Mlp::feature_vector(const VecRef& x) const { return features(Matrix(x.transpose())).row(0).transpose(); }

Matrix Mlp::logits(const Matrix& x) const {
    Matrix l = features(x) * head_.weights();
    l.rowwise() += head_.bias().transpose();
    return l;
}

Matrix Mlp::probabilities(const Matrix& x) const { return row_softmax(logits(x)); }

std::vector<Index> Mlp::predict(const Matrix& x) const {
    const Matrix l = logits(x);
    std::vector<Index> out(static_cast<std::size_t>(l.rows()));
    for (Index i = 0; i < l.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_lowest(l.row(i).transpose());
    return out;
}

double Mlp::accuracy(const Matrix& x, const LabelVector& y) const {
    if (y.size() != static_cast<std::size_t>(x.rows())) throw DimensionError("label count does not match inputs");
    const auto pred = predict(x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == static_cast<Index>(y[i]) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

Index Mlp::num_parameters() const {
    Index n = head_.weights().size() + head_.bias().size();
    for (std::size_t l = 0; l < w_.size(); ++l) n += w_[l].size() + b_[l].size();
    return n;
}

Vector Mlp::flat_parameters() const {
    Vector p(num_parameters());
    Index o = 0;
    const auto put = [&](const auto& m) {
        p.segment(o, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
        o += m.size();
    };
    for (std::size_t l = 0; l < w_.size(); ++l) {
        put(w_[l]);
        put(b_[l]);
    }
    put(head_.weights());
    put(head_.bias());
    return p;
}

void Mlp::set_flat_parameters(const VecRef& p) {
    if (p.size() != num_parameters()) throw DimensionError("parameter vector has the wrong length");
    Index o = 0;
    const auto take = [&](auto& m) {
        Eigen::Map<Vector>(m.data(), m.size()) = p.segment(o, m.size());
        o += m.size();
    };
    for (std::size_t l = 0; l < w_.size(); ++l) {
        take(w_[l]);
        take(b_[l]);
    }
    Matrix hw = head_.weights();
    Vector hb = head_.bias();
    take(hw);
    take(hb);
    head_ = SoftmaxHead(hw, hb);
}

namespace {

struct Gradients {
    double loss = 0.0;
    std::vector<Matrix> dw;
    std::vector<Vector> db;
    Matrix dhw;
    Vector dhb;
};

/// Forward and backward pass over the rows listed in `rows`.
Gradients backprop(const Mlp& model, const Matrix& x, const LabelVector& y, const std::vector<Index>& rows,
                   double lambda1, bool need_head) {
    const auto& w = model.weights();
    const auto& b = model.biases();
    const Activation act = model.spec().activation;
    const auto n = static_cast<Index>(rows.size());
    std::vector<Matrix> pre(w.size()), post(w.size() + 1);
    post[0].resize(n, x.cols());
    for (Index i = 0; i < n; ++i) post[0].row(i) = x.row(rows[static_cast<std::size_t>(i)]);
    for (std::size_t l = 0; l < w.size(); ++l) {
        pre[l] = post[l] * w[l].transpose();
        pre[l].rowwise() += b[l].transpose();
        post[l + 1] = activate(pre[l], act);
    }
    const Matrix& z = post.back();
    const SoftmaxHead& head = model.head();
    Matrix logits = z * head.weights();
    logits.rowwise() += head.bias().transpose();

    Gradients g;
    const Vector row_max = logits.rowwise().maxCoeff();
    Matrix d = logits.colwise() - row_max;
    const Vector lse = d.array().exp().rowwise().sum().log().matrix();
    double ce = 0.0;
    for (Index i = 0; i < n; ++i) {
        const auto c = static_cast<Index>(y[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])]);
        ce += lse[i] - d(i, c);
    }
    g.loss = ce / static_cast<double>(n) +
             lambda1 * (head.weights().squaredNorm() + head.bias().squaredNorm());

    // d loss / d logits = (softmax - onehot) / n
    d = (d.colwise() - lse).array().exp().matrix();
    for (Index i = 0; i < n; ++i) d(i, y[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])]) -= 1.0;
    d /= static_cast<double>(n);
    if (need_head) {
        g.dhw = z.transpose() * d + 2.0 * lambda1 * head.weights();
        g.dhb = d.colwise().sum().transpose() + 2.0 * lambda1 * head.bias();
    }
    Matrix da = d * head.weights().transpose();
    g.dw.resize(w.size());
    g.db.resize(w.size());
    for (std::size_t l = w.size(); l-- > 0;) {
        const Matrix dz = da.cwiseProduct(activation_grad(pre[l], post[l + 1], act));
        g.dw[l] = dz.transpose() * post[l];
        g.db[l] = dz.colwise().sum().transpose();
        if (l > 0) da = dz * w[l];
    }
    return g;
}

void check_training_data(const Matrix& x, const LabelVector& y, const MlpSpec& spec) {
    if (x.rows() == 0) throw ConfigError("training set is empty");
    if (y.size() != static_cast<std::size_t>(x.rows())) throw DimensionError("label count does not match inputs");
    if (x.cols() != spec.input_dim()) throw DimensionError("input width does not match the network");
    if (static_cast<Index>(y.num_classes()) > spec.k) throw DimensionError("labels exceed the network's classes");
    require_finite(x, "training inputs");
}

std::vector<Index> all_rows(Index n) {
    std::vector<Index> r(static_cast<std::size_t>(n));
    std::iota(r.begin(), r.end(), Index{0});
    return r;
}

}  // namespace

LossGradient loss_and_gradient(const Mlp& model, const Matrix& x, const LabelVector& y, double lambda1) {
    check_training_data(x, y, model.spec());
    const auto g = backprop(model, x, y, all_rows(x.rows()), lambda1, true);
    LossGradient out;
    out.loss = g.loss;
    out.gradient.resize(model.num_parameters());
    Index o = 0;
    const auto put = [&](const auto& m) {
        out.gradient.segment(o, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
        o += m.size();
    };
    for (std::size_t l = 0; l < g.dw.size(); ++l) {
        put(g.dw[l]);
        put(g.db[l]);
    }
    put(g.dhw);
    put(g.dhb);
    return out;
}

double training_loss(const Mlp& model, const Matrix& x, const LabelVector& y, double lambda1) {
    check_training_data(x, y, model.spec());
    const Matrix l = model.logits(x);
    double ce = 0.0;
    for (Index i = 0; i < l.rows(); ++i)
        ce -= log_softmax_from_logits(l.row(i).transpose())[y[static_cast<std::size_t>(i)]];
    const auto& h = model.head();
    return ce / static_cast<double>(l.rows()) + lambda1 * (h.weights().squaredNorm() + h.bias().squaredNorm());
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
}

TrainResult train(const Matrix& x, const LabelVector& y, const MlpSpec& spec, const TrainConfig& cfg) {
    spec.validate();
    cfg.validate();
    check_training_data(x, y, spec);
    Mlp model = Mlp::initialize(spec, cfg.seed);
    const bool frozen = cfg.frozen_head.has_value();
    if (frozen) model.set_head(*cfg.frozen_head);

    std::vector<Matrix> w = model.weights();
    std::vector<Vector> b = model.biases();
    Matrix hw = model.head().weights();
    Vector hb = model.head().bias();

    TrainResult result{model, training_loss(model, x, y, cfg.weight_decay), {}};
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Index> order = all_rows(x.rows());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
            const auto g = backprop(result.model, x, y, rows, cfg.weight_decay, !frozen);
            if (!std::isfinite(g.loss))
                throw NumericalError("training diverged in epoch " + std::to_string(epoch + 1));
            for (std::size_t l = 0; l < w.size(); ++l) {
                w[l] -= cfg.learning_rate * g.dw[l];
                b[l] -= cfg.learning_rate * g.db[l];
            }
            if (!frozen) {
                hw -= cfg.learning_rate * g.dhw;
                hb -= cfg.learning_rate * g.dhb;
            }
            result.model = Mlp(spec, w, b, frozen ? *cfg.frozen_head : SoftmaxHead(hw, hb));
        }
        const double loss = training_loss(result.model, x, y, cfg.weight_decay);
        if (!std::isfinite(loss)) throw NumericalError("training diverged in epoch " + std::to_string(epoch + 1));
        result.epoch_loss.push_back(loss);
    }
    return result;
}

namespace {

std::vector<double> flat(const Matrix& m) {
    // Row-major so the JSON reads like the matrix.
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
    return out;
}

Matrix unflat(const std::vector<double>& v, Index rows, Index cols, const char* what) {
    if (static_cast<Index>(v.size()) != rows * cols)
        throw IoError(std::string("model field '") + what + "' has the wrong number of entries");
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = v[static_cast<std::size_t>(i * cols + j)];
    return m;
}

}  // namespace

nlohmann::json to_json(const Mlp& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < model.weights().size(); ++l)
        layers.push_back({{"weights", flat(model.weights()[l])}, {"bias", flat(model.biases()[l].transpose())}});
    return {{"format", "softconf-mlp"},
            {"version", 1},
            {"spec",
             {{"layer_widths", model.spec().layer_widths},
              {"activation", to_string(model.spec().activation)},
              {"k", model.spec().k}}},
            {"layers", std::move(layers)},
            {"head", {{"weights", flat(model.head().weights())}, {"bias", flat(model.head().bias().transpose())}}}};
}

Mlp mlp_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "softconf-mlp") throw IoError("not a softconf-mlp model");
        if (j.at("version") != 1) throw IoError("unsupported model version");
        MlpSpec spec;
        spec.layer_widths = j.at("spec").at("layer_widths").get<std::vector<Index>>();
        spec.activation = parse_activation(j.at("spec").at("activation").get<std::string>());
        spec.k = j.at("spec").at("k").get<Index>();
        spec.validate();
        const auto& layers = j.at("layers");
        if (layers.size() != spec.layer_widths.size() - 1) throw IoError("model layer count does not match its spec");
        std::vector<Matrix> w;
        std::vector<Vector> b;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const Index in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
            w.push_back(unflat(layers[l].at("weights").get<std::vector<double>>(), out, in, "weights"));
            b.push_back(unflat(layers[l].at("bias").get<std::vector<double>>(), out, 1, "bias"));
        }
        const Matrix hw = unflat(j.at("head").at("weights").get<std::vector<double>>(), spec.feature_dim(), spec.k,
                                 "head weights");
        const Vector hb = unflat(j.at("head").at("bias").get<std::vector<double>>(), spec.k, 1, "head bias");
        return Mlp(spec, std::move(w), std::move(b), SoftmaxHead(hw, hb));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed model JSON: ") + e.what());
    }
}

void save_mlp(const std::filesystem::path& path, const Mlp& model) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(model).dump(1) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

Mlp load_mlp(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse " + path.string() + ": " + e.what());
    }
    return mlp_from_json(j);
}

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::gaussian_blobs: return "gaussian_blobs";
        case TaskKind::two_d_toy: return "two_d_toy";
        case TaskKind::ring_ood: return "ring_ood";
        case TaskKind::uniform_hypercube_ood: return "uniform_hypercube_ood";
        case TaskKind::binary_grid: return "binary_grid";
    }
    return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
    for (auto k : {TaskKind::gaussian_blobs, TaskKind::two_d_toy, TaskKind::ring_ood, TaskKind::uniform_hypercube_ood,
                   TaskKind::binary_grid})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown task kind '" + name + "'");
}

void SyntheticTask::validate() const {
    if (count < 1) throw ConfigError("task count must be >= 1");
    if (nuisance_dims < 0) throw ConfigError("nuisance_dims must be >= 0");
    if (nuisance_dims > 0 && !(nuisance_sigma > 0.0)) throw ConfigError("nuisance_sigma must be positive");
    switch (kind) {
        case TaskKind::gaussian_blobs:
            if (dim < 1) throw ConfigError("blob dim must be >= 1");
            [[fallthrough]];
        case TaskKind::two_d_toy:
            if (k < 2) throw ConfigError("blob tasks need k >= 2");
            if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
            if (!(separation > 0.0)) throw ConfigError("separation must be positive");
            if (max_radius_sigma != 0.0 && !(max_radius_sigma >= 1.0))
                throw ConfigError("max_radius_sigma must be 0 or >= 1");
            break;
        case TaskKind::ring_ood:
            if (dim < 1) throw ConfigError("ring dim must be >= 1");
            if (!(r_inner >= 0.0) || !(r_outer > r_inner)) throw ConfigError("ring needs 0 <= r_inner < r_outer");
            break;
        case TaskKind::uniform_hypercube_ood:
            if (dim < 1) throw ConfigError("hypercube dim must be >= 1");
            if (!(hi > lo)) throw ConfigError("hypercube needs lo < hi");
            break;
        case TaskKind::binary_grid:
            if (side < 1) throw ConfigError("grid side must be >= 1");
            if (!uniform && k < 2) throw ConfigError("grid task needs k >= 2");
            if (!(flip_prob >= 0.0 && flip_prob <= 0.5)) throw ConfigError("flip_prob must lie in [0, 0.5]");
            break;
    }
}

Index SyntheticTask::input_dim() const {
    const Index base = kind == TaskKind::two_d_toy ? 2 : (kind == TaskKind::binary_grid ? side * side : dim);
    return base + nuisance_dims;
}

bool SyntheticTask::labelled() const {
    return kind == TaskKind::gaussian_blobs || kind == TaskKind::two_d_toy ||
           (kind == TaskKind::binary_grid && !uniform);
}

nlohmann::json to_json(const SyntheticTask& t) {
    return {{"kind", to_string(t.kind)},
            {"k", t.k},
            {"dim", t.dim},
            {"nuisance_dims", t.nuisance_dims},
            {"nuisance_sigma", t.nuisance_sigma},
            {"count", t.count},
            {"sigma", t.sigma},
            {"separation", t.separation},
            {"max_radius_sigma", t.max_radius_sigma},
            {"r_inner", t.r_inner},
            {"r_outer", t.r_outer},
            {"lo", t.lo},
            {"hi", t.hi},
            {"side", t.side},
            {"flip_prob", t.flip_prob},
            {"uniform", t.uniform},
            {"seed", t.seed}};
}

SyntheticTask task_from_json(const nlohmann::json& j, const SyntheticTask& base) {
    if (!j.is_object()) throw ConfigError("task must be a JSON object");
    SyntheticTask t = base;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "kind") t.kind = parse_task_kind(v.get<std::string>());
            else if (key == "k") t.k = v.get<Index>();
            else if (key == "dim") t.dim = v.get<Index>();
            else if (key == "nuisance_dims") t.nuisance_dims = v.get<Index>();
            else if (key == "nuisance_sigma") t.nuisance_sigma = v.get<double>();
            else if (key == "count") t.count = v.get<Index>();
            else if (key == "sigma") t.sigma = v.get<double>();
            else if (key == "separation") t.separation = v.get<double>();
            else if (key == "max_radius_sigma") t.max_radius_sigma = v.get<double>();
            else if (key == "r_inner") t.r_inner = v.get<double>();
            else if (key == "r_outer") t.r_outer = v.get<double>();
            else if (key == "lo") t.lo = v.get<double>();
            else if (key == "hi") t.hi = v.get<double>();
            else if (key == "side") t.side = v.get<Index>();
            else if (key == "flip_prob") t.flip_prob = v.get<double>();
            else if (key == "uniform") t.uniform = v.get<bool>();
            else if (key == "seed") t.seed = v.get<std::uint64_t>();
            else throw ConfigError("unknown task key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad task value: ") + e.what());
    }
    t.validate();
    return t;
}

Matrix blob_means(const SyntheticTask& task) {
    task.validate();
    const Index dim = task.kind == TaskKind::two_d_toy ? 2 : task.dim;
    const double gap = task.separation * task.sigma;
    Matrix m = Matrix::Zero(task.k, dim);
    if (dim == 1) {
        for (Index c = 0; c < task.k; ++c) m(c, 0) = gap * (static_cast<double>(c) - 0.5 * (task.k - 1));
        return m;
    }
    // Regular polygon with neighbouring vertices `gap` apart; two classes sit on a line.
    const double radius = gap / (2.0 * std::sin(std::numbers::pi / static_cast<double>(task.k)));
    for (Index c = 0; c < task.k; ++c) {
        const double angle = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * static_cast<double>(c) / task.k;
        m(c, 0) = radius * std::cos(angle);
        m(c, 1) = radius * std::sin(angle);
    }
    return m;
}

Matrix grid_prototypes(const SyntheticTask& task) {
    task.validate();
    std::mt19937_64 rng(task.seed ^ 0x5bd1e995ULL);
    std::bernoulli_distribution coin(0.5);
    Matrix p(task.k, task.side * task.side);
    for (Index c = 0; c < task.k; ++c)
        for (Index j = 0; j < p.cols(); ++j) p(c, j) = coin(rng) ? 1.0 : 0.0;
    return p;
}

namespace {

void fill_nuisance(Matrix& x, Index from, const SyntheticTask& task, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, task.nuisance_sigma);
    for (Index i = 0; i < x.rows(); ++i)
        for (Index j = from; j < x.cols(); ++j) x(i, j) = normal(rng);
}

}  // namespace

Dataset generate(const SyntheticTask& task) {
    task.validate();
    std::mt19937_64 rng(task.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const Index d = task.input_dim();
    const Index base = d - task.nuisance_dims;
    Dataset out;
    switch (task.kind) {
        case TaskKind::gaussian_blobs:
        case TaskKind::two_d_toy: {
            const Matrix means = blob_means(task);
            out.inputs.resize(task.k * task.count, d);
            std::vector<std::uint32_t> y;
            Vector e(base);
            for (Index c = 0; c < task.k; ++c)
                for (Index i = 0; i < task.count; ++i) {
                    do {
                        for (Index j = 0; j < base; ++j) e[j] = normal(rng);
                    } while (task.max_radius_sigma > 0.0 && e.norm() > task.max_radius_sigma);
                    out.inputs.row(c * task.count + i).head(base) = means.row(c) + task.sigma * e.transpose();
                    y.push_back(static_cast<std::uint32_t>(c));
                }
            out.labels = LabelVector(std::move(y), static_cast<std::uint32_t>(task.k));
            break;
        }
        case TaskKind::ring_ood: {
            out.inputs.resize(task.count, d);
            const double lo = std::pow(task.r_inner, static_cast<double>(base));
            const double hi = std::pow(task.r_outer, static_cast<double>(base));
            Vector e(base);
            for (Index i = 0; i < task.count; ++i) {
                do {
                    for (Index j = 0; j < base; ++j) e[j] = normal(rng);
                } while (e.norm() == 0.0);
                // Radius with density proportional to r^(dim - 1) is uniform over the shell volume.
                const double r = std::pow(lo + (hi - lo) * unif(rng), 1.0 / static_cast<double>(base));
                out.inputs.row(i).head(base) = (r / e.norm()) * e.transpose();
            }
            break;
        }
        case TaskKind::uniform_hypercube_ood: {
            out.inputs.resize(task.count, d);
            for (Index i = 0; i < task.count; ++i)
                for (Index j = 0; j < base; ++j) out.inputs(i, j) = task.lo + (task.hi - task.lo) * unif(rng);
            break;
        }
        case TaskKind::binary_grid: {
            if (task.uniform) {
                out.inputs.resize(task.count, d);
                for (Index i = 0; i < task.count; ++i)
                    for (Index j = 0; j < base; ++j) out.inputs(i, j) = unif(rng) < 0.5 ? 1.0 : 0.0;
                break;
            }
            const Matrix proto = grid_prototypes(task);
            out.inputs.resize(task.k * task.count, d);
            std::vector<std::uint32_t> y;
            for (Index c = 0; c < task.k; ++c)
                for (Index i = 0; i < task.count; ++i) {
                    for (Index j = 0; j < base; ++j) {
                        const bool flip = unif(rng) < task.flip_prob;
                        out.inputs(c * task.count + i, j) = flip ? 1.0 - proto(c, j) : proto(c, j);
                    }
                    y.push_back(static_cast<std::uint32_t>(c));
                }
            out.labels = LabelVector(std::move(y), static_cast<std::uint32_t>(task.k));
            break;
        }
    }
    if (task.nuisance_dims > 0) fill_nuisance(out.inputs, base, task, rng);
    return out;
}

namespace {

/// Strict weak order: more confident first, then lexicographically smaller input.
bool better(const SweepEntry& a, const SweepEntry& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return std::lexicographical_compare(a.input.data(), a.input.data() + a.input.size(), b.input.data(),
                                        b.input.data() + b.input.size());
}

}  // namespace

TopConfident::TopConfident(Index k, Index top_m) : top_m_(top_m), heaps_(static_cast<std::size_t>(k)) {
    if (k < 1 || top_m < 1) throw ConfigError("sweep needs k >= 1 and top_m >= 1");
}

void TopConfident::push(std::size_t c, SweepEntry e) {
    auto& heap = heaps_[c];
    // A max-heap under `better` keeps the worst kept entry at the front.
    if (static_cast<Index>(heap.size()) < top_m_) {
        heap.push_back(std::move(e));
        std::push_heap(heap.begin(), heap.end(), better);
    } else if (better(e, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), better);
        heap.back() = std::move(e);
        std::push_heap(heap.begin(), heap.end(), better);
    }
}

void TopConfident::offer(const VecRef& input, const VecRef& probs) {
    if (probs.size() != static_cast<Index>(heaps_.size()))
        throw DimensionError("probability vector has the wrong length");
    const Index c = argmax_lowest(probs);
    push(static_cast<std::size_t>(c), SweepEntry{probs[c], input});
}

void TopConfident::merge(const TopConfident& other) {
    if (other.heaps_.size() != heaps_.size() || other.top_m_ != top_m_)
        throw DimensionError("cannot merge sweeps with different shapes");
    for (std::size_t c = 0; c < heaps_.size(); ++c)
        for (const auto& e : other.heaps_[c]) push(c, e);
}

std::vector<std::vector<SweepEntry>> TopConfident::sorted() const {
    auto out = heaps_;
    for (auto& h : out) std::sort(h.begin(), h.end(), better);
    return out;
}

SweepResult confidence_sweep(const Mlp& model, const SyntheticTask& sampler, std::size_t n_samples, Index top_m) {
    sampler.validate();
    if (sampler.labelled()) throw ConfigError("the sweep sampler must be an unlabelled task");
    if (sampler.input_dim() != model.spec().input_dim())
        throw DimensionError("sampler dimension does not match the network input");
    const Index k = model.spec().k;
    if (n_samples < static_cast<std::size_t>(top_m * k)) throw ConfigError("n_samples must be >= top_m * k");
    constexpr std::size_t kChunk = 4096;
    TopConfident keep(k, top_m);
    double conf_sum = 0.0;
    std::size_t done = 0;
    for (std::uint64_t chunk = 0; done < n_samples; ++chunk) {
        SyntheticTask t = sampler;
        t.count = static_cast<Index>(std::min(kChunk, n_samples - done));
        t.seed = sampler.seed * 1000003ULL + chunk;
        const Matrix x = generate(t).inputs;
        const Matrix p = model.probabilities(x);
        for (Index i = 0; i < x.rows(); ++i) {
            keep.offer(x.row(i).transpose(), p.row(i).transpose());
            conf_sum += p.row(i).maxCoeff();
        }
        done += static_cast<std::size_t>(x.rows());
    }
    return {keep.sorted(), conf_sum / static_cast<double>(n_samples), n_samples};
}

SeedStats seed_stats(std::vector<double> values) {
    const auto ms = mean_se(values);
    return {std::move(values), ms.mean, ms.se};
}

MlpSpec depth_spec(Index input_dim, Index depth, Index width, Index feature_dim, Activation act, Index k) {
    if (depth < 1) throw ConfigError("depth must be >= 1");
    MlpSpec s;
    s.layer_widths = {input_dim};
    for (Index i = 1; i < depth; ++i) s.layer_widths.push_back(width);
    s.layer_widths.push_back(feature_dim);
    s.activation = act;
    s.k = k;
    s.validate();
    return s;
}

SeedPlan seed_plan(std::uint64_t seed) {
    return {seed * 1000 + 1, seed * 1000 + 2, seed * 1000 + 3, seed * 1000 + 4};
}

double ood_auroc(const Mlp& model, const Matrix& in_inputs, const Matrix& ood_inputs, EstimatorId estimator,
                 std::uint64_t balance_seed) {
    if (estimator == EstimatorId::density || estimator == EstimatorId::mental)
        throw ConfigError("OOD AUROC here needs a softmax-based estimator");
    const auto scores = [&](const Matrix& x) {
        const Vector s = score_all(estimator, model.head(), nullptr, FeatureMatrix(model.features(x)));
        return std::vector<double>(s.data(), s.data() + s.size());
    };
    return balanced_auroc(scores(in_inputs), scores(ood_inputs), balance_seed);
}

SplitData make_split(const SyntheticTask& in_task, const SyntheticTask& ood_task, const SeedPlan& plan) {
    if (!in_task.labelled()) throw ConfigError("the in-distribution task must be labelled");
    if (ood_task.labelled()) throw ConfigError("the OOD task must be unlabelled");
    if (in_task.input_dim() != ood_task.input_dim()) throw DimensionError("in and OOD tasks differ in input width");
    SyntheticTask tr = in_task, te = in_task, od = ood_task;
    tr.seed = plan.train;
    te.seed = plan.test;
    od.seed = plan.ood;
    return {generate(tr), generate(te), generate(od).inputs};
}

std::vector<DepthRow> depth_study(const DepthStudyConfig& cfg) {
    if (cfg.depths.empty() || cfg.seeds.empty()) throw ConfigError("depth study needs depths and seeds");
    std::vector<DepthRow> rows;
    for (Index depth : cfg.depths) {
        std::vector<double> acc, au;
        for (auto seed : cfg.seeds) {
            const auto plan = seed_plan(seed);
            const auto data = make_split(cfg.in_task, cfg.ood_task, plan);
            const auto spec =
                depth_spec(cfg.in_task.input_dim(), depth, cfg.width, cfg.feature_dim, cfg.activation, cfg.in_task.k);
            TrainConfig tc = cfg.train;
            tc.seed = plan.init;
            const auto res = train(data.train.inputs, *data.train.labels, spec, tc);
            acc.push_back(res.model.accuracy(data.test.inputs, *data.test.labels));
            au.push_back(ood_auroc(res.model, data.test.inputs, data.ood, cfg.estimator, plan.ood));
        }
        rows.push_back({depth, seed_stats(acc), seed_stats(au)});
    }
    return rows;
}

std::vector<CounterfactualRow> counterfactual_experiment(const CounterfactualConfig& cfg) {
    if (cfg.structures.empty() || cfg.seeds.empty()) throw ConfigError("counterfactual needs structures and seeds");
    if (cfg.in_task.k != 3) throw ConfigError("the counterfactual structures need a three-class task");
    std::vector<CounterfactualRow> rows;
    for (const auto& name : cfg.structures) {
        if (name != "trainable") parse_structure(name);
        std::vector<double> acc, au, loss;
        for (auto seed : cfg.seeds) {
            const auto plan = seed_plan(seed);
            const auto data = make_split(cfg.in_task, cfg.ood_task, plan);
            MlpSpec spec;
            spec.layer_widths = {cfg.in_task.input_dim()};
            for (Index w : cfg.hidden) spec.layer_widths.push_back(w);
            spec.layer_widths.push_back(cfg.feature_dim);
            spec.activation = cfg.activation;
            spec.k = 3;
            TrainConfig tc = cfg.train;
            tc.seed = plan.init;
            tc.frozen_head.reset();
            if (name != "trainable")
                tc.frozen_head =
                    gen_counterfactual_head(parse_structure(name), 3, cfg.feature_dim, seed, cfg.head_scale).head;
            const auto res = train(data.train.inputs, *data.train.labels, spec, tc);
            acc.push_back(res.model.accuracy(data.test.inputs, *data.test.labels));
            au.push_back(ood_auroc(res.model, data.test.inputs, data.ood, cfg.estimator, plan.ood));
            loss.push_back(res.epoch_loss.back());
        }
        rows.push_back({name, seed_stats(acc), seed_stats(au), seed_stats(loss)});
    }
    return rows;
}

}  // namespace softconf
