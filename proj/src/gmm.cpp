#include "softconf/gmm.hpp"

#include "softconf/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace softconf {

namespace {

constexpr int kFormatVersion = 1;
constexpr int kMaxReinit = 3;
// A component whose total responsibility drops below one sample is treated as empty.
constexpr double kEmptyComponentMass = 1.0;

double logsumexp(const VecRef& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

Matrix transform_rows(const Matrix& x, FeatureTransform t) {
    if (t == FeatureTransform::none) return x;
    return x.array().max(kLogTransformFloor).log().matrix();
}

std::string transform_name(FeatureTransform t) { return t == FeatureTransform::log ? "log" : "none"; }

FeatureTransform parse_transform(const std::string& s) {
    if (s == "none") return FeatureTransform::none;
    if (s == "log") return FeatureTransform::log;
    throw ConfigError("unknown feature transform '" + s + "'");
}

struct Params {
    Vector weights;
    Matrix means;
    std::vector<Matrix> covs;
};

Matrix sample_covariance(const Matrix& x, const Vector& mean) {
    const Matrix centered = x.rowwise() - mean.transpose();
    return (centered.transpose() * centered) / static_cast<double>(x.rows());
}

Params hard_assignment_moments(const Matrix& x, const std::vector<Index>& assign, Index k, double reg) {
    const Index h = x.cols();
    const Index n = x.rows();
    Params p{Vector::Zero(k), Matrix::Zero(k, h), std::vector<Matrix>(static_cast<std::size_t>(k))};
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
        const Index c = assign[static_cast<std::size_t>(i)];
        ++counts[static_cast<std::size_t>(c)];
        p.means.row(c) += x.row(i);
    }
    const Vector global_mean = x.colwise().mean().transpose();
    const Matrix global_cov = sample_covariance(x, global_mean);
    for (Index c = 0; c < k; ++c) {
        const auto cnt = counts[static_cast<std::size_t>(c)];
        if (cnt == 0) throw NumericalError("component " + std::to_string(c) + " has no samples at initialization");
        p.means.row(c) /= static_cast<double>(cnt);
        p.weights[c] = static_cast<double>(cnt) / static_cast<double>(n);
        p.covs[static_cast<std::size_t>(c)] = Matrix::Zero(h, h);
    }
    for (Index i = 0; i < n; ++i) {
        const Index c = assign[static_cast<std::size_t>(i)];
        const Vector d = (x.row(i) - p.means.row(c)).transpose();
        p.covs[static_cast<std::size_t>(c)] += d * d.transpose();
    }
    for (Index c = 0; c < k; ++c) {
        const auto cnt = counts[static_cast<std::size_t>(c)];
        auto& cov = p.covs[static_cast<std::size_t>(c)];
        // A singleton cluster has no spread of its own; borrow the global one.
        cov = cnt > 1 ? Matrix(cov / static_cast<double>(cnt)) : global_cov;
        cov.diagonal().array() += reg;
    }
    return p;
}

std::vector<Index> kmeans_pp_assign(const Matrix& x, Index k, std::uint64_t seed, int iters) {
    const Index n = x.rows();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Index> pick(0, n - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Matrix centers(k, x.cols());
    centers.row(0) = x.row(pick(rng));
    Vector d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (Index c = 1; c < k; ++c) {
        const double total = d2.sum();
        Index chosen = pick(rng);
        if (total > 0.0) {
            double u = unif(rng) * total;
            chosen = n - 1;
            for (Index i = 0; i < n; ++i) {
                if (u < d2[i]) {
                    chosen = i;
                    break;
                }
                u -= d2[i];
            }
        }
        centers.row(c) = x.row(chosen);
        d2 = d2.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<Index> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it <= iters; ++it) {
        for (Index i = 0; i < n; ++i) {
            Index best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (Index c = 0; c < k; ++c) {
                const double d = (x.row(i) - centers.row(c)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            assign[static_cast<std::size_t>(i)] = best;
        }
        if (it == iters) break;
        Matrix sums = Matrix::Zero(k, x.cols());
        std::vector<Index> counts(static_cast<std::size_t>(k), 0);
        for (Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
            ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (Index c = 0; c < k; ++c)
            if (counts[static_cast<std::size_t>(c)] > 0)
                centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
    }

    // Guarantee every cluster owns at least one point: steal the point farthest from its own center.
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (auto a : assign) ++counts[static_cast<std::size_t>(a)];
    for (Index c = 0; c < k; ++c) {
        if (counts[static_cast<std::size_t>(c)] > 0) continue;
        Index far = -1;
        double far_d = -1.0;
        for (Index i = 0; i < n; ++i) {
            const Index a = assign[static_cast<std::size_t>(i)];
            if (counts[static_cast<std::size_t>(a)] < 2) continue;
            const double d = (x.row(i) - centers.row(a)).squaredNorm();
            if (d > far_d) {
                far_d = d;
                far = i;
            }
        }
        if (far < 0) throw NumericalError("not enough distinct samples to seed " + std::to_string(k) + " components");
        --counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(far)])];
        assign[static_cast<std::size_t>(far)] = c;
        ++counts[static_cast<std::size_t>(c)];
    }
    return assign;
}

double total_log_likelihood(const Matrix& log_joint, Matrix* resp) {
    double ll = 0.0;
    for (Index i = 0; i < log_joint.rows(); ++i) {
        const Vector row = log_joint.row(i).transpose();
        const double lse = logsumexp(row);
        ll += lse;
        if (resp) resp->row(i) = (row.array() - lse).exp().transpose();
    }
    return ll;
}

GaussianMixture make_model(Params p, double reg, FeatureTransform t) {
    return GaussianMixture(std::move(p.weights), std::move(p.means), std::move(p.covs), reg, t);
}

}  // namespace

GaussianMixture::GaussianMixture(Vector weights, Matrix means, std::vector<Matrix> covariances, double reg,
                                 FeatureTransform transform)
    : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)), reg_(reg),
      transform_(transform) {
    const Index k = means_.rows();
    const Index h = means_.cols();
    if (k < 1 || h < 1) throw DimensionError("mixture needs at least one component and one dimension");
    if (weights_.size() != k || static_cast<Index>(covs_.size()) != k)
        throw DimensionError("mixture weights, means and covariances disagree on component count");
    if (!(reg_ >= 0.0) || !std::isfinite(reg_)) throw ConfigError("mixture regularization must be finite and >= 0");
    require_finite(weights_, "mixture weights");
    require_finite(means_, "mixture means");
    if ((weights_.array() <= 0.0).any()) throw NumericalError("mixture weights must be positive");
    const double wsum = weights_.sum();
    if (std::abs(wsum - 1.0) > 1e-9) throw NumericalError("mixture weights do not sum to 1");
    weights_ /= wsum;

    chol_lower_.reserve(static_cast<std::size_t>(k));
    log_norm_.reserve(static_cast<std::size_t>(k));
    const double log2pi = std::log(2.0 * std::numbers::pi);
    for (Index c = 0; c < k; ++c) {
        auto& cov = covs_[static_cast<std::size_t>(c)];
        if (cov.rows() != h || cov.cols() != h)
            throw DimensionError("covariance " + std::to_string(c) + " is not " + std::to_string(h) + "x" +
                                 std::to_string(h));
        require_finite(cov, "mixture covariance");
        const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
        if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
            throw NumericalError("covariance " + std::to_string(c) + " is not symmetric");
        cov = 0.5 * (cov + cov.transpose());
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success || (llt.matrixLLT().diagonal().array() <= 0.0).any())
            throw SingularModelError("covariance " + std::to_string(c) + " is not positive definite");
        Matrix l = llt.matrixL();
        const double log_det = 2.0 * l.diagonal().array().log().sum();
        log_norm_.push_back(-0.5 * (static_cast<double>(h) * log2pi + log_det));
        chol_lower_.push_back(std::move(l));
    }
}

Vector GaussianMixture::transform_point(const VecRef& z) const {
    if (z.size() != h())
        throw DimensionError("feature length " + std::to_string(z.size()) + " does not match mixture dimension " +
                             std::to_string(h()));
    require_finite(z, "feature vector");
    if (transform_ == FeatureTransform::none) return z;
    return z.array().max(kLogTransformFloor).log().matrix();
}

double GaussianMixture::mahalanobis_sq(Index component, const VecRef& x) const {
    const auto& l = chol_lower_[static_cast<std::size_t>(component)];
    const Vector d = x - means_.row(component).transpose();
    return l.triangularView<Eigen::Lower>().solve(d).squaredNorm();
}

Vector GaussianMixture::solve(Index component, const VecRef& v) const {
    const auto& l = chol_lower_[static_cast<std::size_t>(component)];
    const Vector y = l.triangularView<Eigen::Lower>().solve(v);
    return l.transpose().triangularView<Eigen::Upper>().solve(y);
}

Vector GaussianMixture::component_log_joint(const VecRef& x) const {
    if (x.size() != h()) throw DimensionError("point dimension does not match mixture");
    Vector out(k());
    for (Index c = 0; c < k(); ++c)
        out[c] = std::log(weights_[c]) + log_norm_[static_cast<std::size_t>(c)] - 0.5 * mahalanobis_sq(c, x);
    return out;
}

Vector GaussianMixture::responsibilities(const VecRef& x) const {
    const Vector lj = component_log_joint(x);
    return (lj.array() - logsumexp(lj)).exp();
}

Matrix GaussianMixture::component_log_joint_rows(const Matrix& x) const {
    if (x.cols() != h()) throw DimensionError("point dimension does not match mixture");
    Matrix out(x.rows(), k());
    for (Index c = 0; c < k(); ++c) {
        const auto& l = chol_lower_[static_cast<std::size_t>(c)];
        const Matrix diff = (x.rowwise() - means_.row(c)).transpose();
        const Matrix y = l.triangularView<Eigen::Lower>().solve(diff);
        const double base = std::log(weights_[c]) + log_norm_[static_cast<std::size_t>(c)];
        out.col(c) = (base - 0.5 * y.colwise().squaredNorm().array()).transpose();
    }
    return out;
}

double GaussianMixture::log_density(const VecRef& z) const {
    return logsumexp(component_log_joint(transform_point(z)));
}

void EmConfig::validate() const {
    if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
    if (!(rel_tol > 0.0)) throw ConfigError("rel_tol must be > 0");
    if (!(reg >= 0.0) || !std::isfinite(reg)) throw ConfigError("reg must be finite and >= 0");
    if (kmeans_iters < 0) throw ConfigError("kmeans_iters must be >= 0");
}

GaussianMixture moment_match(const FeatureMatrix& features, const LabelVector& labels, double reg,
                             FeatureTransform transform) {
    if (labels.size() != static_cast<std::size_t>(features.n()))
        throw DimensionError("label count does not match sample count");
    const Matrix x = transform_rows(features.data(), transform);
    std::vector<Index> assign(labels.values().begin(), labels.values().end());
    return make_model(hard_assignment_moments(x, assign, labels.num_classes(), reg), reg, transform);
}

EmFit fit_em(const FeatureMatrix& features, const LabelVector* labels, const EmConfig& cfg) {
    cfg.validate();
    const Matrix x = transform_rows(features.data(), cfg.transform);
    const Index n = x.rows();
    const Index h = x.cols();

    Index k = static_cast<Index>(cfg.k_components);
    if (k == 0) {
        if (!labels) throw ConfigError("k_components = 0 needs labels to take the class count from");
        k = labels->num_classes();
    }
    if (k > n) throw ConfigError("more components than samples");

    Params params;
    if (cfg.init == EmInit::labels && labels) {
        if (labels->size() != static_cast<std::size_t>(n))
            throw DimensionError("label count does not match sample count");
        if (static_cast<Index>(labels->num_classes()) != k)
            throw ConfigError("label initialization needs one component per class");
        std::vector<Index> assign(labels->values().begin(), labels->values().end());
        params = hard_assignment_moments(x, assign, k, cfg.reg);
    } else {
        if (cfg.init == EmInit::labels && cfg.k_components == 0)
            throw ConfigError("label initialization requested without labels");
        params = hard_assignment_moments(x, kmeans_pp_assign(x, k, cfg.seed, cfg.kmeans_iters), k, cfg.reg);
    }

    const Vector global_mean = x.colwise().mean().transpose();
    Matrix global_cov = sample_covariance(x, global_mean);
    global_cov.diagonal().array() += cfg.reg;

    GaussianMixture model = make_model(params, cfg.reg, cfg.transform);
    EmFit fit{model, {}, {}, 0, false, false, 0.0};
    Matrix resp(n, k);
    int reinit_count = 0;
    bool skip_decrease_check = false;

    for (int it = 0;; ++it) {
        const Matrix lj = model.component_log_joint_rows(x);
        const double ll = total_log_likelihood(lj, &resp);
        if (!std::isfinite(ll)) throw NumericalError("EM log-likelihood became non-finite");

        if (!fit.log_likelihood.empty() && !skip_decrease_check) {
            const double prev = fit.log_likelihood.back();
            if (ll < prev) {
                // The regularized covariance update is not an exact maximizer; keep the better parameters.
                fit.stopped_on_decrease = prev - ll > 1e-9;
                fit.rejected_log_likelihood = ll;
                fit.converged = true;
                return fit;
            }
            fit.model = model;
            fit.log_likelihood.push_back(ll);
            if ((ll - prev) <= cfg.rel_tol * std::abs(prev)) {
                fit.converged = true;
                return fit;
            }
        } else {
            fit.model = model;
            fit.log_likelihood.push_back(ll);
        }
        skip_decrease_check = false;
        if (it >= cfg.max_iter) return fit;

        // M-step.
        const Vector nk = resp.colwise().sum().transpose();
        Params next{Vector(k), Matrix(k, h), std::vector<Matrix>(static_cast<std::size_t>(k))};
        bool reinit = false;
        for (Index c = 0; c < k; ++c) {
            if (nk[c] < kEmptyComponentMass) {
                if (++reinit_count > kMaxReinit)
                    throw NumericalError("component " + std::to_string(c) + " stayed empty after " +
                                         std::to_string(kMaxReinit) + " reinitializations");
                // Restart the component at the worst-explained sample with the global spread.
                Index worst = 0;
                double worst_ll = std::numeric_limits<double>::infinity();
                for (Index i = 0; i < n; ++i) {
                    const double v = logsumexp(lj.row(i).transpose());
                    if (v < worst_ll) {
                        worst_ll = v;
                        worst = i;
                    }
                }
                next.weights[c] = 1.0 / static_cast<double>(k);
                next.means.row(c) = x.row(worst);
                next.covs[static_cast<std::size_t>(c)] = global_cov;
                reinit = true;
                continue;
            }
            next.weights[c] = nk[c] / static_cast<double>(n);
            const Vector mu = (resp.col(c).transpose() * x).transpose() / nk[c];
            next.means.row(c) = mu.transpose();
            const Matrix centered = x.rowwise() - mu.transpose();
            Matrix cov = (centered.transpose() * resp.col(c).asDiagonal() * centered) / nk[c];
            cov = 0.5 * (cov + cov.transpose());
            cov.diagonal().array() += cfg.reg;
            next.covs[static_cast<std::size_t>(c)] = std::move(cov);
        }
        next.weights /= next.weights.sum();
        model = make_model(std::move(next), cfg.reg, cfg.transform);
        ++fit.iterations;
        if (reinit) {
            fit.reinit_points.push_back(fit.log_likelihood.size());
            skip_decrease_check = true;
        }
    }
}

double log_density(const GaussianMixture& gmm, const VecRef& z) { return gmm.log_density(z); }

UncertaintyScore u_density(const GaussianMixture& gmm, const VecRef& z) {
    return {-gmm.log_density(z), EstimatorId::density};
}

nlohmann::json to_json(const GaussianMixture& gmm) {
    nlohmann::json j;
    j["format"] = "softconf-gmm";
    j["version"] = kFormatVersion;
    j["k"] = gmm.k();
    j["h"] = gmm.h();
    j["reg"] = gmm.reg();
    j["transform"] = transform_name(gmm.transform());
    j["weights"] = std::vector<double>(gmm.weights().data(), gmm.weights().data() + gmm.k());
    auto means = nlohmann::json::array();
    for (Index c = 0; c < gmm.k(); ++c) {
        const Vector m = gmm.means().row(c).transpose();
        means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
    }
    j["means"] = std::move(means);
    auto covs = nlohmann::json::array();
    for (const auto& cov : gmm.covariances()) {
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(cov.size()));
        for (Index r = 0; r < cov.rows(); ++r)
            for (Index c = 0; c < cov.cols(); ++c) flat.push_back(cov(r, c));
        covs.push_back(std::move(flat));
    }
    j["covariances"] = std::move(covs);
    return j;
}

GaussianMixture gmm_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "softconf-gmm") throw IoError("not a mixture file");
        if (j.at("version").get<int>() != kFormatVersion)
            throw IoError("unsupported mixture format version " + std::to_string(j.at("version").get<int>()));
        const auto k = j.at("k").get<Index>();
        const auto h = j.at("h").get<Index>();
        if (k < 1 || h < 1) throw IoError("mixture file declares an empty model");
        const auto w = j.at("weights").get<std::vector<double>>();
        const auto& means_j = j.at("means");
        const auto& covs_j = j.at("covariances");
        if (static_cast<Index>(w.size()) != k || static_cast<Index>(means_j.size()) != k ||
            static_cast<Index>(covs_j.size()) != k)
            throw IoError("mixture file component count mismatch");
        Vector weights = Eigen::Map<const Vector>(w.data(), k);
        Matrix means(k, h);
        std::vector<Matrix> covs;
        for (Index c = 0; c < k; ++c) {
            const auto m = means_j[static_cast<std::size_t>(c)].get<std::vector<double>>();
            const auto s = covs_j[static_cast<std::size_t>(c)].get<std::vector<double>>();
            if (static_cast<Index>(m.size()) != h || static_cast<Index>(s.size()) != h * h)
                throw IoError("mixture file dimension mismatch in component " + std::to_string(c));
            means.row(c) = Eigen::Map<const Vector>(m.data(), h).transpose();
            Matrix cov(h, h);
            for (Index r = 0; r < h; ++r)
                for (Index q = 0; q < h; ++q) cov(r, q) = s[static_cast<std::size_t>(r * h + q)];
            covs.push_back(std::move(cov));
        }
        return GaussianMixture(std::move(weights), std::move(means), std::move(covs), j.at("reg").get<double>(),
                               parse_transform(j.value("transform", std::string("none"))));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed mixture JSON: ") + e.what());
    }
}

void save_gmm(const std::filesystem::path& path, const GaussianMixture& gmm) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(gmm).dump(1) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

GaussianMixture load_gmm(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse " + path.string() + ": " + e.what());
    }
    return gmm_from_json(j);
}

}  // namespace softconf
