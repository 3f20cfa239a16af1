#include "softconf/cli.hpp"
#include "softconf/errors.hpp"
#include "softconf/estimators.hpp"
#include "softconf/geometry.hpp"
#include "softconf/gmm.hpp"
#include "softconf/metrics.hpp"
#include "softconf/structure.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace softconf;

namespace {

LabelVector to_labels(const std::vector<std::uint32_t>& labels) { return LabelVector::infer(labels); }

CoolOptions cool_options(double factor, const std::string& mode) {
    CoolOptions opts;
    opts.factor = factor;
    if (mode == "logits")
        opts.mode = CoolMode::logits;
    else if (mode == "features")
        opts.mode = CoolMode::features;
    else
        throw ConfigError("cool mode must be 'logits' or 'features', got '" + mode + "'");
    return opts;
}

py::dict score_features(const SoftmaxHead& head, const Matrix& features, const GaussianMixture* gmm,
                        double cool_factor, const std::string& cool_mode) {
    const auto rows = score_batch(head, gmm, FeatureMatrix(features), cool_options(cool_factor, cool_mode));
    const auto n = static_cast<Index>(rows.size());
    Vector umax(n), uent(n), ucool(n), uden(n), znorm(n), mcos(n);
    std::vector<Index> argmax(rows.size());
    for (Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        umax[i] = r.u_max;
        uent[i] = r.u_entropy;
        ucool[i] = r.u_cool;
        uden[i] = r.u_density;
        znorm[i] = r.z_norm;
        mcos[i] = r.max_cos;
        argmax[static_cast<std::size_t>(i)] = r.argmax_class;
    }
    py::dict out;
    out["u_max"] = umax;
    out["u_entropy"] = uent;
    out["u_cool"] = ucool;
    if (gmm) out["u_density"] = uden;
    out["z_norm"] = znorm;
    out["max_cos"] = mcos;
    out["argmax_class"] = argmax;
    return out;
}

py::dict report_dict(const AttributionReport& r) {
    py::dict d;
    d["auroc_max"] = r.auroc_max;
    d["auroc_entropy"] = r.auroc_entropy;
    d["auroc_cool"] = r.auroc_cool;
    d["auroc_density"] = r.auroc_density;
    d["cause1"] = r.cause1;
    d["cause2"] = r.cause2;
    d["cause3"] = r.cause3;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Softmax confidence geometry: uncertainty scores, head structure, OOD regions and attribution.";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    auto numerical = py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
    py::register_exception<DegenerateWeightError>(m, "DegenerateWeightError", numerical.ptr());
    py::register_exception<OnBoundaryError>(m, "OnBoundaryError", numerical.ptr());
    py::register_exception<SingularModelError>(m, "SingularModelError", numerical.ptr());

    py::class_<SoftmaxHead>(m, "SoftmaxHead", "Final linear layer with weight columns w_i (H x K) and biases b_i.")
        .def(py::init<Matrix, Vector>(), py::arg("weights"), py::arg("bias"))
        .def(py::init<Matrix>(), py::arg("weights"))
        .def_property_readonly("h", &SoftmaxHead::h)
        .def_property_readonly("k", &SoftmaxHead::k)
        .def_property_readonly("weights", &SoftmaxHead::weights)
        .def_property_readonly("bias", &SoftmaxHead::bias)
        .def("logits", &SoftmaxHead::logits, py::arg("z"))
        .def("__repr__", [](const SoftmaxHead& h) {
            std::ostringstream ss;
            ss << "SoftmaxHead(h=" << h.h() << ", k=" << h.k() << ")";
            return ss.str();
        });

    py::class_<GaussianMixture>(m, "GaussianMixture")
        .def(py::init([](Vector weights, Matrix means, std::vector<Matrix> covs, double reg) {
                 return GaussianMixture(std::move(weights), std::move(means), std::move(covs), reg);
             }),
             py::arg("weights"), py::arg("means"), py::arg("covariances"), py::arg("reg") = 0.0)
        .def_property_readonly("k", &GaussianMixture::k)
        .def_property_readonly("h", &GaussianMixture::h)
        .def_property_readonly("reg", &GaussianMixture::reg)
        .def("log_density", &GaussianMixture::log_density, py::arg("z"))
        .def("save", [](const GaussianMixture& g, const std::string& path) { save_gmm(path, g); }, py::arg("path"))
        .def_static("load", [](const std::string& path) { return load_gmm(path); }, py::arg("path"));

    m.def("softmax", py::overload_cast<const SoftmaxHead&, const VecRef&>(&softmax), py::arg("head"), py::arg("z"));
    m.def(
        "decompose",
        [](const SoftmaxHead& head, const Vector& z) {
            const auto d = decompose(head, z);
            py::dict out;
            out["z_norm"] = d.z_norm;
            out["cos_theta"] = d.cos_theta;
            out["argmax_class"] = d.argmax_class;
            return out;
        },
        py::arg("head"), py::arg("z"), "Feature norm, cosine to every weight column and the argmax class.");

    m.def("u_max", [](const SoftmaxHead& h, const Vector& z) { return u_max(h, z).value; }, py::arg("head"),
          py::arg("z"));
    m.def("u_entropy", [](const SoftmaxHead& h, const Vector& z) { return u_entropy(h, z).value; }, py::arg("head"),
          py::arg("z"));
    m.def(
        "u_cool",
        [](const SoftmaxHead& h, const Vector& z, double factor, const std::string& mode) {
            return u_cool(h, z, cool_options(factor, mode)).value;
        },
        py::arg("head"), py::arg("z"), py::arg("factor") = kDefaultCoolTemperature, py::arg("mode") = "logits");
    m.def("u_density", [](const GaussianMixture& g, const Vector& z) { return u_density(g, z).value; },
          py::arg("gmm"), py::arg("z"));
    m.def("u_mental", [](Index k, double n, double c) { return u_mental(k, n, c).value; }, py::arg("k"),
          py::arg("z_norm"), py::arg("max_cos"));
    m.def("grad_u_max", &grad_u_max, py::arg("head"), py::arg("z"));
    m.def("grad_u_entropy", &grad_u_entropy, py::arg("head"), py::arg("z"));
    m.def("grad_u_density", &grad_u_density, py::arg("gmm"), py::arg("z"));

    m.def("score", &score_features, py::arg("head"), py::arg("features"), py::arg("gmm") = nullptr,
          py::arg("cool_factor") = kDefaultCoolTemperature, py::arg("cool_mode") = "logits",
          "Scores every row of an N x H feature matrix; returns a dict of arrays.");

    m.def(
        "fit_gmm",
        [](const Matrix& features, std::optional<std::vector<std::uint32_t>> labels, std::size_t components,
           std::uint64_t seed, int max_iter, double rel_tol, double reg) {
            EmConfig cfg;
            cfg.k_components = components;
            cfg.seed = seed;
            cfg.max_iter = max_iter;
            cfg.rel_tol = rel_tol;
            cfg.reg = reg;
            cfg.init = labels && components == 0 ? EmInit::labels : EmInit::kmeans_pp;
            std::optional<LabelVector> lv;
            if (labels) lv = to_labels(*labels);
            auto fit = fit_em(FeatureMatrix(features), lv ? &*lv : nullptr, cfg);
            return py::make_tuple(std::move(fit.model), fit.log_likelihood);
        },
        py::arg("features"), py::arg("labels") = py::none(), py::arg("components") = 0, py::arg("seed") = 0,
        py::arg("max_iter") = 200, py::arg("rel_tol") = 1e-6, py::arg("reg") = 1e-5,
        "EM fit. With labels and components=0 the mixture starts at per-class moments. Returns (gmm, trace).");

    m.def("auroc", &auroc, py::arg("scores_in"), py::arg("scores_out"));
    m.def("balanced_auroc", &balanced_auroc, py::arg("scores_in"), py::arg("scores_out"), py::arg("seed") = 0);
    m.def("attribute", [](double a, double b, double c, double d) { return report_dict(attribute(a, b, c, d)); },
          py::arg("auroc_max"), py::arg("auroc_entropy"), py::arg("auroc_cool"), py::arg("auroc_density"));

    m.def(
        "gen_optimal_head",
        [](Index k, Index h, double c1, std::uint64_t seed) {
            OptimalStructureSpec spec;
            spec.k = k;
            spec.h = h;
            spec.c1 = c1;
            return gen_optimal_head(spec, seed);
        },
        py::arg("k"), py::arg("h"), py::arg("c1") = 1.0, py::arg("seed") = 0);
    m.def(
        "gen_counterfactual_head",
        [](const std::string& kind, Index h, std::uint64_t seed, double c) {
            return gen_counterfactual_head(parse_structure(kind), 3, h, seed, c).head;
        },
        py::arg("kind"), py::arg("h"), py::arg("seed") = 0, py::arg("c") = 1.0);
    m.def(
        "audit_head",
        [](const SoftmaxHead& head) {
            const auto r = audit_head(head);
            py::dict d;
            d["weight_norms"] = r.weight_norms;
            d["biases"] = r.biases;
            d["pairwise_cos"] = r.pairwise_cos;
            d["target_cos"] = r.target_cos;
            d["mean_abs_cos_deviation"] = r.mean_abs_cos_deviation;
            d["max_abs_cos_deviation"] = r.max_abs_cos_deviation;
            d["norm_cv"] = r.norm_cv;
            d["max_abs_bias"] = r.max_abs_bias;
            return d;
        },
        py::arg("head"));
    m.def(
        "structured_clusters",
        [](const SoftmaxHead& head, double c3, double noise, Index per_class, std::uint64_t seed) {
            const auto set = structured_clusters(head, c3, noise, per_class, seed);
            return py::make_tuple(set.features.data(), set.labels.values());
        },
        py::arg("head"), py::arg("c3") = 5.0, py::arg("noise") = 1.0, py::arg("per_class") = 100,
        py::arg("seed") = 0);
    m.def(
        "regularized_xent",
        [](const Matrix& x, const std::vector<std::uint32_t>& y, const SoftmaxHead& head, double lambda1) {
            return regularized_xent(FeatureMatrix(x), to_labels(y), head, lambda1);
        },
        py::arg("features"), py::arg("labels"), py::arg("head"), py::arg("lambda1") = 0.01);

    m.def("empirical_threshold", &empirical_threshold, py::arg("scores"), py::arg("epsilon"));

    py::class_<LinearApproxRegion>(m, "LinearRegion", "Union of boundary slabs where u_max exceeds u_star.")
        .def_property_readonly("u_star", [](const LinearApproxRegion& r) { return r.spec().u_star; })
        .def_property_readonly("epsilon", [](const LinearApproxRegion& r) { return r.spec().epsilon; })
        .def("contains", &LinearApproxRegion::contains, py::arg("z"))
        .def(
            "contains_rows",
            [](const LinearApproxRegion& r, const Matrix& x) {
                std::vector<bool> out(static_cast<std::size_t>(x.rows()));
                for (Index i = 0; i < x.rows(); ++i)
                    out[static_cast<std::size_t>(i)] = r.contains(x.row(i).transpose());
                return out;
            },
            py::arg("features"));
    m.def(
        "fit_linear_region",
        [](const SoftmaxHead& head, const Matrix& train, double epsilon) {
            return fit_linear_region(head, FeatureMatrix(train), epsilon);
        },
        py::arg("head"), py::arg("train"), py::arg("epsilon") = 0.05,
        "Region whose threshold is the empirical u_max quantile over training features.");
    m.def(
        "solve_alpha_exact_k2",
        [](std::vector<Vector> means, std::vector<Matrix> covs, Vector priors, const SoftmaxHead& head,
           double epsilon) {
            const GaussianClassModel model{std::move(means), std::move(covs), std::move(priors)};
            const auto sol = solve_alpha_exact_k2(model, head, epsilon);
            py::dict d;
            d["alpha"] = sol.alpha;
            d["anchor"] = sol.slab.anchor;
            d["normal"] = sol.slab.normal;
            d["max_crossing_mass"] = sol.max_crossing_mass;
            d["separable"] = sol.separable;
            return d;
        },
        py::arg("means"), py::arg("covariances"), py::arg("priors"), py::arg("head"), py::arg("epsilon") = 0.05);

    m.def(
        "pca",
        [](const Matrix& x, Index dims) {
            const auto r = pca_project(x, dims);
            py::dict d;
            d["mean"] = r.mean;
            d["components"] = r.components;
            d["explained_variance"] = r.explained_variance;
            d["explained_ratio"] = r.explained_ratio;
            d["projection"] = r.projection;
            return d;
        },
        py::arg("x"), py::arg("dims") = 2);

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            const int code = cli::run(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a command-line verb in-process. Returns (exit_code, stdout, stderr).");
}
