#include "config.hpp"

#include "softconf/errors.hpp"
#include "softconf/estimators.hpp"
#include "softconf/geometry.hpp"
#include "softconf/gmm.hpp"
#include "softconf/io.hpp"
#include "softconf/metrics.hpp"
#include "softconf/refnet.hpp"
#include "softconf/structure.hpp"

#include <fstream>
#include <optional>
#include <ostream>
#include <random>

namespace softconf::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- shared fields

Field format_field() { return {"format", FieldType::string, "csv", "Table output: csv or json"}; }
Field seed_field(std::int64_t v = 0) { return {"seed", FieldType::integer, v, "Random seed"}; }
Field path_field(const std::string& key, const std::string& help) { return {key, FieldType::string, "", help}; }

void add_cool_fields(Schema& s) {
    s.push_back({"cool_factor", FieldType::number, kDefaultCoolTemperature, "Cooling factor for u_cool"});
    s.push_back({"cool_mode", FieldType::string, "logits", "Cool the logits or the features"});
}

void add_training_fields(Schema& s, const TrainConfig& t) {
    s.push_back({"epochs", FieldType::integer, t.epochs, "Training epochs"});
    s.push_back({"batch_size", FieldType::integer, t.batch_size, "Mini-batch size"});
    s.push_back({"learning_rate", FieldType::number, t.learning_rate, "SGD step size"});
    s.push_back({"weight_decay", FieldType::number, t.weight_decay, "Penalty on the head weights and bias"});
}

CoolOptions cool_options(const RunConfig& c) {
    CoolOptions o;
    o.factor = c.number("cool_factor");
    const auto& mode = c.str("cool_mode");
    if (mode == "logits") o.mode = CoolMode::logits;
    else if (mode == "features") o.mode = CoolMode::features;
    else throw ConfigError("cool_mode must be logits or features, got '" + mode + "'");
    return o;
}

TrainConfig train_config(const RunConfig& c) {
    TrainConfig t;
    t.epochs = static_cast<int>(c.count("epochs"));
    t.batch_size = c.count("batch_size");
    t.learning_rate = c.number("learning_rate");
    t.weight_decay = c.number("weight_decay");
    t.validate();
    return t;
}

std::vector<Index> widths(const std::vector<std::int64_t>& v) { return {v.begin(), v.end()}; }

LabeledFeatures load_any(const fs::path& p) { return load_features(p, format_from_path(p)); }

const LabelVector& require_labels(const LabeledFeatures& f, const std::string& what) {
    if (!f.labels) throw ConfigError(what + " needs a label column");
    return *f.labels;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

json matrix_rows(const Matrix& m) {
    json out = json::array();
    for (Index i = 0; i < m.rows(); ++i) out.push_back(to_std(m.row(i).transpose()));
    return out;
}

json stats_json(const SeedStats& s) { return {{"values", s.values}, {"mean", s.mean}, {"se", s.se}}; }

/// Per-class Gaussian moments of labelled features.
GaussianClassModel class_gaussians(const FeatureMatrix& x, const LabelVector& y) {
    const auto gmm = moment_match(x, y, 0.0);
    GaussianClassModel m;
    m.priors = gmm.weights();
    for (Index i = 0; i < gmm.k(); ++i) {
        m.means.push_back(gmm.means().row(i).transpose());
        m.covariances.push_back(gmm.covariances()[static_cast<std::size_t>(i)]);
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------- score

Schema score_schema() {
    Schema s{path_field("features", "Feature file to score"), path_field("head", "Head CSV"),
             path_field("gmm", "Optional mixture JSON for u_density"), format_field()};
    add_cool_fields(s);
    return s;
}

void run_score(const Context& c) {
    const auto head = load_head(c.cfg.path("head"));
    const auto data = load_any(c.cfg.path("features"));
    std::optional<GaussianMixture> gmm;
    if (c.cfg.has_path("gmm")) gmm = load_gmm(c.cfg.path("gmm"));
    const auto rows = score_batch(head, gmm ? &*gmm : nullptr, data.features, cool_options(c.cfg));

    Table t;
    t.columns = {"index", "u_max", "u_entropy", "u_cool"};
    if (gmm) t.columns.push_back("u_density");
    for (const char* col : {"z_norm", "max_cos", "argmax_class"}) t.columns.emplace_back(col);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        std::vector<json> row{i, r.u_max, r.u_entropy, r.u_cool};
        if (gmm) row.emplace_back(r.u_density);
        row.insert(row.end(), {r.z_norm, r.max_cos, r.argmax_class});
        t.rows.push_back(std::move(row));
    }
    c.out << "scored " << rows.size() << " rows -> " << c.emit("scores", t).string() << "\n";
}

// ---------------------------------------------------------------- fit-gmm

EmInit parse_init(const std::string& s) {
    if (s == "labels") return EmInit::labels;
    if (s == "kmeans_pp") return EmInit::kmeans_pp;
    throw ConfigError("init must be labels or kmeans_pp, got '" + s + "'");
}

FeatureTransform parse_transform(const std::string& s) {
    if (s == "none") return FeatureTransform::none;
    if (s == "log") return FeatureTransform::log;
    throw ConfigError("transform must be none or log, got '" + s + "'");
}

void add_em_fields(Schema& s) {
    const EmConfig d;
    s.push_back({"components", FieldType::integer, d.k_components, "Mixture components; 0 means one per class"});
    s.push_back({"max_iter", FieldType::integer, d.max_iter, "EM iteration cap"});
    s.push_back({"rel_tol", FieldType::number, d.rel_tol, "Relative log-likelihood tolerance"});
    s.push_back({"reg", FieldType::number, d.reg, "Diagonal covariance regularization"});
    s.push_back({"init", FieldType::string, "labels", "labels or kmeans_pp"});
    s.push_back({"transform", FieldType::string, "none", "Feature transform: none or log"});
}

EmConfig em_config(const RunConfig& c, std::uint64_t seed) {
    EmConfig em;
    const auto k = c.integer("components");
    if (k < 0) throw ConfigError("components must be non-negative");
    em.k_components = static_cast<std::size_t>(k);
    em.max_iter = static_cast<int>(c.count("max_iter"));
    em.rel_tol = c.number("rel_tol");
    em.reg = c.number("reg");
    em.seed = seed;
    em.init = parse_init(c.str("init"));
    em.transform = parse_transform(c.str("transform"));
    em.validate();
    return em;
}

Schema fit_gmm_schema() {
    Schema s{path_field("features", "Training feature file"), seed_field()};
    add_em_fields(s);
    return s;
}

void run_fit_gmm(const Context& c) {
    const auto data = load_any(c.cfg.path("features"));
    const auto em = em_config(c.cfg, static_cast<std::uint64_t>(c.cfg.integer("seed")));
    const auto fit = fit_em(data.features, data.labels ? &*data.labels : nullptr, em);
    save_gmm(c.artifact("gmm.json"), fit.model);
    c.write_json("fit-gmm.json", {{"iterations", fit.iterations},
                                  {"converged", fit.converged},
                                  {"stopped_on_decrease", fit.stopped_on_decrease},
                                  {"log_likelihood", fit.log_likelihood},
                                  {"reinit_points", fit.reinit_points}});
    c.out << "fitted " << fit.model.k() << " components in " << fit.iterations << " iterations, log-likelihood "
          << format_double(fit.log_likelihood.back()) << "\n";
}

// ---------------------------------------------------------------- region

Schema region_schema() {
    return {{"mode", FieldType::string, "fit", "fit, sample or export"},
            {"kind", FieldType::string, "linear", "linear, exact_k2 or density"},
            path_field("head", "Head CSV (linear and exact_k2)"),
            path_field("train", "Training features defining the threshold"),
            path_field("gmm", "Mixture JSON for the density region; moment-matched from labels when empty"),
            path_field("features", "Features to classify in export mode"),
            {"epsilon", FieldType::number, 0.05, "Fraction of training data allowed in the region"},
            {"far_scale", FieldType::number, LinearFitOptions{}.far_scale, "Far-field distance in weight norms"},
            {"mc_samples", FieldType::integer, 100000, "Monte-Carlo draws for the mass check"},
            {"n_samples", FieldType::integer, 1000, "Points to draw in sample mode"},
            {"spread", FieldType::number, 1.0, "Gaussian spread along the boundary in sample mode"},
            seed_field(),
            format_field()};
}

struct BuiltRegion {
    std::function<bool(const Vector&)> contains;
    json description;
    std::vector<SlabRegion> slabs;
};

BuiltRegion build_region(const Context& c, const LabeledFeatures& train) {
    const auto& kind = c.cfg.str("kind");
    const double eps = c.cfg.number("epsilon");
    if (kind == "linear") {
        LinearFitOptions opts;
        opts.far_scale = c.cfg.number("far_scale");
        const auto head = load_head(c.cfg.path("head"));
        auto region = std::make_shared<LinearApproxRegion>(fit_linear_region(head, train.features, eps, opts));
        return {[region](const Vector& z) { return region->contains(z); }, to_json(*region), region->slabs()};
    }
    if (kind == "exact_k2") {
        const auto sol = solve_alpha_exact_k2(class_gaussians(train.features, require_labels(train, "exact_k2")),
                                              load_head(c.cfg.path("head")), eps);
        return {[slab = sol.slab](const Vector& z) { return slab.contains(z); }, to_json(sol, eps), {sol.slab}};
    }
    if (kind == "density") {
        auto gmm = c.cfg.has_path("gmm") ? load_gmm(c.cfg.path("gmm"))
                                         : moment_match(train.features, require_labels(train, "density"), 1e-6);
        auto region = std::make_shared<DensityRegion>(density_region(gmm, eps));
        return {[region](const Vector& z) { return region->contains(z); }, to_json(*region), {}};
    }
    throw ConfigError("kind must be linear, exact_k2 or density, got '" + kind + "'");
}

void run_region(const Context& c) {
    const auto& mode = c.cfg.str("mode");
    if (mode != "fit" && mode != "sample" && mode != "export")
        throw ConfigError("mode must be fit, sample or export, got '" + mode + "'");
    const auto train = load_any(c.cfg.path("train"));
    const auto region = build_region(c, train);
    const auto seed = static_cast<std::uint64_t>(c.cfg.integer("seed"));

    if (mode == "fit") {
        json j{{"kind", c.cfg.str("kind")}, {"epsilon", c.cfg.number("epsilon")}, {"region", region.description}};
        j["mass_check"] = nullptr;
        if (train.labels) {
            const auto mix = moment_match(train.features, *train.labels, 1e-6);
            const auto n = static_cast<std::size_t>(c.cfg.count("mc_samples"));
            const double mass = mc_region_mass(region.contains, mixture_sampler(mix), n, seed);
            j["mass_check"] = {{"mc_samples", n}, {"mass", mass}};
            c.out << "region mass under the class Gaussians " << format_double(mass) << "\n";
        }
        c.write_json("region.json", j);
        return;
    }
    if (mode == "sample") {
        if (region.slabs.empty()) throw ConfigError("sampling supports the linear and exact_k2 regions");
        const auto n = static_cast<std::size_t>(c.cfg.count("n_samples"));
        const double spread = c.cfg.number("spread");
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, region.slabs.size() - 1);
        Matrix pts(static_cast<Index>(n), train.features.h());
        std::size_t kept = 0, tries = 0;
        while (kept < n) {
            if (++tries > 1000 * n) throw NumericalError("region sampler rejected too many points");
            const Vector z = sample_slab_point(region.slabs[pick(rng)], rng, spread);
            if (region.contains(z)) pts.row(static_cast<Index>(kept++)) = z.transpose();
        }
        const auto p = c.artifact("region_samples.csv");
        write_features(p, FeatureFormat::csv, FeatureMatrix(pts));
        c.out << "sampled " << n << " points in " << tries << " draws -> " << p.string() << "\n";
        return;
    }
    const auto data = load_any(c.cfg.path("features"));
    Table t{{"index", "inside"}, {}};
    std::size_t inside = 0;
    for (Index i = 0; i < data.features.n(); ++i) {
        const bool in = region.contains(data.features.row(i));
        inside += in ? 1 : 0;
        t.rows.push_back({i, in ? 1 : 0});
    }
    c.out << inside << " of " << data.features.n() << " points inside -> " << c.emit("region_membership", t).string()
          << "\n";
}

// ---------------------------------------------------------------- heads

Schema audit_schema() {
    return {path_field("head", "Head CSV to audit"), path_field("features", "Optional features for angle statistics")};
}

void run_audit(const Context& c) {
    const auto head = load_head(c.cfg.path("head"));
    const auto report = audit_head(head);
    json j{{"structure", to_json(report)}};
    if (c.cfg.has_path("features")) j["angles"] = to_json(angle_stats(load_any(c.cfg.path("features")).features, head));
    c.write_json("audit-head.json", j);
    c.out << "max_abs_cos_deviation " << format_double(report.max_abs_cos_deviation) << "\n"
          << "norm_cv " << format_double(report.norm_cv) << "\n"
          << "max_abs_bias " << format_double(report.max_abs_bias) << "\n";
}

Schema gen_head_schema() {
    return {{"kind", FieldType::string, "optimal", "optimal, sandwich, stack or lopsided"},
            {"k", FieldType::integer, 3, "Classes"},
            {"h", FieldType::integer, 16, "Feature width"},
            {"scale", FieldType::number, 1.0, "Weight norm scale"},
            seed_field()};
}

void run_gen_head(const Context& c) {
    const auto kind = parse_structure(c.cfg.str("kind"));
    const Index k = c.cfg.count("k"), h = c.cfg.count("h");
    const double scale = c.cfg.number("scale");
    const auto seed = static_cast<std::uint64_t>(c.cfg.integer("seed"));
    json meta{{"kind", to_string(kind)}, {"k", k}, {"h", h}, {"scale", scale}, {"seed", seed}};
    std::optional<SoftmaxHead> head;
    if (kind == StructureKind::optimal) {
        OptimalStructureSpec spec;
        spec.k = k;
        spec.h = h;
        spec.c1 = scale;
        head = gen_optimal_head(spec, seed);
    } else {
        auto g = gen_counterfactual_head(kind, k, h, seed, scale);
        meta["constants"] = g.constants;
        head = std::move(g.head);
    }
    write_head(c.artifact("head.csv"), *head);
    c.write_json("head.json", meta);
    c.out << "wrote " << to_string(kind) << " head (" << h << " x " << k << ") -> " << c.artifact("head.csv").string()
          << "\n";
}

// ---------------------------------------------------------------- attribute

Schema attribute_schema() {
    Schema s{path_field("head", "Head CSV"),
             path_field("train", "Labelled training features for the density model"),
             path_field("test", "In-distribution evaluation features"),
             path_field("ood", "Out-of-distribution features"),
             {"seeds", FieldType::seeds, json::array({0}), "Seed count or list; varies mixture init and balancing"},
             format_field()};
    add_cool_fields(s);
    add_em_fields(s);
    return s;
}

void run_attribute(const Context& c) {
    const auto head = load_head(c.cfg.path("head"));
    const auto train = load_any(c.cfg.path("train"));
    const auto test = load_any(c.cfg.path("test")).features;
    const auto ood = load_any(c.cfg.path("ood")).features;
    const auto cool = cool_options(c.cfg);
    const auto seeds = c.cfg.seeds("seeds");

    const auto scores = [&](EstimatorId id, const GaussianMixture* gmm, const FeatureMatrix& x) {
        return to_std(score_all(id, head, gmm, x, cool));
    };
    std::vector<AttributionReport> reports;
    for (auto seed : seeds) {
        const auto em = em_config(c.cfg, seed);
        const auto gmm = fit_em(train.features, train.labels ? &*train.labels : nullptr, em).model;
        double a[4];
        const EstimatorId ids[4] = {EstimatorId::max, EstimatorId::entropy, EstimatorId::cool, EstimatorId::density};
        for (int e = 0; e < 4; ++e)
            a[e] = balanced_auroc(scores(ids[e], &gmm, test), scores(ids[e], &gmm, ood), seed);
        reports.push_back(attribute(a[0], a[1], a[2], a[3]));
    }

    const auto fields = [](const AttributionReport& r) {
        return std::vector<double>{r.auroc_max, r.auroc_entropy, r.auroc_cool, r.auroc_density,
                                   r.cause1,    r.cause2,        r.cause3};
    };
    Table t;
    t.columns = {"name", "auroc_max", "auroc_entropy", "auroc_cool", "auroc_density", "cause1", "cause2", "cause3"};
    std::vector<std::vector<double>> per_field(7);
    for (std::size_t i = 0; i < reports.size(); ++i) {
        std::vector<json> row{"seed" + std::to_string(seeds[i])};
        const auto f = fields(reports[i]);
        for (std::size_t j = 0; j < f.size(); ++j) {
            row.emplace_back(f[j]);
            per_field[j].push_back(f[j]);
        }
        t.rows.push_back(std::move(row));
    }
    std::vector<json> mean_row{"mean"}, se_row{"se"};
    for (std::size_t j = 0; j < per_field.size(); ++j) {
        const auto ms = mean_se(per_field[j]);
        mean_row.emplace_back(ms.mean);
        se_row.emplace_back(ms.se);
        c.out << t.columns[j + 1] << " " << format_double(ms.mean) << " +- " << format_double(ms.se) << "\n";
    }
    t.rows.push_back(std::move(mean_row));
    t.rows.push_back(std::move(se_row));
    c.emit("attribution", t);
}

// ---------------------------------------------------------------- networks

void add_network_fields(Schema& s, const std::vector<Index>& hidden, Index feature_dim, Activation act) {
    s.push_back({"hidden", FieldType::int_list, json(hidden), "Hidden widths before the feature layer"});
    s.push_back({"feature_dim", FieldType::integer, feature_dim, "Width of the final feature layer"});
    s.push_back({"activation", FieldType::string, to_string(act), "relu or tanh"});
}

MlpSpec network_spec(const RunConfig& c, Index input_dim, Index k) {
    MlpSpec spec;
    spec.layer_widths = {input_dim};
    for (auto w : c.int_list("hidden")) spec.layer_widths.push_back(w);
    spec.layer_widths.push_back(c.count("feature_dim"));
    spec.activation = parse_activation(c.str("activation"));
    spec.k = k;
    spec.validate();
    return spec;
}

Schema train_toy_schema() {
    const CounterfactualConfig d;
    Schema s{{"in_task", FieldType::object, to_json(d.in_task), "Labelled training task"},
             {"ood_task", FieldType::object, to_json(d.ood_task), "Unlabelled OOD task"}};
    add_network_fields(s, d.hidden, d.feature_dim, d.activation);
    add_training_fields(s, d.train);
    s.push_back(seed_field());
    s.push_back(format_field());
    return s;
}

void run_train_toy(const Context& c) {
    const auto in_task = task_from_json(c.cfg.object("in_task"));
    const auto ood_task = task_from_json(c.cfg.object("ood_task"));
    const auto plan = seed_plan(static_cast<std::uint64_t>(c.cfg.integer("seed")));
    const auto data = make_split(in_task, ood_task, plan);
    auto tc = train_config(c.cfg);
    tc.seed = plan.init;
    const auto& labels = *data.train.labels;
    const auto res = train(data.train.inputs, labels, network_spec(c.cfg, in_task.input_dim(), in_task.k), tc);
    const auto& model = res.model;

    save_mlp(c.artifact("model.json"), model);
    write_head(c.artifact("head.csv"), model.head());
    const auto export_features = [&](const char* name, const Matrix& x, const LabelVector* y) {
        write_features(c.artifact(name), FeatureFormat::csv, FeatureMatrix(model.features(x)), y);
    };
    export_features("features_train.csv", data.train.inputs, &labels);
    export_features("features_test.csv", data.test.inputs, &*data.test.labels);
    export_features("features_ood.csv", data.ood, nullptr);

    Table log{{"epoch", "loss"}, {{0, res.initial_loss}}};
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) log.rows.push_back({e + 1, res.epoch_loss[e]});
    c.emit("train_log", log);

    json au = json::object();
    for (auto id : {EstimatorId::max, EstimatorId::entropy, EstimatorId::cool})
        au[to_string(id)] = ood_auroc(model, data.test.inputs, data.ood, id, plan.ood);
    const double train_acc = model.accuracy(data.train.inputs, labels);
    const double test_acc = model.accuracy(data.test.inputs, *data.test.labels);
    c.write_json("train-toy.json", {{"train_accuracy", train_acc},
                                    {"test_accuracy", test_acc},
                                    {"initial_loss", res.initial_loss},
                                    {"final_loss", res.epoch_loss.back()},
                                    {"auroc", au}});
    c.out << "train accuracy " << format_double(train_acc) << ", test accuracy " << format_double(test_acc)
          << ", entropy AUROC " << format_double(au["entropy"].get<double>()) << "\n";
}

Schema counterfactual_schema() {
    const CounterfactualConfig d;
    Schema s{{"in_task", FieldType::object, to_json(d.in_task), "Labelled three-class task"},
             {"ood_task", FieldType::object, to_json(d.ood_task), "Unlabelled OOD task"},
             {"structures", FieldType::string_list, d.structures, "optimal, trainable, sandwich, stack, lopsided"},
             {"head_scale", FieldType::number, d.head_scale, "Norm scale of the frozen heads"},
             {"seeds", FieldType::seeds, d.seeds, "Seed count or list"},
             {"estimator", FieldType::string, to_string(d.estimator), "Softmax estimator for AUROC"}};
    add_network_fields(s, d.hidden, d.feature_dim, d.activation);
    add_training_fields(s, d.train);
    s.push_back(format_field());
    return s;
}

Table stats_table(const std::string& key_column) {
    return {{key_column, "accuracy_mean", "accuracy_se", "auroc_mean", "auroc_se"}, {}};
}

void run_counterfactual(const Context& c) {
    CounterfactualConfig cfg;
    cfg.in_task = task_from_json(c.cfg.object("in_task"));
    cfg.ood_task = task_from_json(c.cfg.object("ood_task"));
    cfg.structures = c.cfg.string_list("structures");
    cfg.head_scale = c.cfg.number("head_scale");
    cfg.seeds = c.cfg.seeds("seeds");
    cfg.estimator = parse_estimator(c.cfg.str("estimator"));
    const auto spec = network_spec(c.cfg, cfg.in_task.input_dim(), 3);
    cfg.hidden.assign(spec.layer_widths.begin() + 1, spec.layer_widths.end() - 1);
    cfg.feature_dim = spec.feature_dim();
    cfg.activation = spec.activation;
    cfg.train = train_config(c.cfg);

    const auto rows = counterfactual_experiment(cfg);
    Table t = stats_table("structure");
    t.columns.insert(t.columns.end(), {"final_loss_mean", "final_loss_se"});
    json per_seed = json::object();
    for (const auto& r : rows) {
        t.rows.push_back({r.structure, r.accuracy.mean, r.accuracy.se, r.auroc.mean, r.auroc.se, r.final_loss.mean,
                          r.final_loss.se});
        per_seed[r.structure] = {{"accuracy", stats_json(r.accuracy)},
                                 {"auroc", stats_json(r.auroc)},
                                 {"final_loss", stats_json(r.final_loss)}};
        c.out << r.structure << ": accuracy " << format_double(r.accuracy.mean) << " +- "
              << format_double(r.accuracy.se) << ", AUROC " << format_double(r.auroc.mean) << " +- "
              << format_double(r.auroc.se) << "\n";
    }
    c.emit("counterfactual", t);
    c.write_json("counterfactual_seeds.json", per_seed);
}

Schema depth_schema() {
    const DepthStudyConfig d;
    Schema s{{"in_task", FieldType::object, to_json(d.in_task), "Labelled training task"},
             {"ood_task", FieldType::object, to_json(d.ood_task), "Unlabelled OOD task"},
             {"depths", FieldType::int_list, json(d.depths), "Hidden layer counts to compare"},
             {"width", FieldType::integer, d.width, "Width of the hidden layers before the features"},
             {"feature_dim", FieldType::integer, d.feature_dim, "Width of the final feature layer"},
             {"activation", FieldType::string, to_string(d.activation), "relu or tanh"},
             {"seeds", FieldType::seeds, d.seeds, "Seed count or list"},
             {"estimator", FieldType::string, to_string(d.estimator), "Softmax estimator for AUROC"}};
    add_training_fields(s, d.train);
    s.push_back(format_field());
    return s;
}

void run_depth(const Context& c) {
    DepthStudyConfig cfg;
    cfg.in_task = task_from_json(c.cfg.object("in_task"));
    cfg.ood_task = task_from_json(c.cfg.object("ood_task"));
    cfg.depths = widths(c.cfg.int_list("depths"));
    cfg.width = c.cfg.count("width");
    cfg.feature_dim = c.cfg.count("feature_dim");
    cfg.activation = parse_activation(c.cfg.str("activation"));
    cfg.seeds = c.cfg.seeds("seeds");
    cfg.estimator = parse_estimator(c.cfg.str("estimator"));
    cfg.train = train_config(c.cfg);

    const auto rows = depth_study(cfg);
    Table t = stats_table("depth");
    json per_seed = json::array();
    for (const auto& r : rows) {
        t.rows.push_back({r.depth, r.accuracy.mean, r.accuracy.se, r.auroc.mean, r.auroc.se});
        per_seed.push_back({{"depth", r.depth}, {"accuracy", stats_json(r.accuracy)}, {"auroc", stats_json(r.auroc)}});
        c.out << "depth " << r.depth << ": accuracy " << format_double(r.accuracy.mean) << ", AUROC "
              << format_double(r.auroc.mean) << " +- " << format_double(r.auroc.se) << "\n";
    }
    c.emit("depth-study", t);
    c.write_json("depth-study_seeds.json", per_seed);
}

Schema sweep_schema() {
    SyntheticTask cube;
    cube.kind = TaskKind::uniform_hypercube_ood;
    cube.lo = -4.0;
    cube.hi = 4.0;
    return {path_field("model", "Network JSON from train-toy"),
            {"sampler", FieldType::object, to_json(cube), "Unlabelled task to draw inputs from"},
            {"n_samples", FieldType::integer, 100000, "Inputs to stream"},
            {"top_m", FieldType::integer, 10, "Inputs kept per class"},
            seed_field(),
            format_field()};
}

void run_sweep(const Context& c) {
    const auto model = load_mlp(c.cfg.path("model"));
    auto sampler = task_from_json(c.cfg.object("sampler"));
    sampler.seed = static_cast<std::uint64_t>(c.cfg.integer("seed"));
    const auto res = confidence_sweep(model, sampler, static_cast<std::size_t>(c.cfg.count("n_samples")),
                                      c.cfg.count("top_m"));
    Table t{{"class", "rank", "confidence"}, {}};
    for (Index j = 0; j < model.spec().input_dim(); ++j) t.columns.push_back("x" + std::to_string(j));
    json kept_mean = json::array();
    for (std::size_t k = 0; k < res.per_class.size(); ++k) {
        double sum = 0.0;
        for (std::size_t r = 0; r < res.per_class[k].size(); ++r) {
            const auto& e = res.per_class[k][r];
            std::vector<json> row{k, r, e.confidence};
            for (Index j = 0; j < e.input.size(); ++j) row.emplace_back(e.input[j]);
            t.rows.push_back(std::move(row));
            sum += e.confidence;
        }
        kept_mean.push_back(res.per_class[k].empty() ? json(nullptr)
                                                     : json(sum / static_cast<double>(res.per_class[k].size())));
    }
    c.emit("sweep", t);
    c.write_json("sweep_summary.json", {{"n_samples", res.n_samples},
                                        {"mean_confidence_all", res.mean_confidence_all},
                                        {"mean_confidence_kept", kept_mean}});
    c.out << "mean confidence over all samples " << format_double(res.mean_confidence_all) << "\n";
}

// ---------------------------------------------------------------- pca and plot

void add_scoring_fields(Schema& s) {
    s.push_back(path_field("head", "Head CSV used for the uncertainty column"));
    s.push_back(path_field("gmm", "Mixture JSON, needed for the density estimator"));
    s.push_back({"estimator", FieldType::string, "entropy", "max, entropy, cool, density or mental"});
    add_cool_fields(s);
}

Schema pca_schema() {
    Schema s{path_field("train", "Training features; the projection is fitted on these"),
             path_field("ood", "Optional OOD features projected with the same basis"),
             {"dims", FieldType::integer, 2, "Principal components to keep"}};
    add_scoring_fields(s);
    s.push_back(format_field());
    return s;
}

struct Scorer {
    SoftmaxHead head;
    std::optional<GaussianMixture> gmm;
    EstimatorId id;
    CoolOptions cool;

    Vector operator()(const FeatureMatrix& x) const { return score_all(id, head, gmm ? &*gmm : nullptr, x, cool); }
};

Scorer make_scorer(const RunConfig& c) {
    Scorer s{load_head(c.path("head")), std::nullopt, parse_estimator(c.str("estimator")), cool_options(c)};
    if (c.has_path("gmm")) s.gmm = load_gmm(c.path("gmm"));
    return s;
}

void run_pca(const Context& c) {
    const auto scorer = make_scorer(c.cfg);
    const auto train = load_any(c.cfg.path("train")).features;
    const auto pca = pca_project(train.data(), c.cfg.count("dims"));
    if (pca.components.cols() < 2) throw ConfigError("dims must be at least 2 for the scatter output");

    Table t{{"x", "y", "source", "uncertainty"}, {}};
    const auto add = [&](const Matrix& proj, const FeatureMatrix& x, const char* source) {
        const Vector u = scorer(x);
        for (Index i = 0; i < proj.rows(); ++i) t.rows.push_back({proj(i, 0), proj(i, 1), source, u[i]});
    };
    add(pca.projection, train, "train");
    if (c.cfg.has_path("ood")) {
        const auto ood = load_any(c.cfg.path("ood")).features;
        add(pca.project(ood.data()), ood, "ood");
    }
    c.emit("pca", t);
    c.write_json("pca_model.json", {{"mean", to_std(pca.mean)},
                                    {"components", matrix_rows(pca.components.transpose())},
                                    {"explained_variance", to_std(pca.explained_variance)},
                                    {"explained_ratio", to_std(pca.explained_ratio)}});
    c.out << "explained variance ratio";
    for (Index j = 0; j < pca.explained_ratio.size(); ++j) c.out << " " << format_double(pca.explained_ratio[j]);
    c.out << "\n";
}

Schema plot_schema() {
    Schema s{path_field("points", "Scatter table from pca (csv or json)"),
             path_field("pca_model", "pca_model.json; with a head it shades the background"),
             {"grid", FieldType::integer, 40, "Background cells per side"},
             {"title", FieldType::string, "feature projection", "Plot title"},
             {"width", FieldType::integer, 640, "Image width in pixels"},
             {"height", FieldType::integer, 640, "Image height in pixels"}};
    add_scoring_fields(s);
    return s;
}

std::vector<ScatterPoint> read_points(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    std::vector<ScatterPoint> pts;
    if (p.extension() == ".json") {
        const auto j = json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.is_array()) throw IoError(p.string() + " is not a JSON array");
        try {
            for (const auto& r : j)
                pts.push_back({r.at("x").get<double>(), r.at("y").get<double>(), r.at("source").get<std::string>(),
                               r.at("uncertainty").get<double>()});
        } catch (const json::exception& e) {
            throw IoError(p.string() + ": " + e.what());
        }
        return pts;
    }
    std::string line;
    if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"x", "y", "source", "uncertainty"})
        throw IoError(p.string() + " needs the header x,y,source,uncertainty");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 4) throw IoError(p.string() + ": expected 4 cells in '" + line + "'");
        pts.push_back({parse_double_cell(cells[0], "x"), parse_double_cell(cells[1], "y"), cells[2],
                       parse_double_cell(cells[3], "uncertainty")});
    }
    return pts;
}

ShadeGrid shade(const RunConfig& c, const std::vector<ScatterPoint>& pts) {
    const auto scorer = make_scorer(c);
    const auto model = read_config_file(c.path("pca_model"));
    const Vector mean = Eigen::Map<const Vector>(model.at("mean").get<std::vector<double>>().data(),
                                                 static_cast<Index>(model.at("mean").size()));
    const auto comps = model.at("components").get<std::vector<std::vector<double>>>();
    if (comps.size() < 2 || comps[0].size() != static_cast<std::size_t>(mean.size()))
        throw IoError("pca_model components do not match its mean");
    const Vector c0 = Eigen::Map<const Vector>(comps[0].data(), mean.size());
    const Vector c1 = Eigen::Map<const Vector>(comps[1].data(), mean.size());

    ShadeGrid g;
    g.x_min = g.x_max = pts.front().x;
    g.y_min = g.y_max = pts.front().y;
    for (const auto& p : pts) {
        g.x_min = std::min(g.x_min, p.x);
        g.x_max = std::max(g.x_max, p.x);
        g.y_min = std::min(g.y_min, p.y);
        g.y_max = std::max(g.y_max, p.y);
    }
    const double px = 0.05 * (g.x_max - g.x_min) + 1e-9, py = 0.05 * (g.y_max - g.y_min) + 1e-9;
    g.x_min -= px;
    g.x_max += px;
    g.y_min -= py;
    g.y_max += py;
    g.nx = g.ny = c.count("grid");
    Matrix z(g.nx * g.ny, mean.size());
    for (Index r = 0; r < g.ny; ++r)
        for (Index q = 0; q < g.nx; ++q) {
            const double x = g.x_min + (static_cast<double>(q) + 0.5) * (g.x_max - g.x_min) / static_cast<double>(g.nx);
            const double y = g.y_min + (static_cast<double>(r) + 0.5) * (g.y_max - g.y_min) / static_cast<double>(g.ny);
            z.row(r * g.nx + q) = (mean + x * c0 + y * c1).transpose();
        }
    g.values = to_std(scorer(FeatureMatrix(z)));
    return g;
}

void run_plot(const Context& c) {
    const auto pts = read_points(c.cfg.path("points"));
    if (pts.empty()) throw ConfigError("no points to plot");
    std::optional<ShadeGrid> grid;
    if (c.cfg.has_path("pca_model") != c.cfg.has_path("head"))
        throw ConfigError("shading needs both pca_model and head");
    if (c.cfg.has_path("pca_model")) grid = shade(c.cfg, pts);
    const auto svg = scatter_svg(pts, grid, c.cfg.str("title"), static_cast<int>(c.cfg.count("width")),
                                 static_cast<int>(c.cfg.count("height")));
    write_text(c.artifact("plot.svg"), svg);
    c.out << "plotted " << pts.size() << " points -> " << c.artifact("plot.svg").string() << "\n";
}

}  // namespace

const std::vector<Verb>& verb_table() {
    static const std::vector<Verb> table{
        {"score", "Score features with every estimator", score_schema(), run_score},
        {"fit-gmm", "Fit a Gaussian mixture to features", fit_gmm_schema(), run_fit_gmm},
        {"region", "Fit, sample or export a valid OOD region", region_schema(), run_region},
        {"audit-head", "Summarize a head's weight structure", audit_schema(), run_audit},
        {"gen-head", "Write a structured head", gen_head_schema(), run_gen_head},
        {"attribute", "AUROC attribution over seeds", attribute_schema(), run_attribute},
        {"train-toy", "Train a network on a synthetic task and export its features", train_toy_schema(),
         run_train_toy},
        {"counterfactual", "Compare frozen head structures", counterfactual_schema(), run_counterfactual},
        {"sweep", "Most confident inputs per class from a sampler", sweep_schema(), run_sweep},
        {"depth-study", "OOD AUROC against network depth", depth_schema(), run_depth},
        {"pca", "Project features onto principal components", pca_schema(), run_pca},
        {"plot", "SVG scatter of projected features", plot_schema(), run_plot},
    };
    return table;
}

}  // namespace softconf::cli
