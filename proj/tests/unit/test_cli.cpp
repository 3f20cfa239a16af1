#include "softconf/cli.hpp"
#include "softconf/io.hpp"
#include "softconf/structure.hpp"

#include "support.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

using namespace softconf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

/// Relative path -> contents for every file under dir.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
    return files;
}

/// CSV rows as cells, header first.
std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(split_csv_line(line));
    return rows;
}

/// Runs in `dir` and restores the working directory afterwards.
class InDir {
public:
    explicit InDir(const fs::path& dir) : prev_(fs::current_path()) { fs::current_path(dir); }
    ~InDir() { fs::current_path(prev_); }

private:
    fs::path prev_;
};

/// Labelled clusters around an optimal head, plus OOD points near the origin.
void write_planted(const fs::path& dir, Index k, std::uint64_t seed) {
    fs::create_directories(dir);
    OptimalStructureSpec spec;
    spec.k = k;
    spec.h = 8;
    const auto head = gen_optimal_head(spec, seed);
    write_head(dir / "head.csv", head);
    const auto train = structured_clusters(head, 4.0, 1.0, 150, seed + 1);
    const auto test = structured_clusters(head, 4.0, 1.0, 60, seed + 2);
    write_features(dir / "train.csv", FeatureFormat::csv, train.features, &train.labels);
    write_features(dir / "test.csv", FeatureFormat::csv, test.features, &test.labels);
    std::mt19937_64 rng(seed + 3);
    write_features(dir / "ood.csv", FeatureFormat::csv, FeatureMatrix(testing::gaussian_matrix(rng, 200, 8, 1.5)));
}

void expect_ok(const std::vector<std::string>& args) {
    const auto r = invoke(args);
    CAPTURE(args.front());
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
}

/// Every verb, writing under the current directory with relative paths only.
void run_all_verbs() {
    write_planted("planted", 3, 7);
    write_planted("planted2", 2, 8);
    expect_ok({"gen-head", "--kind", "sandwich", "--h", "6", "--out-dir", "gh"});
    expect_ok({"train-toy", "--epochs", "4", "--out-dir", "toy"});
    expect_ok({"fit-gmm", "--features", "toy/features_train.csv", "--out-dir", "gmm"});
    expect_ok({"score", "--features", "toy/features_test.csv", "--head", "toy/head.csv", "--gmm", "gmm/gmm.json",
               "--out-dir", "score"});
    expect_ok({"audit-head", "--head", "toy/head.csv", "--features", "toy/features_train.csv", "--out-dir", "audit"});
    const std::vector<std::string> region{"region", "--head", "planted/head.csv", "--train", "planted/train.csv"};
    const auto with = [&](std::vector<std::string> extra) {
        auto a = region;
        a.insert(a.end(), extra.begin(), extra.end());
        return a;
    };
    expect_ok(with({"--mc-samples", "20000", "--out-dir", "region_fit"}));
    expect_ok(with({"--mode", "sample", "--n-samples", "100", "--out-dir", "region_sample"}));
    expect_ok(with({"--mode", "export", "--features", "planted/ood.csv", "--format", "json", "--out-dir",
                    "region_export"}));
    expect_ok(with({"--kind", "density", "--mc-samples", "20000", "--out-dir", "region_density"}));
    expect_ok({"region", "--kind", "exact_k2", "--head", "planted2/head.csv", "--train", "planted2/train.csv",
               "--mc-samples", "20000", "--out-dir", "region_k2"});
    expect_ok({"attribute", "--head", "planted/head.csv", "--train", "planted/train.csv", "--test", "planted/test.csv",
               "--ood", "planted/ood.csv", "--seeds", "2", "--components", "3", "--init", "kmeans_pp", "--out-dir",
               "attribute"});
    expect_ok(
        {"counterfactual", "--structures", "optimal,lopsided", "--seeds", "1", "--epochs", "2", "--out-dir", "cf"});
    expect_ok({"sweep", "--model", "toy/model.json", "--n-samples", "3000", "--top-m", "4", "--out-dir", "sweep"});
    expect_ok({"depth-study", "--seeds", "1", "--epochs", "2", "--depths", "1,2", "--out-dir", "depth"});
    expect_ok({"pca", "--head", "toy/head.csv", "--train", "toy/features_train.csv", "--ood", "toy/features_ood.csv",
               "--out-dir", "pca"});
    expect_ok({"plot", "--points", "pca/pca.csv", "--pca-model", "pca/pca_model.json", "--head", "toy/head.csv",
               "--grid", "8", "--out-dir", "plot"});
}

}  // namespace

TEST_CASE("every verb is registered with help") {
    const auto names = cli::verb_names();
    CHECK(names.size() == 12);
    for (const auto& n : names) {
        const auto r = invoke({n, "--help"});
        CHECK(r.code == 0);
        CHECK(r.out.find("--out-dir") != std::string::npos);
    }
    CHECK(invoke({}).code == 2);
    CHECK(invoke({"no-such-verb"}).code == 2);
}

TEST_CASE("generated optimal head audits clean") {
    const auto dir = testing::scratch_dir("cli_head");
    const auto g = dir / "g", a = dir / "a";
    REQUIRE(invoke({"gen-head", "--kind", "optimal", "--k", "3", "--h", "16", "--out-dir", g.string()}).code == 0);
    const auto r = invoke({"audit-head", "--head", (g / "head.csv").string(), "--out-dir", a.string()});
    REQUIRE(r.code == 0);
    const auto audit = read_json(dir / "a" / "audit-head.json");
    CHECK(audit["structure"]["max_abs_cos_deviation"].get<double>() < 1e-9);
    CHECK(r.out.rfind("max_abs_cos_deviation ", 0) == 0);
}

TEST_CASE("attribution rows satisfy the cause identity") {
    const auto dir = testing::scratch_dir("cli_attr");
    write_planted(dir / "in", 3, 1);
    const auto in = dir / "in";
    const auto r = invoke({"attribute", "--head", (in / "head.csv").string(), "--train", (in / "train.csv").string(),
                           "--test", (in / "test.csv").string(), "--ood", (in / "ood.csv").string(), "--seeds", "3",
                           "--out-dir", (dir / "out").string()});
    REQUIRE(r.code == 0);
    const auto rows = read_csv(dir / "out" / "attribution.csv");
    REQUIRE(rows.size() == 6);
    CHECK(rows[0] == std::vector<std::string>{"name", "auroc_max", "auroc_entropy", "auroc_cool", "auroc_density",
                                              "cause1", "cause2", "cause3"});
    for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
        CAPTURE(rows[i][0]);
        std::vector<double> v;
        for (std::size_t j = 1; j < rows[i].size(); ++j) v.push_back(parse_double_cell(rows[i][j], "cell"));
        CHECK(std::abs(v[4] + v[5] + v[6] - (1.0 - v[1])) <= 1e-12);
    }
    CHECK(rows[4][0] == "mean");
    CHECK(rows[5][0] == "se");
}

TEST_CASE("counterfactual ranks the optimal head above the sandwich") {
    const auto dir = testing::scratch_dir("cli_cf");
    const auto r =
        invoke({"counterfactual", "--structures", "optimal,sandwich", "--seeds", "3", "--out-dir", dir.string()});
    REQUIRE(r.code == 0);
    const auto rows = read_csv(dir / "counterfactual.csv");
    REQUIRE(rows.size() == 3);
    CHECK(rows[1][0] == "optimal");
    CHECK(rows[2][0] == "sandwich");
    CHECK(parse_double_cell(rows[1][3], "auroc") > parse_double_cell(rows[2][3], "auroc"));
    const auto seeds = read_json(dir / "counterfactual_seeds.json");
    CHECK(seeds["optimal"]["auroc"]["values"].size() == 3);
}

TEST_CASE("exact two-class region holds epsilon of the class mass") {
    const auto dir = testing::scratch_dir("cli_k2");
    write_planted(dir / "in", 2, 4);
    const auto r = invoke({"region", "--kind", "exact_k2", "--head", (dir / "in/head.csv").string(), "--train",
                        (dir / "in/train.csv").string(), "--epsilon", "0.05", "--out-dir", (dir / "out").string()});
    REQUIRE(r.code == 0);
    const auto j = read_json(dir / "out" / "region.json");
    const double mass = j["mass_check"]["mass"].get<double>();
    CHECK(std::abs(mass - 0.05) < 3.0 * std::sqrt(0.05 * 0.95 / 100000.0) + 1e-3);
}

TEST_CASE("every verb reruns byte for byte") {
    const auto root = testing::scratch_dir("cli_determinism");
    fs::create_directories(root / "a");
    fs::create_directories(root / "b");
    {
        InDir in(root / "a");
        run_all_verbs();
    }
    {
        InDir in(root / "b");
        run_all_verbs();
    }
    const auto a = snapshot(root / "a"), b = snapshot(root / "b");
    CHECK(a.size() > 40);
    REQUIRE(a.size() == b.size());
    for (const auto& [name, text] : a) {
        CAPTURE(name);
        REQUIRE(b.count(name) == 1);
        CHECK(b.at(name) == text);
    }
}

TEST_CASE("effective config reproduces the run") {
    const auto dir = testing::scratch_dir("cli_config");
    REQUIRE(invoke({"sweep", "--help"}).code == 0);
    REQUIRE(invoke({"train-toy", "--epochs", "3", "--hidden", "8,8", "--in-task", R"({"count": 50})", "--out-dir",
                 (dir / "first").string()})
                .code == 0);
    const auto cfg = read_json(dir / "first" / "train-toy.config.json");
    CHECK(cfg["epochs"] == 3);
    CHECK(cfg["hidden"] == json::array({8, 8}));
    CHECK(cfg["in_task"]["count"] == 50);
    CHECK(cfg["in_task"]["kind"] == "gaussian_blobs");
    REQUIRE(invoke({"train-toy", "--config", (dir / "first" / "train-toy.config.json").string(), "--out-dir",
                 (dir / "second").string()})
                .code == 0);
    CHECK(snapshot(dir / "first") == snapshot(dir / "second"));

    // Flags take precedence over file values.
    REQUIRE(invoke({"train-toy", "--config", (dir / "first" / "train-toy.config.json").string(), "--epochs", "2",
                 "--out-dir", (dir / "third").string()})
                .code == 0);
    CHECK(read_json(dir / "third" / "train-toy.config.json")["epochs"] == 2);
}

TEST_CASE("seed counts expand and lists parse") {
    const auto dir = testing::scratch_dir("cli_seeds");
    write_planted(dir / "in", 3, 2);
    const std::vector<std::string> base{"attribute",
                                        "--head",
                                        (dir / "in/head.csv").string(),
                                        "--train",
                                        (dir / "in/train.csv").string(),
                                        "--test",
                                        (dir / "in/test.csv").string(),
                                        "--ood",
                                        (dir / "in/ood.csv").string(),
                                        "--out-dir",
                                        (dir / "out").string(),
                                        "--seeds"};
    auto args = base;
    args.push_back("4");
    REQUIRE(invoke(args).code == 0);
    CHECK(read_json(dir / "out" / "attribute.config.json")["seeds"] == json::array({0, 1, 2, 3}));
    args = base;
    args.push_back("5,9");
    REQUIRE(invoke(args).code == 0);
    CHECK(read_json(dir / "out" / "attribute.config.json")["seeds"] == json::array({5, 9}));
    CHECK(read_csv(dir / "out" / "attribution.csv")[2][0] == "seed9");
    args = base;
    args.push_back("0");
    CHECK(invoke(args).code == 2);
}

TEST_CASE("failure classes map to exit codes") {
    const auto dir = testing::scratch_dir("cli_errors");
    const auto out = (dir / "o").string();
    CHECK(invoke({"gen-head", "--bogus", "1", "--out-dir", out}).code == 2);
    CHECK(invoke({"gen-head", "--k", "three", "--out-dir", out}).code == 2);
    CHECK(invoke({"gen-head", "--kind", "pyramid", "--out-dir", out}).code == 2);
    CHECK(invoke({"gen-head", "--format", "json", "--out-dir", out}).code == 2);

    {
        std::ofstream(dir / "bad_key.json") << R"({"k": 3, "width": 4})";
        std::ofstream(dir / "bad_type.json") << R"({"k": "3"})";
        std::ofstream(dir / "not_json.json") << "{k: 3";
    }
    CHECK(invoke({"gen-head", "--config", (dir / "bad_key.json").string(), "--out-dir", out}).code == 2);
    CHECK(invoke({"gen-head", "--config", (dir / "bad_type.json").string(), "--out-dir", out}).code == 2);
    CHECK(invoke({"gen-head", "--config", (dir / "not_json.json").string(), "--out-dir", out}).code == 2);
    CHECK(invoke({"train-toy", "--in-task", R"({"radius": 1})", "--out-dir", out}).code == 2);
    CHECK(invoke({"score", "--features", "features.csv", "--out-dir", out}).code == 2);

    CHECK(invoke({"gen-head", "--config", (dir / "missing.json").string(), "--out-dir", out}).code == 3);
    CHECK(invoke({"score", "--features", (dir / "missing.csv").string(), "--head", (dir / "missing.csv").string(),
               "--out-dir", out})
              .code == 3);

    CHECK(invoke({"train-toy", "--learning-rate", "1e300", "--epochs", "2", "--out-dir", out}).code == 4);
}

TEST_CASE("output directory falls back to the environment") {
    const auto dir = testing::scratch_dir("cli_env");
    ::setenv("SOFTCONF_OUT_DIR", (dir / "env").string().c_str(), 1);
    const auto r = invoke({"gen-head"});
    ::unsetenv("SOFTCONF_OUT_DIR");
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "env" / "head.csv"));
    CHECK(fs::exists(dir / "env" / "gen-head.config.json"));
}
