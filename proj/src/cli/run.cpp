#include "softconf/cli.hpp"

#include "config.hpp"
#include "softconf/errors.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <map>
#include <ostream>

namespace softconf::cli {

using nlohmann::json;

namespace {

std::string flag_name(const std::string& key) {
    std::string s = key;
    std::replace(s.begin(), s.end(), '_', '-');
    return "--" + s;
}

std::filesystem::path default_out_dir() {
    if (const char* env = std::getenv("SOFTCONF_OUT_DIR"); env && *env) return env;
    return "softconf-out";
}

int code(ExitCode c) { return static_cast<int>(c); }

struct VerbFlags {
    std::map<std::string, std::string> values;
    std::string config_path;
    std::string out_dir;
};

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Softmax confidence analysis toolkit", "softconf"};
    app.require_subcommand(1);
    app.set_help_flag("--help", "Print this help message and exit");
    app.set_help_all_flag("--help-all", "Help for every verb");

    std::map<std::string, VerbFlags> flags;
    std::map<CLI::App*, const Verb*> verbs;
    for (const auto& verb : verb_table()) {
        auto* sub = app.add_subcommand(verb.name, verb.help);
        auto& vf = flags[verb.name];
        sub->add_option("--config", vf.config_path, "JSON file of config values; flags take precedence");
        sub->add_option("--out-dir", vf.out_dir, "Directory for artifacts");
        for (const auto& f : verb.schema) sub->add_option(flag_name(f.key), vf.values[f.key], f.help);
        verbs[sub] = &verb;
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return code(ExitCode::config);
    }

    auto* sub = app.get_subcommands().front();
    const Verb& verb = *verbs.at(sub);
    const auto& vf = flags.at(verb.name);

    json given = json::object();
    for (const auto& f : verb.schema)
        if (sub->get_option(flag_name(f.key))->count() > 0) given[f.key] = parse_flag_value(f, vf.values.at(f.key));
    const json file = vf.config_path.empty() ? json() : read_config_file(vf.config_path);
    const json merged = merge_config(verb.schema, file, given);

    const std::filesystem::path out_dir = vf.out_dir.empty() ? default_out_dir() : std::filesystem::path(vf.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    const Context ctx{RunConfig(merged), out_dir, out};
    ctx.write_json(verb.name + ".config.json", merged);
    verb.run(ctx);
    return code(ExitCode::ok);
}

}  // namespace

std::vector<std::string> verb_names() {
    std::vector<std::string> names;
    for (const auto& v : verb_table()) names.push_back(v.name);
    return names;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        return dispatch(args, out, err);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return code(ExitCode::config);
    } catch (const DimensionError& e) {
        err << "config error: " << e.what() << "\n";
        return code(ExitCode::config);
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return code(ExitCode::io);
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return code(ExitCode::numerical);
    } catch (const nlohmann::json::exception& e) {
        err << "config error: " << e.what() << "\n";
        return code(ExitCode::config);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return code(ExitCode::failure);
    }
}

}  // namespace softconf::cli
