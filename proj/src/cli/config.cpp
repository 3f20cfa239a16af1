#include "config.hpp"

#include "softconf/errors.hpp"
#include "softconf/io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace softconf::cli {

using nlohmann::json;

namespace {

std::string type_name(FieldType t) {
    switch (t) {
        case FieldType::integer: return "an integer";
        case FieldType::number: return "a number";
        case FieldType::boolean: return "a boolean";
        case FieldType::string: return "a string";
        case FieldType::int_list: return "a list of integers";
        case FieldType::number_list: return "a list of numbers";
        case FieldType::string_list: return "a list of strings";
        case FieldType::seeds: return "a seed count or a list of seeds";
        case FieldType::object: return "a JSON object";
    }
    return "a value";
}

[[noreturn]] void bad_type(const Field& f) { throw ConfigError("'" + f.key + "' must be " + type_name(f.type)); }

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> parts;
    if (text.empty()) return parts;
    for (auto& cell : split_csv_line(text)) parts.push_back(cell);
    return parts;
}

json parse_int(const Field& f, const std::string& s) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) bad_type(f);
    return v;
}

json parse_number(const Field& f, const std::string& s) {
    try {
        return parse_double_cell(s, f.key);
    } catch (const IoError&) {
        bad_type(f);
    }
}

}  // namespace

json normalize_value(const Field& f, const json& v) {
    const auto all = [&](auto pred) {
        if (!v.is_array()) bad_type(f);
        for (const auto& e : v)
            if (!pred(e)) bad_type(f);
        return v;
    };
    switch (f.type) {
        case FieldType::integer:
            if (!v.is_number_integer()) bad_type(f);
            return v;
        case FieldType::number:
            if (!v.is_number()) bad_type(f);
            return v.get<double>();
        case FieldType::boolean:
            if (!v.is_boolean()) bad_type(f);
            return v;
        case FieldType::string:
            if (!v.is_string()) bad_type(f);
            return v;
        case FieldType::int_list: return all([](const json& e) { return e.is_number_integer(); });
        case FieldType::number_list: {
            all([](const json& e) { return e.is_number(); });
            json out = json::array();
            for (const auto& e : v) out.push_back(e.get<double>());
            return out;
        }
        case FieldType::string_list: return all([](const json& e) { return e.is_string(); });
        case FieldType::seeds: {
            if (v.is_number_integer()) {
                const auto n = v.get<std::int64_t>();
                if (n < 1) throw ConfigError("'" + f.key + "' seed count must be positive");
                json out = json::array();
                for (std::int64_t i = 0; i < n; ++i) out.push_back(i);
                return out;
            }
            all([](const json& e) { return e.is_number_integer() && e.get<std::int64_t>() >= 0; });
            if (v.empty()) throw ConfigError("'" + f.key + "' needs at least one seed");
            return v;
        }
        case FieldType::object:
            if (!v.is_object()) bad_type(f);
            return v;
    }
    bad_type(f);
}

json parse_flag_value(const Field& f, const std::string& text) {
    switch (f.type) {
        case FieldType::integer: return parse_int(f, text);
        case FieldType::number: return parse_number(f, text);
        case FieldType::boolean:
            if (text == "true" || text == "1") return true;
            if (text == "false" || text == "0") return false;
            bad_type(f);
        case FieldType::string: return text;
        case FieldType::object: {
            const auto j = json::parse(text, nullptr, false);
            if (j.is_discarded()) throw ConfigError("'" + f.key + "' is not valid JSON");
            return normalize_value(f, j);
        }
        case FieldType::seeds:
            if (text.find(',') == std::string::npos && text.find('[') == std::string::npos)
                return normalize_value(f, parse_int(f, text));
            [[fallthrough]];
        default: break;
    }
    if (!text.empty() && text.front() == '[') {
        const auto j = json::parse(text, nullptr, false);
        if (j.is_discarded()) bad_type(f);
        return normalize_value(f, j);
    }
    json out = json::array();
    for (const auto& part : split_list(text)) {
        if (f.type == FieldType::number_list) out.push_back(parse_number(f, part));
        else if (f.type == FieldType::string_list) out.push_back(part);
        else out.push_back(parse_int(f, part));
    }
    return normalize_value(f, out);
}

json merge_config(const Schema& schema, const json& file, const json& flags) {
    if (!file.is_null() && !file.is_object()) throw ConfigError("config file must hold a JSON object");
    json merged = json::object();
    for (const auto& f : schema) merged[f.key] = normalize_value(f, f.value);
    const auto overlay = [&](const json& src) {
        if (src.is_null()) return;
        for (const auto& [key, value] : src.items()) {
            const auto it = std::find_if(schema.begin(), schema.end(), [&](const Field& f) { return f.key == key; });
            if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
            if (it->type == FieldType::object) merged[key].update(normalize_value(*it, value));
            else merged[key] = normalize_value(*it, value);
        }
    };
    overlay(file);
    overlay(flags);
    return merged;
}

json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const auto j = json::parse(ss.str(), nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    return j;
}

const json& RunConfig::at(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return *it;
}

std::int64_t RunConfig::integer(const std::string& key) const { return at(key).get<std::int64_t>(); }

std::int64_t RunConfig::count(const std::string& key) const {
    const auto v = integer(key);
    if (v < 1) throw ConfigError("'" + key + "' must be positive");
    return v;
}

double RunConfig::number(const std::string& key) const { return at(key).get<double>(); }
bool RunConfig::boolean(const std::string& key) const { return at(key).get<bool>(); }
const std::string& RunConfig::str(const std::string& key) const { return at(key).get_ref<const std::string&>(); }

std::filesystem::path RunConfig::path(const std::string& key) const {
    if (!has_path(key)) throw ConfigError("'" + key + "' is required");
    return str(key);
}

std::vector<std::int64_t> RunConfig::int_list(const std::string& key) const {
    return at(key).get<std::vector<std::int64_t>>();
}
std::vector<double> RunConfig::number_list(const std::string& key) const { return at(key).get<std::vector<double>>(); }
std::vector<std::string> RunConfig::string_list(const std::string& key) const {
    return at(key).get<std::vector<std::string>>();
}
std::vector<std::uint64_t> RunConfig::seeds(const std::string& key) const {
    return at(key).get<std::vector<std::uint64_t>>();
}
const json& RunConfig::object(const std::string& key) const { return at(key); }

namespace {

std::string csv_cell(const json& v) {
    if (v.is_number_float()) return format_double(v.get<double>());
    if (v.is_number()) return v.dump();
    if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
    if (v.is_null()) return "";
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string quoted = "\"";
    for (char c : s) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
    return quoted + "\"";
}

}  // namespace

std::string Table::csv() const {
    std::string text;
    for (std::size_t c = 0; c < columns.size(); ++c) text += (c ? "," : "") + columns[c];
    text += '\n';
    for (const auto& row : rows) {
        if (row.size() != columns.size()) throw DimensionError("table row width differs from its header");
        for (std::size_t c = 0; c < row.size(); ++c) text += (c ? "," : "") + csv_cell(row[c]);
        text += '\n';
    }
    return text;
}

json Table::records() const {
    json out = json::array();
    for (const auto& row : rows) {
        json rec = json::object();
        for (std::size_t c = 0; c < columns.size(); ++c) rec[columns[c]] = row.at(c);
        out.push_back(std::move(rec));
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("failed writing " + path.string());
}

std::filesystem::path Context::emit(const std::string& stem, const Table& table) const {
    const auto& fmt = cfg.str("format");
    if (fmt == "csv") {
        const auto p = artifact(stem + ".csv");
        write_text(p, table.csv());
        return p;
    }
    if (fmt == "json") {
        const auto p = artifact(stem + ".json");
        write_text(p, table.records().dump(2) + "\n");
        return p;
    }
    throw ConfigError("format must be csv or json, got '" + fmt + "'");
}

void Context::write_json(const std::string& name, const json& j) const { write_text(artifact(name), j.dump(2) + "\n"); }

}  // namespace softconf::cli
