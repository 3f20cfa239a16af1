#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace softconf::cli {

enum class FieldType {
    integer,
    number,
    boolean,
    string,
    int_list,
    number_list,
    string_list,
    /// Non-negative integer list; a single integer n expands to 0..n-1.
    seeds,
    /// JSON object validated by the verb; overrides update individual keys.
    object,
};

struct Field {
    std::string key;
    FieldType type;
    nlohmann::json value;
    std::string help;
};

using Schema = std::vector<Field>;

/// Checks a value against the field type and returns its canonical form (seed counts expanded).
nlohmann::json normalize_value(const Field& field, const nlohmann::json& value);

/// Converts a command-line token: comma lists, JSON literals for objects, integer seed counts.
nlohmann::json parse_flag_value(const Field& field, const std::string& text);

/// Schema defaults overridden by `file` values then `flags`. Unknown keys throw ConfigError.
nlohmann::json merge_config(const Schema& schema, const nlohmann::json& file, const nlohmann::json& flags);

/// Reads a JSON object from disk; parse failures are configuration errors.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Typed read access to a merged configuration.
class RunConfig {
public:
    explicit RunConfig(nlohmann::json values) : values_(std::move(values)) {}

    const nlohmann::json& values() const { return values_; }
    std::int64_t integer(const std::string& key) const;
    /// integer() checked to be positive.
    std::int64_t count(const std::string& key) const;
    double number(const std::string& key) const;
    bool boolean(const std::string& key) const;
    const std::string& str(const std::string& key) const;
    /// A path that must be given.
    std::filesystem::path path(const std::string& key) const;
    bool has_path(const std::string& key) const { return !str(key).empty(); }
    std::vector<std::int64_t> int_list(const std::string& key) const;
    std::vector<double> number_list(const std::string& key) const;
    std::vector<std::string> string_list(const std::string& key) const;
    std::vector<std::uint64_t> seeds(const std::string& key) const;
    const nlohmann::json& object(const std::string& key) const;

private:
    const nlohmann::json& at(const std::string& key) const;

    nlohmann::json values_;
};

/// Column-oriented table emitted as CSV or as a JSON array of records.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<nlohmann::json>> rows;

    std::string csv() const;
    nlohmann::json records() const;
};

struct Context {
    RunConfig cfg;
    std::filesystem::path out_dir;
    std::ostream& out;

    std::filesystem::path artifact(const std::string& name) const { return out_dir / name; }
    /// Writes `<stem>.csv` or `<stem>.json` according to the "format" key.
    std::filesystem::path emit(const std::string& stem, const Table& table) const;
    void write_json(const std::string& name, const nlohmann::json& j) const;
};

void write_text(const std::filesystem::path& path, const std::string& text);

struct Verb {
    std::string name;
    std::string help;
    Schema schema;
    std::function<void(const Context&)> run;
};

const std::vector<Verb>& verb_table();

}  // namespace softconf::cli
