#include "softconf/io.hpp"

#include "softconf/errors.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace softconf {

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'E', 'A', 'T'};
constexpr std::uint32_t kBinaryVersion = 1;

static_assert(std::endian::native == std::endian::little, "binary feature IO assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw IoError("truncated binary feature file: " + path.string());
    return v;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint32_t parse_label_cell(const std::string& cell, const std::string& context) {
    std::int64_t v = 0;
    const auto* first = cell.data();
    const auto* last = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        throw IoError("non-integer label '" + cell + "' " + context);
    if (v < 0 || v > std::numeric_limits<std::uint32_t>::max())
        throw ConfigError("label " + cell + " out of range " + context);
    return static_cast<std::uint32_t>(v);
}

LabelVector make_labels(std::vector<std::uint32_t> raw, std::optional<std::uint32_t> num_classes) {
    if (num_classes) return LabelVector(std::move(raw), *num_classes);
    return LabelVector::infer(std::move(raw));
}

LabeledFeatures load_csv(const std::filesystem::path& path, std::optional<std::uint32_t> num_classes) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty feature file: " + path.string());
    const auto header = split_csv_line(line);
    bool has_labels = !header.empty() && header.back() == "label";
    const std::size_t h = header.size() - (has_labels ? 1 : 0);
    if (h == 0) throw IoError("feature header has no h columns: " + path.string());
    for (std::size_t j = 0; j < h; ++j)
        if (header[j] != "h" + std::to_string(j))
            throw IoError("malformed feature header at column " + std::to_string(j) + " ('" + header[j] +
                          "', expected 'h" + std::to_string(j) + "') in " + path.string());

    std::vector<double> values;
    std::vector<std::uint32_t> labels;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto cells = split_csv_line(line);
        const std::string ctx = "at row " + std::to_string(row + 1) + " of " + path.string();
        if (cells.size() != header.size())
            throw IoError("expected " + std::to_string(header.size()) + " cells " + ctx);
        for (std::size_t j = 0; j < h; ++j) {
            const double v = parse_double_cell(cells[j], ctx);
            if (!std::isfinite(v)) throw NumericalError("non-finite feature value " + ctx);
            values.push_back(v);
        }
        if (has_labels) labels.push_back(parse_label_cell(cells[h], ctx));
        ++row;
    }
    if (row == 0) throw IoError("feature file has no samples: " + path.string());

    Matrix data(static_cast<Index>(row), static_cast<Index>(h));
    for (std::size_t i = 0; i < row; ++i)
        for (std::size_t j = 0; j < h; ++j) data(i, j) = values[i * h + j];
    LabeledFeatures out{FeatureMatrix(std::move(data)), std::nullopt};
    if (has_labels) out.labels = make_labels(std::move(labels), num_classes);
    return out;
}

LabeledFeatures load_binary(const std::filesystem::path& path, std::optional<std::uint32_t> num_classes) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), 4) || magic != kMagic)
        throw IoError("bad magic in binary feature file: " + path.string());
    const auto version = get<std::uint32_t>(in, path);
    if (version != kBinaryVersion)
        throw IoError("unsupported binary feature version " + std::to_string(version) + " in " + path.string());
    const auto n = get<std::uint32_t>(in, path);
    const auto h = get<std::uint32_t>(in, path);
    const auto has_labels = get<std::uint8_t>(in, path);
    if (has_labels > 1) throw IoError("bad has_labels flag in " + path.string());
    if (n == 0 || h == 0) throw IoError("binary feature file declares an empty matrix: " + path.string());

    std::vector<float> buf(static_cast<std::size_t>(n) * h);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
        throw IoError("truncated feature block in " + path.string());
    Matrix data(n, h);
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = 0; j < h; ++j) {
            const float v = buf[static_cast<std::size_t>(i) * h + j];
            if (!std::isfinite(v))
                throw NumericalError("non-finite feature value at row " + std::to_string(i) + " of " + path.string());
            data(i, j) = static_cast<double>(v);
        }
    LabeledFeatures out{FeatureMatrix(std::move(data)), std::nullopt};
    if (has_labels) {
        std::vector<std::uint32_t> labels(n);
        if (!in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(n * sizeof(std::uint32_t))))
            throw IoError("truncated label block in " + path.string());
        out.labels = make_labels(std::move(labels), num_classes);
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw IoError("trailing bytes after feature data in " + path.string());
    return out;
}

}  // namespace

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc()) throw IoError("cannot format double");
    return std::string(buf.data(), ptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

double parse_double_cell(const std::string& cell, const std::string& context) {
    if (cell.empty()) throw IoError("empty numeric cell " + context);
    const char* begin = cell.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end != begin + cell.size()) throw IoError("cannot parse '" + cell + "' as a number " + context);
    return v;
}

FeatureFormat format_from_path(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? FeatureFormat::csv : FeatureFormat::binary;
}

FeatureFormat parse_feature_format(const std::string& name) {
    if (name == "csv") return FeatureFormat::csv;
    if (name == "binary" || name == "bin" || name == "feat") return FeatureFormat::binary;
    throw ConfigError("unknown feature format '" + name + "'");
}

LabeledFeatures load_features(const std::filesystem::path& path, FeatureFormat format,
                              std::optional<std::uint32_t> num_classes) {
    LabeledFeatures out =
        format == FeatureFormat::csv ? load_csv(path, num_classes) : load_binary(path, num_classes);
    if (out.labels && out.labels->size() != static_cast<std::size_t>(out.features.n()))
        throw IoError("label count does not match sample count in " + path.string());
    return out;
}

void write_features(const std::filesystem::path& path, FeatureFormat format, const FeatureMatrix& features,
                    const LabelVector* labels) {
    const auto& m = features.data();
    if (labels && labels->size() != static_cast<std::size_t>(m.rows()))
        throw DimensionError("label count does not match sample count");
    if (format == FeatureFormat::csv) {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write " + path.string());
        for (Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << 'h' << j;
        if (labels) out << ",label";
        out << '\n';
        for (Index i = 0; i < m.rows(); ++i) {
            for (Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
            if (labels) out << ',' << (*labels)[static_cast<std::size_t>(i)];
            out << '\n';
        }
        if (!out) throw IoError("write failed: " + path.string());
        return;
    }

    if (m.rows() > std::numeric_limits<std::uint32_t>::max() || m.cols() > std::numeric_limits<std::uint32_t>::max())
        throw DimensionError("feature matrix too large for the binary format");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kMagic.data(), 4);
    put<std::uint32_t>(out, kBinaryVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    put<std::uint8_t>(out, labels ? 1 : 0);
    std::vector<float> buf(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) {
            const float v = static_cast<float>(m(i, j));
            if (!std::isfinite(v)) throw NumericalError("feature value overflows f32 at row " + std::to_string(i));
            buf[static_cast<std::size_t>(i * m.cols() + j)] = v;
        }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (labels)
        out.write(reinterpret_cast<const char*>(labels->values().data()),
                  static_cast<std::streamsize>(labels->size() * sizeof(std::uint32_t)));
    if (!out) throw IoError("write failed: " + path.string());
}

SoftmaxHead load_head(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const std::string ctx = "at row " + std::to_string(rows.size() + 1) + " of " + path.string();
        std::vector<double> row;
        for (const auto& cell : split_csv_line(line)) row.push_back(parse_double_cell(cell, ctx));
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError("ragged head file " + ctx);
        rows.push_back(std::move(row));
    }
    if (rows.size() < 2) throw IoError("head file needs at least one weight row and a bias row: " + path.string());
    const auto h = static_cast<Index>(rows.size() - 1);
    const auto k = static_cast<Index>(rows.front().size());
    Matrix w(h, k);
    Vector b(k);
    for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < k; ++j) w(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (Index j = 0; j < k; ++j) b[j] = rows.back()[static_cast<std::size_t>(j)];
    return SoftmaxHead(std::move(w), std::move(b));
}

void write_head(const std::filesystem::path& path, const SoftmaxHead& head) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    const auto& w = head.weights();
    for (Index i = 0; i < w.rows(); ++i) {
        for (Index j = 0; j < w.cols(); ++j) out << (j ? "," : "") << format_double(w(i, j));
        out << '\n';
    }
    for (Index j = 0; j < w.cols(); ++j) out << (j ? "," : "") << format_double(head.bias()[j]);
    out << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace softconf
