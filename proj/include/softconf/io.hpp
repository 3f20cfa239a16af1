#pragma once

#include "softconf/core.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace softconf {

/// On-disk feature layouts.
///
/// csv:    header `h0,...,h{H-1}` plus an optional trailing `label` column, one sample per row.
/// binary: "FEAT", u32 version (=1), u32 N, u32 H, u8 has_labels, N*H f32 row-major,
///         then N u32 labels when has_labels is set. All integers little-endian.
enum class FeatureFormat { csv, binary };

/// `.csv` maps to csv, everything else to binary.
FeatureFormat format_from_path(const std::filesystem::path& path);
FeatureFormat parse_feature_format(const std::string& name);

struct LabeledFeatures {
    FeatureMatrix features;
    std::optional<LabelVector> labels;
};

/// Reads a feature file. When `num_classes` is given, labels are range-checked against it;
/// otherwise the class count is inferred from the largest label.
LabeledFeatures load_features(const std::filesystem::path& path, FeatureFormat format,
                              std::optional<std::uint32_t> num_classes = std::nullopt);

/// Binary output narrows to f32; values outside the f32 range raise NumericalError.
void write_features(const std::filesystem::path& path, FeatureFormat format, const FeatureMatrix& features,
                    const LabelVector* labels = nullptr);

/// Head file: CSV without header, H rows of K weights followed by one row of K biases.
SoftmaxHead load_head(const std::filesystem::path& path);
void write_head(const std::filesystem::path& path, const SoftmaxHead& head);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// Splits one CSV line on commas, trimming surrounding whitespace.
std::vector<std::string> split_csv_line(const std::string& line);

/// Parses a full cell as a double; throws IoError on trailing garbage.
double parse_double_cell(const std::string& cell, const std::string& context);

}  // namespace softconf
