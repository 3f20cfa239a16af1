#pragma once

#include "softconf/core.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testing {

using softconf::Index;
using softconf::Matrix;
using softconf::Vector;

inline Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

inline Matrix cols(std::initializer_list<std::initializer_list<double>> columns) {
    const auto k = static_cast<Index>(columns.size());
    const auto h = static_cast<Index>(columns.begin()->size());
    Matrix m(h, k);
    Index j = 0;
    for (const auto& c : columns) {
        Index i = 0;
        for (double x : c) m(i++, j) = x;
        ++j;
    }
    return m;
}

inline Vector gaussian_vector(std::mt19937_64& rng, Index n, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = nd(rng);
    return v;
}

inline Matrix gaussian_matrix(std::mt19937_64& rng, Index r, Index c, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Matrix m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = nd(rng);
    return m;
}

inline softconf::SoftmaxHead random_head(std::mt19937_64& rng, Index h, Index k, double bias_scale = 1.0) {
    return softconf::SoftmaxHead(gaussian_matrix(rng, h, k), gaussian_vector(rng, k, bias_scale));
}

/// The three-class counterexample head: w1=(0,1), w2=(-1,0), w3=(1,0).
inline softconf::SoftmaxHead sandwich_head_2d() { return softconf::SoftmaxHead(cols({{0, 1}, {-1, 0}, {1, 0}})); }

/// Central finite-difference gradient.
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double step = 1e-6) {
    Vector g(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        Vector a = x, b = x;
        a[i] += step;
        b[i] -= step;
        g[i] = (f(a) - f(b)) / (2.0 * step);
    }
    return g;
}

/// |a - b| <= rel * max(|a|, |b|) + abs, elementwise through norms.
inline bool gradients_agree(const Vector& analytic, const Vector& numeric, double rel, double abs_floor) {
    const double scale = std::max(analytic.norm(), numeric.norm());
    return (analytic - numeric).norm() <= rel * scale + abs_floor;
}

/// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("softconf_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
