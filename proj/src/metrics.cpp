#include "softconf/metrics.hpp"

#include "softconf/errors.hpp"
#include "softconf/io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace softconf {

double auroc(const std::vector<double>& scores_in, const std::vector<double>& scores_out) {
    if (scores_in.empty() || scores_out.empty()) throw ConfigError("auroc needs scores on both sides");
    const std::size_t n_in = scores_in.size(), n_out = scores_out.size(), n = n_in + n_out;
    std::vector<std::pair<double, bool>> pooled;
    pooled.reserve(n);
    for (double s : scores_in) pooled.emplace_back(s, false);
    for (double s : scores_out) pooled.emplace_back(s, true);
    for (const auto& p : pooled)
        if (std::isnan(p.first)) throw NumericalError("auroc scores contain NaN");
    std::sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    // Twice the rank sum keeps midranks integral.
    std::uint64_t twice_rank_sum_out = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        std::size_t out_in_block = 0;
        while (j < n && pooled[j].first == pooled[i].first) out_in_block += pooled[j++].second ? 1 : 0;
        // Ranks i+1 .. j share the midrank (i + 1 + j) / 2.
        twice_rank_sum_out += out_in_block * (i + 1 + j);
        i = j;
    }
    const double twice_u = static_cast<double>(twice_rank_sum_out) - static_cast<double>(n_out * (n_out + 1));
    return twice_u / (2.0 * static_cast<double>(n_in) * static_cast<double>(n_out));
}

std::vector<std::size_t> balanced_subset(std::size_t n, std::size_t m, std::uint64_t seed) {
    if (m > n) throw ConfigError("subset larger than the population");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates keeps the draw independent of the standard library's shuffle.
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

double balanced_auroc(const std::vector<double>& scores_in, const std::vector<double>& scores_out,
                      std::uint64_t seed) {
    if (scores_in.size() == scores_out.size()) return auroc(scores_in, scores_out);
    const bool in_larger = scores_in.size() > scores_out.size();
    const auto& big = in_larger ? scores_in : scores_out;
    const auto& small = in_larger ? scores_out : scores_in;
    std::vector<double> sub;
    for (std::size_t i : balanced_subset(big.size(), small.size(), seed)) sub.push_back(big[i]);
    return in_larger ? auroc(sub, scores_out) : auroc(scores_in, sub);
}

MeanSe mean_se(const std::vector<double>& values) {
    if (values.empty()) throw ConfigError("mean of an empty sample");
    const double n = static_cast<double>(values.size());
    MeanSe r;
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    return r;
}

AttributionReport attribute(double a, double b, double c, double d) {
    AttributionReport r{a, b, c, d};
    r.cause1 = c - b;
    r.cause2 = d - c;
    r.cause3 = 1.0 - d;
    return r;
}

nlohmann::json to_json(const AttributionReport& r) {
    return {{"auroc_max", r.auroc_max},
            {"auroc_entropy", r.auroc_entropy},
            {"auroc_cool", r.auroc_cool},
            {"auroc_density", r.auroc_density},
            {"cause1", r.cause1},
            {"cause2", r.cause2},
            {"cause3", r.cause3},
            {"negative_cause", r.has_negative_cause()}};
}

std::string attribution_csv_header() {
    return "name,auroc_max,auroc_entropy,auroc_cool,auroc_density,cause1,cause2,cause3";
}

std::string attribution_csv_row(const AttributionReport& r, const std::string& name) {
    std::string out = name;
    for (double v : {r.auroc_max, r.auroc_entropy, r.auroc_cool, r.auroc_density, r.cause1, r.cause2, r.cause3})
        out += "," + format_double(v);
    return out;
}

Matrix PcaResult::project(const Matrix& x) const {
    if (x.cols() != mean.size()) throw DimensionError("PCA input dimension does not match the fit");
    return (x.rowwise() - mean.transpose()) * components;
}

PcaResult pca_project(const Matrix& x, Index dims) {
    if (dims < 1 || dims > x.cols()) throw ConfigError("PCA dims must lie in [1, H]");
    if (x.rows() < dims + 1) throw ConfigError("PCA needs more samples than components");
    require_finite(x, "PCA input");
    PcaResult r;
    r.mean = x.colwise().mean().transpose();
    const Matrix centered = x.rowwise() - r.mean.transpose();
    const Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericalError("covariance eigendecomposition failed");
    const Vector values = eig.eigenvalues().reverse();
    const double total = values.cwiseMax(0.0).sum();
    const double tol = 1e-12 * std::max(values[0], 0.0) * static_cast<double>(x.cols());
    if (!(values[dims - 1] > tol))
        throw NumericalError("covariance rank is below the requested " + std::to_string(dims) + " components");
    r.components = eig.eigenvectors().rowwise().reverse().leftCols(dims);
    for (Index j = 0; j < dims; ++j) {
        Index arg = 0;
        r.components.col(j).cwiseAbs().maxCoeff(&arg);
        if (r.components(arg, j) < 0.0) r.components.col(j) *= -1.0;
    }
    r.explained_variance = values.head(dims);
    r.explained_ratio = r.explained_variance / total;
    r.projection = centered * r.components;
    return r;
}

namespace {

std::string colour_for(std::size_t i) {
    static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    return palette[i % 6];
}

std::string shade(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const auto ch = [&](double from, double to) { return static_cast<int>(std::lround(from + (to - from) * t)); };
    std::ostringstream s;
    s << "rgb(" << ch(255, 49) << "," << ch(255, 130) << "," << ch(255, 189) << ")";
    return s.str();
}

std::string xml_escape(const std::string& in) {
    std::string out;
    for (char c : in) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string scatter_svg(const std::vector<ScatterPoint>& points, const std::optional<ShadeGrid>& grid,
                        const std::string& title, int width, int height) {
    if (width < 64 || height < 64) throw ConfigError("plot must be at least 64 x 64 pixels");
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (grid) {
        if (grid->nx < 1 || grid->ny < 1 || grid->values.size() != static_cast<std::size_t>(grid->nx * grid->ny))
            throw DimensionError("shade grid size does not match its value count");
        x0 = grid->x_min, x1 = grid->x_max, y0 = grid->y_min, y1 = grid->y_max;
    } else if (!points.empty()) {
        x0 = x1 = points[0].x;
        y0 = y1 = points[0].y;
        for (const auto& p : points) {
            x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
        }
        const double px = std::max(1e-9, 0.05 * (x1 - x0)), py = std::max(1e-9, 0.05 * (y1 - y0));
        x0 -= px, x1 += px, y0 -= py, y1 += py;
    }
    const double margin = 30.0;
    const double w = width - 2 * margin, h = height - 2 * margin;
    const auto sx = [&](double x) { return margin + (x - x0) / (x1 - x0) * w; };
    const auto sy = [&](double y) { return margin + (y1 - y) / (y1 - y0) * h; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (grid) {
        const auto [lo, hi] = std::minmax_element(grid->values.begin(), grid->values.end());
        const double range = *hi > *lo ? *hi - *lo : 1.0;
        const double cw = w / static_cast<double>(grid->nx), chh = h / static_cast<double>(grid->ny);
        for (Index r = 0; r < grid->ny; ++r)
            for (Index c = 0; c < grid->nx; ++c) {
                const double v = grid->values[static_cast<std::size_t>(r * grid->nx + c)];
                // Row 0 is the bottom of the plot.
                svg << "<rect x=\"" << margin + c * cw << "\" y=\"" << margin + (grid->ny - 1 - r) * chh
                    << "\" width=\"" << cw + 0.5 << "\" height=\"" << chh + 0.5 << "\" fill=\""
                    << shade((v - *lo) / range) << "\"/>\n";
            }
    }
    svg << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << w << "\" height=\"" << h
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    std::vector<std::string> sources;
    for (const auto& p : points) {
        auto it = std::find(sources.begin(), sources.end(), p.source);
        const auto idx = static_cast<std::size_t>(it - sources.begin());
        if (it == sources.end()) sources.push_back(p.source);
        svg << "<circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y) << "\" r=\"2\" fill=\"" << colour_for(idx)
            << "\"/>\n";
    }
    for (std::size_t i = 0; i < sources.size(); ++i)
        svg << "<text x=\"" << margin + 4 << "\" y=\"" << margin + 14 + 14 * static_cast<double>(i)
            << "\" font-size=\"12\" fill=\"" << colour_for(i) << "\">" << xml_escape(sources[i]) << "</text>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">" << xml_escape(title)
        << "</text>\n</svg>\n";
    return svg.str();
}

}  // namespace softconf
