#pragma once

// Attention-guided non-uniform resampling. An attention map is treated as
// a probability mass over pixels, split into one marginal per axis, and the
// inverse of each marginal's cumulative integral gives the source
// coordinate for every output row and column. High-attention regions
// receive more output samples; the warp is separable and monotone, so it
// never folds over.
//
// Conventions: axis X runs along columns (marginal length = width), axis Y
// along rows. Pixel k covers [k - 0.5, k + 0.5), so constant attention
// reproduces a plain half-pixel bilinear resize.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "image.hpp"
#include "rng.hpp"
#include "trilinear.hpp"

namespace tasn {

enum class Axis { X, Y };
enum class Decomposition { Max, Sum };
enum class Selection { Random, ResponseRanked, FixedIndex };
enum class SampleMode { Structure, Detail };

inline std::string_view to_string(Decomposition d) { return d == Decomposition::Max ? "max" : "sum"; }

inline std::optional<Decomposition> parse_decomposition(std::string_view s) {
    if (s == "max") return Decomposition::Max;
    if (s == "sum") return Decomposition::Sum;
    return std::nullopt;
}

struct SamplerConfig {
    Decomposition decomposition = Decomposition::Max;
    double epsilon = 0.01;  // fraction of the marginal mean added to every entry
    std::size_t out_h = 16;
    std::size_t out_w = 16;
    Selection selection = Selection::Random;
    std::size_t fixed_index = 0;

    void validate() const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw DomainError("SamplerConfig: epsilon must be >= 0");
        if (out_h < 1 || out_w < 1) throw DomainError("SamplerConfig: output size must be at least 1x1");
    }
};

/// Single non-negative h×w attention map.
class AttentionMap {
  public:
    AttentionMap(std::size_t height, std::size_t width, std::vector<double> values)
        : height_(height), width_(width), values_(std::move(values)) {
        if (height_ == 0 || width_ == 0) throw ShapeError("AttentionMap: dimensions must be positive");
        if (values_.size() != height_ * width_) throw ShapeError("AttentionMap: value count mismatch");
        for (double v : values_) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("AttentionMap: values must be finite and >= 0");
        }
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::span<const double> values() const noexcept { return values_; }
    double at(std::size_t y, std::size_t x) const { return values_[y * width_ + x]; }

  private:
    std::size_t height_, width_;
    std::vector<double> values_;
};

/// Continuous piecewise-linear cumulative function through knots F(0..n).
class MarginalCdf {
  public:
    MarginalCdf(Axis axis, std::vector<double> knots) : axis_(axis), knots_(std::move(knots)) {
        if (knots_.size() < 2) throw DomainError("MarginalCdf: need at least one segment");
        if (knots_.front() != 0.0) throw DomainError("MarginalCdf: F(0) must be 0");
        for (std::size_t k = 1; k < knots_.size(); ++k) {
            if (knots_[k] < knots_[k - 1]) throw DomainError("MarginalCdf: knots must be non-decreasing");
        }
        if (!(knots_.back() > 0.0)) throw DomainError("MarginalCdf: total mass must be positive");
    }

    Axis axis() const noexcept { return axis_; }
    std::span<const double> knots() const noexcept { return knots_; }
    std::size_t segments() const noexcept { return knots_.size() - 1; }
    double total() const noexcept { return knots_.back(); }

  private:
    Axis axis_;
    std::vector<double> knots_;
};

/// Source coordinates for every output row and column.
struct WarpGrid {
    std::vector<double> rows;
    std::vector<double> cols;
};

// ---------------------------------------------------------------------------
// Map selection

inline AttentionMap channel_map(const AttentionStack& stack, std::size_t index) {
    if (index >= stack.channels()) {
        throw IndexError("attention channel " + std::to_string(index) + " out of range (" +
                         std::to_string(stack.channels()) + " channels)");
    }
    const std::size_t plane = stack.height() * stack.width();
    const auto d = stack.tensor().data().subspan(index * plane, plane);
    return AttentionMap(stack.height(), stack.width(), std::vector<double>(d.begin(), d.end()));
}

/// Per-position mean over channels.
inline AttentionMap average_attention(const AttentionStack& stack) {
    const std::size_t c = stack.channels(), plane = stack.height() * stack.width();
    const auto d = stack.tensor().data();
    std::vector<double> mean(plane, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < plane; ++p) mean[p] += d[ch * plane + p];
    for (double& v : mean) v /= static_cast<double>(c);
    return AttentionMap(stack.height(), stack.width(), std::move(mean));
}

/// Pick one channel: uniformly at random, with probability proportional to
/// its total response, or a fixed index.
inline std::pair<AttentionMap, std::size_t> select_attention(const AttentionStack& stack, Selection strategy,
                                                             Rng& rng, std::size_t fixed_index = 0) {
    const std::size_t c = stack.channels();
    std::size_t index = 0;
    switch (strategy) {
        case Selection::FixedIndex: index = fixed_index; break;
        case Selection::Random: index = c == 1 ? 0 : rng.below(c); break;
        case Selection::ResponseRanked: {
            if (c == 1) break;
            const std::size_t plane = stack.height() * stack.width();
            const auto d = stack.tensor().data();
            std::vector<double> cumulative(c);
            double total = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t p = 0; p < plane; ++p) total += d[ch * plane + p];
                cumulative[ch] = total;
            }
            if (!(total > 0.0)) {
                index = rng.below(c);
                break;
            }
            const double u = rng.uniform() * total;
            index = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                             cumulative.begin());
            index = std::min(index, c - 1);
            break;
        }
    }
    return {channel_map(stack, index), index};
}

// ---------------------------------------------------------------------------
// Marginals and their integrals

/// Reduce the map along one axis with max or sum, then add
/// epsilon·mean(raw marginal) to every entry. An all-zero marginal becomes
/// uniform ones.
inline std::vector<double> marginal(const AttentionMap& map, Axis axis, Decomposition decomposition,
                                    double epsilon) {
    if (!(epsilon >= 0.0)) throw DomainError("marginal: epsilon must be >= 0");
    const std::size_t len = axis == Axis::X ? map.width() : map.height();
    const std::size_t across = axis == Axis::X ? map.height() : map.width();
    std::vector<double> out(len, 0.0);
    for (std::size_t k = 0; k < len; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < across; ++j) {
            const double v = axis == Axis::X ? map.at(j, k) : map.at(k, j);
            acc = decomposition == Decomposition::Max ? std::max(acc, v) : acc + v;
        }
        out[k] = acc;
    }
    double total = 0.0;
    for (double v : out) total += v;
    if (!(total > 0.0)) return std::vector<double>(len, 1.0);
    const double floor = epsilon * total / static_cast<double>(len);
    for (double& v : out) v += floor;
    return out;
}

/// F(0) = 0, F(k) = sum of the first k marginal entries.
inline MarginalCdf build_cdf(std::span<const double> marginal_values, Axis axis = Axis::X) {
    std::vector<double> knots(marginal_values.size() + 1, 0.0);
    for (std::size_t k = 0; k < marginal_values.size(); ++k) {
        if (!(marginal_values[k] >= 0.0)) throw DomainError("build_cdf: marginal entries must be >= 0");
        knots[k + 1] = knots[k] + marginal_values[k];
    }
    if (!(knots.back() > 0.0)) throw DomainError("build_cdf: marginal total must be positive");
    return MarginalCdf(axis, std::move(knots));
}

/// Source coordinate for each of out_len evenly spaced quantiles
/// u_i = (i + 0.5)·F(n)/out_len: solve F(t) = u_i on the piecewise-linear
/// cdf (flat stretches resolve to their left end), then map t from [0, n]
/// to pixel-centre coordinates of a source axis of length source_len.
inline std::vector<double> invert_cdf(const MarginalCdf& cdf, std::size_t out_len, std::size_t source_len) {
    if (out_len < 1 || source_len < 1) throw DomainError("invert_cdf: lengths must be positive");
    const auto F = cdf.knots();
    const std::size_t n = cdf.segments();
    const double to_source = static_cast<double>(source_len) / static_cast<double>(n);
    std::vector<double> coords(out_len);
    for (std::size_t i = 0; i < out_len; ++i) {
        const double u = (static_cast<double>(i) + 0.5) * cdf.total() / static_cast<double>(out_len);
        // First knot with F(k) >= u; F(0) = 0 < u, so k >= 1 and F(k-1) < u <= F(k).
        std::size_t k = static_cast<std::size_t>(std::lower_bound(F.begin(), F.end(), u) - F.begin());
        k = std::clamp<std::size_t>(k, 1, n);
        const double lo = F[k - 1], hi = F[k];
        double t = static_cast<double>(k - 1);
        if (hi > lo) t += std::clamp((u - lo) / (hi - lo), 0.0, 1.0);
        coords[i] = t * to_source - 0.5;
    }
    return coords;
}

// ---------------------------------------------------------------------------
// Interpolation

namespace detail {

struct Tap {
    std::size_t i0, i1;
    double frac;
};

// Clamp to the outermost pixel centres, then split into neighbours + weight.
inline Tap bilinear_tap(double coord, std::size_t n) {
    const double c = std::clamp(coord, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(c));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    return {i0, i1, c - static_cast<double>(i0)};
}

inline std::vector<double> warp_plane(std::span<const double> src, std::size_t h, std::size_t w,
                                      const WarpGrid& grid) {
    std::vector<Tap> cols(grid.cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) cols[j] = bilinear_tap(grid.cols[j], w);
    std::vector<double> out(grid.rows.size() * grid.cols.size());
    for (std::size_t i = 0; i < grid.rows.size(); ++i) {
        const Tap r = bilinear_tap(grid.rows[i], h);
        const double* top = src.data() + r.i0 * w;
        const double* bottom = src.data() + r.i1 * w;
        for (std::size_t j = 0; j < cols.size(); ++j) {
            const Tap& c = cols[j];
            const double upper = (1.0 - c.frac) * top[c.i0] + c.frac * top[c.i1];
            const double lower = (1.0 - c.frac) * bottom[c.i0] + c.frac * bottom[c.i1];
            out[i * cols.size() + j] = (1.0 - r.frac) * upper + r.frac * lower;
        }
    }
    return out;
}

}  // namespace detail

/// Half-pixel-centre grid of a plain resize from src to out.
inline WarpGrid uniform_grid(std::size_t src_h, std::size_t src_w, std::size_t out_h, std::size_t out_w) {
    WarpGrid g{std::vector<double>(out_h), std::vector<double>(out_w)};
    for (std::size_t i = 0; i < out_h; ++i)
        g.rows[i] = (static_cast<double>(i) + 0.5) * static_cast<double>(src_h) / static_cast<double>(out_h) - 0.5;
    for (std::size_t j = 0; j < out_w; ++j)
        g.cols[j] = (static_cast<double>(j) + 0.5) * static_cast<double>(src_w) / static_cast<double>(out_w) - 0.5;
    return g;
}

/// output(i, j) = bilinear sample of the source at (rows[i], cols[j]).
inline ImageBuffer warp(const ImageBuffer& image, const WarpGrid& grid) {
    if (grid.rows.empty() || grid.cols.empty()) throw ShapeError("warp: empty grid");
    const std::size_t h = image.height(), w = image.width(), plane = h * w;
    std::vector<double> out;
    out.reserve(image.channels() * grid.rows.size() * grid.cols.size());
    for (std::size_t c = 0; c < image.channels(); ++c) {
        auto p = detail::warp_plane(image.values().subspan(c * plane, plane), h, w, grid);
        for (double v : p) out.push_back(std::clamp(v, 0.0, 1.0));
    }
    return ImageBuffer(grid.rows.size(), grid.cols.size(), image.channels(), std::move(out));
}

inline ImageBuffer resize_bilinear(const ImageBuffer& image, std::size_t out_h, std::size_t out_w) {
    return warp(image, uniform_grid(image.height(), image.width(), out_h, out_w));
}

inline AttentionMap resize_bilinear(const AttentionMap& map, std::size_t out_h, std::size_t out_w) {
    if (map.height() == out_h && map.width() == out_w) return map;
    auto v = detail::warp_plane(map.values(), map.height(), map.width(),
                                uniform_grid(map.height(), map.width(), out_h, out_w));
    for (double& x : v) x = std::max(x, 0.0);
    return AttentionMap(out_h, out_w, std::move(v));
}

// ---------------------------------------------------------------------------
// End to end

/// Grid for a map already at source resolution.
inline WarpGrid attention_grid(const AttentionMap& map, const SamplerConfig& cfg) {
    cfg.validate();
    const auto mx = marginal(map, Axis::X, cfg.decomposition, cfg.epsilon);
    const auto my = marginal(map, Axis::Y, cfg.decomposition, cfg.epsilon);
    return WarpGrid{invert_cdf(build_cdf(my, Axis::Y), cfg.out_h, map.height()),
                    invert_cdf(build_cdf(mx, Axis::X), cfg.out_w, map.width())};
}

struct SampleResult {
    ImageBuffer image;
    std::optional<std::size_t> index;  // chosen channel in detail mode
    WarpGrid grid;
};

/// Structure mode samples under the channel average, detail mode under one
/// selected channel. The map is upsampled to the image size first.
inline SampleResult sample(const ImageBuffer& image, const AttentionStack& stack, SampleMode mode,
                           const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    std::optional<std::size_t> index;
    AttentionMap map = [&] {
        if (mode == SampleMode::Structure) return average_attention(stack);
        auto [m, idx] = select_attention(stack, cfg.selection, rng, cfg.fixed_index);
        index = idx;
        return std::move(m);
    }();
    const AttentionMap full = resize_bilinear(map, image.height(), image.width());
    WarpGrid grid = attention_grid(full, cfg);
    ImageBuffer out = warp(image, grid);
    return SampleResult{std::move(out), index, std::move(grid)};
}

}  // namespace tasn
