#pragma once

// Synthetic fine-grained dataset. Every image shows the same soft-edged
// blob (the shared coarse "object"); the class is carried only by a small
// binary glyph stamped at a random spot inside the blob. Uniform 4×
// downsampling shrinks the glyph to about one pixel.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "image.hpp"
#include "rng.hpp"

namespace tasn {

struct SynthSpec {
    std::size_t classes = 8;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t glyph = 4;  // glyph side in pixels
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 50;
    std::uint64_t seed = 0;

    void validate() const {
        if (classes < 2) throw DomainError("SynthSpec: need at least 2 classes");
        if (glyph < 2) throw DomainError("SynthSpec: glyph must be at least 2x2");
        if (height < 8 * glyph || width < 8 * glyph) throw DomainError("SynthSpec: image too small for glyph");
        if (50 * glyph * glyph >= height * width) throw DomainError("SynthSpec: glyph must cover < 2% of the image");
        if (train_per_class < 1) throw DomainError("SynthSpec: need at least one training image per class");
    }
};

/// glyph×glyph binary pattern, row-major.
using Glyph = std::vector<std::uint8_t>;

struct Example {
    ImageBuffer image;
    std::size_t label = 0;
    std::size_t glyph_row = 0;  // top-left corner of the stamped glyph
    std::size_t glyph_col = 0;
};

struct Dataset {
    std::vector<Glyph> glyphs;
    std::vector<Example> train;
    std::vector<Example> test;
};

inline std::size_t hamming(const Glyph& a, const Glyph& b) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

/// Balanced patterns (half the cells on) with pairwise Hamming distance of
/// at least 3/8 of the cells, drawn by rejection.
inline std::vector<Glyph> make_glyph_table(std::size_t classes, std::size_t side, Rng& rng) {
    const std::size_t cells = side * side;
    const std::size_t min_distance = (3 * cells + 7) / 8;
    std::vector<Glyph> table;
    for (std::size_t attempts = 0; table.size() < classes; ++attempts) {
        if (attempts > 100000) throw DomainError("make_glyph_table: could not find distinct glyphs");
        Glyph g(cells, 0);
        std::fill(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(cells / 2), 1);
        for (std::size_t i = cells - 1; i > 0; --i) std::swap(g[i], g[rng.below(i + 1)]);
        const bool distinct = std::all_of(table.begin(), table.end(),
                                          [&](const Glyph& other) { return hamming(g, other) >= min_distance; });
        if (distinct) table.push_back(std::move(g));
    }
    return table;
}

namespace detail {

struct BlobParams {
    double cy, cx, ry, rx;
};

inline double smoothstep(double lo, double hi, double x) {
    const double t = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

inline Example render_example(const SynthSpec& spec, const Glyph& glyph, std::size_t label, Rng& rng) {
    constexpr double kBackground = 0.40, kObject = 0.60, kOn = 0.95, kOff = 0.05, kNoise = 0.01;
    const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
    const BlobParams blob{h / 2 + (rng.uniform() - 0.5) * h / 8, w / 2 + (rng.uniform() - 0.5) * w / 8,
                          h * (0.30 + 0.05 * rng.uniform()), w * (0.36 + 0.05 * rng.uniform())};
    auto radius = [&](double y, double x) {
        const double dy = (y - blob.cy) / blob.ry, dx = (x - blob.cx) / blob.rx;
        return std::sqrt(dy * dy + dx * dx);
    };

    // Glyph corner: all four corners well inside the blob.
    const std::size_t g = spec.glyph;
    std::size_t gy = 0, gx = 0;
    for (;;) {
        gy = rng.below(spec.height - g + 1);
        gx = rng.below(spec.width - g + 1);
        const double y0 = static_cast<double>(gy), x0 = static_cast<double>(gx), gs = static_cast<double>(g);
        if (radius(y0, x0) < 0.7 && radius(y0 + gs, x0) < 0.7 && radius(y0, x0 + gs) < 0.7 &&
            radius(y0 + gs, x0 + gs) < 0.7) {
            break;
        }
    }

    std::vector<double> values(spec.height * spec.width);
    for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
            const double r = radius(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5);
            double v = kBackground + (kObject - kBackground) * (1.0 - smoothstep(0.8, 1.2, r));
            if (y >= gy && y < gy + g && x >= gx && x < gx + g) v = glyph[(y - gy) * g + (x - gx)] ? kOn : kOff;
            values[y * spec.width + x] = std::clamp(v + kNoise * rng.normal(), 0.0, 1.0);
        }
    }
    return Example{ImageBuffer(spec.height, spec.width, 1, std::move(values)), label, gy, gx};
}

}  // namespace detail

/// Deterministic in spec.seed. Examples are ordered by class within each
/// split; training code shuffles.
inline Dataset generate_dataset(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Dataset ds;
    ds.glyphs = make_glyph_table(spec.classes, spec.glyph, rng);
    for (std::size_t c = 0; c < spec.classes; ++c)
        for (std::size_t i = 0; i < spec.train_per_class; ++i)
            ds.train.push_back(detail::render_example(spec, ds.glyphs[c], c, rng));
    for (std::size_t c = 0; c < spec.classes; ++c)
        for (std::size_t i = 0; i < spec.test_per_class; ++i)
            ds.test.push_back(detail::render_example(spec, ds.glyphs[c], c, rng));
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/train and <dir>/test, each holding numbered PGM
// files and labels.txt with lines "filename<TAB>class-index".

inline void save_split(const std::filesystem::path& dir, const std::vector<Example>& examples) {
    std::filesystem::create_directories(dir);
    std::ostringstream labels;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        std::ostringstream name;
        name << std::setw(5) << std::setfill('0') << i << ".pgm";
        write_pnm(dir / name.str(), examples[i].image);
        labels << name.str() << '\t' << examples[i].label << '\n';
    }
    const std::string text = labels.str();
    write_file_atomic(dir / "labels.txt", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Writes into a temporary sibling directory and renames it into place.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::path tmp = dir;
    tmp += ".tmp";
    std::filesystem::remove_all(tmp);
    save_split(tmp / "train", ds.train);
    save_split(tmp / "test", ds.test);
    std::filesystem::remove_all(dir);
    std::filesystem::rename(tmp, dir);
}

inline std::vector<Example> load_split(const std::filesystem::path& dir) {
    std::ifstream in(dir / "labels.txt");
    if (!in) throw FormatError("cannot open " + (dir / "labels.txt").string());
    std::vector<Example> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("labels.txt: expected filename<TAB>class-index");
        std::size_t label = 0;
        try {
            label = std::stoul(line.substr(tab + 1));
        } catch (const std::exception&) {
            throw FormatError("labels.txt: bad class index in line: " + line);
        }
        out.push_back(Example{read_pnm(dir / line.substr(0, tab)), label, 0, 0});
    }
    return out;
}

/// Glyph table and glyph positions are not stored on disk.
inline Dataset load_dataset(const std::filesystem::path& dir) {
    return Dataset{{}, load_split(dir / "train"), load_split(dir / "test")};
}

}  // namespace tasn
