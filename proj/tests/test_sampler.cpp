#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "tasn/rng.hpp"
#include "tasn/sampler.hpp"

using namespace tasn;

namespace {

ImageBuffer random_image(std::size_t h, std::size_t w, std::size_t channels, Rng& rng) {
    std::vector<double> v(h * w * channels);
    for (double& x : v) x = rng.uniform();
    return ImageBuffer(h, w, channels, std::move(v));
}

std::vector<double> plane(const ImageBuffer& img, std::size_t c) {
    const auto v = img.values().subspan(c * img.height() * img.width(), img.height() * img.width());
    return {v.begin(), v.end()};
}

AttentionStack stack_from(std::size_t c, std::size_t h, std::size_t w, std::vector<double> v) {
    return AttentionStack(Tensor({c, h, w}, std::move(v)));
}

std::size_t count_in(const std::vector<double>& coords, double lo, double hi) {
    std::size_t n = 0;
    for (double x : coords) n += x >= lo && x < hi;
    return n;
}

}  // namespace

TEST(AverageAttention, Examples) {
    const AttentionMap m = average_attention(stack_from(2, 1, 2, {1, 0, 0, 1}));
    EXPECT_EQ(m.at(0, 0), 0.5);
    EXPECT_EQ(m.at(0, 1), 0.5);
    const AttentionMap single = average_attention(stack_from(1, 2, 2, {1, 2, 3, 4}));
    EXPECT_EQ(std::vector<double>(single.values().begin(), single.values().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(AverageAttention, MatchesDirectMean) {
    Rng rng(1);
    std::vector<double> v(4 * 9);
    for (double& x : v) x = rng.uniform();
    const AttentionMap m = average_attention(stack_from(4, 3, 3, v));
    for (std::size_t p = 0; p < 9; ++p) {
        const double mean = (v[p] + v[9 + p] + v[18 + p] + v[27 + p]) / 4.0;
        EXPECT_NEAR(m.values()[p], mean, 1e-12);
    }
}

TEST(SelectAttention, SingleChannelAlwaysZero) {
    Rng rng(2);
    const AttentionStack s = stack_from(1, 2, 2, {1, 2, 3, 4});
    for (Selection strategy : {Selection::Random, Selection::ResponseRanked}) {
        EXPECT_EQ(select_attention(s, strategy, rng).second, 0u);
    }
}

TEST(SelectAttention, RandomIsUniform) {
    Rng rng(3);
    const AttentionStack s = stack_from(4, 1, 2, std::vector<double>(8, 1.0));
    std::vector<std::size_t> counts(4, 0);
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws; ++i) ++counts[select_attention(s, Selection::Random, rng).second];
    for (std::size_t c : counts) EXPECT_NEAR(static_cast<double>(c) / draws, 0.25, 0.01);
}

TEST(SelectAttention, RankedIsProportionalToResponse) {
    Rng rng(4);
    const AttentionStack s = stack_from(2, 1, 2, {1.5, 1.5, 0.5, 0.5});  // responses 3 and 1
    std::size_t zero = 0;
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws; ++i) zero += select_attention(s, Selection::ResponseRanked, rng).second == 0;
    EXPECT_NEAR(static_cast<double>(zero) / draws, 0.75, 0.01);
}

TEST(SelectAttention, FixedIndexIsDeterministicAndChecked) {
    Rng rng(5);
    const AttentionStack s = stack_from(3, 1, 2, {0, 1, 2, 3, 4, 5});
    const auto [map, idx] = select_attention(s, Selection::FixedIndex, rng, 2);
    EXPECT_EQ(idx, 2u);
    EXPECT_EQ(map.at(0, 1), 5.0);
    EXPECT_THROW(select_attention(s, Selection::FixedIndex, rng, 3), IndexError);
}

TEST(Marginal, Examples) {
    const AttentionMap a(2, 2, {0, 1, 1, 0});
    EXPECT_EQ(marginal(a, Axis::X, Decomposition::Max, 0.0), (std::vector<double>{1, 1}));
    const AttentionMap b(2, 2, {0, 2, 0, 2});
    EXPECT_EQ(marginal(b, Axis::X, Decomposition::Sum, 0.0), (std::vector<double>{0, 4}));
    const AttentionMap z(2, 2, {0, 0, 0, 0});
    for (Axis axis : {Axis::X, Axis::Y}) EXPECT_EQ(marginal(z, axis, Decomposition::Max, 0.3), (std::vector<double>{1, 1}));
}

TEST(Marginal, AxisConventionAndFloor) {
    // 2 rows × 3 columns: axis X has one entry per column.
    const AttentionMap m(2, 3, {0, 1, 2, 3, 0, 0});
    EXPECT_EQ(marginal(m, Axis::X, Decomposition::Max, 0.0), (std::vector<double>{3, 1, 2}));
    EXPECT_EQ(marginal(m, Axis::Y, Decomposition::Sum, 0.0), (std::vector<double>{3, 3}));
    const auto f = marginal(m, Axis::X, Decomposition::Max, 0.5);  // mean 2 -> +1
    EXPECT_EQ(f, (std::vector<double>{4, 2, 3}));
    EXPECT_THROW(marginal(m, Axis::X, Decomposition::Max, -0.1), DomainError);
}

TEST(BuildCdf, Examples) {
    const std::vector<double> ones{1, 1, 1, 1};
    const MarginalCdf u = build_cdf(ones);
    EXPECT_EQ(std::vector<double>(u.knots().begin(), u.knots().end()), (std::vector<double>{0, 1, 2, 3, 4}));
    const std::vector<double> step{0, 2, 2, 0};
    const MarginalCdf s = build_cdf(step);
    EXPECT_EQ(std::vector<double>(s.knots().begin(), s.knots().end()), (std::vector<double>{0, 0, 2, 4, 4}));
    EXPECT_EQ(s.total(), 4.0);
    const std::vector<double> zero{0, 0};
    EXPECT_THROW(build_cdf(zero), DomainError);
    EXPECT_THROW(MarginalCdf(Axis::X, {0, 2, 1}), DomainError);
    EXPECT_THROW(MarginalCdf(Axis::X, {1, 2}), DomainError);
}

TEST(InvertCdf, Examples) {
    EXPECT_EQ(invert_cdf(MarginalCdf(Axis::X, {0, 1, 2, 3, 4}), 4, 4), (std::vector<double>{0, 1, 2, 3}));
    const auto c = invert_cdf(MarginalCdf(Axis::X, {0, 0, 2, 4, 4}), 4, 4);
    const std::vector<double> expected{0.75, 1.25, 1.75, 2.25};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c[i], expected[i], 1e-12);
    const auto oracle_c = oracle::dense_scan_inverse({0, 0, 2, 4, 4}, 4, 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c[i], oracle_c[i], 1e-6);
}

TEST(InvertCdf, SingleOutputIsTheMedian) {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> knots{0.0};
        for (int k = 0; k < 9; ++k) knots.push_back(knots.back() + rng.uniform());
        const auto c = invert_cdf(MarginalCdf(Axis::Y, knots), 1, 9);
        EXPECT_NEAR(c[0], oracle::dense_scan_inverse(knots, 1, 9)[0], 1e-6);
        EXPECT_NEAR(oracle::cdf_at(knots, c[0] + 0.5), knots.back() / 2, 1e-9);
    }
}

TEST(InvertCdf, FlatSegmentsResolveToLeftEndpoint) {
    // All mass in the last cell: every target lies in [3, 4].
    const auto c = invert_cdf(MarginalCdf(Axis::X, {0, 0, 0, 0, 1}), 2, 4);
    EXPECT_NEAR(c[0], 3.25 - 0.5, 1e-12);
    EXPECT_NEAR(c[1], 3.75 - 0.5, 1e-12);
}

TEST(InvertCdf, MatchesDenseScanAndIsMonotone) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(40), out = 1 + rng.below(64), src = 2 + rng.below(100);
        std::vector<double> m(n);
        for (double& v : m) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
        m[rng.below(n)] += 0.1;
        const MarginalCdf cdf = build_cdf(m);
        const auto got = invert_cdf(cdf, out, src);
        const auto ref = oracle::dense_scan_inverse(std::vector<double>(cdf.knots().begin(), cdf.knots().end()), out, src);
        for (std::size_t i = 0; i < out; ++i) {
            EXPECT_NEAR(got[i], ref[i], 1e-6);
            if (i > 0) {
                EXPECT_GE(got[i], got[i - 1]);
            }
            EXPECT_GE(got[i], -0.5);
            EXPECT_LE(got[i], static_cast<double>(src) - 0.5);
        }
    }
}

TEST(InvertCdf, MassProportionality) {
    const std::size_t n = 20;
    for (double p : {0.25, 0.5, 0.75}) {
        for (std::size_t out : {8u, 16u, 64u}) {
            // Cells [6, 11) hold fraction p of the mass.
            const double hi = p / 5.0, lo = (1.0 - p) / 15.0;
            std::vector<double> m(n, lo);
            for (std::size_t k = 6; k < 11; ++k) m[k] = hi;
            const auto coords = invert_cdf(build_cdf(m), out, n);
            const double inside = static_cast<double>(count_in(coords, 5.5, 10.5));
            EXPECT_NEAR(inside, std::round(p * static_cast<double>(out)), 1.0) << "p=" << p << " out=" << out;
        }
    }
}

TEST(InvertCdf, ScaleInvariance) {
    Rng rng(8);
    std::vector<double> m(12);
    for (double& v : m) v = rng.uniform();
    const auto base = invert_cdf(build_cdf(m), 16, 12);
    // Power-of-two factors only change exponents, so every step is exact.
    for (double k : {0.25, 2.0, 1024.0}) {
        std::vector<double> s = m;
        for (double& v : s) v *= k;
        EXPECT_EQ(invert_cdf(build_cdf(s), 16, 12), base);
    }
    for (double k : {3.0, 0.1, 7e5}) {
        std::vector<double> s = m;
        for (double& v : s) v *= k;
        const auto g = invert_cdf(build_cdf(s), 16, 12);
        for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], base[i], 1e-12);
    }
}

TEST(Warp, IdentityGridReproducesInput) {
    Rng rng(9);
    const ImageBuffer img = random_image(5, 7, 3, rng);
    EXPECT_EQ(warp(img, uniform_grid(5, 7, 5, 7)), img);
}

TEST(Warp, ConstantImageStaysConstant) {
    Rng rng(10);
    const ImageBuffer img = ImageBuffer::filled(6, 6, 1, 0.3);
    std::vector<double> m(6);
    for (double& v : m) v = rng.uniform();
    const auto coords = invert_cdf(build_cdf(m), 9, 6);
    const ImageBuffer out = warp(img, WarpGrid{coords, coords});
    for (double v : out.values()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Warp, RampUnderStepGridMatchesPerPixelOracle) {
    std::vector<double> ramp(16);
    for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i) / 15.0;
    const ImageBuffer img(4, 4, 1, ramp);
    const auto coords = invert_cdf(MarginalCdf(Axis::X, {0, 0, 2, 4, 4}), 4, 4);
    const ImageBuffer out = warp(img, WarpGrid{coords, coords});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            EXPECT_NEAR(out.at(0, i, j), oracle::bilinear_at(ramp, 4, 4, coords[i], coords[j]), 1e-12);
}

TEST(Warp, UniformGridIsStandardBilinearResize) {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const ImageBuffer img = random_image(9, 13, 1, rng);
        for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{4, 5}, {16, 20}, {9, 13}, {2, 31}}) {
            const ImageBuffer out = resize_bilinear(img, oh, ow);
            const auto ref = oracle::resize(plane(img, 0), 9, 13, oh, ow);
            for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.values()[i], ref[i], 1e-12);
        }
    }
}

TEST(Sample, UniformAttentionEqualsBilinearResize) {
    Rng rng(12);
    SamplerConfig cfg;
    for (int trial = 0; trial < 20; ++trial) {
        const ImageBuffer img = random_image(10 + rng.below(30), 10 + rng.below(30), trial % 2 ? 3 : 1, rng);
        const AttentionStack flat(Tensor::full({3, 1 + rng.below(8), 1 + rng.below(8)}, 0.2 + rng.uniform()));
        for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{2, 2}, {5, 7}, {16, 16}, {23, 11}, {40, 40}}) {
            cfg.out_h = oh;
            cfg.out_w = ow;
            const ImageBuffer out = sample(img, flat, SampleMode::Structure, cfg, rng).image;
            for (std::size_t c = 0; c < img.channels(); ++c) {
                const auto ref = oracle::resize(plane(img, c), img.height(), img.width(), oh, ow);
                const auto got = plane(out, c);
                for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(got[i], ref[i], 1e-9);
            }
        }
    }
}

TEST(Sample, CornerHotspotAttractsMostSamples) {
    Rng rng(13);
    std::vector<double> v(2 * 8 * 8, 0.0);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) v[y * 8 + x] = 1.0;  // channel 0 hot in its top-left 2×2
    for (std::size_t p = 64; p < 128; ++p) v[p] = 0.5;          // channel 1 flat
    const AttentionStack stack = stack_from(2, 8, 8, v);
    SamplerConfig cfg;
    cfg.epsilon = 0.05;
    cfg.out_h = cfg.out_w = 8;
    cfg.selection = Selection::FixedIndex;
    cfg.fixed_index = 0;
    const ImageBuffer img = random_image(16, 16, 1, rng);
    const SampleResult r = sample(img, stack, SampleMode::Detail, cfg, rng);
    ASSERT_EQ(r.index, std::optional<std::size_t>(0));
    // The corner covers source rows/cols [0, 4) of the 16×16 image.
    const double rows = static_cast<double>(count_in(r.grid.rows, -0.5, 3.5)) / 8.0;
    const double cols = static_cast<double>(count_in(r.grid.cols, -0.5, 3.5)) / 8.0;
    EXPECT_GE(rows, 0.6);
    EXPECT_GE(cols, 0.6);
    EXPECT_GE(rows * cols, 0.6);
}

TEST(Sample, StructureModeIgnoresRng) {
    Rng a(14), b(99);
    Rng gen(15);
    const ImageBuffer img = random_image(12, 12, 1, gen);
    std::vector<double> v(3 * 4 * 4);
    for (double& x : v) x = gen.uniform();
    const AttentionStack s = stack_from(3, 4, 4, v);
    SamplerConfig cfg;
    EXPECT_EQ(sample(img, s, SampleMode::Structure, cfg, a).image, sample(img, s, SampleMode::Structure, cfg, b).image);
    EXPECT_FALSE(sample(img, s, SampleMode::Structure, cfg, a).index.has_value());
}

TEST(Sample, DetailModeIsReproducibleForAFixedSeed) {
    Rng gen(16);
    const ImageBuffer img = random_image(12, 12, 1, gen);
    std::vector<double> v(4 * 6 * 6);
    for (double& x : v) x = gen.uniform();
    const AttentionStack s = stack_from(4, 6, 6, v);
    SamplerConfig cfg;
    Rng a(7), b(7);
    const SampleResult ra = sample(img, s, SampleMode::Detail, cfg, a);
    const SampleResult rb = sample(img, s, SampleMode::Detail, cfg, b);
    EXPECT_EQ(ra.image, rb.image);
    EXPECT_EQ(ra.index, rb.index);
}

TEST(SamplerConfig, Validation) {
    SamplerConfig cfg;
    cfg.epsilon = -1;
    EXPECT_THROW(cfg.validate(), DomainError);
    cfg = SamplerConfig{};
    cfg.out_h = 0;
    EXPECT_THROW(cfg.validate(), DomainError);
    EXPECT_EQ(SamplerConfig{}.decomposition, Decomposition::Max);
    EXPECT_EQ(SamplerConfig{}.epsilon, 0.01);
}
