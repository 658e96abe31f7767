#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <sstream>
#include <string>

#include "tasn/image.hpp"
#include "tasn/rng.hpp"
#include "tasn/sampler.hpp"
#include "tasn/tnsr.hpp"
#include "tasn/trilinear.hpp"

using namespace tasn;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out, err;
};

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
  protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("tasn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }

    fs::path path(const std::string& name) const { return dir_ / name; }

    CliResult run(const std::string& args) const {
        const std::string cmd = std::string("'") + TASN_CLI_PATH + "' " + args + " >'" + path("stdout").string() +
                                "' 2>'" + path("stderr").string() + "'";
        const int status = std::system(cmd.c_str());
        CliResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = read_text(path("stdout"));
        r.err = read_text(path("stderr"));
        return r;
    }

    fs::path dir_;
};

}  // namespace

TEST_F(Cli, AttendRawCopiesPayload) {
    const Tensor x({2, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    write_tnsr(path("x.tnsr"), x);
    const CliResult r = run("attend --features " + path("x.tnsr").string() + " --variant RAW --out " + path("m.tnsr").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_text(path("m.tnsr")), read_text(path("x.tnsr")));
}

TEST_F(Cli, AttendDefaultOnIdentityExample) {
    write_tnsr(path("x.tnsr"), Tensor({2, 1, 2}, {1, 0, 0, 1}));
    const CliResult r = run("attend --features " + path("x.tnsr").string() + " --out " + path("m.tnsr").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const Tensor m = read_tnsr(path("m.tnsr"));
    const Tensor expected = attention(FeatureMaps(Tensor({2, 1, 2}, {1, 0, 0, 1})), AttentionVariant::SnRn).tensor();
    ASSERT_EQ(m.shape(), expected.shape());
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(m[i], expected[i], 1e-7);  // stored as f32
    EXPECT_NEAR(m[0], 0.6135, 1e-3);
}

TEST_F(Cli, AttendErrorsExitTwoWithoutOutput) {
    CliResult r = run("attend --features " + path("missing.tnsr").string() + " --out " + path("m.tnsr").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(fs::exists(path("m.tnsr")));
    EXPECT_FALSE(r.err.empty());

    std::ofstream(path("bad.tnsr")) << "NOPE";
    r = run("attend --features " + path("bad.tnsr").string() + " --out " + path("m.tnsr").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(fs::exists(path("m.tnsr")));
    EXPECT_FALSE(fs::exists(path("m.tnsr.tmp")));

    write_tnsr(path("two.tnsr"), Tensor({2, 2}, {1, 2, 3, 4}));
    r = run("attend --features " + path("two.tnsr").string() + " --out " + path("m.tnsr").string());
    EXPECT_EQ(r.code, 2);
    r = run("attend --features " + path("two.tnsr").string() + " --variant XYZ --out " + path("m.tnsr").string());
    EXPECT_EQ(r.code, 2);
    r = run("attend --bogus");
    EXPECT_EQ(r.code, 2);
    r = run("");
    EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, HelpListsDefaults) {
    CliResult r = run("train --help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("--temperature"), std::string::npos);
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--temperature[^\n]*10)"))) << r.out;
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--lambda[^\n]*2)"))) << r.out;
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--epsilon[^\n]*0\.01)"))) << r.out;
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--decompose[^\n]*max)"))) << r.out;
    r = run("sample --help");
    EXPECT_EQ(r.code, 0);
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--epsilon[^\n]*0\.01)"))) << r.out;
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--decompose[^\n]*max)"))) << r.out;
    EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(--out-size[^\n]*16x16)"))) << r.out;
    for (const char* sub : {"attend", "gen-data", "eval", "gradcheck"}) EXPECT_EQ(run(std::string(sub) + " --help").code, 0);
}

TEST_F(Cli, GradcheckPasses) {
    const CliResult r = run("gradcheck --trials 5");
    EXPECT_EQ(r.code, 0) << r.out << r.err;
    EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
    EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST_F(Cli, SampleUniformMatchesResizeAndIsDeterministic) {
    Rng rng(1);
    std::vector<double> px(20 * 24);
    for (double& v : px) v = static_cast<double>(rng.below(256)) / 255.0;
    const ImageBuffer img(20, 24, 1, px);
    write_pnm(path("img.pgm"), img);
    write_tnsr(path("u.tnsr"), Tensor::full({3, 5, 6}, 0.25));
    const std::string base = "sample --image " + path("img.pgm").string() + " --attention " + path("u.tnsr").string();
    CliResult r = run(base + " --out-size 8x12 --out " + path("s.pgm").string());
    ASSERT_EQ(r.code, 0) << r.err;
    // 8-bit output: values within 1e-9 of the resize can round to either side of a half step.
    const ImageBuffer got = read_pnm(path("s.pgm"));
    const ImageBuffer ref = resize_bilinear(img, 8, 12);
    for (std::size_t i = 0; i < ref.values().size(); ++i) {
        const double exact = ref.values()[i] * 255.0;
        const double lo = std::round(exact - 1e-6), hi = std::round(exact + 1e-6);
        const double byte = got.values()[i] * 255.0;
        EXPECT_TRUE(std::abs(byte - lo) < 1e-9 || std::abs(byte - hi) < 1e-9) << i;
    }

    r = run(base + " --mode detail --seed 5 --out " + path("d1.pgm").string());
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string idx = r.out;
    r = run(base + " --mode detail --seed 5 --out " + path("d2.pgm").string());
    EXPECT_EQ(r.out, idx);
    EXPECT_TRUE(std::regex_match(idx, std::regex("[0-2]\n")));
    EXPECT_EQ(read_text(path("d1.pgm")), read_text(path("d2.pgm")));

    EXPECT_EQ(run(base + " --out-size 0x4 --out " + path("e.pgm").string()).code, 2);
    EXPECT_EQ(run(base + " --decompose mean --out " + path("e.pgm").string()).code, 2);
    EXPECT_FALSE(fs::exists(path("e.pgm")));
}

TEST_F(Cli, SampleRejectsEmptyAttention) {
    write_pnm(path("img.pgm"), ImageBuffer(4, 4, 1, std::vector<double>(16, 0.5)));
    // A TNSR file with a zero dimension: hand-built since the encoder refuses it.
    auto bytes = encode_tnsr(Tensor({1, 1}, {1.0}));
    bytes[7] = 0;
    bytes.resize(7 + 8);
    std::ofstream(path("z.tnsr"), std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    const CliResult r = run("sample --image " + path("img.pgm").string() + " --attention " + path("z.tnsr").string() +
                      " --out " + path("o.pgm").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(fs::exists(path("o.pgm")));
}

TEST_F(Cli, SampleCornerHotspotIsMagnified) {
    const std::size_t n = 64;
    std::vector<double> px(n * n, 0.0);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) px[y * n + x] = 1.0;  // hotspot region painted white
    write_pnm(path("img.pgm"), ImageBuffer(n, n, 1, px));
    Tensor att = Tensor::zeros({1, 8, 8});
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) att.mutable_data()[y * 8 + x] = 1.0;
    write_tnsr(path("a.tnsr"), att);
    const CliResult r = run("sample --image " + path("img.pgm").string() + " --attention " + path("a.tnsr").string() +
                      " --mode detail --index 0 --epsilon 0.05 --out " + path("o.pgm").string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, "0\n");
    const ImageBuffer out = read_pnm(path("o.pgm"));
    std::size_t hot = 0;
    for (double v : out.values()) hot += v > 0.5;
    EXPECT_GE(static_cast<double>(hot), 0.6 * static_cast<double>(out.values().size()));
}

TEST_F(Cli, DataTrainEvalRoundTrip) {
    const std::string data = path("data").string();
    CliResult r = run("gen-data --classes 8 --per-class 2 --test-per-class 25 --seed 3 --out " + data);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("data") / "train" / "labels.txt"));
    EXPECT_TRUE(fs::exists(path("data") / "test" / "labels.txt"));
    const std::string first = read_text(path("data") / "train" / "00000.pgm");
    ASSERT_EQ(run("gen-data --classes 8 --per-class 2 --test-per-class 25 --seed 3 --out " + path("data2").string()).code, 0);
    EXPECT_EQ(read_text(path("data2") / "train" / "00000.pgm"), first);

    // Untrained checkpoint: zero epochs.
    r = run("train --data " + data + " --model " + path("untrained.ckpt").string() + " --epochs 0 --seed 1");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(r.out.empty());
    r = run("eval --data " + data + " --model " + path("untrained.ckpt").string());
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_TRUE(std::regex_match(r.out, std::regex(R"(\d\.\d{4}\n)"))) << r.out;
    const double sigma = std::sqrt(0.125 * 0.875 / 200.0);
    EXPECT_NEAR(std::stod(r.out), 0.125, 3.0 * sigma);

    const std::regex metric(R"(\d+\t\d+\.\d+\t\d\.\d{4})");
    for (const std::string extra : {"", " --lambda 0", " --baseline", " --no-detail --lambda 0"}) {
        const std::string ckpt = path("m.ckpt").string();
        r = run("train --data " + data + " --model " + ckpt + " --epochs 2 --seed 1" + extra);
        ASSERT_EQ(r.code, 0) << extra << r.err;
        std::istringstream lines(r.out);
        std::string line;
        std::size_t count = 0;
        while (std::getline(lines, line)) {
            EXPECT_TRUE(std::regex_match(line, metric)) << line;
            ++count;
        }
        EXPECT_EQ(count, 2u) << extra;
        const std::string metrics = r.out;
        const std::string bytes = read_text(ckpt);
        r = run("train --data " + data + " --model " + ckpt + " --epochs 2 --seed 1" + extra);
        EXPECT_EQ(r.out, metrics) << extra;
        EXPECT_EQ(read_text(ckpt), bytes) << extra;
        r = run("eval --data " + data + " --model " + ckpt);
        EXPECT_EQ(r.code, 0) << extra << r.err;
        // The last metric line reports the same test accuracy eval recomputes.
        EXPECT_EQ(metrics.substr(metrics.rfind('\t') + 1), r.out) << extra;
    }

    EXPECT_EQ(run("train --data " + data + " --model " + path("x.ckpt").string() + " --lr -1").code, 2);
    EXPECT_EQ(run("train --data " + data + " --model " + path("x.ckpt").string() + " --sample-size 16").code, 2);
    EXPECT_EQ(run("train --data " + path("nowhere").string() + " --model " + path("x.ckpt").string()).code, 2);
    EXPECT_FALSE(fs::exists(path("x.ckpt")));
    std::ofstream(path("junk.ckpt")) << "junk";
    EXPECT_EQ(run("eval --data " + data + " --model " + path("junk.ckpt").string()).code, 2);
}
