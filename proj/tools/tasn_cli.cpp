// tasn: command-line front end for attention maps, attention sampling,
// synthetic data, training, evaluation and gradient verification.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or input error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tasn/gradcheck_suite.hpp"
#include "tasn/image.hpp"
#include "tasn/model.hpp"
#include "tasn/sampler.hpp"
#include "tasn/synth.hpp"
#include "tasn/tnsr.hpp"
#include "tasn/train.hpp"
#include "tasn/trilinear.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitUsage = 2;

struct UsageFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
    const auto x = text.find('x');
    try {
        if (x == std::string::npos) throw UsageFailure("");
        std::size_t used = 0;
        const std::size_t h = std::stoul(text.substr(0, x), &used);
        if (used != x) throw UsageFailure("");
        const std::string rest = text.substr(x + 1);
        const std::size_t w = std::stoul(rest, &used);
        if (used != rest.size() || h == 0 || w == 0) throw UsageFailure("");
        return {h, w};
    } catch (const std::exception&) {
        throw UsageFailure("size must be HxW with positive integers, got '" + text + "'");
    }
}

tasn::AttentionVariant parse_variant(const std::string& name) {
    const auto v = tasn::parse_attention_variant(name);
    if (!v) throw UsageFailure("unknown attention variant '" + name + "'");
    return *v;
}

tasn::Decomposition parse_decomposition(const std::string& name) {
    const auto d = tasn::parse_decomposition(name);
    if (!d) throw UsageFailure("decomposition must be max or sum, got '" + name + "'");
    return *d;
}

void require_parent_dir(const fs::path& out) {
    const fs::path parent = out.has_parent_path() ? out.parent_path() : fs::path(".");
    if (!fs::is_directory(parent)) throw UsageFailure("output directory does not exist: " + parent.string());
}

// ---------------------------------------------------------------------------
// attend

struct AttendArgs {
    std::string features, variant = "SN_RN", out;
};

int run_attend(const AttendArgs& a) {
    const auto variant = parse_variant(a.variant);
    require_parent_dir(a.out);
    const tasn::Tensor x = tasn::read_tnsr(a.features);
    if (x.ndim() != 3) throw tasn::FormatError("features must be a 3-d c×h×w tensor, got " + tasn::shape_str(x.shape()));
    const tasn::AttentionStack stack = tasn::attention(tasn::FeatureMaps(x), variant);
    tasn::write_tnsr(a.out, stack.tensor());
    return kExitOk;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
    std::string image, attention, mode = "structure", selection = "random", out_size = "16x16", decompose = "max", out;
    std::optional<std::size_t> index;
    double epsilon = 0.01;
    std::uint64_t seed = 0;
};

int run_sample(const SampleArgs& a) {
    tasn::SamplerConfig cfg;
    std::tie(cfg.out_h, cfg.out_w) = parse_size(a.out_size);
    cfg.decomposition = parse_decomposition(a.decompose);
    cfg.epsilon = a.epsilon;
    if (a.mode != "structure" && a.mode != "detail") throw UsageFailure("mode must be structure or detail");
    const auto mode = a.mode == "structure" ? tasn::SampleMode::Structure : tasn::SampleMode::Detail;
    if (a.index) {
        cfg.selection = tasn::Selection::FixedIndex;
        cfg.fixed_index = *a.index;
    } else if (a.selection == "ranked") {
        cfg.selection = tasn::Selection::ResponseRanked;
    } else if (a.selection != "random") {
        throw UsageFailure("selection must be random or ranked");
    }
    cfg.validate();
    require_parent_dir(a.out);

    const tasn::ImageBuffer image = tasn::read_pnm(a.image);
    const tasn::AttentionStack stack(tasn::read_tnsr(a.attention));
    tasn::Rng rng(a.seed);
    const tasn::SampleResult r = tasn::sample(image, stack, mode, cfg, rng);
    tasn::write_pnm(a.out, r.image);
    if (r.index) std::cout << *r.index << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
    std::size_t classes = 8, per_class = 200, test_per_class = 50, size = 64, glyph = 4;
    std::uint64_t seed = 0;
    std::string out;
};

int run_gen_data(const GenArgs& a) {
    tasn::SynthSpec spec;
    spec.classes = a.classes;
    spec.train_per_class = a.per_class;
    spec.test_per_class = a.test_per_class;
    spec.height = spec.width = a.size;
    spec.glyph = a.glyph;
    spec.seed = a.seed;
    spec.validate();
    require_parent_dir(fs::absolute(a.out));
    tasn::save_dataset(a.out, tasn::generate_dataset(spec));
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train / eval

struct TrainArgs {
    std::string data, model, sample_size = "16x16", decompose = "max", variant = "SN_RN";
    std::size_t epochs = 30, batch = 16, channels = 8;
    double lr = 0.05, lambda = 2.0, temperature = 10.0, epsilon = 0.01;
    std::uint64_t seed = 0;
    bool baseline = false, no_detail = false;
};

tasn::CheckpointMeta model_meta(const std::string& kind, const tasn::ModelConfig& m, const tasn::SamplerConfig& s) {
    return {{"kind", kind},
            {"image_channels", std::to_string(m.image_channels)},
            {"classes", std::to_string(m.classes)},
            {"attention_channels", std::to_string(m.attention_channels)},
            {"net_channels", std::to_string(m.net_channels)},
            {"variant", std::string(tasn::to_string(m.variant))},
            {"share_heads", m.share_heads ? "1" : "0"},
            {"sample_h", std::to_string(s.out_h)},
            {"sample_w", std::to_string(s.out_w)},
            {"decompose", std::string(tasn::to_string(s.decomposition))},
            {"epsilon", [&] {
                 char buf[64];
                 std::snprintf(buf, sizeof buf, "%.17g", s.epsilon);
                 return std::string(buf);
             }()}};
}

int run_train(const TrainArgs& a) {
    tasn::TrainConfig cfg;
    cfg.epochs = a.epochs;
    cfg.learning_rate = a.lr;
    cfg.batch_size = a.batch;
    cfg.distill = {a.temperature, a.lambda};
    cfg.sampler.decomposition = parse_decomposition(a.decompose);
    cfg.sampler.epsilon = a.epsilon;
    std::tie(cfg.sampler.out_h, cfg.sampler.out_w) = parse_size(a.sample_size);
    cfg.detail_branch = !a.no_detail;
    cfg.seed = a.seed;
    cfg.validate();
    require_parent_dir(a.model);

    const tasn::Dataset data = tasn::load_dataset(a.data);
    if (data.train.empty()) throw tasn::FormatError("training split is empty");
    tasn::ModelConfig mcfg;
    mcfg.image_channels = data.train.front().image.channels();
    std::size_t max_label = 0;
    for (const auto& ex : data.train) max_label = std::max(max_label, ex.label);
    mcfg.classes = std::max<std::size_t>(2, max_label + 1);
    mcfg.attention_channels = a.channels;
    mcfg.net_channels = a.channels;
    mcfg.variant = parse_variant(a.variant);

    auto report = [](const tasn::EpochMetrics& m) {
        std::printf("%zu\t%.6f\t%.4f\n", m.epoch, m.train_loss, m.test_accuracy);
        std::fflush(stdout);
    };
    tasn::RunStreams streams(cfg.seed);
    if (a.baseline) {
        tasn::BaselineModel model = tasn::make_baseline_model(mcfg, streams.init);
        tasn::train_baseline(model, data, cfg, streams, report);
        tasn::write_file_atomic(a.model, tasn::encode_checkpoint(tasn::named_parameters(model),
                                                                 model_meta("baseline", mcfg, cfg.sampler)));
    } else {
        tasn::TasnModel model = tasn::make_tasn_model(mcfg, streams.init);
        tasn::train_tasn(model, data, cfg, streams, report);
        tasn::write_file_atomic(a.model, tasn::encode_checkpoint(tasn::named_parameters(model),
                                                                 model_meta("tasn", mcfg, cfg.sampler)));
    }
    return kExitOk;
}

struct EvalArgs {
    std::string data, model;
};

std::size_t meta_size(const tasn::CheckpointMeta& meta, const std::string& key) {
    const auto it = meta.find(key);
    if (it == meta.end()) throw tasn::FormatError("checkpoint: missing metadata '" + key + "'");
    try {
        return std::stoul(it->second);
    } catch (const std::exception&) {
        throw tasn::FormatError("checkpoint: bad metadata '" + key + "'");
    }
}

int run_eval(const EvalArgs& a) {
    const tasn::Checkpoint ck = tasn::decode_checkpoint(tasn::read_file_bytes(a.model));
    tasn::ModelConfig mcfg;
    mcfg.image_channels = meta_size(ck.meta, "image_channels");
    mcfg.classes = meta_size(ck.meta, "classes");
    mcfg.attention_channels = meta_size(ck.meta, "attention_channels");
    mcfg.net_channels = meta_size(ck.meta, "net_channels");
    mcfg.share_heads = meta_size(ck.meta, "share_heads") != 0;
    tasn::SamplerConfig scfg;
    scfg.out_h = meta_size(ck.meta, "sample_h");
    scfg.out_w = meta_size(ck.meta, "sample_w");
    const auto find = [&](const std::string& key) {
        const auto it = ck.meta.find(key);
        if (it == ck.meta.end()) throw tasn::FormatError("checkpoint: missing metadata '" + key + "'");
        return it->second;
    };
    mcfg.variant = parse_variant(find("variant"));
    scfg.decomposition = parse_decomposition(find("decompose"));
    scfg.epsilon = std::stod(find("epsilon"));

    const auto test = tasn::load_split(fs::path(a.data) / "test");
    tasn::Rng unused(0);
    double acc = 0.0;
    const std::string kind = find("kind");
    if (kind == "baseline") {
        tasn::BaselineModel model = tasn::make_baseline_model(mcfg, unused);
        tasn::assign_parameters(tasn::named_parameters(model), ck);
        acc = tasn::evaluate(model, test, scfg);
    } else if (kind == "tasn") {
        tasn::TasnModel model = tasn::make_tasn_model(mcfg, unused);
        tasn::assign_parameters(tasn::named_parameters(model), ck);
        acc = tasn::evaluate(model, test, scfg);
    } else {
        throw tasn::FormatError("checkpoint: unknown model kind '" + kind + "'");
    }
    std::printf("%.4f\n", acc);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
    std::size_t trials = 100;
    std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& a) {
    const auto results = tasn::run_gradient_suite(a.trials, a.seed);
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-28s %s  max_rel_err=%.3e  tol=%.0e  checked=%zu  skipped=%zu\n", r.name.c_str(),
                    r.passed ? "PASS" : "FAIL", r.max_rel_error, r.tolerance, r.checked, r.skipped);
        ok = ok && r.passed;
    }
    return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trilinear attention sampling: attention maps, attention-guided sampling, distillation training"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    AttendArgs attend;
    auto* c_attend = app.add_subcommand("attend", "Compute trilinear attention maps from c×h×w feature maps");
    c_attend->add_option("--features", attend.features, "Input feature maps (TNSR, 3-d)")
        ->required()
        ->check(CLI::ExistingFile);
    c_attend->add_option("--variant", attend.variant, "RAW, TRI, SN_TRI, SN_SN, POST_SN, RN or SN_RN");
    c_attend->add_option("--out", attend.out, "Output attention stack (TNSR)")->required();

    SampleArgs smp;
    auto* c_sample = app.add_subcommand("sample", "Attention-guided non-uniform resampling of an image");
    c_sample->add_option("--image", smp.image, "Input image (PGM/PPM)")->required()->check(CLI::ExistingFile);
    c_sample->add_option("--attention", smp.attention, "Attention map or stack (TNSR, 2-d or 3-d)")
        ->required()
        ->check(CLI::ExistingFile);
    c_sample->add_option("--mode", smp.mode, "structure (channel average) or detail (one channel)");
    c_sample->add_option("--index", smp.index, "Fixed channel for detail mode");
    c_sample->add_option("--selection", smp.selection, "Detail channel choice without --index: random or ranked");
    c_sample->add_option("--out-size", smp.out_size, "Output size HxW");
    c_sample->add_option("--decompose", smp.decompose, "Marginal decomposition: max or sum");
    c_sample->add_option("--epsilon", smp.epsilon, "Marginal floor as a fraction of its mean");
    c_sample->add_option("--seed", smp.seed, "Seed for random channel selection");
    c_sample->add_option("--out", smp.out, "Output image (PGM/PPM)")->required();

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic glyph dataset");
    c_gen->add_option("--classes", gen.classes, "Number of classes");
    c_gen->add_option("--per-class", gen.per_class, "Training images per class");
    c_gen->add_option("--test-per-class", gen.test_per_class, "Test images per class");
    c_gen->add_option("--size", gen.size, "Image side length");
    c_gen->add_option("--glyph", gen.glyph, "Glyph side length");
    c_gen->add_option("--seed", gen.seed, "Generator seed");
    c_gen->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train TASN (or the uniform-resize baseline) and write a checkpoint");
    c_train->add_option("--data", tr.data, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);
    c_train->add_option("--model", tr.model, "Output checkpoint path")->required();
    c_train->add_option("--epochs", tr.epochs, "Training epochs");
    c_train->add_option("--lr", tr.lr, "SGD learning rate");
    c_train->add_option("--batch", tr.batch, "Batch size");
    c_train->add_option("--lambda", tr.lambda, "Soft-target loss weight");
    c_train->add_option("--temperature", tr.temperature, "Distillation temperature");
    c_train->add_option("--epsilon", tr.epsilon, "Sampler marginal floor");
    c_train->add_option("--decompose", tr.decompose, "Sampler decomposition: max or sum");
    c_train->add_option("--sample-size", tr.sample_size, "Sampled image size HxW");
    c_train->add_option("--channels", tr.channels, "Feature channels");
    c_train->add_option("--variant", tr.variant, "Attention variant");
    c_train->add_option("--seed", tr.seed, "Run seed");
    c_train->add_flag("--baseline", tr.baseline, "Train the uniform-resize baseline instead");
    c_train->add_flag("--no-detail", tr.no_detail, "Disable the part-net (detail) branch");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Test accuracy of a checkpoint (master-net inference)");
    c_eval->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    c_eval->add_option("--model", ev.model, "Checkpoint path")->required()->check(CLI::ExistingFile);

    GradcheckArgs gc;
    auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
    c_grad->add_option("--trials", gc.trials, "Randomized trials per operation");
    c_grad->add_option("--seed", gc.seed, "Seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*c_attend) return run_attend(attend);
        if (*c_sample) return run_sample(smp);
        if (*c_gen) return run_gen_data(gen);
        if (*c_train) return run_train(tr);
        if (*c_eval) return run_eval(ev);
        if (*c_grad) return run_gradcheck(gc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
