#pragma once

// The full finite-difference suite: every differentiable operation, the
// attention variants, the distillation losses and the three-loss training
// objective, each over randomized trials.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "distill.hpp"
#include "gradcheck.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "synth.hpp"
#include "train.hpp"
#include "trilinear.hpp"

namespace tasn {

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

// Reduce a tensor-valued op to a scalar through a fixed random projection.
inline Var project(const Var& y, const Tensor& weights) {
    return reduce_sum(mul(y, y.tape().constant(weights)));
}

}  // namespace detail

/// Finite-difference check of the batch objective with respect to every
/// model parameter. Sampler outputs and teacher logits are frozen at their
/// values from the analytic pass, matching the stop-gradients of training.
inline void check_objective_gradients(GradCheckResult& result, TasnModel& model, std::span<const Example> batch,
                                      const TrainConfig& cfg, const GradCheckOptions& opt) {
    result.tolerance = opt.tolerance;
    SampledInputs cache;
    Rng rng(0);
    Tape tape;
    ParamBinding bind(tape);
    const Objective obj = build_objective(model, bind, batch, cfg, rng, &cache);
    const Gradients grads = tape.backward(obj.total);

    auto evaluate = [&](std::vector<bool>& trace) {
        Tape probe(false);
        probe.set_kink_tracing(true);
        ParamBinding pb(probe);
        const double v = build_objective(model, pb, batch, cfg, rng, &cache).total.value().item();
        trace = probe.kink_trace();
        return v;
    };

    std::vector<bool> trace_plus, trace_minus;
    for (auto& p : named_parameters(model)) {
        const Var* leaf = bind.find(*p.tensor);
        const Tensor analytic = leaf ? grads[*leaf] : Tensor::zeros(p.tensor->shape());
        auto data = p.tensor->mutable_data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double x0 = data[j];
            data[j] = x0 + opt.step;
            const double fp = evaluate(trace_plus);
            data[j] = x0 - opt.step;
            const double fm = evaluate(trace_minus);
            data[j] = x0;
            if (trace_plus != trace_minus) {
                ++result.skipped;
                continue;
            }
            record_probe(result, analytic[j], (fp - fm) / (2.0 * opt.step), opt);
        }
    }
}

/// Small random model and 2-image batch of 8×8 inputs for objective checks.
struct ObjectiveFixture {
    TasnModel model;
    std::vector<Example> batch;
    TrainConfig cfg;
};

inline ObjectiveFixture make_objective_fixture(Rng& rng) {
    ModelConfig mc;
    mc.classes = 3;
    mc.attention_channels = 3;
    mc.net_channels = 3;
    TasnModel model = make_tasn_model(mc, rng);
    for (auto& p : named_parameters(model)) {
        if (p.name.find("bias") != std::string::npos) {
            for (double& v : p.tensor->mutable_data()) v = 0.1 * rng.normal();
        }
    }
    std::vector<Example> batch;
    for (std::size_t i = 0; i < 2; ++i) {
        std::vector<double> px(64);
        for (double& v : px) v = rng.uniform();
        batch.push_back(Example{ImageBuffer(8, 8, 1, std::move(px)), rng.below(mc.classes), 0, 0});
    }
    TrainConfig cfg;
    cfg.sampler.out_h = cfg.sampler.out_w = 6;
    return ObjectiveFixture{std::move(model), std::move(batch), cfg};
}

inline std::vector<GradCheckResult> run_gradient_suite(std::size_t trials, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<GradCheckResult> results;
    const GradCheckOptions elementwise{1e-5, 1e-4, 1e-7};
    const GradCheckOptions composite{1e-5, 1e-3, 1e-7};

    auto run = [&](const std::string& name, const GradCheckOptions& opt, auto&& make_case) {
        GradCheckResult r;
        r.name = name;
        for (std::size_t t = 0; t < trials; ++t) {
            auto [f, inputs] = make_case();
            check_gradients(r, f, inputs, opt);
        }
        results.push_back(r);
    };
    using Case = std::pair<ScalarFunction, std::vector<Tensor>>;
    using detail::project;
    using detail::random_tensor;

    run("relu", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({3, 4}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(relu(v[0]), w); }, {random_tensor({3, 4}, rng)}};
    });
    run("add", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({5}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(add(v[0], v[1]), w); },
                {random_tensor({5}, rng), random_tensor({5}, rng)}};
    });
    run("sub", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({5}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(sub(v[0], v[1]), w); },
                {random_tensor({5}, rng), random_tensor({5}, rng)}};
    });
    run("mul", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({2, 3}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(mul(v[0], v[1]), w); },
                {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}};
    });
    run("scale", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({4}, rng);
        const double s = 3.0 * (rng.uniform() - 0.5);
        return {[w, s](Tape&, std::span<const Var> v) { return project(scale(v[0], s), w); },
                {random_tensor({4}, rng)}};
    });
    run("log", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({4}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(log(v[0]), w); },
                {random_tensor({4}, rng, 0.2, 2.0)}};
    });
    run("reduce_sum", elementwise, [&]() -> Case {
        return {[](Tape&, std::span<const Var> v) { return reduce_sum(mul(v[0], v[0])); },
                {random_tensor({2, 3}, rng)}};
    });
    run("global_avg_pool", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({3}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(global_avg_pool(v[0]), w); },
                {random_tensor({3, 2, 4}, rng)}};
    });
    run("reshape", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({3, 2}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(reshape(v[0], {3, 2}), w); },
                {random_tensor({2, 3}, rng)}};
    });
    run("transpose", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({3, 2}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(transpose(v[0]), w); },
                {random_tensor({2, 3}, rng)}};
    });
    run("add_channel_bias", elementwise, [&]() -> Case {
        const Tensor w = random_tensor({2, 3, 3}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(add_channel_bias(v[0], v[1]), w); },
                {random_tensor({2, 3, 3}, rng), random_tensor({2}, rng)}};
    });
    run("matmul", composite, [&]() -> Case {
        const Tensor w = random_tensor({3, 2}, rng);
        return {[w](Tape&, std::span<const Var> v) { return project(matmul(v[0], v[1]), w); },
                {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}};
    });
    run("softmax_rows", composite, [&]() -> Case {
        const Tensor w = random_tensor({2, 4}, rng);
        const double T = 0.5 + 10.0 * rng.uniform();
        return {[w, T](Tape&, std::span<const Var> v) { return project(softmax_rows(v[0], T), w); },
                {random_tensor({2, 4}, rng, -3.0, 3.0)}};
    });
    run("log_softmax_rows", composite, [&]() -> Case {
        const Tensor w = random_tensor({2, 4}, rng);
        const double T = 0.5 + 10.0 * rng.uniform();
        return {[w, T](Tape&, std::span<const Var> v) { return project(log_softmax_rows(v[0], T), w); },
                {random_tensor({2, 4}, rng, -3.0, 3.0)}};
    });
    for (std::size_t stride : {1u, 2u}) {
        run("conv2d/stride" + std::to_string(stride), composite, [&]() -> Case {
            const std::size_t o = stride == 1 ? 5 : 3;
            const Tensor w = random_tensor({3, o, o}, rng);
            return {[w, stride](Tape&, std::span<const Var> v) { return project(conv2d(v[0], v[1], stride), w); },
                    {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)}};
        });
    }
    for (AttentionVariant variant : kAllAttentionVariants) {
        run("trilinear/" + std::string(to_string(variant)), composite, [&]() -> Case {
            const Tensor w = random_tensor({3, 4}, rng);
            return {[w, variant](Tape&, std::span<const Var> v) { return project(trilinear(v[0], variant), w); },
                    {random_tensor({3, 4}, rng, 0.0, 1.0)}};
        });
    }
    run("soft_target_ce", composite, [&]() -> Case {
        Tape scratch(false);
        const double T = 0.5 + 10.0 * rng.uniform();
        const Tensor q_d = softmax_rows(scratch.constant(random_tensor({1, 5}, rng, -3.0, 3.0)), T).value();
        return {[q_d, T](Tape& tape, std::span<const Var> v) {
                    return soft_target_ce(softened_probs(v[0], T), tape.constant(q_d));
                },
                {random_tensor({1, 5}, rng, -3.0, 3.0)}};
    });
    run("master_loss", composite, [&]() -> Case {
        const Tensor z_d = random_tensor({1, 5}, rng, -3.0, 3.0);
        const std::size_t label = rng.below(5);
        return {[z_d, label](Tape& tape, std::span<const Var> v) {
                    return master_loss(v[0], tape.constant(z_d), label, DistillConfig{});
                },
                {random_tensor({1, 5}, rng, -3.0, 3.0)}};
    });

    GradCheckResult objective;
    objective.name = "training_objective";
    for (std::size_t t = 0; t < trials; ++t) {
        ObjectiveFixture fx = make_objective_fixture(rng);
        check_objective_gradients(objective, fx.model, fx.batch, fx.cfg, composite);
    }
    results.push_back(objective);
    return results;
}

}  // namespace tasn
