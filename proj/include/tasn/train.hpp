#pragma once

// Training and evaluation. One step, per image:
//   1. backbone features X and the auxiliary classifier loss
//   2. trilinear attention on X (values only; nothing is differentiated
//      through the sampler)
//   3. structure-preserved image from the channel-averaged map, and a
//      detail-preserved image from one selected channel
//   4. part pass on the detail image: teacher logits z_d and its own CE
//   5. master pass on the structure image: master_loss(z_s, z_d, y)
// The three losses are summed, averaged over the batch, and applied with
// plain SGD. Inference runs the backbone, the averaged attention, the
// structure sampler and the master pass only.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "distill.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "sampler.hpp"
#include "synth.hpp"
#include "tape.hpp"
#include "trilinear.hpp"

namespace tasn {

struct TrainConfig {
    std::size_t epochs = 30;
    double learning_rate = 0.05;
    std::size_t batch_size = 16;
    DistillConfig distill;
    SamplerConfig sampler;  // out_h × out_w is the sampled-image size
    bool detail_branch = true;
    double attention_loss_weight = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw DomainError("TrainConfig: learning rate must be positive");
        if (batch_size < 1) throw DomainError("TrainConfig: batch size must be positive");
        if (!(attention_loss_weight >= 0.0)) throw DomainError("TrainConfig: attention loss weight must be >= 0");
        distill.validate();
        sampler.validate();
    }
};

struct StepLosses {
    double total = 0.0;
    double attention = 0.0;
    double part = 0.0;
    double master = 0.0;
};

/// Sampler outputs and teacher logits of one forward pass. Supplying a
/// filled cache replays them, which turns the objective into a smooth
/// function of the parameters (used by finite-difference checks).
struct SampledInputs {
    std::vector<ImageBuffer> structure;
    std::vector<std::optional<ImageBuffer>> detail;
    std::vector<std::optional<std::size_t>> part_index;
    std::vector<std::optional<Tensor>> teacher_logits;

    bool empty() const noexcept { return structure.empty(); }
};

struct Objective {
    Var total;
    Var attention;
    Var part;
    Var master;
};

namespace detail {

inline Var batch_mean(Tape& tape, const std::vector<Var>& terms) {
    if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
    Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace detail

/// Builds the batch objective on `tape`. With `cache` non-null: an empty
/// cache is filled with this pass's samples, a filled one is replayed.
inline Objective build_objective(const TasnModel& model, ParamBinding& bind, std::span<const Example> batch,
                                 const TrainConfig& cfg, Rng& rng, SampledInputs* cache = nullptr) {
    Tape& tape = bind.tape();
    const bool replay = cache != nullptr && !cache->empty();
    if (replay && cache->structure.size() != batch.size()) throw UsageError("build_objective: cache size mismatch");
    const Classifier master = model.net.master();
    const Classifier part = model.net.part();

    std::vector<Var> totals, att_terms, part_terms, master_terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Example& ex = batch[i];
        const Var features = conv_features(bind, model.backbone.convs, image_input(tape, ex.image));
        const Var att_loss = cross_entropy(head_logits(bind, model.backbone.head, features), ex.label);
        att_terms.push_back(att_loss);

        std::optional<ImageBuffer> structure_img, detail_img;
        if (replay) {
            structure_img = cache->structure[i];
            detail_img = cache->detail[i];
        } else {
            const AttentionStack stack = attention(FeatureMaps(features.value()), model.config.variant);
            structure_img = sample(ex.image, stack, SampleMode::Structure, cfg.sampler, rng).image;
            std::optional<std::size_t> index;
            if (cfg.detail_branch) {
                SampleResult d = sample(ex.image, stack, SampleMode::Detail, cfg.sampler, rng);
                detail_img = std::move(d.image);
                index = d.index;
            }
            if (cache != nullptr) {
                cache->structure.push_back(*structure_img);
                cache->detail.push_back(detail_img);
                cache->part_index.push_back(index);
            }
        }

        Var total = scale(att_loss, cfg.attention_loss_weight);
        const Var z_s = classifier_logits(bind, master, *structure_img);
        Var m_loss = cross_entropy(z_s, ex.label);
        if (detail_img) {
            const Var z_d = classifier_logits(bind, part, *detail_img);
            const Var p_loss = cross_entropy(z_d, ex.label);
            part_terms.push_back(p_loss);
            total = add(total, p_loss);
            Var teacher = z_d;
            if (replay && cache->teacher_logits.size() == batch.size() && cache->teacher_logits[i]) {
                teacher = tape.constant(*cache->teacher_logits[i]);
            } else if (cache != nullptr && !replay) {
                cache->teacher_logits.resize(batch.size());
                cache->teacher_logits[i] = z_d.value();
            }
            m_loss = master_loss(z_s, teacher, ex.label, cfg.distill);
        }
        master_terms.push_back(m_loss);
        totals.push_back(add(total, m_loss));
    }
    return Objective{detail::batch_mean(tape, totals), detail::batch_mean(tape, att_terms),
                     detail::batch_mean(tape, part_terms), detail::batch_mean(tape, master_terms)};
}

namespace detail {

template <class Params>
void sgd_update(Params& params, const ParamBinding& bind, const Gradients& grads, double lr) {
    for (auto& p : params) {
        const Var* v = bind.find(*p.tensor);
        if (v == nullptr || !grads.reached(*v)) continue;
        const Tensor g = grads[*v];
        auto data = p.tensor->mutable_data();
        for (std::size_t k = 0; k < data.size(); ++k) data[k] -= lr * g[k];
    }
}

}  // namespace detail

/// One SGD step of the full three-loss objective.
inline StepLosses train_step(TasnModel& model, std::span<const Example> batch, const TrainConfig& cfg, Rng& rng) {
    Tape tape;
    ParamBinding bind(tape);
    const Objective obj = build_objective(model, bind, batch, cfg, rng);
    const Gradients grads = tape.backward(obj.total);
    auto params = named_parameters(model);
    detail::sgd_update(params, bind, grads, cfg.learning_rate);
    return {obj.total.value().item(), obj.attention.value().item(), obj.part.value().item(),
            obj.master.value().item()};
}

/// Plain cross-entropy SGD step of a classifier on the given images.
inline double classifier_step(const Classifier& net, std::span<const ImageBuffer> images,
                              std::span<const std::size_t> labels, double lr) {
    Tape tape;
    ParamBinding bind(tape);
    std::vector<Var> terms;
    for (std::size_t i = 0; i < images.size(); ++i) {
        terms.push_back(cross_entropy(classifier_logits(bind, net, images[i]), labels[i]));
    }
    const Var total = detail::batch_mean(tape, terms);
    const Gradients grads = tape.backward(total);
    std::vector<NamedParameter> params;
    detail::append_convs(params, "", *net.convs);
    detail::append_head(params, "", *net.head);
    detail::sgd_update(params, bind, grads, lr);
    return total.value().item();
}

/// Uniform-downsample control step: bilinear resize to the sampled size,
/// no attention, no distillation.
inline StepLosses baseline_train(BaselineModel& model, std::span<const Example> batch, const TrainConfig& cfg) {
    std::vector<ImageBuffer> images;
    std::vector<std::size_t> labels;
    for (const Example& ex : batch) {
        images.push_back(resize_bilinear(ex.image, cfg.sampler.out_h, cfg.sampler.out_w));
        labels.push_back(ex.label);
    }
    const double loss = classifier_step(model.net, images, labels, cfg.learning_rate);
    return {loss, 0.0, 0.0, loss};
}

// ---------------------------------------------------------------------------
// Inference

/// Structure-preserved image an input is classified from.
inline ImageBuffer structure_image(const TasnModel& model, const ImageBuffer& image, const SamplerConfig& cfg) {
    const AttentionStack stack = compute_attention(model, image);
    const AttentionMap full = resize_bilinear(average_attention(stack), image.height(), image.width());
    return warp(image, attention_grid(full, cfg));
}

inline std::vector<double> classify(const Classifier& net, const ImageBuffer& image) {
    Tape tape(false);
    ParamBinding bind(tape);
    return classifier_logits(bind, net, image).value().values();
}

/// Master-net prediction; the detail branch is not run.
inline std::size_t predict(const TasnModel& model, const ImageBuffer& image, const SamplerConfig& cfg) {
    return argmax(classify(model.net.master(), structure_image(model, image, cfg)));
}

inline std::size_t predict(const BaselineModel& model, const ImageBuffer& image, const SamplerConfig& cfg) {
    return argmax(classify(model.net, resize_bilinear(image, cfg.out_h, cfg.out_w)));
}

template <class Model>
double evaluate(const Model& model, std::span<const Example> examples, const SamplerConfig& cfg) {
    if (examples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const Example& ex : examples) correct += predict(model, ex.image, cfg) == ex.label;
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Full runs

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

template <class Model, class Step>
std::vector<EpochMetrics> run_epochs(Model& model, const Dataset& data, const TrainConfig& cfg, Rng& order, Step step,
                                     const EpochCallback& on_epoch) {
    std::vector<EpochMetrics> history;
    std::vector<Example> batch;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto idx = shuffled_indices(data.train.size(), order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            batch.clear();
            for (std::size_t k = start; k < std::min(idx.size(), start + cfg.batch_size); ++k) {
                batch.push_back(data.train[idx[k]]);
            }
            loss_sum += step(batch).total * static_cast<double>(batch.size());
        }
        EpochMetrics m{epoch, loss_sum / static_cast<double>(idx.size()), evaluate(model, data.test, cfg.sampler)};
        history.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return history;
}

}  // namespace detail

/// Seed streams: model init, example order, and sampler draws are forked
/// from one root in that order, so (seed, config) fixes the whole run.
struct RunStreams {
    Rng init, order, sampling;
    explicit RunStreams(std::uint64_t seed) {
        Rng root(seed);
        init = root.fork();
        order = root.fork();
        sampling = root.fork();
    }
};

inline std::vector<EpochMetrics> train_tasn(TasnModel& model, const Dataset& data, const TrainConfig& cfg,
                                            RunStreams& streams, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    return detail::run_epochs(model, data, cfg, streams.order,
                              [&](std::span<const Example> b) { return train_step(model, b, cfg, streams.sampling); },
                              on_epoch);
}

inline std::vector<EpochMetrics> train_baseline(BaselineModel& model, const Dataset& data, const TrainConfig& cfg,
                                                RunStreams& streams, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    return detail::run_epochs(model, data, cfg, streams.order,
                              [&](std::span<const Example> b) { return baseline_train(model, b, cfg); }, on_epoch);
}

}  // namespace tasn
