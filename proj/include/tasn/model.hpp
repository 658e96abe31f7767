#pragma once

// Networks for the desk-scale pipeline. All share one shape: two 3×3 convs
// (stride 1, then stride 2) with bias and ReLU, a global average pool and a
// linear head.
//
//   TinyBackbone   full-resolution image -> features X (attention source)
//                  plus an auxiliary classifier that trains them
//   PartMasterNet  classifier on sampled images; one conv stack read by
//                  both the part (teacher) and master (student) passes

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "image.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tnsr.hpp"
#include "trilinear.hpp"

namespace tasn {

struct ModelConfig {
    std::size_t image_channels = 1;
    std::size_t classes = 8;
    std::size_t attention_channels = 8;  // c of the feature maps X
    std::size_t net_channels = 8;        // width of the part/master conv stack
    AttentionVariant variant = AttentionVariant::SnRn;
    bool share_heads = false;

    void validate() const {
        if (image_channels != 1 && image_channels != 3) throw DomainError("ModelConfig: image channels must be 1 or 3");
        if (classes < 2) throw DomainError("ModelConfig: need at least 2 classes");
        if (attention_channels < 2) throw DomainError("ModelConfig: need at least 2 attention channels");
        if (net_channels < 1) throw DomainError("ModelConfig: net channels must be positive");
    }
};

struct ConvStack {
    Tensor conv1_weight;  // c×in×3×3, stride 1
    Tensor conv1_bias;    // c
    Tensor conv2_weight;  // c×c×3×3, stride 2
    Tensor conv2_bias;    // c
};

struct LinearHead {
    Tensor weight;  // c×N
    Tensor bias;    // 1×N
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.mutable_data()) v = sd * rng.normal();
    return t;
}

}  // namespace detail

inline ConvStack make_conv_stack(std::size_t in_channels, std::size_t channels, Rng& rng) {
    return ConvStack{detail::he_normal({channels, in_channels, 3, 3}, in_channels * 9, rng), Tensor::zeros({channels}),
                     detail::he_normal({channels, channels, 3, 3}, channels * 9, rng), Tensor::zeros({channels})};
}

inline LinearHead make_head(std::size_t channels, std::size_t classes, Rng& rng) {
    Tensor w = Tensor::zeros({channels, classes});
    const double sd = 1.0 / std::sqrt(static_cast<double>(channels));
    for (double& v : w.mutable_data()) v = sd * rng.normal();
    return LinearHead{std::move(w), Tensor::zeros({1, classes})};
}

/// A conv stack and head, held by reference so several views can share
/// the same parameter objects.
struct Classifier {
    std::shared_ptr<ConvStack> convs;
    std::shared_ptr<LinearHead> head;
};

struct TinyBackbone {
    ConvStack convs;
    LinearHead head;
};

/// Part-net and master-net. Both views point at one ConvStack, so an
/// update made through either is seen by the other.
class PartMasterNet {
  public:
    PartMasterNet(ConvStack convs, LinearHead master_head, std::optional<LinearHead> part_head)
        : convs_(std::make_shared<ConvStack>(std::move(convs))),
          master_head_(std::make_shared<LinearHead>(std::move(master_head))),
          part_head_(part_head ? std::make_shared<LinearHead>(std::move(*part_head)) : master_head_) {}

    Classifier master() const { return {convs_, master_head_}; }
    Classifier part() const { return {convs_, part_head_}; }
    bool heads_shared() const noexcept { return part_head_ == master_head_; }

  private:
    std::shared_ptr<ConvStack> convs_;
    std::shared_ptr<LinearHead> master_head_;
    std::shared_ptr<LinearHead> part_head_;
};

struct TasnModel {
    ModelConfig config;
    TinyBackbone backbone;
    PartMasterNet net;
};

/// Uniform-downsample control: same classifier architecture, no attention.
struct BaselineModel {
    ModelConfig config;
    Classifier net;
};

inline TasnModel make_tasn_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    TinyBackbone backbone{make_conv_stack(cfg.image_channels, cfg.attention_channels, rng),
                          make_head(cfg.attention_channels, cfg.classes, rng)};
    ConvStack convs = make_conv_stack(cfg.image_channels, cfg.net_channels, rng);
    LinearHead master = make_head(cfg.net_channels, cfg.classes, rng);
    std::optional<LinearHead> part;
    if (!cfg.share_heads) part = make_head(cfg.net_channels, cfg.classes, rng);
    return TasnModel{cfg, std::move(backbone), PartMasterNet(std::move(convs), std::move(master), std::move(part))};
}

inline BaselineModel make_baseline_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    return BaselineModel{cfg, Classifier{std::make_shared<ConvStack>(make_conv_stack(cfg.image_channels, cfg.net_channels, rng)),
                                         std::make_shared<LinearHead>(make_head(cfg.net_channels, cfg.classes, rng))}};
}

// ---------------------------------------------------------------------------
// Parameter enumeration

struct NamedParameter {
    std::string name;
    Tensor* tensor;
};

namespace detail {

inline void append_convs(std::vector<NamedParameter>& out, const std::string& prefix, ConvStack& s) {
    out.push_back({prefix + "conv1.weight", &s.conv1_weight});
    out.push_back({prefix + "conv1.bias", &s.conv1_bias});
    out.push_back({prefix + "conv2.weight", &s.conv2_weight});
    out.push_back({prefix + "conv2.bias", &s.conv2_bias});
}

inline void append_head(std::vector<NamedParameter>& out, const std::string& prefix, LinearHead& h) {
    out.push_back({prefix + "weight", &h.weight});
    out.push_back({prefix + "bias", &h.bias});
}

}  // namespace detail

/// Every trainable tensor exactly once, in a fixed order.
inline std::vector<NamedParameter> named_parameters(TasnModel& m) {
    std::vector<NamedParameter> out;
    detail::append_convs(out, "backbone.", m.backbone.convs);
    detail::append_head(out, "backbone.head.", m.backbone.head);
    detail::append_convs(out, "net.", *m.net.master().convs);
    detail::append_head(out, "net.master_head.", *m.net.master().head);
    if (!m.net.heads_shared()) detail::append_head(out, "net.part_head.", *m.net.part().head);
    return out;
}

inline std::vector<NamedParameter> named_parameters(BaselineModel& m) {
    std::vector<NamedParameter> out;
    detail::append_convs(out, "net.", *m.net.convs);
    detail::append_head(out, "net.master_head.", *m.net.head);
    return out;
}

/// Registers each parameter tensor as a tape leaf once, so a parameter used
/// by several passes collects all of its gradient contributions.
class ParamBinding {
  public:
    explicit ParamBinding(Tape& tape) : tape_(tape) {}

    Var operator()(const Tensor& param) {
        auto it = vars_.find(&param);
        if (it != vars_.end()) return it->second;
        Var v = tape_.leaf(param, true);
        vars_.emplace(&param, v);
        return v;
    }

    const Var* find(const Tensor& param) const {
        auto it = vars_.find(&param);
        return it == vars_.end() ? nullptr : &it->second;
    }

    Tape& tape() const noexcept { return tape_; }

  private:
    Tape& tape_;
    std::unordered_map<const Tensor*, Var> vars_;
};

// ---------------------------------------------------------------------------
// Forward passes

/// Fixed input standardisation: pixel values in [0, 1] are mapped to
/// (v - 0.5) / 0.125. The scale is close to the pixel standard deviation of
/// the synthetic data; without it the first layers start so close to zero
/// that plain SGD sits on a plateau for most of a 30-epoch budget.
inline constexpr double kInputMean = 0.5;
inline constexpr double kInputScale = 0.125;

inline Var image_input(Tape& tape, const ImageBuffer& image) {
    Tensor t = image.to_tensor();
    for (double& v : t.mutable_data()) v = (v - kInputMean) / kInputScale;
    return tape.constant(std::move(t));
}

/// ReLU(conv2(ReLU(conv1(x)))) with biases: c×ceil(h/2)×ceil(w/2), all >= 0.
inline Var conv_features(ParamBinding& bind, const ConvStack& s, const Var& x) {
    const Var h1 = relu(add_channel_bias(conv2d(x, bind(s.conv1_weight), 1), bind(s.conv1_bias)));
    return relu(add_channel_bias(conv2d(h1, bind(s.conv2_weight), 2), bind(s.conv2_bias)));
}

/// 1×N logits from c×h×w features.
inline Var head_logits(ParamBinding& bind, const LinearHead& head, const Var& features) {
    const std::size_t c = features.shape()[0];
    const Var pooled = reshape(global_avg_pool(features), {1, c});
    return add(matmul(pooled, bind(head.weight)), bind(head.bias));
}

inline Var classifier_logits(ParamBinding& bind, const Classifier& net, const ImageBuffer& image) {
    return head_logits(bind, *net.head, conv_features(bind, *net.convs, image_input(bind.tape(), image)));
}

/// Backbone features of an image, evaluated without recording gradients.
inline FeatureMaps backbone_features(const TinyBackbone& backbone, const ImageBuffer& image) {
    Tape tape(false);
    ParamBinding bind(tape);
    return FeatureMaps(conv_features(bind, backbone.convs, image_input(tape, image)).value());
}

inline AttentionStack compute_attention(const TasnModel& model, const ImageBuffer& image) {
    return attention(backbone_features(model.backbone, image), model.config.variant);
}

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Text manifest then binary payload:
//   TASN-CHECKPOINT 1\n
//   #key=value\n          (zero or more metadata lines)
//   name<TAB>d0xd1x...\n  (one per parameter, in payload order)
//   \n                    (blank line ends the manifest)
//   concatenated TNSR tensors

using CheckpointMeta = std::map<std::string, std::string>;

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedParameter>& params,
                                                   const CheckpointMeta& meta) {
    std::ostringstream manifest;
    manifest << "TASN-CHECKPOINT 1\n";
    for (const auto& [k, v] : meta) manifest << '#' << k << '=' << v << '\n';
    for (const auto& p : params) manifest << p.name << '\t' << shape_str(p.tensor->shape()) << '\n';
    manifest << '\n';
    const std::string text = manifest.str();
    std::vector<std::uint8_t> out(text.begin(), text.end());
    for (const auto& p : params) {
        const auto bytes = encode_tnsr(*p.tensor);
        out.insert(out.end(), bytes.begin(), bytes.end());
    }
    return out;
}

struct Checkpoint {
    CheckpointMeta meta;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() {
        const std::size_t start = pos;
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        if (pos >= bytes.size()) throw FormatError("checkpoint: truncated manifest");
        std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
        ++pos;
        return line;
    };
    if (next_line() != "TASN-CHECKPOINT 1") throw FormatError("checkpoint: bad header");
    Checkpoint ck;
    std::vector<std::pair<std::string, std::string>> entries;
    for (std::string line = next_line(); !line.empty(); line = next_line()) {
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw FormatError("checkpoint: malformed metadata line");
            ck.meta[line.substr(1, eq - 1)] = line.substr(eq + 1);
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("checkpoint: malformed manifest line");
        entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    for (const auto& [name, shape] : entries) {
        Tensor t = decode_tnsr(bytes, pos);
        if (shape_str(t.shape()) != shape) throw FormatError("checkpoint: shape mismatch for " + name);
        ck.tensors.emplace_back(name, std::move(t));
    }
    if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes");
    return ck;
}

/// Copy checkpoint tensors into the model's parameters by name; the name
/// and shape sets must match exactly.
inline void assign_parameters(const std::vector<NamedParameter>& params, const Checkpoint& ck) {
    if (params.size() != ck.tensors.size()) throw FormatError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != ck.tensors[i].first) {
            throw FormatError("checkpoint: expected " + params[i].name + ", found " + ck.tensors[i].first);
        }
        if (params[i].tensor->shape() != ck.tensors[i].second.shape()) {
            throw FormatError("checkpoint: shape mismatch for " + params[i].name);
        }
        *params[i].tensor = ck.tensors[i].second;
    }
}

}  // namespace tasn
