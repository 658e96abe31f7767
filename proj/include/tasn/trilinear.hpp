#pragma once

// Trilinear attention: feature maps X (c×hw) are re-mixed by their
// inter-channel relation matrix, M = N(N(X) X^T) X in the default form,
// where N is a row-wise softmax over the second dimension.

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "errors.hpp"
#include "ops.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace tasn {

/// The seven normalization placements that can be compared head to head.
enum class AttentionVariant {
    Raw,     // X
    Tri,     // X X^T X
    SnTri,   // N(X) X^T X
    SnSn,    // N(X) N(X)^T X
    PostSn,  // N(X X^T X)
    Rn,      // N(X X^T) X
    SnRn,    // N(N(X) X^T) X
};

inline constexpr std::array<AttentionVariant, 7> kAllAttentionVariants = {
    AttentionVariant::Raw, AttentionVariant::Tri, AttentionVariant::SnTri, AttentionVariant::SnSn,
    AttentionVariant::PostSn, AttentionVariant::Rn, AttentionVariant::SnRn};

inline std::string_view to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Raw: return "RAW";
        case AttentionVariant::Tri: return "TRI";
        case AttentionVariant::SnTri: return "SN_TRI";
        case AttentionVariant::SnSn: return "SN_SN";
        case AttentionVariant::PostSn: return "POST_SN";
        case AttentionVariant::Rn: return "RN";
        case AttentionVariant::SnRn: return "SN_RN";
    }
    return "?";
}

inline std::optional<AttentionVariant> parse_attention_variant(std::string_view name) {
    for (AttentionVariant v : kAllAttentionVariants)
        if (to_string(v) == name) return v;
    return std::nullopt;
}

/// Post-ReLU convolutional features, c×h×w with c >= 2, h·w >= 2 and no
/// negative entries.
class FeatureMaps {
  public:
    explicit FeatureMaps(Tensor chw) : values_(std::move(chw)) {
        if (values_.ndim() != 3) throw ShapeError("FeatureMaps: expected c×h×w, got " + shape_str(values_.shape()));
        if (channels() < 2) throw ShapeError("FeatureMaps: need at least 2 channels");
        if (height() * width() < 2) throw ShapeError("FeatureMaps: need at least 2 spatial positions");
        const auto d = values_.data();
        if (std::any_of(d.begin(), d.end(), [](double v) { return v < 0.0; })) {
            throw DomainError("FeatureMaps: values must be non-negative");
        }
    }

    std::size_t channels() const { return values_.dim(0); }
    std::size_t height() const { return values_.dim(1); }
    std::size_t width() const { return values_.dim(2); }
    const Tensor& tensor() const noexcept { return values_; }
    /// c×(h·w) view.
    Tensor matrix() const { return values_.reshaped({channels(), height() * width()}); }

  private:
    Tensor values_;
};

/// c attention maps of size h×w, all entries non-negative.
class AttentionStack {
  public:
    explicit AttentionStack(Tensor chw) : values_(std::move(chw)) {
        if (values_.ndim() == 2) {
            const std::size_t h = values_.dim(0), w = values_.dim(1);
            values_ = values_.reshaped({1, h, w});
        }
        if (values_.ndim() != 3) {
            throw ShapeError("AttentionStack: expected c×h×w or h×w, got " + shape_str(values_.shape()));
        }
        const auto d = values_.data();
        if (std::any_of(d.begin(), d.end(), [](double v) { return v < 0.0; })) {
            throw DomainError("AttentionStack: values must be non-negative");
        }
    }

    std::size_t channels() const { return values_.dim(0); }
    std::size_t height() const { return values_.dim(1); }
    std::size_t width() const { return values_.dim(2); }
    const Tensor& tensor() const noexcept { return values_; }

  private:
    Tensor values_;
};

// Taped forms over the c×hw matrix, so the attention computation can sit
// inside a differentiated forward pass.

inline Var spatial_norm(const Var& x) { return softmax_rows(x, 1.0); }

inline Var relation_matrix(const Var& x) { return softmax_rows(matmul(spatial_norm(x), transpose(x)), 1.0); }

/// c×hw -> c×hw for the chosen variant.
inline Var trilinear(const Var& x, AttentionVariant variant = AttentionVariant::SnRn) {
    switch (variant) {
        case AttentionVariant::Raw: return x;
        case AttentionVariant::Tri: return matmul(matmul(x, transpose(x)), x);
        case AttentionVariant::SnTri: return matmul(matmul(spatial_norm(x), transpose(x)), x);
        case AttentionVariant::SnSn: {
            const Var n = spatial_norm(x);
            return matmul(matmul(n, transpose(n)), x);
        }
        case AttentionVariant::PostSn: return spatial_norm(matmul(matmul(x, transpose(x)), x));
        case AttentionVariant::Rn: return matmul(softmax_rows(matmul(x, transpose(x)), 1.0), x);
        case AttentionVariant::SnRn: return matmul(relation_matrix(x), x);
    }
    throw UsageError("trilinear: unknown variant");
}

// Value-level conveniences on validated feature maps.

inline Tensor spatial_norm(const FeatureMaps& x) {
    Tape tape(false);
    return spatial_norm(tape.constant(x.matrix())).value();
}

inline Tensor relation_matrix(const FeatureMaps& x) {
    Tape tape(false);
    return relation_matrix(tape.constant(x.matrix())).value();
}

inline AttentionStack attention(const FeatureMaps& x, AttentionVariant variant = AttentionVariant::SnRn) {
    Tape tape(false);
    const Tensor m = trilinear(tape.constant(x.matrix()), variant).value();
    return AttentionStack(m.reshaped({x.channels(), x.height(), x.width()}));
}

}  // namespace tasn
