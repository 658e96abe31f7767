#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace tasn {

using NodeId = std::size_t;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// owning tape is alive.
class Var {
  public:
    Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

    NodeId id() const noexcept { return id_; }
    Tape& tape() const noexcept { return *tape_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

  private:
    Tape* tape_;
    NodeId id_;
};

/// View handed to backward rules: read saved values, accumulate into the
/// gradient buffers of inputs that need one.
class GradAccess {
  public:
    const Tensor& value(NodeId id) const;
    /// Gradient buffer for `id`, zero-initialised on first touch. Empty when
    /// the node does not require a gradient.
    std::span<double> grad(NodeId id);

  private:
    friend class Tape;
    GradAccess(Tape& tape, std::vector<std::vector<double>>& grads) : tape_(tape), grads_(grads) {}

    Tape& tape_;
    std::vector<std::vector<double>>& grads_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, GradAccess& access)>;

/// Gradients of a scalar output with respect to every leaf of a tape.
class Gradients {
  public:
    /// Zeros (of the leaf's shape) when the output does not depend on `v`.
    Tensor operator[](const Var& v) const {
        const auto& g = grads_.at(v.id());
        if (g.empty()) return Tensor::zeros(v.shape());
        return Tensor(v.shape(), g);
    }

    bool reached(const Var& v) const { return !grads_.at(v.id()).empty(); }

  private:
    friend class Tape;
    explicit Gradients(std::vector<std::vector<double>> grads) : grads_(std::move(grads)) {}
    std::vector<std::vector<double>> grads_;
};

/// Ordered record of differentiable operations for one forward pass.
/// Nodes are appended in execution order, so reverse id order is a reverse
/// topological order. Single-threaded; not copyable or movable because Vars
/// point back at it.
class Tape {
  public:
    /// With grad_enabled == false nothing is kept for the backward pass.
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var leaf(Tensor value, bool requires_grad = true) {
        check_finite("leaf", value);
        nodes_.push_back(Node{std::move(value), grad_enabled_ && requires_grad, true, {}});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Append the result of an operation. `backward` receives dL/d(output)
    /// and must add dL/d(input) into the buffers of the listed inputs.
    Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        check_finite(op, value);
        bool needs_grad = false;
        for (const Var& in : inputs) {
            if (&in.tape() != this) throw UsageError(std::string(op) + ": operand belongs to a different tape");
            needs_grad = needs_grad || nodes_[in.id()].requires_grad;
        }
        Node node{std::move(value), needs_grad, false, {}};
        if (needs_grad) node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    /// When enabled, ReLU operations append the sign pattern of their
    /// inputs; two evaluations with equal traces lie on the same linear
    /// piece of every ReLU.
    void set_kink_tracing(bool on) noexcept { trace_kinks_ = on; }
    void trace_kinks(std::span<const double> pre_activation) {
        if (!trace_kinks_) return;
        for (double v : pre_activation) kink_trace_.push_back(v > 0.0);
    }
    const std::vector<bool>& kink_trace() const noexcept { return kink_trace_; }

    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

    /// Reverse sweep from a scalar output. Returns gradients for leaves;
    /// intermediate buffers are released as soon as they are consumed.
    Gradients backward(const Var& output) {
        if (&output.tape() != this) throw UsageError("backward: output belongs to a different tape");
        if (output.value().numel() != 1) {
            throw UsageError("backward: output must be a scalar, got shape " + shape_str(output.shape()));
        }
        std::vector<std::vector<double>> grads(nodes_.size());
        if (!nodes_[output.id()].requires_grad) return Gradients(std::move(grads));
        grads[output.id()] = {1.0};
        GradAccess access(*this, grads);
        for (NodeId id = output.id() + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (node.is_leaf || grads[id].empty()) continue;
            const std::vector<double> upstream = std::move(grads[id]);
            grads[id].clear();
            node.backward(upstream, access);
        }
        return Gradients(std::move(grads));
    }

  private:
    friend class GradAccess;

    struct Node {
        Tensor value;
        bool requires_grad;
        bool is_leaf;
        BackwardFn backward;
    };

    static void check_finite(std::string_view op, const Tensor& value) {
        if (!value.all_finite()) throw DomainError(std::string(op) + ": produced a non-finite value");
    }

    bool grad_enabled_;
    bool trace_kinks_ = false;
    std::vector<bool> kink_trace_;
    std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline const Tensor& GradAccess::value(NodeId id) const { return tape_.value(id); }

inline std::span<double> GradAccess::grad(NodeId id) {
    if (!tape_.nodes_[id].requires_grad) return {};
    auto& g = grads_[id];
    if (g.empty()) g.assign(tape_.nodes_[id].value.numel(), 0.0);
    return g;
}

}  // namespace tasn
