#pragma once

// Teacher-student distillation terms. The student (master) sees the
// structure-preserved image; the teacher (part) sees a detail-preserved
// one. The teacher's softened distribution is a constant target.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "ops.hpp"
#include "tape.hpp"

namespace tasn {

struct DistillConfig {
    double temperature = 10.0;
    double lambda = 2.0;

    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature)) {
            throw DomainError("DistillConfig: temperature must be positive");
        }
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DomainError("DistillConfig: lambda must be >= 0");
    }
};

/// Logits as a 1×N row on `tape`.
inline Var logits_row(Tape& tape, std::span<const double> z, bool requires_grad = true) {
    if (z.size() < 2) throw ShapeError("logits need at least two classes");
    return tape.leaf(Tensor({1, z.size()}, std::vector<double>(z.begin(), z.end())), requires_grad);
}

inline Var softened_probs(const Var& z, double temperature) { return softmax_rows(z, temperature); }

inline Var one_hot(Tape& tape, std::size_t label, std::size_t classes) {
    if (label >= classes) {
        throw IndexError("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
                         " classes");
    }
    Tensor t = Tensor::zeros({1, classes});
    t[label] = 1.0;
    return tape.constant(std::move(t));
}

/// -sum_i q_d(i) log q_s(i). q_d is detached: no gradient reaches the teacher.
inline Var soft_target_ce(const Var& q_s, const Var& q_d) {
    if (q_s.shape() != q_d.shape()) throw ShapeError("soft_target_ce: distributions differ in shape");
    return scale(reduce_sum(mul(detach(q_d), log(q_s))), -1.0);
}

/// Cross entropy of logits z (1×N) against a class label, at T = 1.
inline Var cross_entropy(const Var& z, std::size_t label) {
    const Var target = one_hot(z.tape(), label, z.shape().back());
    return scale(reduce_sum(mul(target, log_softmax_rows(z, 1.0))), -1.0);
}

/// Master-net objective: CE(softmax(z_s), y) + λ · L_soft(softmax(z_s/T),
/// softmax(z_d/T)), with z_d treated as a constant. The soft term is the
/// same cross entropy as soft_target_ce, evaluated through log-softmax so
/// large logits cannot underflow to log(0).
inline Var master_loss(const Var& z_s, const Var& z_d, std::size_t label, const DistillConfig& cfg) {
    cfg.validate();
    if (z_s.shape() != z_d.shape()) throw ShapeError("master_loss: student and teacher logits differ in shape");
    const Var cls = cross_entropy(z_s, label);
    if (cfg.lambda == 0.0) return cls;
    const Var teacher = softened_probs(detach(z_d), cfg.temperature);
    const Var soft = scale(reduce_sum(mul(teacher, log_softmax_rows(z_s, cfg.temperature))), -1.0);
    return add(cls, scale(soft, cfg.lambda));
}

// Value-level helpers.

inline std::vector<double> softened_probs(std::span<const double> z, double temperature) {
    Tape tape(false);
    return softened_probs(logits_row(tape, z, false), temperature).value().values();
}

inline double soft_target_ce(std::span<const double> q_s, std::span<const double> q_d) {
    if (q_s.size() != q_d.size()) throw ShapeError("soft_target_ce: distributions differ in length");
    Tape tape(false);
    const Var s = tape.constant(Tensor({1, q_s.size()}, std::vector<double>(q_s.begin(), q_s.end())));
    const Var d = tape.constant(Tensor({1, q_d.size()}, std::vector<double>(q_d.begin(), q_d.end())));
    return soft_target_ce(s, d).value().item();
}

inline double master_loss(std::span<const double> z_s, std::span<const double> z_d, std::size_t label,
                          const DistillConfig& cfg) {
    Tape tape(false);
    return master_loss(logits_row(tape, z_s, false), logits_row(tape, z_d, false), label, cfg).value().item();
}

}  // namespace tasn
