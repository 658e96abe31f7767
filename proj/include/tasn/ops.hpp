#pragma once

// Differentiable tensor operations. Each function computes its result
// eagerly and records a backward rule on the operands' tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace tasn {

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw UsageError(std::string(op) + ": operands belong to different tapes");
}

inline void require_ndim(const Var& a, std::size_t ndim, const char* op) {
    if (a.shape().size() != ndim) {
        throw ShapeError(std::string(op) + ": expected " + std::to_string(ndim) + "-d operand, got " +
                         shape_str(a.shape()));
    }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

inline void require_temperature(double temperature, const char* op) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw DomainError(std::string(op) + ": temperature must be positive and finite");
    }
}

// Row-wise softmax of x/T with max subtraction; writes into out.
inline void softmax_row(std::span<const double> row, double temperature, std::span<double> out) {
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        out[j] = std::exp((row[j] - peak) / temperature);
        total += out[j];
    }
    for (double& v : out) v /= total;
}

}  // namespace detail

/// Standard matrix product of an m×k and a k×n matrix.
inline Var matmul(const Var& a, const Var& b) {
    detail::require_same_tape(a, b, "matmul");
    detail::require_ndim(a, 2, "matmul");
    detail::require_ndim(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner dimensions differ (" + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         ")");
    }
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<double> C(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
        }
    }
    const NodeId ia = a.id(), ib = b.id();
    return a.tape().record("matmul", Tensor({m, n}, std::move(C)), {a, b},
                           [ia, ib, m, k, n](std::span<const double> G, GradAccess& acc) {
                               const auto A = acc.value(ia).data();
                               const auto B = acc.value(ib).data();
                               if (auto dA = acc.grad(ia); !dA.empty()) {
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t p = 0; p < k; ++p) {
                                           double s = 0.0;
                                           for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                                           dA[i * k + p] += s;
                                       }
                               }
                               if (auto dB = acc.grad(ib); !dB.empty()) {
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t p = 0; p < k; ++p) {
                                           const double aip = A[i * k + p];
                                           for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
                                       }
                               }
                           });
}

inline Var transpose(const Var& a) {
    detail::require_ndim(a, 2, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    const auto A = a.value().data();
    std::vector<double> T(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) T[j * m + i] = A[i * n + j];
    const NodeId ia = a.id();
    return a.tape().record("transpose", Tensor({n, m}, std::move(T)), {a},
                           [ia, m, n](std::span<const double> G, GradAccess& acc) {
                               auto dA = acc.grad(ia);
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += G[j * m + i];
                           });
}

/// Row-wise softmax of a/T.
inline Var softmax_rows(const Var& a, double temperature = 1.0) {
    detail::require_temperature(temperature, "softmax_rows");
    detail::require_ndim(a, 2, "softmax_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    const auto A = a.value().data();
    std::vector<double> Y(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        detail::softmax_row(A.subspan(i * n, n), temperature, std::span<double>(Y).subspan(i * n, n));
    }
    const NodeId ia = a.id();
    std::vector<double> saved = Y;
    return a.tape().record("softmax_rows", Tensor({m, n}, std::move(Y)), {a},
                           [ia, m, n, temperature, Y = std::move(saved)](std::span<const double> G, GradAccess& acc) {
                               auto dA = acc.grad(ia);
                               for (std::size_t i = 0; i < m; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) dot += G[i * n + j] * Y[i * n + j];
                                   for (std::size_t j = 0; j < n; ++j) {
                                       dA[i * n + j] += Y[i * n + j] * (G[i * n + j] - dot) / temperature;
                                   }
                               }
                           });
}

/// Row-wise log(softmax(a/T)), evaluated as shifted logits minus log-sum-exp.
inline Var log_softmax_rows(const Var& a, double temperature = 1.0) {
    detail::require_temperature(temperature, "log_softmax_rows");
    detail::require_ndim(a, 2, "log_softmax_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    const auto A = a.value().data();
    std::vector<double> Y(m * n);
    std::vector<double> P(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = A.subspan(i * n, n);
        const double peak = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp((row[j] - peak) / temperature);
        const double lse = std::log(total);
        for (std::size_t j = 0; j < n; ++j) {
            Y[i * n + j] = (row[j] - peak) / temperature - lse;
            P[i * n + j] = std::exp(Y[i * n + j]);
        }
    }
    const NodeId ia = a.id();
    return a.tape().record("log_softmax_rows", Tensor({m, n}, std::move(Y)), {a},
                           [ia, m, n, temperature, P = std::move(P)](std::span<const double> G, GradAccess& acc) {
                               auto dA = acc.grad(ia);
                               for (std::size_t i = 0; i < m; ++i) {
                                   double total = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) total += G[i * n + j];
                                   for (std::size_t j = 0; j < n; ++j) {
                                       dA[i * n + j] += (G[i * n + j] - P[i * n + j] * total) / temperature;
                                   }
                               }
                           });
}

/// 3×3 cross-correlation with zero padding 1. input c_in×h×w, kernels
/// c_out×c_in×3×3, output c_out×ceil(h/stride)×ceil(w/stride).
inline Var conv2d(const Var& input, const Var& kernels, std::size_t stride = 1) {
    detail::require_same_tape(input, kernels, "conv2d");
    detail::require_ndim(input, 3, "conv2d");
    detail::require_ndim(kernels, 4, "conv2d");
    if (stride != 1 && stride != 2) throw DomainError("conv2d: stride must be 1 or 2");
    const std::size_t cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const std::size_t cout = kernels.shape()[0];
    if (kernels.shape()[1] != cin) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(kernels.shape()[1]) + " input channels, got " +
                         std::to_string(cin));
    }
    if (kernels.shape()[2] != 3 || kernels.shape()[3] != 3) throw ShapeError("conv2d: kernels must be 3x3");
    if (h < 3 || w < 3) throw ShapeError("conv2d: input must be at least 3x3");
    const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
    const std::size_t plane = oh * ow;

    // Each (input channel, tap) pair contributes a strided, zero-padded
    // view of the input: gather it into a contiguous oh×ow plane so that
    // the channel mixing runs as contiguous multiply-adds and dot products.
    auto gather = [=](const double* xc, std::size_t ky, std::size_t kx, double* out) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            double* row = out + oy * ow;
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                std::fill(row, row + ow, 0.0);
                continue;
            }
            const double* xrow = xc + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : xrow[ix];
            }
        }
    };
    auto scatter_add = [=](const double* in, std::size_t ky, std::size_t kx, double* dxc) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* row = in + oy * ow;
            double* drow = dxc + static_cast<std::size_t>(iy) * w;
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) drow[ix] += row[ox];
            }
        }
    };

    const auto X = input.value().data();
    const auto K = kernels.value().data();
    std::vector<double> Y(cout * plane, 0.0);
    std::vector<double> patch(plane);
    for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t t = 0; t < 9; ++t) {
            gather(X.data() + ci * h * w, t / 3, t % 3, patch.data());
            std::size_t o = 0;
            for (; o + 4 <= cout; o += 4) {
                const double w0 = K[(o * cin + ci) * 9 + t], w1 = K[((o + 1) * cin + ci) * 9 + t];
                const double w2 = K[((o + 2) * cin + ci) * 9 + t], w3 = K[((o + 3) * cin + ci) * 9 + t];
                double* y0 = Y.data() + o * plane;
                double* y1 = y0 + plane;
                double* y2 = y1 + plane;
                double* y3 = y2 + plane;
                for (std::size_t p = 0; p < plane; ++p) {
                    const double v = patch[p];
                    y0[p] += w0 * v;
                    y1[p] += w1 * v;
                    y2[p] += w2 * v;
                    y3[p] += w3 * v;
                }
            }
            for (; o < cout; ++o) {
                const double wk = K[(o * cin + ci) * 9 + t];
                double* yo = Y.data() + o * plane;
                for (std::size_t p = 0; p < plane; ++p) yo[p] += wk * patch[p];
            }
        }
    }
    const NodeId ix = input.id(), ik = kernels.id();
    return input.tape().record(
        "conv2d", Tensor({cout, oh, ow}, std::move(Y)), {input, kernels},
        [=](std::span<const double> G, GradAccess& acc) {
            const auto X = acc.value(ix).data();
            const auto K = acc.value(ik).data();
            auto dX = acc.grad(ix);
            auto dK = acc.grad(ik);
            std::vector<double> buf(plane);
            for (std::size_t ci = 0; ci < cin; ++ci) {
                for (std::size_t t = 0; t < 9; ++t) {
                    if (!dK.empty()) {
                        gather(X.data() + ci * h * w, t / 3, t % 3, buf.data());
                        for (std::size_t o = 0; o < cout; ++o) {
                            const double* go = G.data() + o * plane;
                            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
                            std::size_t p = 0;
                            for (; p + 4 <= plane; p += 4) {
                                s0 += go[p] * buf[p];
                                s1 += go[p + 1] * buf[p + 1];
                                s2 += go[p + 2] * buf[p + 2];
                                s3 += go[p + 3] * buf[p + 3];
                            }
                            for (; p < plane; ++p) s0 += go[p] * buf[p];
                            dK[(o * cin + ci) * 9 + t] += (s0 + s1) + (s2 + s3);
                        }
                    }
                    if (!dX.empty()) {
                        std::fill(buf.begin(), buf.end(), 0.0);
                        std::size_t o = 0;
                        for (; o + 4 <= cout; o += 4) {
                            const double w0 = K[(o * cin + ci) * 9 + t], w1 = K[((o + 1) * cin + ci) * 9 + t];
                            const double w2 = K[((o + 2) * cin + ci) * 9 + t], w3 = K[((o + 3) * cin + ci) * 9 + t];
                            const double* g0 = G.data() + o * plane;
                            const double* g1 = g0 + plane;
                            const double* g2 = g1 + plane;
                            const double* g3 = g2 + plane;
                            for (std::size_t p = 0; p < plane; ++p) {
                                buf[p] += (w0 * g0[p] + w1 * g1[p]) + (w2 * g2[p] + w3 * g3[p]);
                            }
                        }
                        for (; o < cout; ++o) {
                            const double wk = K[(o * cin + ci) * 9 + t];
                            const double* go = G.data() + o * plane;
                            for (std::size_t p = 0; p < plane; ++p) buf[p] += wk * go[p];
                        }
                        scatter_add(buf.data(), t / 3, t % 3, dX.data() + ci * h * w);
                    }
                }
            }
        });
}

/// Adds b[c] to every element of channel c of x (shape c×...).
inline Var add_channel_bias(const Var& x, const Var& bias) {
    detail::require_same_tape(x, bias, "add_channel_bias");
    const std::size_t c = x.shape()[0];
    if (bias.value().numel() != c) throw ShapeError("add_channel_bias: bias length does not match channel count");
    const std::size_t plane = x.value().numel() / c;
    const auto X = x.value().data();
    const auto B = bias.value().data();
    std::vector<double> Y(X.begin(), X.end());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < plane; ++p) Y[ch * plane + p] += B[ch];
    const NodeId ix = x.id(), ib = bias.id();
    return x.tape().record("add_channel_bias", Tensor(x.shape(), std::move(Y)), {x, bias},
                           [ix, ib, c, plane](std::span<const double> G, GradAccess& acc) {
                               if (auto dX = acc.grad(ix); !dX.empty())
                                   for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += G[i];
                               if (auto dB = acc.grad(ib); !dB.empty())
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                       double s = 0.0;
                                       for (std::size_t p = 0; p < plane; ++p) s += G[ch * plane + p];
                                       dB[ch] += s;
                                   }
                           });
}

inline Var relu(const Var& a) {
    const auto A = a.value().data();
    a.tape().trace_kinks(A);
    std::vector<double> Y(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] > 0.0 ? A[i] : 0.0;
    const NodeId ia = a.id();
    return a.tape().record("relu", Tensor(a.shape(), std::move(Y)), {a},
                           [ia](std::span<const double> G, GradAccess& acc) {
                               const auto A = acc.value(ia).data();
                               auto dA = acc.grad(ia);
                               for (std::size_t i = 0; i < dA.size(); ++i)
                                   if (A[i] > 0.0) dA[i] += G[i];
                           });
}

inline Var add(const Var& a, const Var& b) {
    detail::require_same_tape(a, b, "add");
    detail::require_same_shape(a, b, "add");
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<double> Y(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] + B[i];
    const NodeId ia = a.id(), ib = b.id();
    return a.tape().record("add", Tensor(a.shape(), std::move(Y)), {a, b},
                           [ia, ib](std::span<const double> G, GradAccess& acc) {
                               for (NodeId id : {ia, ib})
                                   if (auto d = acc.grad(id); !d.empty())
                                       for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
                           });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_tape(a, b, "sub");
    detail::require_same_shape(a, b, "sub");
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<double> Y(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] - B[i];
    const NodeId ia = a.id(), ib = b.id();
    return a.tape().record("sub", Tensor(a.shape(), std::move(Y)), {a, b},
                           [ia, ib](std::span<const double> G, GradAccess& acc) {
                               if (auto d = acc.grad(ia); !d.empty())
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
                               if (auto d = acc.grad(ib); !d.empty())
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] -= G[i];
                           });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
    detail::require_same_tape(a, b, "mul");
    detail::require_same_shape(a, b, "mul");
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<double> Y(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] * B[i];
    const NodeId ia = a.id(), ib = b.id();
    return a.tape().record("mul", Tensor(a.shape(), std::move(Y)), {a, b},
                           [ia, ib](std::span<const double> G, GradAccess& acc) {
                               const auto A = acc.value(ia).data();
                               const auto B = acc.value(ib).data();
                               if (auto d = acc.grad(ia); !d.empty())
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i] * B[i];
                               if (auto d = acc.grad(ib); !d.empty())
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i] * A[i];
                           });
}

inline Var scale(const Var& a, double factor) {
    const auto A = a.value().data();
    std::vector<double> Y(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) Y[i] = A[i] * factor;
    const NodeId ia = a.id();
    return a.tape().record("scale", Tensor(a.shape(), std::move(Y)), {a},
                           [ia, factor](std::span<const double> G, GradAccess& acc) {
                               auto d = acc.grad(ia);
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i] * factor;
                           });
}

/// Natural log; every element must be strictly positive.
inline Var log(const Var& a) {
    const auto A = a.value().data();
    std::vector<double> Y(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) {
        if (!(A[i] > 0.0)) throw DomainError("log: argument must be strictly positive");
        Y[i] = std::log(A[i]);
    }
    const NodeId ia = a.id();
    return a.tape().record("log", Tensor(a.shape(), std::move(Y)), {a},
                           [ia](std::span<const double> G, GradAccess& acc) {
                               const auto A = acc.value(ia).data();
                               auto d = acc.grad(ia);
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i] / A[i];
                           });
}

/// Sum of all elements, as a scalar.
inline Var reduce_sum(const Var& a) {
    const auto A = a.value().data();
    double s = 0.0;
    for (double v : A) s += v;
    const NodeId ia = a.id();
    return a.tape().record("reduce_sum", Tensor::scalar(s), {a}, [ia](std::span<const double> G, GradAccess& acc) {
        auto d = acc.grad(ia);
        for (double& v : d) v += G[0];
    });
}

/// Per-channel spatial mean: c×h×w -> {c}.
inline Var global_avg_pool(const Var& a) {
    detail::require_ndim(a, 3, "global_avg_pool");
    const std::size_t c = a.shape()[0], plane = a.shape()[1] * a.shape()[2];
    const auto A = a.value().data();
    std::vector<double> Y(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += A[ch * plane + p];
        Y[ch] = s / static_cast<double>(plane);
    }
    const NodeId ia = a.id();
    return a.tape().record("global_avg_pool", Tensor({c}, std::move(Y)), {a},
                           [ia, c, plane](std::span<const double> G, GradAccess& acc) {
                               auto d = acc.grad(ia);
                               const double inv = 1.0 / static_cast<double>(plane);
                               for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t p = 0; p < plane; ++p) d[ch * plane + p] += G[ch] * inv;
                           });
}

/// Same elements in the same order under a new shape.
inline Var reshape(const Var& a, Shape shape) {
    if (shape_numel(shape) != a.value().numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    const NodeId ia = a.id();
    return a.tape().record("reshape", a.value().reshaped(std::move(shape)), {a},
                           [ia](std::span<const double> G, GradAccess& acc) {
                               auto d = acc.grad(ia);
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[i];
                           });
}

/// Copy of the value with no gradient path back to `a`.
inline Var detach(const Var& a) { return a.tape().constant(a.value()); }

}  // namespace tasn
