#ifndef BIGL_OPS_HPP
#define BIGL_OPS_HPP

// Differentiable tensor operations. Image tensors are NCHW; batched matrices
// are [B, rows, cols].

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "bigl/tensor.hpp"

namespace bigl {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                            to_string(a.shape()));
    }
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
        auto* g = grad_of(self, 0);
        if (!g) return;
        const auto& xin = self.parents[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * df(xin[i], self.value[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (auto* g = grad_of(self, p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * av[i];
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& bv = self.parents[1]->value;
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] / bv[i];
        }
        if (auto* g = grad_of(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i] * self.value[i] / bv[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

/// s - x
inline Tensor rsub_scalar(double s, const Tensor& x) {
    return detail::unary(x, [s](double v) { return s - v; }, [](double, double) { return -1.0; });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor abs(const Tensor& x) {
    return detail::unary(
        x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
    return detail::unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                         [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary(x, [](double v) { return std::tanh(v); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                         [](double, double y) { return y * (1.0 - y); });
}

/// Clamp into [lo, hi]; gradient is zero where the clamp is active.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                         [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Multiplies every element by a learnable single-element gate.
inline Tensor gate(const Tensor& x, const Tensor& alpha) {
    if (alpha.size() != 1) throw ShapeMismatch("gate: alpha must have one element");
    const double a = alpha.data()[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x.data()[i];
    return Tensor::make_result(x.shape(), std::move(out), {x, alpha}, [](detail::Node& self) {
        const auto& xv = self.parents[0]->value;
        const double a = self.parents[1]->value[0];
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * a;
        }
        if (auto* g = grad_of(self, 1)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
            (*g)[0] += acc;
        }
    });
}

// ----------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return Tensor::make_result({1}, {acc}, {x}, [](detail::Node& self) {
        if (auto* g = grad_of(self, 0)) {
            for (auto& v : *g) v += self.grad[0];
        }
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// [N, C, ...] -> [N, C]: sums over all trailing axes.
inline Tensor spatial_sum(const Tensor& x) {
    if (x.rank() < 2) throw ShapeMismatch("spatial_sum needs rank >= 2, got " + to_string(x.shape()));
    const auto n = x.dim(0), c = x.dim(1);
    const auto inner = static_cast<std::int64_t>(x.size()) / (n * c);
    std::vector<double> out(static_cast<std::size_t>(n * c), 0.0);
    for (std::int64_t i = 0; i < n * c; ++i) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < inner; ++k) acc += x.data()[i * inner + k];
        out[i] = acc;
    }
    return Tensor::make_result({n, c}, std::move(out), {x}, [inner](detail::Node& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                for (std::int64_t k = 0; k < inner; ++k) (*g)[i * inner + k] += self.grad[i];
            }
        }
    });
}

/// [N, C, H, W] -> [N, C, 1, 1]
inline Tensor global_avg_pool(const Tensor& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const double hw = static_cast<double>(x.dim(2) * x.dim(3));
    return scale(spatial_sum(x), 1.0 / hw).reshape({x.dim(0), x.dim(1), 1, 1});
}

// ------------------------------------------------------------ batch plumbing

/// Rows [begin, begin + count) along axis 0.
inline Tensor slice_batch(const Tensor& x, std::int64_t begin, std::int64_t count) {
    if (begin < 0 || count < 0 || begin + count > x.dim(0)) {
        throw ShapeMismatch("slice_batch out of range for " + to_string(x.shape()));
    }
    const auto stride = static_cast<std::int64_t>(x.size()) / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    std::vector<double> out(x.data().begin() + begin * stride, x.data().begin() + (begin + count) * stride);
    return Tensor::make_result(std::move(shape), std::move(out), {x}, [begin, stride](detail::Node& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * stride + i] += self.grad[i];
        }
    });
}

inline Tensor concat_batch(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_batch of nothing");
    Shape shape = parts[0].shape();
    shape[0] = 0;
    std::vector<double> out;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        Shape rest = p.shape();
        rest[0] = 0;
        if (rest != shape) throw ShapeMismatch("concat_batch: incompatible " + to_string(p.shape()));
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::int64_t total = 0;
    for (const auto& p : parts) total += p.dim(0);
    shape[0] = total;
    return Tensor::make_result(std::move(shape), std::move(out), parts, [offsets](detail::Node& self) {
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            if (auto* g = grad_of(self, p)) {
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[p] + i];
            }
        }
    });
}

/// Channel concatenation of two NCHW tensors with equal N, H, W.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 4, "concat_channels");
    detail::require_rank(b, 4, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeMismatch("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    std::vector<double> out(static_cast<std::size_t>(n * (ca + cb) * hw));
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a.data().begin() + i * ca * hw, ca * hw, out.begin() + i * (ca + cb) * hw);
        std::copy_n(b.data().begin() + i * cb * hw, cb * hw, out.begin() + (i * (ca + cb) + ca) * hw);
    }
    return Tensor::make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                               [n, ca, cb, hw](detail::Node& self) {
                                   for (std::int64_t i = 0; i < n; ++i) {
                                       const double* src = self.grad.data() + i * (ca + cb) * hw;
                                       if (auto* g = grad_of(self, 0)) {
                                           for (std::int64_t k = 0; k < ca * hw; ++k) (*g)[i * ca * hw + k] += src[k];
                                       }
                                       if (auto* g = grad_of(self, 1)) {
                                           for (std::int64_t k = 0; k < cb * hw; ++k)
                                               (*g)[i * cb * hw + k] += src[ca * hw + k];
                                       }
                                   }
                               });
}

// --------------------------------------------------------------- convolution

struct Conv2dGeometry {
    std::int64_t channels, height, width, kernel, stride, pad, out_height, out_width;
};

namespace detail {

/// Rows of length out_hw are written `ld` apart, so several samples can share
/// one column matrix.
inline void im2col(const double* img, const Conv2dGeometry& g, double* cols, std::int64_t ld) {
    for (std::int64_t c = 0; c < g.channels; ++c) {
        for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
            for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
                double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ld;
                for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    double* dst = row + oy * g.out_width;
                    if (iy < 0 || iy >= g.height) {
                        std::fill_n(dst, g.out_width, 0.0);
                        continue;
                    }
                    const double* src = img + (c * g.height + iy) * g.width;
                    for (std::int64_t ox = 0; ox < g.out_width; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im(const double* cols, const Conv2dGeometry& g, double* img, std::int64_t ld) {
    for (std::int64_t c = 0; c < g.channels; ++c) {
        for (std::int64_t ky = 0; ky < g.kernel; ++ky) {
            for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
                const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ld;
                for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) continue;
                    double* dst = img + (c * g.height + iy) * g.width;
                    const double* src = row + oy * g.out_width;
                    for (std::int64_t ox = 0; ox < g.out_width; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

/// Samples per GEMM; keeps the column buffer near 1 MB.
inline std::int64_t conv_chunk(std::int64_t n, std::int64_t kdim, std::int64_t out_hw) {
    constexpr std::int64_t kMaxColumnDoubles = 1 << 17;
    return std::clamp<std::int64_t>(kMaxColumnDoubles / std::max<std::int64_t>(kdim * out_hw, 1), 1, n);
}

}  // namespace detail

/// x: [N, Cin, H, W], weight: [Cout, Cin, k, k], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
                     std::int64_t pad) {
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(weight, 4, "conv2d weight");
    const auto n = x.dim(0), co = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != x.dim(1) || weight.dim(3) != k) {
        throw ShapeMismatch("conv2d: input " + to_string(x.shape()) + " weight " + to_string(weight.shape()));
    }
    Conv2dGeometry g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
    g.out_height = (g.height + 2 * pad - k) / stride + 1;
    g.out_width = (g.width + 2 * pad - k) / stride + 1;
    if (g.out_height <= 0 || g.out_width <= 0) throw ShapeMismatch("conv2d: empty output for " + to_string(x.shape()));
    const bool has_bias = bias.defined();
    if (has_bias && bias.size() != static_cast<std::size_t>(co)) throw ShapeMismatch("conv2d: bias size");

    const std::int64_t kdim = g.channels * k * k, out_hw = g.out_height * g.out_width;
    const std::int64_t in_stride = g.channels * g.height * g.width;
    const std::int64_t chunk = detail::conv_chunk(n, kdim, out_hw);
    std::vector<double> out(static_cast<std::size_t>(n * co * out_hw));
    std::vector<double> cols(static_cast<std::size_t>(kdim * chunk * out_hw));
    std::vector<double> ybuf(static_cast<std::size_t>(co * chunk * out_hw));
    detail::ConstMatMap w(weight.data().data(), co, kdim);
    for (std::int64_t i0 = 0; i0 < n; i0 += chunk) {
        const std::int64_t m = std::min(chunk, n - i0), ld = m * out_hw;
        for (std::int64_t i = 0; i < m; ++i) {
            detail::im2col(x.data().data() + (i0 + i) * in_stride, g, cols.data() + i * out_hw, ld);
        }
        detail::MatMap y(ybuf.data(), co, ld);
        y.noalias() = w * detail::ConstMatMap(cols.data(), kdim, ld);
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t c = 0; c < co; ++c) {
                const double b = has_bias ? bias.data()[c] : 0.0;
                const double* src = ybuf.data() + c * ld + i * out_hw;
                double* dst = out.data() + ((i0 + i) * co + c) * out_hw;
                for (std::int64_t p = 0; p < out_hw; ++p) dst[p] = src[p] + b;
            }
        }
    }

    std::vector<Tensor> parents{x, weight};
    if (has_bias) parents.push_back(bias);
    return Tensor::make_result(
        {n, co, g.out_height, g.out_width}, std::move(out), std::move(parents),
        [g, n, co, kdim, out_hw, in_stride, has_bias, chunk](detail::Node& self) {
            const auto& xv = self.parents[0]->value;
            const auto& wv = self.parents[1]->value;
            auto* gx = grad_of(self, 0);
            auto* gw = grad_of(self, 1);
            auto* gb = has_bias ? grad_of(self, 2) : nullptr;
            if (gb) {
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t c = 0; c < co; ++c) {
                        const double* src = self.grad.data() + (i * co + c) * out_hw;
                        double acc = 0.0;
                        for (std::int64_t p = 0; p < out_hw; ++p) acc += src[p];
                        (*gb)[c] += acc;
                    }
                }
            }
            if (!gw && !gx) return;
            std::vector<double> cols(static_cast<std::size_t>(kdim * chunk * out_hw));
            std::vector<double> dybuf(static_cast<std::size_t>(co * chunk * out_hw));
            detail::ConstMatMap w(wv.data(), co, kdim);
            for (std::int64_t i0 = 0; i0 < n; i0 += chunk) {
                const std::int64_t m = std::min(chunk, n - i0), ld = m * out_hw;
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t c = 0; c < co; ++c) {
                        std::copy_n(self.grad.data() + ((i0 + i) * co + c) * out_hw, out_hw,
                                    dybuf.data() + c * ld + i * out_hw);
                    }
                }
                detail::ConstMatMap dy(dybuf.data(), co, ld);
                if (gw) {
                    for (std::int64_t i = 0; i < m; ++i) {
                        detail::im2col(xv.data() + (i0 + i) * in_stride, g, cols.data() + i * out_hw, ld);
                    }
                    detail::MatMap(gw->data(), co, kdim).noalias() +=
                        dy * detail::ConstMatMap(cols.data(), kdim, ld).transpose();
                }
                if (gx) {
                    detail::MatMap(cols.data(), kdim, ld).noalias() = w.transpose() * dy;
                    for (std::int64_t i = 0; i < m; ++i) {
                        detail::col2im(cols.data() + i * out_hw, g, gx->data() + (i0 + i) * in_stride, ld);
                    }
                }
            }
        });
}

// ------------------------------------------------------------ spatial resize

inline Tensor max_pool2(const Tensor& x) {
    detail::require_rank(x, 4, "max_pool2");
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto ho = h / 2, wo = w / 2;
    if (ho == 0 || wo == 0) throw ShapeMismatch("max_pool2: input too small " + to_string(x.shape()));
    std::vector<double> out(static_cast<std::size_t>(n * c * ho * wo));
    std::vector<std::int64_t> argmax(out.size());
    for (std::int64_t p = 0; p < n * c; ++p) {
        const double* src = x.data().data() + p * h * w;
        for (std::int64_t y = 0; y < ho; ++y) {
            for (std::int64_t xx = 0; xx < wo; ++xx) {
                std::int64_t best = (2 * y) * w + 2 * xx;
                for (std::int64_t dy = 0; dy < 2; ++dy) {
                    for (std::int64_t dx = 0; dx < 2; ++dx) {
                        const std::int64_t idx = (2 * y + dy) * w + 2 * xx + dx;
                        if (src[idx] > src[best]) best = idx;
                    }
                }
                const std::int64_t o = (p * ho + y) * wo + xx;
                out[o] = src[best];
                argmax[o] = p * h * w + best;
            }
        }
    }
    return Tensor::make_result({n, c, ho, wo}, std::move(out), {x}, [argmax](detail::Node& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[argmax[i]] += self.grad[i];
        }
    });
}

/// Nearest-neighbour 2x upsampling.
inline Tensor upsample2(const Tensor& x) {
    detail::require_rank(x, 4, "upsample2");
    const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<double> out(static_cast<std::size_t>(nc * 4 * h * w));
    for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t y = 0; y < 2 * h; ++y) {
            for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
                out[(p * 2 * h + y) * 2 * w + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    return Tensor::make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                               [nc, h, w](detail::Node& self) {
                                   auto* g = grad_of(self, 0);
                                   if (!g) return;
                                   for (std::int64_t p = 0; p < nc; ++p) {
                                       for (std::int64_t y = 0; y < 2 * h; ++y) {
                                           for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
                                               (*g)[(p * h + y / 2) * w + xx / 2] +=
                                                   self.grad[(p * 2 * h + y) * 2 * w + xx];
                                           }
                                       }
                                   }
                               });
}

// ------------------------------------------------------------- normalization

/// Per-sample, per-channel normalization over H x W with affine gamma/beta [C].
inline Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require_rank(x, 4, "instance_norm");
    const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
        throw ShapeMismatch("instance_norm: affine size does not match channels");
    }
    std::vector<double> out(x.size()), xhat(x.size()), inv_std(static_cast<std::size_t>(n * c));
    for (std::int64_t p = 0; p < n * c; ++p) {
        const double* src = x.data().data() + p * hw;
        double mu = 0.0;
        for (std::int64_t k = 0; k < hw; ++k) mu += src[k];
        mu /= static_cast<double>(hw);
        double var = 0.0;
        for (std::int64_t k = 0; k < hw; ++k) var += (src[k] - mu) * (src[k] - mu);
        var /= static_cast<double>(hw);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[p] = is;
        const double ga = gamma.data()[p % c], be = beta.data()[p % c];
        for (std::int64_t k = 0; k < hw; ++k) {
            xhat[p * hw + k] = (src[k] - mu) * is;
            out[p * hw + k] = xhat[p * hw + k] * ga + be;
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [n, c, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            const auto& gv = self.parents[1]->value;
            auto* gx = grad_of(self, 0);
            auto* gg = grad_of(self, 1);
            auto* gbeta = grad_of(self, 2);
            for (std::int64_t p = 0; p < n * c; ++p) {
                const double* dy = self.grad.data() + p * hw;
                const double* xh = xhat.data() + p * hw;
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (std::int64_t k = 0; k < hw; ++k) {
                    sum_dy += dy[k];
                    sum_dy_xh += dy[k] * xh[k];
                }
                if (gg) (*gg)[p % c] += sum_dy_xh;
                if (gbeta) (*gbeta)[p % c] += sum_dy;
                if (gx) {
                    const double ga = gv[p % c];
                    const double m1 = sum_dy / static_cast<double>(hw), m2 = sum_dy_xh / static_cast<double>(hw);
                    for (std::int64_t k = 0; k < hw; ++k) {
                        (*gx)[p * hw + k] += ga * inv_std[p] * (dy[k] - m1 - xh[k] * m2);
                    }
                }
            }
        });
}

// ------------------------------------------------------------------- softmax

/// Softmax across axis 1 of an [N, C, ...] tensor.
inline Tensor softmax_channels(const Tensor& x) {
    if (x.rank() < 2) throw ShapeMismatch("softmax_channels needs rank >= 2");
    const auto n = x.dim(0), c = x.dim(1);
    const auto inner = static_cast<std::int64_t>(x.size()) / (n * c);
    std::vector<double> out(x.size());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t k = 0; k < inner; ++k) {
            const double* src = x.data().data() + i * c * inner + k;
            double* dst = out.data() + i * c * inner + k;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < c; ++j) mx = std::max(mx, src[j * inner]);
            double z = 0.0;
            for (std::int64_t j = 0; j < c; ++j) z += (dst[j * inner] = std::exp(src[j * inner] - mx));
            for (std::int64_t j = 0; j < c; ++j) dst[j * inner] /= z;
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [n, c, inner](detail::Node& self) {
        auto* g = grad_of(self, 0);
        if (!g) return;
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t k = 0; k < inner; ++k) {
                const std::int64_t base = i * c * inner + k;
                double dot = 0.0;
                for (std::int64_t j = 0; j < c; ++j) dot += self.grad[base + j * inner] * self.value[base + j * inner];
                for (std::int64_t j = 0; j < c; ++j) {
                    (*g)[base + j * inner] += self.value[base + j * inner] * (self.grad[base + j * inner] - dot);
                }
            }
        }
    });
}

/// Softmax along the last axis.
inline Tensor softmax_rows(const Tensor& x) {
    const auto cols = x.dim(x.rank() - 1);
    const auto rows = static_cast<std::int64_t>(x.size()) / cols;
    std::vector<double> out(x.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * cols;
        double* dst = out.data() + r * cols;
        const double mx = *std::max_element(src, src + cols);
        double z = 0.0;
        for (std::int64_t j = 0; j < cols; ++j) z += (dst[j] = std::exp(src[j] - mx));
        for (std::int64_t j = 0; j < cols; ++j) dst[j] /= z;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, cols](detail::Node& self) {
        auto* g = grad_of(self, 0);
        if (!g) return;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * cols;
            const double* dy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::int64_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
            for (std::int64_t j = 0; j < cols; ++j) (*g)[r * cols + j] += y[j] * (dy[j] - dot);
        }
    });
}

// -------------------------------------------------------- batched matrices

/// [B, M, K] x [B, K, N] -> [B, M, N]
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 3, "bmm");
    detail::require_rank(b, 3, "bmm");
    const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) {
        throw ShapeMismatch("bmm: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(batch * m * nn));
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::MatMap(out.data() + i * m * nn, m, nn).noalias() =
            detail::ConstMatMap(a.data().data() + i * m * k, m, k) *
            detail::ConstMatMap(b.data().data() + i * k * nn, k, nn);
    }
    return Tensor::make_result({batch, m, nn}, std::move(out), {a, b}, [batch, m, k, nn](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = grad_of(self, 0);
        auto* gb = grad_of(self, 1);
        for (std::int64_t i = 0; i < batch; ++i) {
            detail::ConstMatMap dy(self.grad.data() + i * m * nn, m, nn);
            if (ga) {
                detail::MatMap(ga->data() + i * m * k, m, k).noalias() +=
                    dy * detail::ConstMatMap(bv.data() + i * k * nn, k, nn).transpose();
            }
            if (gb) {
                detail::MatMap(gb->data() + i * k * nn, k, nn).noalias() +=
                    detail::ConstMatMap(av.data() + i * m * k, m, k).transpose() * dy;
            }
        }
    });
}

/// [B, M, N] -> [B, N, M]
inline Tensor transpose_last2(const Tensor& x) {
    detail::require_rank(x, 3, "transpose_last2");
    const auto batch = x.dim(0), m = x.dim(1), nn = x.dim(2);
    std::vector<double> out(x.size());
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::MatMap(out.data() + i * m * nn, nn, m) =
            detail::ConstMatMap(x.data().data() + i * m * nn, m, nn).transpose();
    }
    return Tensor::make_result({batch, nn, m}, std::move(out), {x}, [batch, m, nn](detail::Node& self) {
        auto* g = grad_of(self, 0);
        if (!g) return;
        for (std::int64_t i = 0; i < batch; ++i) {
            detail::MatMap(g->data() + i * m * nn, m, nn) +=
                detail::ConstMatMap(self.grad.data() + i * m * nn, nn, m).transpose();
        }
    });
}

// ------------------------------------------------------------------- checks

inline bool all_finite(const Tensor& x) {
    return std::all_of(x.data().begin(), x.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace bigl

#endif  // BIGL_OPS_HPP
