#include "faceaug/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "faceaug/errors.hpp"

namespace faceaug {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

// Geometry in convolution orientation: the "input" side (h,w,ci) is the
// larger one for stride > 1, the "output" side (ho,wo,co) the smaller.
// A transposed convolution runs the same three kernels with the roles of
// forward and input-gradient swapped.
struct ConvGeom {
    int n, h, w, ci;
    int k, co;
    int stride, pad;
    int ho, wo;

    int64_t patch() const { return static_cast<int64_t>(k) * k * ci; }
    int64_t rows() const { return static_cast<int64_t>(ho) * wo; }
};

ConvGeom conv_geom(const std::vector<int>& xs, const std::vector<int>& ws, int stride, int pad) {
    if (xs.size() != 4) throw ShapeError("conv2d: input must be rank 4, got " + Tensor::shape_str(xs));
    if (ws.size() != 4) throw ShapeError("conv2d: weight must be rank 4, got " + Tensor::shape_str(ws));
    if (ws[1] != ws[2]) throw ShapeError("conv2d: kernel must be square, got " + Tensor::shape_str(ws));
    if (xs[3] != ws[3])
        throw ShapeError("conv2d: input channels " + std::to_string(xs[3]) + " != weight channels " +
                         std::to_string(ws[3]));
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and pad >= 0");
    ConvGeom g;
    g.n = xs[0];
    g.h = xs[1];
    g.w = xs[2];
    g.ci = xs[3];
    g.co = ws[0];
    g.k = ws[1];
    g.stride = stride;
    g.pad = pad;
    if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k)
        throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " exceeds padded input " +
                         Tensor::shape_str(xs));
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    return g;
}

ConvGeom deconv_geom(const std::vector<int>& xs, const std::vector<int>& ws, int stride, int pad,
                     int output_pad) {
    if (xs.size() != 4)
        throw ShapeError("conv2d_transpose: input must be rank 4, got " + Tensor::shape_str(xs));
    if (ws.size() != 4)
        throw ShapeError("conv2d_transpose: weight must be rank 4, got " + Tensor::shape_str(ws));
    if (ws[1] != ws[2]) throw ShapeError("conv2d_transpose: kernel must be square");
    if (xs[3] != ws[0])
        throw ShapeError("conv2d_transpose: input channels " + std::to_string(xs[3]) +
                         " != weight input channels " + std::to_string(ws[0]));
    if (stride < 1 || pad < 0) throw ConfigError("conv2d_transpose: stride must be >= 1 and pad >= 0");
    if (output_pad < 0 || output_pad >= stride)
        throw ConfigError("conv2d_transpose: output_pad must be in [0, stride)");
    ConvGeom g;
    g.n = xs[0];
    g.ho = xs[1];
    g.wo = xs[2];
    g.co = ws[0];
    g.ci = ws[3];
    g.k = ws[1];
    g.stride = stride;
    g.pad = pad;
    g.h = (xs[1] - 1) * stride - 2 * pad + g.k + output_pad;
    g.w = (xs[2] - 1) * stride - 2 * pad + g.k + output_pad;
    if (g.h < 1 || g.w < 1)
        throw ShapeError("conv2d_transpose: output collapses for input " + Tensor::shape_str(xs));
    return g;
}

// Patch matrix of one image: (ho*wo, k*k*ci), zero padded.
void im2col(const float* x, const ConvGeom& g, int n, float* cols) {
    const float* img = x + static_cast<int64_t>(n) * g.h * g.w * g.ci;
    int64_t r = 0;
    for (int oh = 0; oh < g.ho; ++oh) {
        for (int ow = 0; ow < g.wo; ++ow, ++r) {
            float* row = cols + r * g.patch();
            for (int kh = 0; kh < g.k; ++kh) {
                const int ih = oh * g.stride - g.pad + kh;
                for (int kw = 0; kw < g.k; ++kw) {
                    const int iw = ow * g.stride - g.pad + kw;
                    float* dst = row + (static_cast<int64_t>(kh) * g.k + kw) * g.ci;
                    if (ih < 0 || ih >= g.h || iw < 0 || iw >= g.w) {
                        std::fill(dst, dst + g.ci, 0.0f);
                    } else {
                        const float* src = img + (static_cast<int64_t>(ih) * g.w + iw) * g.ci;
                        std::copy(src, src + g.ci, dst);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch rows back into image n of x.
void col2im(const float* cols, const ConvGeom& g, int n, float* x) {
    float* img = x + static_cast<int64_t>(n) * g.h * g.w * g.ci;
    int64_t r = 0;
    for (int oh = 0; oh < g.ho; ++oh) {
        for (int ow = 0; ow < g.wo; ++ow, ++r) {
            const float* row = cols + r * g.patch();
            for (int kh = 0; kh < g.k; ++kh) {
                const int ih = oh * g.stride - g.pad + kh;
                if (ih < 0 || ih >= g.h) continue;
                for (int kw = 0; kw < g.k; ++kw) {
                    const int iw = ow * g.stride - g.pad + kw;
                    if (iw < 0 || iw >= g.w) continue;
                    const float* src = row + (static_cast<int64_t>(kh) * g.k + kw) * g.ci;
                    float* dst = img + (static_cast<int64_t>(ih) * g.w + iw) * g.ci;
                    for (int c = 0; c < g.ci; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

// y(n,ho,wo,co) += conv(x, w); w viewed as (co, k*k*ci).
void conv_fwd_acc(const float* x, const float* w, const ConvGeom& g, float* y) {
    std::vector<float> cols(static_cast<size_t>(g.rows() * g.patch()));
    CMapM wm(w, g.co, g.patch());
    for (int n = 0; n < g.n; ++n) {
        im2col(x, g, n, cols.data());
        CMapM cm(cols.data(), g.rows(), g.patch());
        MapM ym(y + static_cast<int64_t>(n) * g.rows() * g.co, g.rows(), g.co);
        ym.noalias() += cm * wm.transpose();
    }
}

// gx(n,h,w,ci) += scatter(gy * w).
void conv_bwd_input_acc(const float* gy, const float* w, const ConvGeom& g, float* gx) {
    std::vector<float> cols(static_cast<size_t>(g.rows() * g.patch()));
    CMapM wm(w, g.co, g.patch());
    for (int n = 0; n < g.n; ++n) {
        CMapM gym(gy + static_cast<int64_t>(n) * g.rows() * g.co, g.rows(), g.co);
        MapM cm(cols.data(), g.rows(), g.patch());
        cm.noalias() = gym * wm;
        col2im(cols.data(), g, n, gx);
    }
}

// gw(co, k*k*ci) += gy^T * patches(x).
void conv_bwd_weight_acc(const float* x, const float* gy, const ConvGeom& g, float* gw) {
    std::vector<float> cols(static_cast<size_t>(g.rows() * g.patch()));
    MapM gwm(gw, g.co, g.patch());
    for (int n = 0; n < g.n; ++n) {
        im2col(x, g, n, cols.data());
        CMapM cm(cols.data(), g.rows(), g.patch());
        CMapM gym(gy + static_cast<int64_t>(n) * g.rows() * g.co, g.rows(), g.co);
        gwm.noalias() += gym.transpose() * cm;
    }
}

void check_bias(const Var& b, int channels, const char* where) {
    if (!b.valid()) return;
    if (b.shape().size() != 1 || b.dim(0) != channels)
        throw ShapeError(std::string(where) + ": bias must be (" + std::to_string(channels) + "), got " +
                         Tensor::shape_str(b.shape()));
}

// Bias add / grad over the trailing (channel) dimension.
void add_channel_bias(Tensor& y, const Tensor& b) {
    const int c = y.dim(y.rank() - 1);
    const int64_t outer = y.size() / c;
    for (int64_t i = 0; i < outer; ++i) {
        float* row = y.data() + i * c;
        for (int j = 0; j < c; ++j) row[j] += b[j];
    }
}

void bias_grad_acc(const Tensor& gy, Tensor& gb) {
    const int c = gy.dim(gy.rank() - 1);
    const int64_t outer = gy.size() / c;
    for (int64_t i = 0; i < outer; ++i) {
        const float* row = gy.data() + i * c;
        for (int j = 0; j < c; ++j) gb[j] += row[j];
    }
}

Tape& tape_of(const Var& v, const char* where) {
    if (!v.valid()) throw ConfigError(std::string(where) + ": invalid Var");
    return *v.tape;
}

void same_tape(const Var& a, const Var& b, const char* where) {
    if (!b.valid() || a.tape != b.tape)
        throw Error(std::string(where) + ": operands from different tapes");
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
    Tape& t = tape_of(a, "add");
    same_tape(a, b, "add");
    check_same_shape(a.value(), b.value(), "add");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    const int ai = a.id, bi = b.id;
    return t.make(std::move(y), {a, b}, [ai, bi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        if (tp.wants_grad(ai)) {
            Tensor& ga = tp.grad_buffer(ai);
            for (int64_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
        }
        if (tp.wants_grad(bi)) {
            Tensor& gb = tp.grad_buffer(bi);
            for (int64_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i];
        }
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, "sub");
    same_tape(a, b, "sub");
    check_same_shape(a.value(), b.value(), "sub");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    const int ai = a.id, bi = b.id;
    return t.make(std::move(y), {a, b}, [ai, bi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        if (tp.wants_grad(ai)) {
            Tensor& ga = tp.grad_buffer(ai);
            for (int64_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
        }
        if (tp.wants_grad(bi)) {
            Tensor& gb = tp.grad_buffer(bi);
            for (int64_t i = 0; i < g->size(); ++i) gb[i] -= (*g)[i];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, "mul");
    same_tape(a, b, "mul");
    check_same_shape(a.value(), b.value(), "mul");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    const int ai = a.id, bi = b.id;
    return t.make(std::move(y), {a, b}, [ai, bi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        const Tensor& av = tp.value(ai);
        const Tensor& bv2 = tp.value(bi);
        if (tp.wants_grad(ai)) {
            Tensor& ga = tp.grad_buffer(ai);
            for (int64_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i] * bv2[i];
        }
        if (tp.wants_grad(bi)) {
            Tensor& gb = tp.grad_buffer(bi);
            for (int64_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i] * av[i];
        }
    });
}

Var scale(Var a, float s) {
    Tape& t = tape_of(a, "scale");
    Tensor y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= s;
    const int ai = a.id;
    return t.make(std::move(y), {a}, [ai, s](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(ai)) return;
        Tensor& ga = tp.grad_buffer(ai);
        for (int64_t i = 0; i < g->size(); ++i) ga[i] += s * (*g)[i];
    });
}

Var add_scalar(Var a, float s) {
    Tape& t = tape_of(a, "add_scalar");
    Tensor y = a.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] += s;
    const int ai = a.id;
    return t.make(std::move(y), {a}, [ai](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(ai)) return;
        Tensor& ga = tp.grad_buffer(ai);
        for (int64_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
    });
}

Var relu(Var x) {
    Tape& t = tape_of(x, "relu");
    Tensor y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0f ? y[i] : 0.0f;
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        const Tensor& xv = tp.value(xi);
        Tensor& gx = tp.grad_buffer(xi);
        for (int64_t i = 0; i < g->size(); ++i)
            if (xv[i] > 0.0f) gx[i] += (*g)[i];
    });
}

Var tanh_act(Var x) {
    Tape& t = tape_of(x, "tanh");
    Tensor y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::tanh(y[i]);
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        const Tensor& yv = tp.value(self);
        Tensor& gx = tp.grad_buffer(xi);
        for (int64_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * (1.0f - yv[i] * yv[i]);
    });
}

Var sigmoid_act(Var x) {
    Tape& t = tape_of(x, "sigmoid");
    Tensor y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = 1.0f / (1.0f + std::exp(-y[i]));
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        const Tensor& yv = tp.value(self);
        Tensor& gx = tp.grad_buffer(xi);
        for (int64_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * yv[i] * (1.0f - yv[i]);
    });
}

Var clamp(Var x, float lo, float hi) {
    Tape& t = tape_of(x, "clamp");
    if (!(lo <= hi)) throw ConfigError("clamp: lo must be <= hi");
    Tensor y = x.value();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::min(std::max(y[i], lo), hi);
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi, lo, hi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        const Tensor& xv = tp.value(xi);
        Tensor& gx = tp.grad_buffer(xi);
        for (int64_t i = 0; i < g->size(); ++i)
            if (xv[i] >= lo && xv[i] <= hi) gx[i] += (*g)[i];
    });
}

Var mul_mask(Var x, Var mask) {
    Tape& t = tape_of(x, "mul_mask");
    same_tape(x, mask, "mul_mask");
    const auto& xs = x.shape();
    const auto& ms = mask.shape();
    if (xs.size() != 4 || ms.size() != 4 || ms[3] != 1 || ms[0] != xs[0] || ms[1] != xs[1] ||
        ms[2] != xs[2])
        throw ShapeError("mul_mask: need x (N,H,W,C) and mask (N,H,W,1), got " + Tensor::shape_str(xs) +
                         " and " + Tensor::shape_str(ms));
    const int c = xs[3];
    const int64_t pixels = static_cast<int64_t>(xs[0]) * xs[1] * xs[2];
    Tensor y = x.value();
    const Tensor& mv = mask.value();
    for (int64_t p = 0; p < pixels; ++p) {
        const float m = mv[p];
        float* row = y.data() + p * c;
        for (int j = 0; j < c; ++j) row[j] *= m;
    }
    const int xi = x.id, mi = mask.id;
    return t.make(std::move(y), {x, mask}, [xi, mi, c, pixels](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        const Tensor& xv = tp.value(xi);
        const Tensor& mv2 = tp.value(mi);
        if (tp.wants_grad(xi)) {
            Tensor& gx = tp.grad_buffer(xi);
            for (int64_t p = 0; p < pixels; ++p) {
                const float m = mv2[p];
                for (int j = 0; j < c; ++j) gx[p * c + j] += (*g)[p * c + j] * m;
            }
        }
        if (tp.wants_grad(mi)) {
            Tensor& gm = tp.grad_buffer(mi);
            for (int64_t p = 0; p < pixels; ++p) {
                double s = 0.0;
                for (int j = 0; j < c; ++j)
                    s += static_cast<double>((*g)[p * c + j]) * xv[p * c + j];
                gm[p] += static_cast<float>(s);
            }
        }
    });
}

// ---------------------------------------------------------------- convolution

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    Tape& t = tape_of(x, "conv2d");
    same_tape(x, w, "conv2d");
    if (b.valid()) same_tape(x, b, "conv2d");
    const ConvGeom g = conv_geom(x.shape(), w.shape(), stride, pad);
    check_bias(b, g.co, "conv2d");

    Tensor y({g.n, g.ho, g.wo, g.co});
    conv_fwd_acc(x.value().data(), w.value().data(), g, y.data());
    if (b.valid()) add_channel_bias(y, b.value());

    std::vector<Var> parents = b.valid() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    const int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
    return t.make(std::move(y), parents, [g, xi, wi, bi](Tape& tp, int self) {
        const Tensor* gy = tp.grad(self);
        if (!gy) return;
        if (tp.wants_grad(xi))
            conv_bwd_input_acc(gy->data(), tp.value(wi).data(), g, tp.grad_buffer(xi).data());
        if (tp.wants_grad(wi))
            conv_bwd_weight_acc(tp.value(xi).data(), gy->data(), g, tp.grad_buffer(wi).data());
        if (bi >= 0 && tp.wants_grad(bi)) bias_grad_acc(*gy, tp.grad_buffer(bi));
    });
}

Var conv2d_transpose(Var x, Var w, Var b, int stride, int pad, int output_pad) {
    Tape& t = tape_of(x, "conv2d_transpose");
    same_tape(x, w, "conv2d_transpose");
    if (b.valid()) same_tape(x, b, "conv2d_transpose");
    const ConvGeom g = deconv_geom(x.shape(), w.shape(), stride, pad, output_pad);
    check_bias(b, g.ci, "conv2d_transpose");

    Tensor y({g.n, g.h, g.w, g.ci});
    conv_bwd_input_acc(x.value().data(), w.value().data(), g, y.data());
    if (b.valid()) add_channel_bias(y, b.value());

    std::vector<Var> parents = b.valid() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    const int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
    return t.make(std::move(y), parents, [g, xi, wi, bi](Tape& tp, int self) {
        const Tensor* gy = tp.grad(self);
        if (!gy) return;
        if (tp.wants_grad(xi))
            conv_fwd_acc(gy->data(), tp.value(wi).data(), g, tp.grad_buffer(xi).data());
        if (tp.wants_grad(wi))
            conv_bwd_weight_acc(gy->data(), tp.value(xi).data(), g, tp.grad_buffer(wi).data());
        if (bi >= 0 && tp.wants_grad(bi)) bias_grad_acc(*gy, tp.grad_buffer(bi));
    });
}

// ---------------------------------------------------------- batch normalization

Var batch_norm(Var x, Var gamma, Var beta, BnBuffers& buffers, const Fwd& fwd, float momentum,
               float eps) {
    Tape& t = tape_of(x, "batch_norm");
    same_tape(x, gamma, "batch_norm");
    same_tape(x, beta, "batch_norm");
    const auto& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("batch_norm: input must be rank 4, got " + Tensor::shape_str(xs));
    const int c = xs[3];
    if (gamma.shape() != std::vector<int>{c} || beta.shape() != std::vector<int>{c})
        throw ShapeError("batch_norm: gamma/beta must be (" + std::to_string(c) + ")");
    if (buffers.running_mean.size() != c)
        throw ShapeError("batch_norm: buffers sized " + std::to_string(buffers.running_mean.size()) +
                         ", input has " + std::to_string(c) + " channels");

    const int64_t m = static_cast<int64_t>(xs[0]) * xs[1] * xs[2];
    const Tensor& xv = x.value();
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();

    std::vector<float> mean(static_cast<size_t>(c)), ivar(static_cast<size_t>(c));
    const bool train = fwd.mode == Mode::Train;
    if (train) {
        std::vector<double> sum(static_cast<size_t>(c), 0.0), sq(static_cast<size_t>(c), 0.0);
        for (int64_t i = 0; i < m; ++i) {
            const float* row = xv.data() + i * c;
            for (int j = 0; j < c; ++j) {
                sum[static_cast<size_t>(j)] += row[j];
                sq[static_cast<size_t>(j)] += static_cast<double>(row[j]) * row[j];
            }
        }
        for (int j = 0; j < c; ++j) {
            const double mu = sum[static_cast<size_t>(j)] / static_cast<double>(m);
            const double var = sq[static_cast<size_t>(j)] / static_cast<double>(m) - mu * mu;
            mean[static_cast<size_t>(j)] = static_cast<float>(mu);
            ivar[static_cast<size_t>(j)] =
                static_cast<float>(1.0 / std::sqrt(std::max(var, 0.0) + eps));
            if (fwd.update_stats) {
                const double unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1) : var;
                buffers.running_mean[j] =
                    (1.0f - momentum) * buffers.running_mean[j] + momentum * static_cast<float>(mu);
                buffers.running_var[j] =
                    (1.0f - momentum) * buffers.running_var[j] + momentum * static_cast<float>(unbiased);
            }
        }
    } else {
        for (int j = 0; j < c; ++j) {
            mean[static_cast<size_t>(j)] = buffers.running_mean[j];
            ivar[static_cast<size_t>(j)] =
                1.0f / std::sqrt(std::max(buffers.running_var[j], 0.0f) + eps);
        }
    }

    Tensor y(xs);
    for (int64_t i = 0; i < m; ++i) {
        const float* row = xv.data() + i * c;
        float* out = y.data() + i * c;
        for (int j = 0; j < c; ++j)
            out[j] = gv[j] * (row[j] - mean[static_cast<size_t>(j)]) * ivar[static_cast<size_t>(j)] +
                     bv[j];
    }

    const int xi = x.id, gi = gamma.id, bi = beta.id;
    return t.make(std::move(y), {x, gamma, beta},
                  [xi, gi, bi, c, m, train, mean, ivar](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        const Tensor& xv2 = tp.value(xi);
        const Tensor& gv2 = tp.value(gi);

        // Per-channel reductions shared by all three gradients.
        std::vector<double> sum_g(static_cast<size_t>(c), 0.0), sum_gx(static_cast<size_t>(c), 0.0);
        for (int64_t i = 0; i < m; ++i) {
            const float* grow = g->data() + i * c;
            const float* xrow = xv2.data() + i * c;
            for (int j = 0; j < c; ++j) {
                const size_t sj = static_cast<size_t>(j);
                const double xhat = (xrow[j] - mean[sj]) * ivar[sj];
                sum_g[sj] += grow[j];
                sum_gx[sj] += grow[j] * xhat;
            }
        }
        if (tp.wants_grad(gi)) {
            Tensor& gg = tp.grad_buffer(gi);
            for (int j = 0; j < c; ++j) gg[j] += static_cast<float>(sum_gx[static_cast<size_t>(j)]);
        }
        if (tp.wants_grad(bi)) {
            Tensor& gb = tp.grad_buffer(bi);
            for (int j = 0; j < c; ++j) gb[j] += static_cast<float>(sum_g[static_cast<size_t>(j)]);
        }
        if (tp.wants_grad(xi)) {
            Tensor& gx = tp.grad_buffer(xi);
            const double md = static_cast<double>(m);
            for (int64_t i = 0; i < m; ++i) {
                const float* grow = g->data() + i * c;
                const float* xrow = xv2.data() + i * c;
                float* gxrow = gx.data() + i * c;
                for (int j = 0; j < c; ++j) {
                    const size_t sj = static_cast<size_t>(j);
                    const double a = static_cast<double>(gv2[j]) * ivar[sj];
                    if (train) {
                        const double xhat = (xrow[j] - mean[sj]) * ivar[sj];
                        gxrow[j] += static_cast<float>(
                            a * (grow[j] - sum_g[sj] / md - xhat * sum_gx[sj] / md));
                    } else {
                        gxrow[j] += static_cast<float>(a * grow[j]);
                    }
                }
            }
        }
    });
}

// ------------------------------------------------------- spectral normalization

void SnState::init(int rows, int block, Rng& rng) {
    basis = Tensor({rows, block});
    for (int64_t i = 0; i < basis.size(); ++i) basis[i] = rng.normal_f();
    Eigen::MatrixXf b = CMapM(basis.data(), rows, block);
    Eigen::HouseholderQR<Eigen::MatrixXf> qr(b);
    Eigen::MatrixXf q = qr.householderQ() * Eigen::MatrixXf::Identity(rows, block);
    MapM(basis.data(), rows, block) = q;
}

SigmaEstimate spectral_sigma(const Tensor& w_matrix, SnState& state, int steps) {
    if (w_matrix.rank() < 2) throw ShapeError("spectral_sigma: need at least rank 2 weight");
    const int rows = w_matrix.dim(0);
    const int cols = static_cast<int>(w_matrix.size() / rows);
    if (rows < 1 || cols < 1) throw ShapeError("spectral_sigma: degenerate weight");
    const int block = std::min({32, rows, cols});
    if (!state.initialized()) {
        // Deterministic lazy init keyed on the shape.
        Rng rng(0x5bd1e995u ^ (static_cast<uint64_t>(rows) * 0x10001u + static_cast<uint64_t>(cols)));
        state.init(rows, block, rng);
    }
    if (state.basis.dim(0) != rows || state.basis.dim(1) != block)
        throw ShapeError("spectral_sigma: state basis " + state.basis.shape_str() +
                         " does not match weight rows " + std::to_string(rows));

    const Eigen::MatrixXf w = CMapM(w_matrix.data(), rows, cols);
    Eigen::MatrixXf u = CMapM(state.basis.data(), rows, block);
    for (int it = 0; it < steps; ++it) {
        Eigen::MatrixXf v = w.transpose() * u;
        Eigen::MatrixXf z = w * v;
        Eigen::HouseholderQR<Eigen::MatrixXf> qr(z);
        u = qr.householderQ() * Eigen::MatrixXf::Identity(rows, block);
    }
    Eigen::MatrixXf b = u.transpose() * w;  // block x cols, Rayleigh-Ritz restriction
    Eigen::JacobiSVD<Eigen::MatrixXf> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::VectorXf u1 = u * svd.matrixU().col(0);
    Eigen::VectorXf v1 = svd.matrixV().col(0);
    float sigma = u1.dot(w * v1);
    if (sigma < 0.0f) {
        v1 = -v1;
        sigma = -sigma;
    }
    MapM(state.basis.data(), rows, block) = u;

    SigmaEstimate est;
    est.sigma = sigma;
    est.u = Tensor({rows});
    est.v = Tensor({cols});
    for (int r = 0; r < rows; ++r) est.u[r] = u1(r);
    for (int cc = 0; cc < cols; ++cc) est.v[cc] = v1(cc);
    return est;
}

Var spectral_normalize(Var w, SnState& state, int steps, bool update) {
    Tape& t = tape_of(w, "spectral_normalize");
    if (steps < 1) throw ConfigError("spectral_normalize: steps must be >= 1");
    SnState scratch;
    if (!update) scratch.basis = state.basis;
    SnState& st = update ? state : scratch;
    const SigmaEstimate est = spectral_sigma(w.value(), st, steps);

    const float tiny = 1e-12f;
    Tensor y = w.value();
    const bool degenerate = est.sigma <= tiny;
    if (!degenerate) {
        const float inv = 1.0f / est.sigma;
        for (int64_t i = 0; i < y.size(); ++i) y[i] *= inv;
    }
    const int wi = w.id;
    const int rows = w.value().dim(0);
    const int cols = static_cast<int>(w.value().size() / rows);
    const float sigma = est.sigma;
    const Tensor u1 = est.u;
    const Tensor v1 = est.v;
    return t.make(std::move(y), {w}, [wi, rows, cols, sigma, u1, v1, degenerate](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(wi)) return;
        Tensor& gw = tp.grad_buffer(wi);
        if (degenerate) {
            for (int64_t i = 0; i < g->size(); ++i) gw[i] += (*g)[i];
            return;
        }
        const Tensor& yv = tp.value(self);  // w / sigma
        double dot = 0.0;
        for (int64_t i = 0; i < g->size(); ++i) dot += static_cast<double>((*g)[i]) * yv[i];
        const float inv = 1.0f / sigma;
        const float coef = static_cast<float>(dot) * inv;
        for (int r = 0; r < rows; ++r) {
            const float ur = coef * u1[r];
            for (int cc = 0; cc < cols; ++cc) {
                const int64_t i = static_cast<int64_t>(r) * cols + cc;
                gw[i] += (*g)[i] * inv - ur * v1[cc];
            }
        }
    });
}

// --------------------------------------------------- dense / pooling / rows

Var global_avg_pool(Var x) {
    Tape& t = tape_of(x, "global_avg_pool");
    const auto& xs = x.shape();
    if (xs.size() != 4)
        throw ShapeError("global_avg_pool: input must be rank 4, got " + Tensor::shape_str(xs));
    const int n = xs[0], h = xs[1], w = xs[2], c = xs[3];
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor y({n, c});
    const Tensor& xv = x.value();
    for (int b = 0; b < n; ++b) {
        for (int j = 0; j < c; ++j) {
            double s = 0.0;
            const float* base = xv.data() + static_cast<int64_t>(b) * hw * c + j;
            for (int64_t p = 0; p < hw; ++p) s += base[p * c];
            y.data()[static_cast<int64_t>(b) * c + j] = static_cast<float>(s / static_cast<double>(hw));
        }
    }
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi, n, hw, c](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        Tensor& gx = tp.grad_buffer(xi);
        const float invhw = 1.0f / static_cast<float>(hw);
        for (int b = 0; b < n; ++b) {
            for (int j = 0; j < c; ++j) {
                const float gv = (*g)[static_cast<int64_t>(b) * c + j] * invhw;
                float* base = gx.data() + static_cast<int64_t>(b) * hw * c + j;
                for (int64_t p = 0; p < hw; ++p) base[p * c] += gv;
            }
        }
    });
}

Var dense(Var x, Var w, Var b) {
    Tape& t = tape_of(x, "dense");
    same_tape(x, w, "dense");
    if (b.valid()) same_tape(x, b, "dense");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw ShapeError("dense: need x (N,Din) and w (Dout,Din), got " + Tensor::shape_str(xs) +
                         " and " + Tensor::shape_str(ws));
    const int n = xs[0], din = xs[1], dout = ws[0];
    check_bias(b, dout, "dense");

    Tensor y({n, dout});
    {
        CMapM xm(x.value().data(), n, din);
        CMapM wm(w.value().data(), dout, din);
        MapM ym(y.data(), n, dout);
        ym.noalias() = xm * wm.transpose();
    }
    if (b.valid()) add_channel_bias(y, b.value());

    std::vector<Var> parents = b.valid() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    const int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
    return t.make(std::move(y), parents, [xi, wi, bi, n, din, dout](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        CMapM gm(g->data(), n, dout);
        if (tp.wants_grad(xi)) {
            CMapM wm(tp.value(wi).data(), dout, din);
            MapM gxm(tp.grad_buffer(xi).data(), n, din);
            gxm.noalias() += gm * wm;
        }
        if (tp.wants_grad(wi)) {
            CMapM xm(tp.value(xi).data(), n, din);
            MapM gwm(tp.grad_buffer(wi).data(), dout, din);
            gwm.noalias() += gm.transpose() * xm;
        }
        if (bi >= 0 && tp.wants_grad(bi)) bias_grad_acc(*g, tp.grad_buffer(bi));
    });
}

Var l2_normalize_rows(Var x, float eps) {
    Tape& t = tape_of(x, "l2_normalize_rows");
    const auto& xs = x.shape();
    if (xs.size() != 2)
        throw ShapeError("l2_normalize_rows: input must be rank 2, got " + Tensor::shape_str(xs));
    const int n = xs[0], d = xs[1];
    const Tensor& xv = x.value();
    std::vector<float> rinv(static_cast<size_t>(n));
    Tensor y(xs);
    for (int i = 0; i < n; ++i) {
        const float* row = xv.data() + static_cast<int64_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += static_cast<double>(row[j]) * row[j];
        const float r = static_cast<float>(1.0 / std::sqrt(s + eps));
        rinv[static_cast<size_t>(i)] = r;
        float* out = y.data() + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) out[j] = row[j] * r;
    }
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi, n, d, rinv](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        const Tensor& xv2 = tp.value(xi);
        Tensor& gx = tp.grad_buffer(xi);
        for (int i = 0; i < n; ++i) {
            const float r = rinv[static_cast<size_t>(i)];
            const float* grow = g->data() + static_cast<int64_t>(i) * d;
            const float* xrow = xv2.data() + static_cast<int64_t>(i) * d;
            float* gxrow = gx.data() + static_cast<int64_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += static_cast<double>(grow[j]) * xrow[j];
            const float r3dot = r * r * r * static_cast<float>(dot);
            for (int j = 0; j < d; ++j) gxrow[j] += r * grow[j] - r3dot * xrow[j];
        }
    });
}

// ----------------------------------------------------------- reductions, losses

Var sum_all(Var x) {
    Tape& t = tape_of(x, "sum_all");
    Tensor y = Tensor::scalar(static_cast<float>(x.value().sum()));
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        Tensor& gx = tp.grad_buffer(xi);
        const float gv = (*g)[0];
        for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
    });
}

Var mse_loss(Var a, Var b) {
    Tape& t = tape_of(a, "mse_loss");
    same_tape(a, b, "mse_loss");
    check_same_shape(a.value(), b.value(), "mse_loss");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const int64_t m = av.size();
    if (m == 0) throw ShapeError("mse_loss: empty input");
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const double d = static_cast<double>(av[i]) - bv[i];
        s += d * d;
    }
    Tensor y = Tensor::scalar(static_cast<float>(s / static_cast<double>(m)));
    const int ai = a.id, bi = b.id;
    return t.make(std::move(y), {a, b}, [ai, bi, m](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        const Tensor& av2 = tp.value(ai);
        const Tensor& bv2 = tp.value(bi);
        const float coef = 2.0f * (*g)[0] / static_cast<float>(m);
        if (tp.wants_grad(ai)) {
            Tensor& ga = tp.grad_buffer(ai);
            for (int64_t i = 0; i < m; ++i) ga[i] += coef * (av2[i] - bv2[i]);
        }
        if (tp.wants_grad(bi)) {
            Tensor& gb = tp.grad_buffer(bi);
            for (int64_t i = 0; i < m; ++i) gb[i] -= coef * (av2[i] - bv2[i]);
        }
    });
}

Var frobenius_norm(Var x) {
    Tape& t = tape_of(x, "frobenius_norm");
    const Tensor& xv = x.value();
    double s = 0.0;
    for (int64_t i = 0; i < xv.size(); ++i) s += static_cast<double>(xv[i]) * xv[i];
    const float f = static_cast<float>(std::sqrt(s));
    Tensor y = Tensor::scalar(f);
    const int xi = x.id;
    return t.make(std::move(y), {x}, [xi, f](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(xi)) return;
        const Tensor& xv2 = tp.value(xi);
        Tensor& gx = tp.grad_buffer(xi);
        const float coef = (*g)[0] / std::max(f, 1e-12f);
        for (int64_t i = 0; i < xv2.size(); ++i) gx[i] += coef * xv2[i];
    });
}

Var mean_row_sqdist(Var a, Var b) {
    Tape& t = tape_of(a, "mean_row_sqdist");
    same_tape(a, b, "mean_row_sqdist");
    check_same_shape(a.value(), b.value(), "mean_row_sqdist");
    const auto& xs = a.shape();
    if (xs.size() != 2)
        throw ShapeError("mean_row_sqdist: inputs must be rank 2, got " + Tensor::shape_str(xs));
    const int n = xs[0];
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    double s = 0.0;
    for (int64_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - bv[i];
        s += d * d;
    }
    Tensor y = Tensor::scalar(static_cast<float>(s / n));
    const int ai = a.id, bi = b.id;
    return t.make(std::move(y), {a, b}, [ai, bi, n](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g) return;
        const Tensor& av2 = tp.value(ai);
        const Tensor& bv2 = tp.value(bi);
        const float coef = 2.0f * (*g)[0] / static_cast<float>(n);
        if (tp.wants_grad(ai)) {
            Tensor& ga = tp.grad_buffer(ai);
            for (int64_t i = 0; i < av2.size(); ++i) ga[i] += coef * (av2[i] - bv2[i]);
        }
        if (tp.wants_grad(bi)) {
            Tensor& gb = tp.grad_buffer(bi);
            for (int64_t i = 0; i < av2.size(); ++i) gb[i] -= coef * (av2[i] - bv2[i]);
        }
    });
}

Var triplet_hinge(Var embeddings, const std::vector<TripletIndex>& triples, float margin) {
    Tape& t = tape_of(embeddings, "triplet_hinge");
    if (triples.empty()) throw EmptyTriplets("triplet_hinge: no triples");
    const auto& xs = embeddings.shape();
    if (xs.size() != 2)
        throw ShapeError("triplet_hinge: embeddings must be rank 2, got " + Tensor::shape_str(xs));
    const int n = xs[0], d = xs[1];
    for (const TripletIndex& tr : triples) {
        if (tr.anchor < 0 || tr.anchor >= n || tr.positive < 0 || tr.positive >= n || tr.negative < 0 ||
            tr.negative >= n)
            throw ShapeError("triplet_hinge: triple index out of range for batch of " + std::to_string(n));
    }
    const Tensor& ev = embeddings.value();
    auto sqdist = [&](int i, int j) {
        const float* ri = ev.data() + static_cast<int64_t>(i) * d;
        const float* rj = ev.data() + static_cast<int64_t>(j) * d;
        double s = 0.0;
        for (int k = 0; k < d; ++k) {
            const double diff = static_cast<double>(ri[k]) - rj[k];
            s += diff * diff;
        }
        return s;
    };
    std::vector<char> active(triples.size(), 0);
    double loss = 0.0;
    for (size_t i = 0; i < triples.size(); ++i) {
        const double l = sqdist(triples[i].anchor, triples[i].positive) -
                         sqdist(triples[i].anchor, triples[i].negative) + margin;
        if (l > 0.0) {
            active[i] = 1;
            loss += l;
        }
    }
    Tensor y = Tensor::scalar(static_cast<float>(loss / static_cast<double>(triples.size())));
    const int ei = embeddings.id;
    const std::vector<TripletIndex> trs = triples;
    return t.make(std::move(y), {embeddings}, [ei, d, trs, active](Tape& tp, int self) {
        const Tensor* g = tp.grad(self);
        if (!g || !tp.wants_grad(ei)) return;
        const Tensor& ev2 = tp.value(ei);
        Tensor& ge = tp.grad_buffer(ei);
        const float coef = 2.0f * (*g)[0] / static_cast<float>(trs.size());
        for (size_t i = 0; i < trs.size(); ++i) {
            if (!active[i]) continue;
            const float* a = ev2.data() + static_cast<int64_t>(trs[i].anchor) * d;
            const float* p = ev2.data() + static_cast<int64_t>(trs[i].positive) * d;
            const float* nn = ev2.data() + static_cast<int64_t>(trs[i].negative) * d;
            float* ga = ge.data() + static_cast<int64_t>(trs[i].anchor) * d;
            float* gp = ge.data() + static_cast<int64_t>(trs[i].positive) * d;
            float* gn = ge.data() + static_cast<int64_t>(trs[i].negative) * d;
            for (int k = 0; k < d; ++k) {
                ga[k] += coef * (nn[k] - p[k]);
                gp[k] += coef * (p[k] - a[k]);
                gn[k] += coef * (a[k] - nn[k]);
            }
        }
    });
}

}  // namespace faceaug
