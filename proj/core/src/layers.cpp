#include "faceaug/layers.hpp"

#include <algorithm>
#include <cmath>

namespace faceaug {

namespace {

Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor w(shape);
    const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    for (int64_t i = 0; i < w.size(); ++i) w[i] = stddev * rng.normal_f();
    return w;
}

}  // namespace

Conv2d::Conv2d(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad, bool bias)
    : stride(stride), pad(pad), has_bias(bias) {
    weight = Parameter("weight", he_normal(rng, {out_ch, k, k, in_ch}, k * k * in_ch));
    if (bias) this->bias = Parameter("bias", Tensor({out_ch}));
}

Var Conv2d::forward(Tape& t, Var x) {
    Var b = has_bias ? t.leaf(bias) : Var{};
    return conv2d(x, t.leaf(weight), b, stride, pad);
}

void Conv2d::collect(const std::string& prefix, ModuleItems& out) {
    weight.name = prefix + ".weight";
    out.params.push_back(&weight);
    if (has_bias) {
        bias.name = prefix + ".bias";
        out.params.push_back(&bias);
    }
}

ConvTranspose2d::ConvTranspose2d(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad,
                                 int output_pad, bool bias)
    : stride(stride), pad(pad), output_pad(output_pad), has_bias(bias) {
    weight = Parameter("weight", he_normal(rng, {in_ch, k, k, out_ch}, k * k * in_ch));
    if (bias) this->bias = Parameter("bias", Tensor({out_ch}));
}

Var ConvTranspose2d::forward(Tape& t, Var x) {
    Var b = has_bias ? t.leaf(bias) : Var{};
    return conv2d_transpose(x, t.leaf(weight), b, stride, pad, output_pad);
}

void ConvTranspose2d::collect(const std::string& prefix, ModuleItems& out) {
    weight.name = prefix + ".weight";
    out.params.push_back(&weight);
    if (has_bias) {
        bias.name = prefix + ".bias";
        out.params.push_back(&bias);
    }
}

BatchNorm2d::BatchNorm2d(int channels) {
    gamma = Parameter("gamma", Tensor({channels}, 1.0f));
    beta = Parameter("beta", Tensor({channels}));
    buffers.init(channels);
}

Var BatchNorm2d::forward(Tape& t, Var x, const Fwd& fwd) {
    return batch_norm(x, t.leaf(gamma), t.leaf(beta), buffers, fwd);
}

void BatchNorm2d::collect(const std::string& prefix, ModuleItems& out) {
    gamma.name = prefix + ".gamma";
    beta.name = prefix + ".beta";
    out.params.push_back(&gamma);
    out.params.push_back(&beta);
    out.state.emplace_back(prefix + ".running_mean", &buffers.running_mean);
    out.state.emplace_back(prefix + ".running_var", &buffers.running_var);
}

SnConv2d::SnConv2d(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad, bool bias,
                   int sn_steps)
    : conv(rng, in_ch, out_ch, k, stride, pad, bias), sn_steps(sn_steps) {
    sn.init(out_ch, std::min(32, std::min(out_ch, k * k * in_ch)), rng);
}

Var SnConv2d::forward(Tape& t, Var x, const Fwd& fwd) {
    Var w = spectral_normalize(t.leaf(conv.weight), sn, sn_steps, fwd.update_stats);
    Var b = conv.has_bias ? t.leaf(conv.bias) : Var{};
    return conv2d(x, w, b, conv.stride, conv.pad);
}

void SnConv2d::collect(const std::string& prefix, ModuleItems& out) {
    conv.collect(prefix, out);
    out.state.emplace_back(prefix + ".sn_basis", &sn.basis);
}

Dense::Dense(Rng& rng, int in_dim, int out_dim, bool bias) : has_bias(bias) {
    weight = Parameter("weight", he_normal(rng, {out_dim, in_dim}, in_dim));
    if (bias) this->bias = Parameter("bias", Tensor({out_dim}));
}

Var Dense::forward(Tape& t, Var x) {
    Var b = has_bias ? t.leaf(bias) : Var{};
    return dense(x, t.leaf(weight), b);
}

void Dense::collect(const std::string& prefix, ModuleItems& out) {
    weight.name = prefix + ".weight";
    out.params.push_back(&weight);
    if (has_bias) {
        bias.name = prefix + ".bias";
        out.params.push_back(&bias);
    }
}

ResidualBlock::ResidualBlock(Rng& rng, int channels)
    : conv1(rng, channels, channels, 3, 1, 1, false),
      conv2(rng, channels, channels, 3, 1, 1, false),
      bn1(channels),
      bn2(channels) {}

Var ResidualBlock::forward(Tape& t, Var x, const Fwd& fwd) {
    Var h = relu(bn1.forward(t, conv1.forward(t, x), fwd));
    h = bn2.forward(t, conv2.forward(t, h), fwd);
    return relu(add(x, h));
}

void ResidualBlock::collect(const std::string& prefix, ModuleItems& out) {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
}

}  // namespace faceaug
