#include "faceaug/generator.hpp"

#include "faceaug/errors.hpp"

namespace faceaug {

Generator::Generator(const GeneratorConfig& cfg, Rng& rng) : cfg(cfg) {
    if (cfg.in_channels != 1 && cfg.in_channels != 3)
        throw ConfigError("generator: in_channels must be 1 or 3");
    if (cfg.channels < 1 || cfg.residual_blocks < 0 || cfg.sn_steps < 1)
        throw ConfigError("generator: invalid architecture config");
    const int c = cfg.channels;
    stem = Conv2d(rng, cfg.in_channels, c, 9, 1, 4, true);
    down1 = Conv2d(rng, c, c, 3, 2, 1, true);
    down2 = Conv2d(rng, c, c, 3, 2, 1, true);
    sn1 = SnConv2d(rng, c, c, 3, 1, 1, true, cfg.sn_steps);
    sn2 = SnConv2d(rng, c, c, 3, 1, 1, true, cfg.sn_steps);
    sn3 = SnConv2d(rng, c, c, 3, 1, 1, true, cfg.sn_steps);
    blocks.reserve(static_cast<size_t>(cfg.residual_blocks));
    for (int i = 0; i < cfg.residual_blocks; ++i) blocks.emplace_back(rng, c);
    up1 = ConvTranspose2d(rng, c, c, 3, 2, 1, 1, false);
    up2 = ConvTranspose2d(rng, c, c, 3, 2, 1, 1, false);
    up_bn1 = BatchNorm2d(c);
    up_bn2 = BatchNorm2d(c);
    out_conv = Conv2d(rng, c, cfg.in_channels, 3, 1, 1, false);
    out_bn = BatchNorm2d(cfg.in_channels);
}

Var Generator::encode(Tape& t, Var x, const Fwd& fwd) {
    const auto& xs = x.shape();
    if (xs.size() != 4 || xs[1] != xs[2] || xs[1] % 4 != 0 || xs[1] < 8 || xs[3] != cfg.in_channels)
        throw ShapeError("generator encode: need square (N,H,H," + std::to_string(cfg.in_channels) +
                         ") with H divisible by 4 and >= 8, got " + Tensor::shape_str(xs));
    Var h = relu(stem.forward(t, x));
    h = relu(down1.forward(t, h));
    h = relu(down2.forward(t, h));
    h = relu(sn1.forward(t, h, fwd));
    h = relu(sn2.forward(t, h, fwd));
    h = relu(sn3.forward(t, h, fwd));
    for (ResidualBlock& b : blocks) h = b.forward(t, h, fwd);
    return h;
}

Var Generator::decode(Tape& t, Var features, const Fwd& fwd) {
    const auto& fs = features.shape();
    if (fs.size() != 4 || fs[3] != cfg.channels)
        throw ShapeError("generator decode: need (N,h,w," + std::to_string(cfg.channels) + "), got " +
                         Tensor::shape_str(fs));
    Var h = relu(up_bn1.forward(t, up1.forward(t, features), fwd));
    h = relu(up_bn2.forward(t, up2.forward(t, h), fwd));
    h = out_bn.forward(t, out_conv.forward(t, h), fwd);
    return tanh_act(h);
}

void Generator::collect(const std::string& prefix, ModuleItems& out) {
    stem.collect(prefix + ".stem", out);
    down1.collect(prefix + ".down1", out);
    down2.collect(prefix + ".down2", out);
    sn1.collect(prefix + ".sn1", out);
    sn2.collect(prefix + ".sn2", out);
    sn3.collect(prefix + ".sn3", out);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    up1.collect(prefix + ".up1", out);
    up_bn1.collect(prefix + ".up_bn1", out);
    up2.collect(prefix + ".up2", out);
    up_bn2.collect(prefix + ".up_bn2", out);
    out_conv.collect(prefix + ".out_conv", out);
    out_bn.collect(prefix + ".out_bn", out);
}

Tensor perturb_latent(const Tensor& features, float noise_scale, Rng& rng) {
    if (noise_scale < 0.0f) throw ConfigError("perturb_latent: noise_scale must be >= 0");
    Tensor out = features;
    if (noise_scale == 0.0f) return out;
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] += noise_scale * rng.normal_f();
    return out;
}

}  // namespace faceaug
