#include "faceaug/saliency.hpp"

#include <algorithm>

#include "faceaug/errors.hpp"

namespace faceaug {

SaliencyExtractor::SaliencyExtractor(const SaliencyConfig& cfg, Rng& rng) : cfg(cfg) {
    if (cfg.channels < 1) throw ConfigError("saliency: invalid channel config");
    const int c = cfg.channels;
    up1 = ConvTranspose2d(rng, c, c, 3, 2, 1, 1, false);
    up2 = ConvTranspose2d(rng, c, c, 3, 2, 1, 1, false);
    bn1 = BatchNorm2d(c);
    bn2 = BatchNorm2d(c);
    out_conv = Conv2d(rng, c, 1, 3, 1, 1, false);
    out_bn = BatchNorm2d(1);
}

Var SaliencyExtractor::extract(Tape& t, Var features, const Fwd& fwd) {
    const auto& fs = features.shape();
    if (fs.size() != 4 || fs[3] != cfg.channels)
        throw ShapeError("saliency extract: need (N,h,w," + std::to_string(cfg.channels) + "), got " +
                         Tensor::shape_str(fs));
    Var h = relu(bn1.forward(t, up1.forward(t, features), fwd));
    h = relu(bn2.forward(t, up2.forward(t, h), fwd));
    h = out_bn.forward(t, out_conv.forward(t, h), fwd);
    return sigmoid_act(h);
}

void SaliencyExtractor::collect(const std::string& prefix, ModuleItems& out) {
    up1.collect(prefix + ".up1", out);
    bn1.collect(prefix + ".bn1", out);
    up2.collect(prefix + ".up2", out);
    bn2.collect(prefix + ".bn2", out);
    out_conv.collect(prefix + ".out_conv", out);
    out_bn.collect(prefix + ".out_bn", out);
}

Var compose_adversarial(Var x, Var perturbation, Var saliency, float lo, float hi) {
    check_same_shape(x.value(), perturbation.value(), "compose_adversarial");
    return clamp(add(x, mul_mask(perturbation, saliency)), lo, hi);
}

Tensor compose_adversarial(const Tensor& x, const Tensor& perturbation, const Tensor& saliency,
                           float lo, float hi) {
    // Route through the graph overload so both entry points share one
    // rounding behavior; a separate fused loop drifts by an ulp under fp
    // contraction.
    Tape t(false);
    return compose_adversarial(t.input(x), t.input(perturbation), t.input(saliency), lo, hi)
        .value();
}

}  // namespace faceaug
