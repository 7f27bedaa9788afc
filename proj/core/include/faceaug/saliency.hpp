#pragma once

#include "faceaug/layers.hpp"

namespace faceaug {

struct SaliencyConfig {
    int in_channels = 3;  // channel count of the images being gated
    int channels = 64;    // encoder feature channels it consumes
};

// Salient-region extractor. Consumes the generator's encoder features and
// upsamples them into a single-channel [0,1] importance map at image size.
class SaliencyExtractor {
public:
    SaliencyExtractor() = default;
    SaliencyExtractor(const SaliencyConfig& cfg, Rng& rng);

    // features: (N,h,w,channels) -> (N,4h,4w,1) in [0,1].
    Var extract(Tape& t, Var features, const Fwd& fwd);

    void collect(const std::string& prefix, ModuleItems& out);
    const SaliencyConfig& config() const { return cfg; }

    SaliencyConfig cfg;
    ConvTranspose2d up1, up2;
    BatchNorm2d bn1, bn2;
    Conv2d out_conv;
    BatchNorm2d out_bn;
};

// x_adv = clamp(x + s * p, lo, hi); the single saliency channel gates every
// image channel.
Var compose_adversarial(Var x, Var perturbation, Var saliency, float lo, float hi);
Tensor compose_adversarial(const Tensor& x, const Tensor& perturbation, const Tensor& saliency,
                           float lo, float hi);

}  // namespace faceaug
