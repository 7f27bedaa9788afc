#pragma once

#include <vector>

#include "faceaug/layers.hpp"

namespace faceaug {

struct GeneratorConfig {
    int in_channels = 3;
    int channels = 64;
    int residual_blocks = 6;
    int sn_steps = 5;
};

// Encoder/decoder perturbation generator. The encoder compresses a whitened
// face to (H/4, W/4, channels) feature maps; the decoder reconstructs a
// same-size perturbation bounded to [-1, 1] by the final tanh.
class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& cfg, Rng& rng);

    // x: (N,H,W,C) whitened, H == W, H divisible by 4.
    Var encode(Tape& t, Var x, const Fwd& fwd);
    // features: (N,H/4,W/4,channels) -> perturbation (N,H,W,C) in [-1,1].
    Var decode(Tape& t, Var features, const Fwd& fwd);
    Var forward(Tape& t, Var x, const Fwd& fwd) { return decode(t, encode(t, x, fwd), fwd); }

    void collect(const std::string& prefix, ModuleItems& out);
    const GeneratorConfig& config() const { return cfg; }

    GeneratorConfig cfg;

    // encoder
    Conv2d stem;          // 9x9 stride 1
    Conv2d down1, down2;  // 3x3 stride 2
    SnConv2d sn1, sn2, sn3;
    std::vector<ResidualBlock> blocks;

    // decoder
    ConvTranspose2d up1, up2;
    BatchNorm2d up_bn1, up_bn2;
    Conv2d out_conv;
    BatchNorm2d out_bn;
};

// features + gaussian(0, noise_scale) element-wise; noise_scale 0 returns the
// input bit-identically. Negative scale -> ConfigError.
Tensor perturb_latent(const Tensor& features, float noise_scale, Rng& rng);

}  // namespace faceaug
