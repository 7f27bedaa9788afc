#pragma once

#include <string>
#include <utility>
#include <vector>

#include "faceaug/ops.hpp"

namespace faceaug {

// Flat views over a network used by the optimizer and the checkpoint writer.
// `state` collects non-learnable tensors that must persist (batch-norm running
// statistics, spectral-norm power-iteration bases). Collection order is
// construction order and forms the canonical checkpoint layout.
struct ModuleItems {
    std::vector<Parameter*> params;
    std::vector<std::pair<std::string, Tensor*>> state;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad, bool bias);

    Var forward(Tape& t, Var x);
    void collect(const std::string& prefix, ModuleItems& out);

    Parameter weight;  // (out,k,k,in)
    Parameter bias;    // (out) when enabled
    int stride = 1;
    int pad = 0;
    bool has_bias = false;
};

class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad, int output_pad,
                    bool bias);

    Var forward(Tape& t, Var x);
    void collect(const std::string& prefix, ModuleItems& out);

    Parameter weight;  // (in,k,k,out)
    Parameter bias;
    int stride = 1;
    int pad = 0;
    int output_pad = 0;
    bool has_bias = false;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);

    Var forward(Tape& t, Var x, const Fwd& fwd);
    void collect(const std::string& prefix, ModuleItems& out);

    Parameter gamma;
    Parameter beta;
    BnBuffers buffers;
};

// Convolution whose weight is divided by its estimated top singular value on
// every forward pass.
class SnConv2d {
public:
    SnConv2d() = default;
    SnConv2d(Rng& rng, int in_ch, int out_ch, int k, int stride, int pad, bool bias, int sn_steps);

    Var forward(Tape& t, Var x, const Fwd& fwd);
    void collect(const std::string& prefix, ModuleItems& out);

    Conv2d conv;
    SnState sn;
    int sn_steps = 5;
};

class Dense {
public:
    Dense() = default;
    Dense(Rng& rng, int in_dim, int out_dim, bool bias);

    Var forward(Tape& t, Var x);
    void collect(const std::string& prefix, ModuleItems& out);

    Parameter weight;  // (out,in)
    Parameter bias;
    bool has_bias = false;
};

// conv-BN-relu-conv-BN with identity skip; output relu(skip + branch).
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(Rng& rng, int channels);

    Var forward(Tape& t, Var x, const Fwd& fwd);
    void collect(const std::string& prefix, ModuleItems& out);

    Conv2d conv1, conv2;
    BatchNorm2d bn1, bn2;
};

}  // namespace faceaug
