#pragma once

#include <vector>

#include "faceaug/autodiff.hpp"

namespace faceaug {

struct AdamConfig {
    float lr = 2e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Adam over a fixed parameter list. Moment buffers are addressed by list
// position, so the list order is part of the checkpoint contract.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Parameter*> params, const AdamConfig& cfg);

    void zero_grad();
    void step();  // missing gradients count as zero

    const std::vector<Parameter*>& params() const { return params_; }

    // Exposed for checkpointing.
    std::vector<Tensor> m, v;
    int64_t t = 0;

private:
    std::vector<Parameter*> params_;
    AdamConfig cfg_;
};

}  // namespace faceaug
