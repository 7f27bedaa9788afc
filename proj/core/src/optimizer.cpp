#include "faceaug/optimizer.hpp"

#include <cmath>

#include "faceaug/errors.hpp"

namespace faceaug {

Adam::Adam(std::vector<Parameter*> params, const AdamConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (cfg.lr <= 0.0f || cfg.beta1 <= 0.0f || cfg.beta1 >= 1.0f || cfg.beta2 <= 0.0f ||
        cfg.beta2 >= 1.0f || cfg.eps <= 0.0f)
        throw ConfigError("adam: need lr > 0, betas in (0,1), eps > 0");
    m.reserve(params_.size());
    v.reserve(params_.size());
    for (Parameter* p : params_) {
        m.emplace_back(p->value.shape());
        v.emplace_back(p->value.shape());
    }
}

void Adam::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
    ++t;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t));
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        const bool has_grad = p.grad.size() == p.value.size();
        for (int64_t j = 0; j < p.value.size(); ++j) {
            const float g = has_grad ? p.grad[j] : 0.0f;
            m[i][j] = cfg_.beta1 * m[i][j] + (1.0f - cfg_.beta1) * g;
            v[i][j] = cfg_.beta2 * v[i][j] + (1.0f - cfg_.beta2) * g * g;
            const float mhat = m[i][j] / bc1;
            const float vhat = v[i][j] / bc2;
            p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace faceaug
