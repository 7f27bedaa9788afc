#include "faceaug/autodiff.hpp"

#include "faceaug/errors.hpp"

namespace faceaug {

const Tensor& Var::value() const { return tape->value(id); }
const std::vector<int>& Var::shape() const { return tape->value(id).shape(); }

Var Tape::input(Tensor v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Node n;
    n.value = p.value;  // copy; params are small relative to activations
    n.needs_grad = grad_enabled_ && p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    return Var{this, id};
}

Var Tape::make(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        for (const Var& p : parents) {
            if (p.tape != this) throw Error("autodiff: mixing nodes from different tapes");
            if (nodes_[static_cast<size_t>(p.id)].needs_grad) n.needs_grad = true;
        }
        if (n.needs_grad) n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

const Tensor* Tape::grad(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
    if (!grad_enabled_) throw Error("backward() on a grad-disabled tape");
    if (loss.tape != this) throw Error("backward(): loss from a different tape");
    Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.size() != 1) throw ShapeError("backward(): loss must be scalar");
    if (!ln.needs_grad) return;  // nothing trainable upstream
    grad_buffer(loss.id)[0] = 1.0f;

    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, id);
    }

    for (auto& [param, id] : param_nodes_) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || n.grad.empty()) continue;
        Parameter* p = n.param;
        p->ensure_grad();
        const float* src = n.grad.data();
        float* dst = p->grad.data();
        for (int64_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
    }
}

}  // namespace faceaug
