#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "faceaug/tensor.hpp"

namespace faceaug {

// Learnable tensor. Lives outside any tape; forward passes bind it onto a
// tape as a leaf and backward() accumulates into `grad`.
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Tensor value, bool trainable = true)
        : name(std::move(name)), value(std::move(value)), trainable(trainable) {}

    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    void ensure_grad() {
        if (grad.size() != value.size()) grad = Tensor(value.shape());
    }
    void zero_grad() {
        if (!grad.empty()) grad.fill(0.0f);
    }
};

class Tape;

// Handle to a node of a tape-built computation graph.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const std::vector<int>& shape() const;
    int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
};

// Reverse-mode tape. Nodes are appended in forward (topological) order;
// backward() sweeps them in reverse. A tape constructed with
// grad_enabled=false records values only, which keeps pure inference cheap.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    // Constant leaf.
    Var input(Tensor v);
    // Parameter leaf; memoized so two uses of one parameter share a node.
    Var leaf(Parameter& p);

    // Used by op implementations. `self` is the id of the node the function
    // belongs to, so it can fetch its own output gradient.
    using BackwardFn = std::function<void(Tape&, int self)>;
    Var make(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    Tensor& value_mut(int id) { return nodes_[static_cast<size_t>(id)].value; }

    // True if gradient w.r.t. this node is wanted by the backward sweep.
    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    // Gradient accumulation buffer (allocated zero on first touch).
    Tensor& grad_buffer(int id);
    // Gradient of a node, or nullptr if nothing flowed into it.
    const Tensor* grad(int id) const;

    // Seeds d(loss)/d(loss) = 1 for a scalar loss node, runs the reverse
    // sweep, then accumulates leaf gradients into their Parameters.
    void backward(Var loss);

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Parameter* param = nullptr;
        BackwardFn backward;
    };

    bool grad_enabled_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_nodes_;
};

}  // namespace faceaug
