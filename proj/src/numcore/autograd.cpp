#include "kvc/autograd.hpp"

#include "kvc/error.hpp"

namespace kvc {

const Tensor& Var::value() const { return graph_->value(id_); }
const Tensor& Var::grad() const { return graph_->grad(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
    Node node;
    node.owned = std::move(value);
    return push(std::move(node));
}

Var Graph::input(Tensor value, bool requires_grad) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad && record_;
    return push(std::move(node));
}

Var Graph::parameter(const Tensor& storage, bool requires_grad) {
    Node node;
    node.borrowed = &storage;
    node.requires_grad = requires_grad && record_;
    return push(std::move(node));
}

const Tensor& Graph::value(std::size_t id) const {
    const Node& node = nodes_.at(id);
    return node.borrowed ? *node.borrowed : node.owned;
}

const Tensor& Graph::grad(std::size_t id) const {
    const Node& node = nodes_.at(id);
    if (node.grad.shape() != value(id).shape()) {
        node.grad = Tensor(value(id).shape());
    }
    return node.grad;
}

Tensor& Graph::grad_buffer(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.shape() != value(id).shape()) {
        node.grad = Tensor(value(id).shape());
    }
    return node.grad;
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    if (!value.all_finite()) {
        throw NumericError("non-finite value produced by op (shape " + shape_string(value.shape()) + ")");
    }
    Node node;
    node.owned = std::move(value);
    if (record_) {
        for (const Var& p : parents) {
            if (p.graph() != this) {
                throw ContractError("op mixes variables from different graphs");
            }
            node.requires_grad = node.requires_grad || requires_grad(p.id());
        }
        if (node.requires_grad) {
            node.backward = std::move(fn);
        }
    }
    return push(std::move(node));
}

void Graph::backward(Var root) {
    if (!record_) {
        throw ContractError("backward on a graph built without recording");
    }
    if (root.graph() != this) {
        throw ContractError("backward root belongs to another graph");
    }
    if (value(root.id()).numel() != 1) {
        throw ContractError("backward root must be scalar, got shape " + shape_string(value(root.id()).shape()));
    }
    if (!requires_grad(root.id())) {
        return;
    }
    grad_buffer(root.id()).fill(1.0f);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.requires_grad || !node.backward || node.grad.empty()) {
            continue;
        }
        node.backward(*this, i);
        // Interior grads are not needed once propagated.
        node.backward = nullptr;
    }
}

}  // namespace kvc
