#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "kvc/mask.hpp"
#include "kvc/tensor.hpp"

namespace kvc {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;
    std::size_t id() const noexcept { return id_; }
    Graph* graph() const noexcept { return graph_; }
    bool valid() const noexcept { return graph_ != nullptr; }

private:
    friend class Graph;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

// Tape of ops recorded in execution order. backward() walks the tape in
// reverse, which is a reverse topological order by construction.
//
// A graph built with record=false keeps values only (inference); it refuses
// backward().
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return record_; }

    Var constant(Tensor value);
    Var input(Tensor value, bool requires_grad = true);
    // Leaf that reads external storage without copying. The storage must
    // outlive the graph and stay unmodified until backward() returns.
    Var parameter(const Tensor& storage, bool requires_grad);

    const Tensor& value(std::size_t id) const;
    const Tensor& grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer of node `id`, zero-initialised on first use.
    Tensor& grad_buffer(std::size_t id);

    // Records an op result. `fn` is dropped unless some parent requires grad.
    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
    Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);

    void backward(Var root);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        mutable Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Node node);

    bool record_;
    std::deque<Node> nodes_;
};

// Multi-sequence packing for attention: sequence s occupies rows
// [offsets[s], offsets[s+1]) of the packed activations.
struct AttentionLayout {
    std::vector<std::size_t> offsets;
    std::vector<AttentionMask> masks;

    std::size_t total_rows() const { return offsets.empty() ? 0 : offsets.back(); }
    std::size_t sequences() const { return masks.size(); }
};

namespace ag {

Var matmul(Var a, Var b);
// a · bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
// a[m×n] + bias[n] on every row
Var add_row(Var a, Var bias);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var sum(Var a);
Var gelu(Var a);
Var tanh(Var a);
Var layernorm(Var x, Var gamma, Var beta, float eps = 1e-5f);
Var gather_rows(Var table, std::span<const std::int32_t> ids);
Var concat_rows(Var a, Var b);
Var rotary(Var x, std::size_t n_heads, std::span<const std::int32_t> pos_ids, double base = 10000.0);
Var softmax_masked(Var logits, std::span<const std::uint8_t> mask);
// Masked multi-head attention over packed sequences. q, k, v: [rows × n_heads·d_head].
Var attention(Var q, Var k, Var v, std::size_t n_heads, std::shared_ptr<const AttentionLayout> layout);
// Mean cross entropy over rows whose label is not kIgnore (0 when none).
Var cross_entropy(Var logits, std::span<const std::int32_t> labels);

}  // namespace ag
}  // namespace kvc
