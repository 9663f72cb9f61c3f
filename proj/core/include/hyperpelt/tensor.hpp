#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hyperpelt/error.hpp"
#include "hyperpelt/rng.hpp"

namespace hyperpelt {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // empty until backward touches it
    bool requires_grad = false;
};

// Shared-state handle. Copies alias the same buffer; graph nodes hold these
// handles, so intermediate values live exactly as long as their graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<float> data() { return impl_->data; }
    std::span<const float> data() const { return impl_->data; }
    float value() const; // scalar convenience, throws unless numel()==1

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<float> grad();             // allocates zeroed buffer on first use
    std::span<const float> grad() const; // throws if absent
    void zero_grad();
    void drop_grad() { impl_->grad.clear(); }

    // Deep copy with no graph history attached.
    Tensor clone() const;

    TensorImpl* impl() { return impl_.get(); }
    const TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend class Graph;
};

enum class OpKind {
    matmul,
    add,
    mul,
    concat,
    slice,
    reshape,
    softmax_lastdim,
    layernorm,
    gelu,
    relu,
    adaptive_mean_pool,
    embedding_lookup,
    cross_entropy,
    sum,
};

const char* op_name(OpKind kind);

struct OpAttrs {
    int axis = 0;
    int start = 0;
    int len = 0;
    bool trans_b = false;
    float eps = 1e-6f;
    int target = 0;        // adaptive_mean_pool output extent
    Shape new_shape;       // reshape
    std::vector<int> ids;  // embedding_lookup ids / cross_entropy targets
};

struct GraphNode {
    OpKind kind;
    OpAttrs attrs;
    std::vector<Tensor> inputs;
    Tensor output;
    bool needs_grad = false;
};

// Tape of primitive applications in execution order. Replaying the tape
// forward on the same leaves is bit-identical; backward walks it once in
// reverse. One graph per model step, single-threaded.
class Graph {
public:
    Tensor matmul(const Tensor& a, const Tensor& b, bool trans_b = false);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor concat(const std::vector<Tensor>& parts, int axis);
    Tensor slice(const Tensor& a, int axis, int start, int len);
    Tensor reshape(const Tensor& a, Shape new_shape);
    Tensor softmax_lastdim(const Tensor& a);
    Tensor layernorm(const Tensor& x, const Tensor& scale, const Tensor& bias,
                     float eps = 1e-6f);
    Tensor gelu(const Tensor& a);
    Tensor relu(const Tensor& a);
    Tensor adaptive_mean_pool(const Tensor& a, int target_rows);
    Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
    Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
    Tensor sum(const Tensor& a);

    // Populates grads of every requires_grad tensor reachable from `loss`.
    void backward(const Tensor& loss);

    // Re-executes the tape in float64 with one leaf element perturbed by
    // `delta`, returning the recomputed value of `result` (shadow path for
    // finite differences; the tape structure itself is value-independent).
    double replay_value_f64(const Tensor& result, const TensorImpl* leaf,
                            std::size_t element, double delta) const;

    std::size_t size() const { return nodes_.size(); }
    const GraphNode& node(std::size_t i) const { return nodes_[i]; }

private:
    Tensor record(OpKind kind, OpAttrs attrs, std::vector<Tensor> inputs, Tensor output);
    std::vector<GraphNode> nodes_;
};

} // namespace hyperpelt
