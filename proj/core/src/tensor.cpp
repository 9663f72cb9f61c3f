#include "hyperpelt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>

namespace hyperpelt {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw dimension_error("shape extent must be positive, got " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::reshape: return "reshape";
        case OpKind::softmax_lastdim: return "softmax_lastdim";
        case OpKind::layernorm: return "layernorm";
        case OpKind::gelu: return "gelu";
        case OpKind::relu: return "relu";
        case OpKind::adaptive_mean_pool: return "adaptive_mean_pool";
        case OpKind::embedding_lookup: return "embedding_lookup";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::sum: return "sum";
    }
    return "?";
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    std::size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0f);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    if (values.size() != n) {
        throw dimension_error("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->data) v = rng.normalf(stddev);
    return t;
}

float Tensor::value() const {
    if (numel() != 1) {
        throw contract_error("value() requires a scalar tensor, shape is " + shape_str(shape()));
    }
    return impl_->data[0];
}

std::span<float> Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

std::span<const float> Tensor::grad() const {
    if (impl_->grad.empty()) throw contract_error("grad accessed before backward populated it");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------- kernels
//
// Forward math is templated on the scalar type: the float instantiation is
// the model path, the double instantiation backs the finite-difference
// replay in grad_check.

namespace {

template <class T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <class T>
T gelu_deriv(T x) {
    const T phi = std::exp(-x * x / T(2)) / std::sqrt(T(2) * T(3.14159265358979323846));
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    return cdf + x * phi;
}

struct AxisBlocks {
    std::size_t outer, axis, inner;
};

AxisBlocks axis_blocks(const Shape& shape, int axis) {
    AxisBlocks b{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) b.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
        b.inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    return b;
}

template <class T>
void k_matmul(const T* a, const T* b, T* out, int m, int k, int n, bool trans_b) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = 0;
            const T* arow = a + static_cast<std::size_t>(i) * static_cast<std::size_t>(k);
            if (trans_b) {
                const T* brow = b + static_cast<std::size_t>(j) * static_cast<std::size_t>(k);
                for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
            } else {
                for (int l = 0; l < k; ++l) acc += arow[l] * b[static_cast<std::size_t>(l) * n + j];
            }
            out[static_cast<std::size_t>(i) * n + j] = acc;
        }
    }
}

template <class T>
void k_softmax_rows(const T* x, T* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = out + r * cols;
        T m = xr[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, xr[c]);
        T s = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - m);
            s += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= s;
    }
}

template <class T>
void k_layernorm_rows(const T* x, const T* scale, const T* bias, T* out,
                      std::size_t rows, std::size_t cols, T eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = out + r * cols;
        T mean = 0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<T>(cols);
        T var = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            const T d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = (xr[c] - mean) * inv * scale[c] + bias[c];
        }
    }
}

// segment s of an adaptive pool over R rows to t rows covers
// [floor(s*R/t), floor((s+1)*R/t))
std::pair<std::size_t, std::size_t> pool_segment(std::size_t s, std::size_t rows, std::size_t target) {
    return {s * rows / target, (s + 1) * rows / target};
}

template <class T>
std::vector<T> eval_op(OpKind kind, const OpAttrs& attrs,
                       const std::vector<const T*>& in,
                       const std::vector<const Shape*>& in_shape,
                       const Shape& out_shape) {
    std::vector<T> out(shape_numel(out_shape));
    switch (kind) {
        case OpKind::matmul: {
            const Shape& sa = *in_shape[0];
            const Shape& sb = *in_shape[1];
            const int m = sa[0], k = sa[1];
            const int n = attrs.trans_b ? sb[0] : sb[1];
            k_matmul(in[0], in[1], out.data(), m, k, n, attrs.trans_b);
            break;
        }
        case OpKind::add: {
            const std::size_t n = shape_numel(*in_shape[0]);
            if (*in_shape[0] == *in_shape[1]) {
                for (std::size_t i = 0; i < n; ++i) out[i] = in[0][i] + in[1][i];
            } else { // (rows x cols) + (cols,) row broadcast
                const std::size_t cols = shape_numel(*in_shape[1]);
                for (std::size_t i = 0; i < n; ++i) out[i] = in[0][i] + in[1][i % cols];
            }
            break;
        }
        case OpKind::mul: {
            const std::size_t na = shape_numel(*in_shape[0]);
            const std::size_t nb = shape_numel(*in_shape[1]);
            if (na == nb) {
                for (std::size_t i = 0; i < na; ++i) out[i] = in[0][i] * in[1][i];
            } else if (nb == 1) {
                for (std::size_t i = 0; i < na; ++i) out[i] = in[0][i] * in[1][0];
            } else { // na == 1
                for (std::size_t i = 0; i < nb; ++i) out[i] = in[0][0] * in[1][i];
            }
            break;
        }
        case OpKind::concat: {
            const auto blocks = axis_blocks(out_shape, attrs.axis);
            std::size_t offset = 0;
            for (std::size_t p = 0; p < in.size(); ++p) {
                const auto pb = axis_blocks(*in_shape[p], attrs.axis);
                for (std::size_t o = 0; o < pb.outer; ++o) {
                    const T* src = in[p] + o * pb.axis * pb.inner;
                    T* dst = out.data() + (o * blocks.axis + offset) * blocks.inner;
                    std::copy(src, src + pb.axis * pb.inner, dst);
                }
                offset += pb.axis;
            }
            break;
        }
        case OpKind::slice: {
            const auto ib = axis_blocks(*in_shape[0], attrs.axis);
            const std::size_t len = static_cast<std::size_t>(attrs.len);
            for (std::size_t o = 0; o < ib.outer; ++o) {
                const T* src = in[0] + (o * ib.axis + static_cast<std::size_t>(attrs.start)) * ib.inner;
                T* dst = out.data() + o * len * ib.inner;
                std::copy(src, src + len * ib.inner, dst);
            }
            break;
        }
        case OpKind::reshape: {
            std::copy(in[0], in[0] + out.size(), out.data());
            break;
        }
        case OpKind::softmax_lastdim: {
            const Shape& s = *in_shape[0];
            const std::size_t cols = static_cast<std::size_t>(s.back());
            k_softmax_rows(in[0], out.data(), out.size() / cols, cols);
            break;
        }
        case OpKind::layernorm: {
            const Shape& s = *in_shape[0];
            const std::size_t cols = static_cast<std::size_t>(s.back());
            k_layernorm_rows(in[0], in[1], in[2], out.data(), out.size() / cols, cols,
                             static_cast<T>(attrs.eps));
            break;
        }
        case OpKind::gelu: {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(in[0][i]);
            break;
        }
        case OpKind::relu: {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(in[0][i], T(0));
            break;
        }
        case OpKind::adaptive_mean_pool: {
            const Shape& s = *in_shape[0];
            const std::size_t rows = static_cast<std::size_t>(s[0]);
            const std::size_t cols = static_cast<std::size_t>(s[1]);
            const std::size_t target = static_cast<std::size_t>(attrs.target);
            for (std::size_t seg = 0; seg < target; ++seg) {
                auto [lo, hi] = pool_segment(seg, rows, target);
                for (std::size_t c = 0; c < cols; ++c) {
                    T acc = 0;
                    for (std::size_t r = lo; r < hi; ++r) acc += in[0][r * cols + c];
                    out[seg * cols + c] = acc / static_cast<T>(hi - lo);
                }
            }
            break;
        }
        case OpKind::embedding_lookup: {
            const std::size_t cols = static_cast<std::size_t>((*in_shape[0])[1]);
            for (std::size_t i = 0; i < attrs.ids.size(); ++i) {
                const T* src = in[0] + static_cast<std::size_t>(attrs.ids[i]) * cols;
                std::copy(src, src + cols, out.data() + i * cols);
            }
            break;
        }
        case OpKind::cross_entropy: {
            const Shape& s = *in_shape[0];
            const std::size_t rows = static_cast<std::size_t>(s[0]);
            const std::size_t cols = static_cast<std::size_t>(s[1]);
            T total = 0;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = in[0] + r * cols;
                T m = xr[0];
                for (std::size_t c = 1; c < cols; ++c) m = std::max(m, xr[c]);
                T lse = 0;
                for (std::size_t c = 0; c < cols; ++c) lse += std::exp(xr[c] - m);
                lse = m + std::log(lse);
                total += lse - xr[static_cast<std::size_t>(attrs.ids[r])];
            }
            out[0] = total / static_cast<T>(rows);
            break;
        }
        case OpKind::sum: {
            T acc = 0;
            const std::size_t n = shape_numel(*in_shape[0]);
            for (std::size_t i = 0; i < n; ++i) acc += in[0][i];
            out[0] = acc;
            break;
        }
    }
    return out;
}

void check_finite(OpKind kind, const std::vector<float>& data) {
    for (float v : data) {
        if (!std::isfinite(v)) {
            throw numeric_error(std::string(op_name(kind)) + " produced a non-finite value");
        }
    }
}

dimension_error op_shape_error(OpKind kind, const std::string& detail) {
    return dimension_error(std::string(op_name(kind)) + ": " + detail);
}

} // namespace

// ----------------------------------------------------------------- Graph

Tensor Graph::record(OpKind kind, OpAttrs attrs, std::vector<Tensor> inputs, Tensor output) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    output.set_requires_grad(needs);
    check_finite(kind, output.impl()->data);
    nodes_.push_back(GraphNode{kind, std::move(attrs), std::move(inputs), output, needs});
    return output;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b, bool trans_b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw op_shape_error(OpKind::matmul, "expects rank-2 operands, got " +
                             shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int inner_b = trans_b ? b.dim(1) : b.dim(0);
    if (a.dim(1) != inner_b) {
        throw op_shape_error(OpKind::matmul, "incompatible shapes " + shape_str(a.shape()) +
                             (trans_b ? " x transposed " : " x ") + shape_str(b.shape()));
    }
    OpAttrs attrs;
    attrs.trans_b = trans_b;
    Shape out_shape{a.dim(0), trans_b ? b.dim(0) : b.dim(1)};
    std::vector<const float*> in{a.data().data(), b.data().data()};
    std::vector<const Shape*> shapes{&a.shape(), &b.shape()};
    Tensor out = Tensor::from(out_shape, eval_op<float>(OpKind::matmul, attrs, in, shapes, out_shape));
    return record(OpKind::matmul, attrs, {a, b}, std::move(out));
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool row_bcast = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    if (!same && !row_bcast) {
        throw op_shape_error(OpKind::add, "shapes " + shape_str(a.shape()) + " + " +
                             shape_str(b.shape()) + " not addable");
    }
    OpAttrs attrs;
    std::vector<const float*> in{a.data().data(), b.data().data()};
    std::vector<const Shape*> shapes{&a.shape(), &b.shape()};
    Tensor out = Tensor::from(a.shape(), eval_op<float>(OpKind::add, attrs, in, shapes, a.shape()));
    return record(OpKind::add, attrs, {a, b}, std::move(out));
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool scalar_side = a.numel() == 1 || b.numel() == 1;
    if (!same && !scalar_side) {
        throw op_shape_error(OpKind::mul, "shapes " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()) + " not multipliable");
    }
    const Shape& out_shape = a.numel() >= b.numel() ? a.shape() : b.shape();
    OpAttrs attrs;
    std::vector<const float*> in{a.data().data(), b.data().data()};
    std::vector<const Shape*> shapes{&a.shape(), &b.shape()};
    Tensor out = Tensor::from(out_shape, eval_op<float>(OpKind::mul, attrs, in, shapes, out_shape));
    return record(OpKind::mul, attrs, {a, b}, std::move(out));
}

Tensor Graph::concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw contract_error("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(first.size())) {
        throw op_shape_error(OpKind::concat, "axis " + std::to_string(axis) +
                             " out of range for " + shape_str(first));
    }
    Shape out_shape = first;
    for (std::size_t p = 1; p < parts.size(); ++p) {
        const Shape& s = parts[p].shape();
        if (s.size() != first.size()) {
            throw op_shape_error(OpKind::concat, "rank mismatch " + shape_str(first) +
                                 " vs " + shape_str(s));
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (static_cast<int>(i) != axis && s[i] != first[i]) {
                throw op_shape_error(OpKind::concat, "extent mismatch " + shape_str(first) +
                                     " vs " + shape_str(s));
            }
        }
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    OpAttrs attrs;
    attrs.axis = axis;
    std::vector<const float*> in;
    std::vector<const Shape*> shapes;
    for (const auto& t : parts) {
        in.push_back(t.data().data());
        shapes.push_back(&t.shape());
    }
    Tensor out = Tensor::from(out_shape, eval_op<float>(OpKind::concat, attrs, in, shapes, out_shape));
    return record(OpKind::concat, attrs, parts, std::move(out));
}

Tensor Graph::slice(const Tensor& a, int axis, int start, int len) {
    if (axis < 0 || axis >= a.rank()) {
        throw op_shape_error(OpKind::slice, "axis " + std::to_string(axis) +
                             " out of range for " + shape_str(a.shape()));
    }
    if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
        throw op_shape_error(OpKind::slice, "range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") invalid for " + shape_str(a.shape()));
    }
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.start = start;
    attrs.len = len;
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(out_shape, eval_op<float>(OpKind::slice, attrs, in, shapes, out_shape));
    return record(OpKind::slice, attrs, {a}, std::move(out));
}

Tensor Graph::reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw op_shape_error(OpKind::reshape, shape_str(a.shape()) + " -> " +
                             shape_str(new_shape) + " changes element count");
    }
    OpAttrs attrs;
    attrs.new_shape = new_shape;
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(new_shape, eval_op<float>(OpKind::reshape, attrs, in, shapes, new_shape));
    return record(OpKind::reshape, attrs, {a}, std::move(out));
}

Tensor Graph::softmax_lastdim(const Tensor& a) {
    if (a.rank() < 1) throw op_shape_error(OpKind::softmax_lastdim, "rank-0 input");
    OpAttrs attrs;
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(a.shape(), eval_op<float>(OpKind::softmax_lastdim, attrs, in, shapes, a.shape()));
    return record(OpKind::softmax_lastdim, attrs, {a}, std::move(out));
}

Tensor Graph::layernorm(const Tensor& x, const Tensor& scale, const Tensor& bias, float eps) {
    const int cols = x.shape().back();
    if (scale.rank() != 1 || bias.rank() != 1 || scale.dim(0) != cols || bias.dim(0) != cols) {
        throw op_shape_error(OpKind::layernorm, "scale/bias " + shape_str(scale.shape()) + "/" +
                             shape_str(bias.shape()) + " must be rank-1 of width " + std::to_string(cols));
    }
    OpAttrs attrs;
    attrs.eps = eps;
    std::vector<const float*> in{x.data().data(), scale.data().data(), bias.data().data()};
    std::vector<const Shape*> shapes{&x.shape(), &scale.shape(), &bias.shape()};
    Tensor out = Tensor::from(x.shape(), eval_op<float>(OpKind::layernorm, attrs, in, shapes, x.shape()));
    return record(OpKind::layernorm, attrs, {x, scale, bias}, std::move(out));
}

Tensor Graph::gelu(const Tensor& a) {
    OpAttrs attrs;
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(a.shape(), eval_op<float>(OpKind::gelu, attrs, in, shapes, a.shape()));
    return record(OpKind::gelu, attrs, {a}, std::move(out));
}

Tensor Graph::relu(const Tensor& a) {
    OpAttrs attrs;
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(a.shape(), eval_op<float>(OpKind::relu, attrs, in, shapes, a.shape()));
    return record(OpKind::relu, attrs, {a}, std::move(out));
}

Tensor Graph::adaptive_mean_pool(const Tensor& a, int target_rows) {
    if (a.rank() != 2) throw op_shape_error(OpKind::adaptive_mean_pool, "expects rank-2 input");
    if (target_rows < 1 || target_rows > a.dim(0)) {
        throw op_shape_error(OpKind::adaptive_mean_pool, "target extent " + std::to_string(target_rows) +
                             " invalid for " + shape_str(a.shape()));
    }
    OpAttrs attrs;
    attrs.target = target_rows;
    Shape out_shape{target_rows, a.dim(1)};
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(out_shape,
                              eval_op<float>(OpKind::adaptive_mean_pool, attrs, in, shapes, out_shape));
    return record(OpKind::adaptive_mean_pool, attrs, {a}, std::move(out));
}

Tensor Graph::embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw op_shape_error(OpKind::embedding_lookup, "table must be rank-2");
    if (ids.empty()) throw contract_error("embedding_lookup: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= table.dim(0)) {
            throw lookup_error("embedding_lookup: id " + std::to_string(id) +
                               " out of range for table " + shape_str(table.shape()));
        }
    }
    OpAttrs attrs;
    attrs.ids = ids;
    Shape out_shape{static_cast<int>(ids.size()), table.dim(1)};
    std::vector<const float*> in{table.data().data()};
    std::vector<const Shape*> shapes{&table.shape()};
    Tensor out = Tensor::from(out_shape,
                              eval_op<float>(OpKind::embedding_lookup, attrs, in, shapes, out_shape));
    return record(OpKind::embedding_lookup, attrs, {table}, std::move(out));
}

Tensor Graph::cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) throw op_shape_error(OpKind::cross_entropy, "logits must be rank-2");
    if (targets.empty()) throw contract_error("cross_entropy: empty target list");
    if (static_cast<int>(targets.size()) != logits.dim(0)) {
        throw op_shape_error(OpKind::cross_entropy, "targets length " + std::to_string(targets.size()) +
                             " does not match logits " + shape_str(logits.shape()));
    }
    for (int t : targets) {
        if (t < 0 || t >= logits.dim(1)) {
            throw lookup_error("cross_entropy: target " + std::to_string(t) +
                               " out of range for " + shape_str(logits.shape()));
        }
    }
    OpAttrs attrs;
    attrs.ids = targets;
    Shape out_shape{1};
    std::vector<const float*> in{logits.data().data()};
    std::vector<const Shape*> shapes{&logits.shape()};
    Tensor out = Tensor::from(out_shape,
                              eval_op<float>(OpKind::cross_entropy, attrs, in, shapes, out_shape));
    return record(OpKind::cross_entropy, attrs, {logits}, std::move(out));
}

Tensor Graph::sum(const Tensor& a) {
    OpAttrs attrs;
    Shape out_shape{1};
    std::vector<const float*> in{a.data().data()};
    std::vector<const Shape*> shapes{&a.shape()};
    Tensor out = Tensor::from(out_shape, eval_op<float>(OpKind::sum, attrs, in, shapes, out_shape));
    return record(OpKind::sum, attrs, {a}, std::move(out));
}

// --------------------------------------------------------------- backward

namespace {

std::span<float> ensure_grad(const Tensor& t) {
    return const_cast<Tensor&>(t).grad();
}

} // namespace

void Graph::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw contract_error("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return; // constant loss: nothing to populate
    ensure_grad(loss)[0] += 1.0f;

    // Reverse tape walk; every node is visited exactly once and consumers
    // of a value always appear later in the tape than its producer.
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        GraphNode& node = *it;
        if (!node.needs_grad || !node.output.has_grad()) continue;
        const std::span<const float> gy = node.output.impl()->grad;
        const auto& in = node.inputs;

        switch (node.kind) {
            case OpKind::matmul: {
                const Tensor& a = in[0];
                const Tensor& b = in[1];
                const int m = a.dim(0), k = a.dim(1);
                const int n = node.attrs.trans_b ? b.dim(0) : b.dim(1);
                if (a.requires_grad()) {
                    auto ga = ensure_grad(a);
                    const auto bd = b.data();
                    for (int i = 0; i < m; ++i)
                        for (int l = 0; l < k; ++l) {
                            float acc = 0;
                            for (int j = 0; j < n; ++j) {
                                const float bval = node.attrs.trans_b
                                                       ? bd[static_cast<std::size_t>(j) * k + l]
                                                       : bd[static_cast<std::size_t>(l) * n + j];
                                acc += gy[static_cast<std::size_t>(i) * n + j] * bval;
                            }
                            ga[static_cast<std::size_t>(i) * k + l] += acc;
                        }
                }
                if (b.requires_grad()) {
                    auto gb = ensure_grad(b);
                    const auto ad = a.data();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const float g = gy[static_cast<std::size_t>(i) * n + j];
                            for (int l = 0; l < k; ++l) {
                                const std::size_t bi = node.attrs.trans_b
                                                           ? static_cast<std::size_t>(j) * k + l
                                                           : static_cast<std::size_t>(l) * n + j;
                                gb[bi] += g * ad[static_cast<std::size_t>(i) * k + l];
                            }
                        }
                }
                break;
            }
            case OpKind::add: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                }
                if (in[1].requires_grad()) {
                    auto gb = ensure_grad(in[1]);
                    if (in[0].shape() == in[1].shape()) {
                        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
                    } else {
                        const std::size_t cols = in[1].numel();
                        for (std::size_t i = 0; i < gy.size(); ++i) gb[i % cols] += gy[i];
                    }
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& a = in[0];
                const Tensor& b = in[1];
                const std::size_t na = a.numel(), nb = b.numel();
                if (a.requires_grad()) {
                    auto ga = ensure_grad(a);
                    const auto bd = b.data();
                    if (na == nb) {
                        for (std::size_t i = 0; i < na; ++i) ga[i] += gy[i] * bd[i];
                    } else if (nb == 1) {
                        for (std::size_t i = 0; i < na; ++i) ga[i] += gy[i] * bd[0];
                    } else { // a scalar
                        float acc = 0;
                        for (std::size_t i = 0; i < nb; ++i) acc += gy[i] * bd[i];
                        ga[0] += acc;
                    }
                }
                if (b.requires_grad()) {
                    auto gb = ensure_grad(b);
                    const auto ad = a.data();
                    if (na == nb) {
                        for (std::size_t i = 0; i < nb; ++i) gb[i] += gy[i] * ad[i];
                    } else if (na == 1) {
                        for (std::size_t i = 0; i < nb; ++i) gb[i] += gy[i] * ad[0];
                    } else { // b scalar
                        float acc = 0;
                        for (std::size_t i = 0; i < na; ++i) acc += gy[i] * ad[i];
                        gb[0] += acc;
                    }
                }
                break;
            }
            case OpKind::concat: {
                const auto ob = axis_blocks(node.output.shape(), node.attrs.axis);
                std::size_t offset = 0;
                for (const auto& part : in) {
                    const auto pb = axis_blocks(part.shape(), node.attrs.axis);
                    if (part.requires_grad()) {
                        auto gp = ensure_grad(part);
                        for (std::size_t o = 0; o < pb.outer; ++o) {
                            const float* src = gy.data() + (o * ob.axis + offset) * ob.inner;
                            float* dst = gp.data() + o * pb.axis * pb.inner;
                            for (std::size_t i = 0; i < pb.axis * pb.inner; ++i) dst[i] += src[i];
                        }
                    }
                    offset += pb.axis;
                }
                break;
            }
            case OpKind::slice: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    const auto ib = axis_blocks(in[0].shape(), node.attrs.axis);
                    const std::size_t len = static_cast<std::size_t>(node.attrs.len);
                    for (std::size_t o = 0; o < ib.outer; ++o) {
                        float* dst = ga.data() + (o * ib.axis + static_cast<std::size_t>(node.attrs.start)) * ib.inner;
                        const float* src = gy.data() + o * len * ib.inner;
                        for (std::size_t i = 0; i < len * ib.inner; ++i) dst[i] += src[i];
                    }
                }
                break;
            }
            case OpKind::reshape: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                }
                break;
            }
            case OpKind::softmax_lastdim: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    const auto p = node.output.data();
                    const std::size_t cols = static_cast<std::size_t>(in[0].shape().back());
                    const std::size_t rows = p.size() / cols;
                    for (std::size_t r = 0; r < rows; ++r) {
                        float dot = 0;
                        for (std::size_t c = 0; c < cols; ++c) dot += gy[r * cols + c] * p[r * cols + c];
                        for (std::size_t c = 0; c < cols; ++c)
                            ga[r * cols + c] += p[r * cols + c] * (gy[r * cols + c] - dot);
                    }
                }
                break;
            }
            case OpKind::layernorm: {
                const Tensor& x = in[0];
                const Tensor& scale = in[1];
                const Tensor& bias = in[2];
                const std::size_t cols = static_cast<std::size_t>(x.shape().back());
                const std::size_t rows = x.numel() / cols;
                const auto xd = x.data();
                const auto sd = scale.data();
                std::vector<float> xhat(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const float* xr = xd.data() + r * cols;
                    float mean = 0;
                    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
                    mean /= static_cast<float>(cols);
                    float var = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const float d = xr[c] - mean;
                        var += d * d;
                    }
                    var /= static_cast<float>(cols);
                    const float inv = 1.0f / std::sqrt(var + node.attrs.eps);
                    for (std::size_t c = 0; c < cols; ++c) xhat[c] = (xr[c] - mean) * inv;

                    if (scale.requires_grad()) {
                        auto gs = ensure_grad(scale);
                        for (std::size_t c = 0; c < cols; ++c) gs[c] += gy[r * cols + c] * xhat[c];
                    }
                    if (bias.requires_grad()) {
                        auto gb = ensure_grad(bias);
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += gy[r * cols + c];
                    }
                    if (x.requires_grad()) {
                        auto gx = ensure_grad(x);
                        float mean_g = 0, mean_gx = 0;
                        for (std::size_t c = 0; c < cols; ++c) {
                            const float g = gy[r * cols + c] * sd[c];
                            mean_g += g;
                            mean_gx += g * xhat[c];
                        }
                        mean_g /= static_cast<float>(cols);
                        mean_gx /= static_cast<float>(cols);
                        for (std::size_t c = 0; c < cols; ++c) {
                            const float g = gy[r * cols + c] * sd[c];
                            gx[r * cols + c] += inv * (g - mean_g - xhat[c] * mean_gx);
                        }
                    }
                }
                break;
            }
            case OpKind::gelu: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    const auto xd = in[0].data();
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * gelu_deriv(xd[i]);
                }
                break;
            }
            case OpKind::relu: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    const auto xd = in[0].data();
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += xd[i] > 0.0f ? gy[i] : 0.0f;
                }
                break;
            }
            case OpKind::adaptive_mean_pool: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    const std::size_t rows = static_cast<std::size_t>(in[0].dim(0));
                    const std::size_t cols = static_cast<std::size_t>(in[0].dim(1));
                    const std::size_t target = static_cast<std::size_t>(node.attrs.target);
                    for (std::size_t seg = 0; seg < target; ++seg) {
                        auto [lo, hi] = pool_segment(seg, rows, target);
                        const float w = 1.0f / static_cast<float>(hi - lo);
                        for (std::size_t c = 0; c < cols; ++c)
                            for (std::size_t r = lo; r < hi; ++r)
                                ga[r * cols + c] += gy[seg * cols + c] * w;
                    }
                }
                break;
            }
            case OpKind::embedding_lookup: {
                if (in[0].requires_grad()) {
                    auto gt = ensure_grad(in[0]);
                    const std::size_t cols = static_cast<std::size_t>(in[0].dim(1));
                    for (std::size_t i = 0; i < node.attrs.ids.size(); ++i) {
                        float* dst = gt.data() + static_cast<std::size_t>(node.attrs.ids[i]) * cols;
                        for (std::size_t c = 0; c < cols; ++c) dst[c] += gy[i * cols + c];
                    }
                }
                break;
            }
            case OpKind::cross_entropy: {
                if (in[0].requires_grad()) {
                    auto gl = ensure_grad(in[0]);
                    const auto xd = in[0].data();
                    const std::size_t rows = static_cast<std::size_t>(in[0].dim(0));
                    const std::size_t cols = static_cast<std::size_t>(in[0].dim(1));
                    const float g = gy[0] / static_cast<float>(rows);
                    std::vector<float> p(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                        k_softmax_rows(xd.data() + r * cols, p.data(), 1, cols);
                        for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += g * p[c];
                        gl[r * cols + static_cast<std::size_t>(node.attrs.ids[r])] -= g;
                    }
                }
                break;
            }
            case OpKind::sum: {
                if (in[0].requires_grad()) {
                    auto ga = ensure_grad(in[0]);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[0];
                }
                break;
            }
        }
        // Intermediates keep their buffers until the graph dies; leaves keep
        // theirs for the optimizer.
    }
}

double Graph::replay_value_f64(const Tensor& result, const TensorImpl* leaf,
                               std::size_t element, double delta) const {
    std::unordered_map<const TensorImpl*, std::vector<double>> bufs;
    bufs.reserve(nodes_.size() * 2);

    auto fetch = [&](const Tensor& t) -> const std::vector<double>& {
        auto it = bufs.find(t.impl());
        if (it != bufs.end()) return it->second;
        // Not produced by any earlier node: a leaf. Seed from stored floats.
        std::vector<double> v(t.numel());
        const auto d = t.data();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(d[i]);
        if (t.impl() == leaf) v[element] += delta;
        return bufs.emplace(t.impl(), std::move(v)).first->second;
    };

    for (const auto& node : nodes_) {
        std::vector<const double*> in;
        std::vector<const Shape*> shapes;
        in.reserve(node.inputs.size());
        for (const auto& t : node.inputs) {
            in.push_back(fetch(t).data());
            shapes.push_back(&t.shape());
        }
        bufs[node.output.impl()] =
            eval_op<double>(node.kind, node.attrs, in, shapes, node.output.shape());
    }
    const auto& out = fetch(result);
    if (out.size() != 1) {
        throw contract_error("replay_value_f64 expects a scalar result tensor");
    }
    return out[0];
}

} // namespace hyperpelt
