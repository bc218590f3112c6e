#pragma once

// Reverse-mode differentiation over dense row-major double tensors.
//
// Every op returns a new Tensor. When any input requires a gradient, the result
// records its inputs and a backward closure; backward() walks that graph in
// reverse topological order. Graphs are owned by the tensors that reference
// them, so dropping the loss releases the recording.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace aspun::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    bool is_leaf() const noexcept { return inputs.empty(); }
    std::vector<double>& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t extent(int axis) const;

    std::span<const double> data() const { return node_->value; }
    /// Writable values. Only meaningful for leaves; editing a recorded intermediate breaks its backward.
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    void zero_grad();

    /// Leaf copy of the current values with no history.
    Tensor detach() const;

    Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Populates grad of every requires_grad leaf reachable from `loss` (a one-element tensor).
/// Leaf gradients accumulate across calls; intermediate gradients are cleared afterwards.
void backward(const Tensor& loss);

/// Enables finite-value checks at every op boundary for the current thread while alive.
/// Checks default on in builds without NDEBUG.
class DebugChecks {
public:
    explicit DebugChecks(bool enabled);
    ~DebugChecks();
    DebugChecks(const DebugChecks&) = delete;
    DebugChecks& operator=(const DebugChecks&) = delete;

    static bool enabled() noexcept;

private:
    bool previous_;
};

// ---- elementwise -------------------------------------------------------------
// Binary ops broadcast `b` over the leading extents of `a`: b.shape must equal a
// trailing suffix of a.shape, or b holds a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor sigmoid(const Tensor& x);
/// Exact erf form: x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);

// ---- reductions --------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean(sqrt((pred - target)^2 + eps^2)); target receives a gradient too if it requires one.
Tensor charbonnier(const Tensor& pred, const Tensor& target, double eps);

// ---- linear algebra ----------------------------------------------------------
/// [..., m, k] x [k, n] -> [..., m, n], or batched [B..., m, k] x [B..., k, n].
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

/// x [H, W, Cin], weight [kh, kw, Cin/groups, Cout], optional bias [Cout]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opts = {});
/// Adjoint of conv2d in its input: x [H, W, Cin], weight [kh, kw, Cout/groups, Cin] (the
/// layout of the conv it transposes), output [(H-1)s - 2p + kh, (W-1)s - 2p + kw, Cout].
Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                         const Conv2dOptions& opts = {});

/// Average pooling over [H, W, C]; padded taps count toward the divisor.
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding = 0);
/// Mean over every axis but the last: [..., C] -> [C].
Tensor global_avg_pool(const Tensor& x);

/// Normalizes over the last axis, then applies gamma [C] and beta [C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Negative axes count from the end.
Tensor softmax(const Tensor& x, int axis);

// ---- shape -------------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::size_t>& sizes);

/// [H, W, C] -> [(H/b)(W/b), b*b, C]; windows in row-major window order, tokens row-major inside.
Tensor window_partition(const Tensor& x, std::size_t window);
/// Inverse of window_partition.
Tensor window_merge(const Tensor& windows, std::size_t height, std::size_t width, std::size_t window);

}  // namespace aspun::ad
