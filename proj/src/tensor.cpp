#include "aspun/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

#include "aspun/errors.hpp"
#include "tensor_internal.hpp"

namespace aspun::ad {

namespace {

#ifdef NDEBUG
thread_local bool g_debug_checks = false;
#else
thread_local bool g_debug_checks = true;
#endif

}  // namespace

std::size_t numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != values.size()) {
        throw ShapeError("tensor of shape " + to_string(shape) + " cannot hold " + std::to_string(values.size()) +
                         " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::extent(int axis) const {
    return node_->shape[detail::normalize_axis(axis, rank())];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = flag;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("backward needs a one-element loss, got " + (loss.defined() ? to_string(loss.shape()) : "null"));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order with inputs before consumers.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->is_leaf() || node->grad.empty()) continue;
        node->backward(*node);
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

DebugChecks::DebugChecks(bool enabled) : previous_(g_debug_checks) { g_debug_checks = enabled; }
DebugChecks::~DebugChecks() { g_debug_checks = previous_; }
bool DebugChecks::enabled() noexcept { return g_debug_checks; }

namespace detail {

std::size_t normalize_axis(int axis, std::size_t rank) {
    const long r = static_cast<long>(rank);
    const long a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
    if (DebugChecks::enabled()) {
        for (std::size_t i = 0; i < value.size(); ++i) {
            if (!std::isfinite(value[i])) {
                throw NumericalError(std::string("non-finite output of ") + op + " at flat index " + std::to_string(i),
                                     -1);
            }
        }
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool any = false;
    for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (any) {
        node->requires_grad = true;
        for (const auto& t : inputs) {
            if (t.defined()) node->inputs.push_back(t.node_ptr());
        }
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void accumulate(Node* target, std::span<const double> g) {
    if (!target->requires_grad) return;
    auto& buf = target->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

using detail::make_result;

namespace {

// b broadcast over the leading extents of a (or a one-element b): returns the repeated length.
std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (b.size() == 1) return 1;
    bool ok = sb.size() <= sa.size();
    for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
    if (!ok) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(sb) + " onto " + to_string(sa));
    }
    return b.size();
}

template <typename Fwd, typename Bwd>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Bwd dfdx) {
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    Node* xn = x.node();
    return make_result(op, x.shape(), std::move(out), {x}, [xn, dfdx](Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(xn->value[i], self.value[i]);
    });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const std::size_t inner = broadcast_inner(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("add", a.shape(), std::move(out), {a, b}, [an, bn, inner](Node& self) {
        detail::accumulate(an, self.grad);
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % inner] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const std::size_t inner = broadcast_inner(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % inner];
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("sub", a.shape(), std::move(out), {a, b}, [an, bn, inner](Node& self) {
        detail::accumulate(an, self.grad);
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % inner] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const std::size_t inner = broadcast_inner(a, b, "mul");
    std::vector<double> out(a.size());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % inner];
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("mul", a.shape(), std::move(out), {a, b}, [an, bn, inner](Node& self) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bn->value[i % inner];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % inner] += self.grad[i] * an->value[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
    return unary(
        "gelu", x, [](double v) { return v * normal_cdf(v); },
        [](double v, double) {
            return normal_cdf(v) + v * std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        });
}

Tensor relu(const Tensor& x) {
    return unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x, [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](double v, double) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Node* xn = x.node();
    return make_result("sum", {1}, {acc}, {x}, [xn](Node& self) {
        auto& gx = xn->grad_buffer();
        for (double& g : gx) g += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double n = static_cast<double>(x.size());
    Node* xn = x.node();
    return make_result("mean", {1}, {acc / n}, {x}, [xn, n](Node& self) {
        auto& gx = xn->grad_buffer();
        for (double& g : gx) g += self.grad[0] / n;
    });
}

Tensor charbonnier(const Tensor& pred, const Tensor& target, double eps) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("charbonnier: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
    }
    if (!(eps > 0.0)) throw std::invalid_argument("charbonnier eps must be > 0");
    const std::size_t n = pred.size();
    std::vector<double> root(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.data()[i] - target.data()[i];
        root[i] = std::sqrt(d * d + eps * eps);
        acc += root[i];
    }
    const double count = static_cast<double>(n);
    Node* pn = pred.node();
    Node* tn = target.node();
    return make_result("charbonnier", {1}, {acc / count}, {pred, target},
                       [pn, tn, root = std::move(root), count](Node& self) {
                           const double g = self.grad[0] / count;
                           for (std::size_t i = 0; i < root.size(); ++i) {
                               const double d = (pn->value[i] - tn->value[i]) / root[i] * g;
                               if (pn->requires_grad) pn->grad_buffer()[i] += d;
                               if (tn->requires_grad) tn->grad_buffer()[i] -= d;
                           }
                       });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
    }
    Node* xn = x.node();
    return make_result("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                       [xn](Node& self) { detail::accumulate(xn, self.grad); });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) throw ShapeError("permute: axes list length differs from rank");
    std::vector<bool> seen(r, false);
    for (auto a : axes) {
        if (a >= r || seen[a]) throw ShapeError("permute: axes must be a permutation of 0.." + std::to_string(r - 1));
        seen[a] = true;
    }
    const auto& in_shape = x.shape();
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::size_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[axes[i]];
        src_stride[i] = in_strides[axes[i]];
    }
    // Flat source index for every destination element.
    std::vector<std::size_t> gather(x.size());
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < gather.size(); ++o) {
        gather[o] = src;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            src += src_stride[d];
            if (idx[d] < out_shape[d]) break;
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[gather[o]];
    Node* xn = x.node();
    return make_result("permute", std::move(out_shape), std::move(out), {x},
                       [xn, gather = std::move(gather)](Node& self) {
                           auto& gx = xn->grad_buffer();
                           for (std::size_t o = 0; o < gather.size(); ++o) gx[gather[o]] += self.grad[o];
                       });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const std::size_t r = parts[0].rank();
    const std::size_t ax = detail::normalize_axis(axis, r);
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < r; ++i) {
            if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
                throw ShapeError("concat: " + to_string(p.shape()) + " incompatible with " +
                                 to_string(parts[0].shape()) + " along axis " + std::to_string(ax));
            }
        }
        out_shape[ax] += p.shape()[ax];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
    for (std::size_t i = ax + 1; i < r; ++i) inner *= out_shape[i];
    const std::size_t out_row = out_shape[ax] * inner;
    std::vector<double> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t row = p.shape()[ax] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * row), row,
                        out.begin() + static_cast<std::ptrdiff_t>(o * out_row + off));
        }
        offsets.push_back(off);
        off += row;
    }
    std::vector<Node*> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());

    return make_result("concat", std::move(out_shape), std::move(out), parts,
                       [nodes, offsets, outer, out_row, inner, ax](Node& self) {
                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                               Node* n = nodes[k];
                               if (!n->requires_grad) continue;
                               const std::size_t row = n->shape[ax] * inner;
                               auto& g = n->grad_buffer();
                               for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t j = 0; j < row; ++j) {
                                       g[o * row + j] += self.grad[o * out_row + offsets[k] + j];
                                   }
                               }
                           }
                       });
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::size_t>& sizes) {
    const std::size_t r = x.rank();
    const std::size_t ax = detail::normalize_axis(axis, r);
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != x.shape()[ax]) {
        throw ShapeError("split sizes sum to " + std::to_string(total) + " but axis has extent " +
                         std::to_string(x.shape()[ax]));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
    for (std::size_t i = ax + 1; i < r; ++i) inner *= x.shape()[i];
    const std::size_t in_row = x.shape()[ax] * inner;
    std::vector<Tensor> out;
    std::size_t off = 0;
    Node* xn = x.node();
    for (auto s : sizes) {
        Shape shape = x.shape();
        shape[ax] = s;
        const std::size_t row = s * inner;
        std::vector<double> v(outer * row);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * in_row + off), row,
                        v.begin() + static_cast<std::ptrdiff_t>(o * row));
        }
        out.push_back(make_result("split", std::move(shape), std::move(v), {x},
                                  [xn, outer, row, in_row, off](Node& self) {
                                      auto& g = xn->grad_buffer();
                                      for (std::size_t o = 0; o < outer; ++o) {
                                          for (std::size_t j = 0; j < row; ++j) {
                                              g[o * in_row + off + j] += self.grad[o * row + j];
                                          }
                                      }
                                  }));
        off += row;
    }
    return out;
}

namespace {

// Destination index in the [H, W, C] grid for every element of the partitioned layout.
std::vector<std::size_t> window_index_map(std::size_t H, std::size_t W, std::size_t C, std::size_t b) {
    const std::size_t nwx = W / b;
    std::vector<std::size_t> map(H * W * C);
    std::size_t o = 0;
    for (std::size_t wy = 0; wy < H / b; ++wy) {
        for (std::size_t wx = 0; wx < nwx; ++wx) {
            for (std::size_t iy = 0; iy < b; ++iy) {
                for (std::size_t ix = 0; ix < b; ++ix) {
                    const std::size_t base = ((wy * b + iy) * W + (wx * b + ix)) * C;
                    for (std::size_t c = 0; c < C; ++c) map[o++] = base + c;
                }
            }
        }
    }
    return map;
}

void require_window_fit(std::size_t H, std::size_t W, std::size_t b, const char* op) {
    if (b == 0 || H % b != 0 || W % b != 0) {
        throw ShapeError(std::string(op) + ": window " + std::to_string(b) + " does not divide " + std::to_string(H) +
                         "x" + std::to_string(W));
    }
}

}  // namespace

Tensor window_partition(const Tensor& x, std::size_t window) {
    if (x.rank() != 3) throw ShapeError("window_partition expects [H, W, C], got " + to_string(x.shape()));
    const std::size_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
    require_window_fit(H, W, window, "window_partition");
    auto map = window_index_map(H, W, C, window);
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[map[o]];
    Node* xn = x.node();
    return make_result("window_partition", {(H / window) * (W / window), window * window, C}, std::move(out), {x},
                       [xn, map = std::move(map)](Node& self) {
                           auto& g = xn->grad_buffer();
                           for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] += self.grad[o];
                       });
}

Tensor window_merge(const Tensor& windows, std::size_t height, std::size_t width, std::size_t window) {
    require_window_fit(height, width, window, "window_merge");
    if (windows.rank() != 3 || windows.shape()[0] != (height / window) * (width / window) ||
        windows.shape()[1] != window * window) {
        throw ShapeError("window_merge: " + to_string(windows.shape()) + " is not a window layout of " +
                         std::to_string(height) + "x" + std::to_string(width) + " with window " +
                         std::to_string(window));
    }
    const std::size_t C = windows.shape()[2];
    auto map = window_index_map(height, width, C, window);
    std::vector<double> out(windows.size());
    for (std::size_t o = 0; o < map.size(); ++o) out[map[o]] = windows.data()[o];
    Node* wn = windows.node();
    return make_result("window_merge", {height, width, C}, std::move(out), {windows},
                       [wn, map = std::move(map)](Node& self) {
                           auto& g = wn->grad_buffer();
                           for (std::size_t o = 0; o < map.size(); ++o) g[o] += self.grad[map[o]];
                       });
}

}  // namespace aspun::ad
