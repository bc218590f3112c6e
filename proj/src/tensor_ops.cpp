#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "aspun/errors.hpp"
#include "aspun/tensor.hpp"
#include "kernels.hpp"
#include "tensor_internal.hpp"

namespace aspun::ad {

using detail::make_result;

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    const std::size_t m = a.shape()[a.rank() - 2];
    const std::size_t k = a.shape()[a.rank() - 1];
    const std::size_t n = b.shape()[b.rank() - 1];
    if (b.shape()[b.rank() - 2] != k) {
        throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const bool shared_rhs = b.rank() == 2;
    if (!shared_rhs) {
        bool same = a.rank() == b.rank();
        for (std::size_t i = 0; same && i + 2 < a.rank(); ++i) same = a.shape()[i] == b.shape()[i];
        if (!same) {
            throw ShapeError("matmul batch extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
        }
    }
    const std::size_t batch = a.size() / (m * k);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(batch * m * n, 0.0);
    const double* av = a.data().data();
    const double* bv = b.data().data();
    if (shared_rhs) {
        kernels::gemm_nn(batch * m, n, k, av, k, bv, n, out.data(), n);
    } else {
        for (std::size_t s = 0; s < batch; ++s) {
            kernels::gemm_nn(m, n, k, av + s * m * k, k, bv + s * k * n, n, out.data() + s * m * n, n);
        }
    }
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                       [an, bn, m, n, k, batch, shared_rhs](Node& self) {
                           const double* g = self.grad.data();
                           if (shared_rhs) {
                               if (an->requires_grad) {
                                   kernels::gemm_nt(batch * m, k, n, g, n, bn->value.data(), n,
                                                    an->grad_buffer().data(), k);
                               }
                               if (bn->requires_grad) {
                                   kernels::gemm_tn(k, n, batch * m, an->value.data(), k, g, n,
                                                    bn->grad_buffer().data(), n);
                               }
                               return;
                           }
                           for (std::size_t s = 0; s < batch; ++s) {
                               if (an->requires_grad) {
                                   kernels::gemm_nt(m, k, n, g + s * m * n, n, bn->value.data() + s * k * n, n,
                                                    an->grad_buffer().data() + s * m * k, k);
                               }
                               if (bn->requires_grad) {
                                   kernels::gemm_tn(k, n, m, an->value.data() + s * m * k, k, g + s * m * n, n,
                                                    bn->grad_buffer().data() + s * k * n, n);
                               }
                           }
                       });
}

namespace {

// Geometry of a convolution from an "image" grid [H, W, Cin] to a "feature" grid [Ho, Wo, Cout].
struct ConvGeometry {
    std::size_t H, W, Cin, kh, kw, Cout, stride, pad, groups, Ho, Wo;

    std::size_t cin_g() const { return Cin / groups; }
    std::size_t cout_g() const { return Cout / groups; }
    std::size_t K() const { return kh * kw * cin_g(); }
    std::size_t rows() const { return Ho * Wo; }
};

// cols[(oy*Wo + ox), (ki*kw + kj)*cin_g + ci] = x[oy*s - p + ki, ox*s - p + kj, g*cin_g + ci]
void im2col(const ConvGeometry& geo, const double* x, std::size_t group, double* cols) {
    const std::size_t cg = geo.cin_g(), K = geo.K();
    for (std::size_t oy = 0; oy < geo.Ho; ++oy) {
        for (std::size_t ox = 0; ox < geo.Wo; ++ox) {
            double* row = cols + (oy * geo.Wo + ox) * K;
            for (std::size_t ki = 0; ki < geo.kh; ++ki) {
                const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.pad);
                for (std::size_t kj = 0; kj < geo.kw; ++kj) {
                    const long ix = static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.pad);
                    double* dst = row + (ki * geo.kw + kj) * cg;
                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(geo.H) || ix >= static_cast<long>(geo.W)) {
                        std::fill_n(dst, cg, 0.0);
                        continue;
                    }
                    const double* src =
                        x + (static_cast<std::size_t>(iy) * geo.W + static_cast<std::size_t>(ix)) * geo.Cin +
                        group * cg;
                    std::copy_n(src, cg, dst);
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds cols back into the image grid.
void col2im(const ConvGeometry& geo, const double* cols, std::size_t group, double* x) {
    const std::size_t cg = geo.cin_g(), K = geo.K();
    for (std::size_t oy = 0; oy < geo.Ho; ++oy) {
        for (std::size_t ox = 0; ox < geo.Wo; ++ox) {
            const double* row = cols + (oy * geo.Wo + ox) * K;
            for (std::size_t ki = 0; ki < geo.kh; ++ki) {
                const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.pad);
                if (iy < 0 || iy >= static_cast<long>(geo.H)) continue;
                for (std::size_t kj = 0; kj < geo.kw; ++kj) {
                    const long ix = static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.pad);
                    if (ix < 0 || ix >= static_cast<long>(geo.W)) continue;
                    const double* src = row + (ki * geo.kw + kj) * cg;
                    double* dst = x + (static_cast<std::size_t>(iy) * geo.W + static_cast<std::size_t>(ix)) * geo.Cin +
                                  group * cg;
                    for (std::size_t c = 0; c < cg; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

// out[rows, Cout] += im2col(image) * W
void conv_image_to_feature(const ConvGeometry& geo, const double* image, const double* weight, double* out,
                           std::vector<double>& cols) {
    cols.resize(geo.rows() * geo.K());
    for (std::size_t g = 0; g < geo.groups; ++g) {
        im2col(geo, image, g, cols.data());
        kernels::gemm_nn(geo.rows(), geo.cout_g(), geo.K(), cols.data(), geo.K(), weight + g * geo.cout_g(), geo.Cout,
                         out + g * geo.cout_g(), geo.Cout);
    }
}

// image += col2im(feature * W^T)
void conv_feature_to_image(const ConvGeometry& geo, const double* feature, const double* weight, double* image,
                           std::vector<double>& cols) {
    cols.assign(geo.rows() * geo.K(), 0.0);
    for (std::size_t g = 0; g < geo.groups; ++g) {
        if (g > 0) std::fill(cols.begin(), cols.end(), 0.0);
        kernels::gemm_nt(geo.rows(), geo.K(), geo.cout_g(), feature + g * geo.cout_g(), geo.Cout,
                         weight + g * geo.cout_g(), geo.Cout, cols.data(), geo.K());
        col2im(geo, cols.data(), g, image);
    }
}

// dW += im2col(image)^T * feature
void conv_weight_grad(const ConvGeometry& geo, const double* image, const double* feature, double* dweight,
                      std::vector<double>& cols) {
    cols.resize(geo.rows() * geo.K());
    for (std::size_t g = 0; g < geo.groups; ++g) {
        im2col(geo, image, g, cols.data());
        kernels::gemm_tn(geo.K(), geo.cout_g(), geo.rows(), cols.data(), geo.K(), feature + g * geo.cout_g(),
                         geo.Cout, dweight + g * geo.cout_g(), geo.Cout);
    }
}

void add_bias(std::vector<double>& out, const Tensor& bias, std::size_t channels) {
    if (!bias.defined()) return;
    auto bv = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % channels];
}

void bias_grad(Node* bias, const std::vector<double>& g, std::size_t channels) {
    if (bias == nullptr || !bias->requires_grad) return;
    auto& gb = bias->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gb[i % channels] += g[i];
}

void check_conv_args(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opts,
                     std::size_t image_channels_axis_extent, std::size_t feature_channels, const char* op) {
    if (x.rank() != 3) throw ShapeError(std::string(op) + " expects [H, W, C] input, got " + to_string(x.shape()));
    if (weight.rank() != 4) throw ShapeError(std::string(op) + " expects a rank-4 weight");
    if (opts.stride == 0 || opts.groups == 0) throw ShapeError(std::string(op) + ": stride and groups must be >= 1");
    if (image_channels_axis_extent % opts.groups != 0 || feature_channels % opts.groups != 0) {
        throw ShapeError(std::string(op) + ": channels not divisible by groups");
    }
    if (bias.defined() && (bias.rank() != 1)) throw ShapeError(std::string(op) + ": bias must be rank 1");
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opts) {
    if (x.rank() != 3 || weight.rank() != 4) {
        throw ShapeError("conv2d expects [H, W, C] input and rank-4 weight, got " + to_string(x.shape()) + " and " +
                         to_string(weight.shape()));
    }
    const std::size_t Cin = x.shape()[2], Cout = weight.shape()[3];
    check_conv_args(x, weight, bias, opts, Cin, Cout, "conv2d");
    if (weight.shape()[2] * opts.groups != Cin) {
        throw ShapeError("conv2d weight " + to_string(weight.shape()) + " does not match " + std::to_string(Cin) +
                         " input channels with groups " + std::to_string(opts.groups));
    }
    if (bias.defined() && bias.shape()[0] != Cout) throw ShapeError("conv2d bias length differs from Cout");
    const std::size_t H = x.shape()[0], W = x.shape()[1], kh = weight.shape()[0], kw = weight.shape()[1];
    if (H + 2 * opts.padding < kh || W + 2 * opts.padding < kw) throw ShapeError("conv2d kernel larger than input");
    const ConvGeometry geo{H,
                           W,
                           Cin,
                           kh,
                           kw,
                           Cout,
                           opts.stride,
                           opts.padding,
                           opts.groups,
                           (H + 2 * opts.padding - kh) / opts.stride + 1,
                           (W + 2 * opts.padding - kw) / opts.stride + 1};
    std::vector<double> out(geo.rows() * Cout, 0.0);
    std::vector<double> cols;
    conv_image_to_feature(geo, x.data().data(), weight.data().data(), out.data(), cols);
    add_bias(out, bias, Cout);
    Node* xn = x.node();
    Node* wn = weight.node();
    Node* bn = bias.defined() ? bias.node() : nullptr;
    return make_result("conv2d", {geo.Ho, geo.Wo, Cout}, std::move(out), {x, weight, bias},
                       [xn, wn, bn, geo](Node& self) {
                           std::vector<double> cols;
                           if (xn->requires_grad) {
                               conv_feature_to_image(geo, self.grad.data(), wn->value.data(),
                                                     xn->grad_buffer().data(), cols);
                           }
                           if (wn->requires_grad) {
                               conv_weight_grad(geo, xn->value.data(), self.grad.data(), wn->grad_buffer().data(),
                                                cols);
                           }
                           bias_grad(bn, self.grad, geo.Cout);
                       });
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opts) {
    if (x.rank() != 3 || weight.rank() != 4) {
        throw ShapeError("transposed_conv2d expects [H, W, C] input and rank-4 weight, got " + to_string(x.shape()) +
                         " and " + to_string(weight.shape()));
    }
    // The conv being transposed maps [Ho, Wo, Cout] -> [Hi, Wi, Cin].
    const std::size_t Cin = x.shape()[2];
    const std::size_t Cout = weight.shape()[2] * opts.groups;
    check_conv_args(x, weight, bias, opts, Cout, Cin, "transposed_conv2d");
    if (weight.shape()[3] != Cin) {
        throw ShapeError("transposed_conv2d weight " + to_string(weight.shape()) + " does not match " +
                         std::to_string(Cin) + " input channels");
    }
    if (bias.defined() && bias.shape()[0] != Cout) throw ShapeError("transposed_conv2d bias length differs from Cout");
    const std::size_t Hi = x.shape()[0], Wi = x.shape()[1], kh = weight.shape()[0], kw = weight.shape()[1];
    const long Ho = static_cast<long>((Hi - 1) * opts.stride + kh) - 2 * static_cast<long>(opts.padding);
    const long Wo = static_cast<long>((Wi - 1) * opts.stride + kw) - 2 * static_cast<long>(opts.padding);
    if (Ho <= 0 || Wo <= 0) throw ShapeError("transposed_conv2d output would be empty");
    const ConvGeometry geo{static_cast<std::size_t>(Ho),
                           static_cast<std::size_t>(Wo),
                           Cout,
                           kh,
                           kw,
                           Cin,
                           opts.stride,
                           opts.padding,
                           opts.groups,
                           Hi,
                           Wi};
    std::vector<double> out(geo.H * geo.W * Cout, 0.0);
    std::vector<double> cols;
    conv_feature_to_image(geo, x.data().data(), weight.data().data(), out.data(), cols);
    add_bias(out, bias, Cout);
    Node* xn = x.node();
    Node* wn = weight.node();
    Node* bn = bias.defined() ? bias.node() : nullptr;
    return make_result("transposed_conv2d", {geo.H, geo.W, Cout}, std::move(out), {x, weight, bias},
                       [xn, wn, bn, geo](Node& self) {
                           std::vector<double> cols;
                           if (xn->requires_grad) {
                               conv_image_to_feature(geo, self.grad.data(), wn->value.data(),
                                                     xn->grad_buffer().data(), cols);
                           }
                           if (wn->requires_grad) {
                               conv_weight_grad(geo, self.grad.data(), xn->value.data(), wn->grad_buffer().data(),
                                                cols);
                           }
                           bias_grad(bn, self.grad, geo.Cin);
                       });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (x.rank() != 3) throw ShapeError("avg_pool2d expects [H, W, C], got " + to_string(x.shape()));
    if (kernel == 0 || stride == 0) throw ShapeError("avg_pool2d: kernel and stride must be >= 1");
    const std::size_t H = x.shape()[0], W = x.shape()[1], C = x.shape()[2];
    if (H + 2 * padding < kernel || W + 2 * padding < kernel) throw ShapeError("avg_pool2d kernel larger than input");
    const ConvGeometry geo{H,      W,       C, kernel, kernel, C, stride, padding, C,
                           (H + 2 * padding - kernel) / stride + 1, (W + 2 * padding - kernel) / stride + 1};
    const double inv = 1.0 / static_cast<double>(kernel * kernel);
    // Depthwise conv with a constant kernel; padded taps read zero but still count.
    std::vector<double> out(geo.rows() * C, 0.0);
    auto xv = x.data();
    for (std::size_t oy = 0; oy < geo.Ho; ++oy) {
        for (std::size_t ox = 0; ox < geo.Wo; ++ox) {
            double* dst = out.data() + (oy * geo.Wo + ox) * C;
            for (std::size_t ki = 0; ki < kernel; ++ki) {
                const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (std::size_t kj = 0; kj < kernel; ++kj) {
                    const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(padding);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    const double* src = xv.data() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
                    for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                }
            }
        }
    }
    Node* xn = x.node();
    return make_result("avg_pool2d", {geo.Ho, geo.Wo, C}, std::move(out), {x}, [xn, geo, inv](Node& self) {
        auto& gx = xn->grad_buffer();
        const std::size_t C = geo.Cin;
        for (std::size_t oy = 0; oy < geo.Ho; ++oy) {
            for (std::size_t ox = 0; ox < geo.Wo; ++ox) {
                const double* src = self.grad.data() + (oy * geo.Wo + ox) * C;
                for (std::size_t ki = 0; ki < geo.kh; ++ki) {
                    const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.pad);
                    if (iy < 0 || iy >= static_cast<long>(geo.H)) continue;
                    for (std::size_t kj = 0; kj < geo.kw; ++kj) {
                        const long ix = static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.pad);
                        if (ix < 0 || ix >= static_cast<long>(geo.W)) continue;
                        double* dst =
                            gx.data() + (static_cast<std::size_t>(iy) * geo.W + static_cast<std::size_t>(ix)) * C;
                        for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                    }
                }
            }
        }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("global_avg_pool expects rank >= 2, got " + to_string(x.shape()));
    const std::size_t C = x.shape().back();
    const std::size_t n = x.size() / C;
    std::vector<double> out(C, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) out[i % C] += x.data()[i];
    for (double& v : out) v /= static_cast<double>(n);
    Node* xn = x.node();
    return make_result("global_avg_pool", {C}, std::move(out), {x}, [xn, C, n](Node& self) {
        auto& gx = xn->grad_buffer();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i % C] * inv;
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm on a scalar");
    const std::size_t C = x.shape().back();
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(C) + "]");
    }
    const std::size_t rows = x.size() / C;
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = xv.data() + r * C;
        double mu = 0.0;
        for (std::size_t c = 0; c < C; ++c) mu += px[c];
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) var += (px[c] - mu) * (px[c] - mu);
        var /= static_cast<double>(C);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < C; ++c) {
            xhat[r * C + c] = (px[c] - mu) * is;
            out[r * C + c] = xhat[r * C + c] * gv[c] + bv[c];
        }
    }
    Node* xn = x.node();
    Node* gn = gamma.node();
    Node* bn = beta.node();
    return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [xn, gn, bn, C, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           const double* g = self.grad.data();
                           if (gn->requires_grad) {
                               auto& gg = gn->grad_buffer();
                               for (std::size_t i = 0; i < xhat.size(); ++i) gg[i % C] += g[i] * xhat[i];
                           }
                           if (bn->requires_grad) {
                               auto& gb = bn->grad_buffer();
                               for (std::size_t i = 0; i < xhat.size(); ++i) gb[i % C] += g[i];
                           }
                           if (!xn->requires_grad) return;
                           auto& gx = xn->grad_buffer();
                           const double invC = 1.0 / static_cast<double>(C);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double sum_d = 0.0, sum_dx = 0.0;
                               for (std::size_t c = 0; c < C; ++c) {
                                   const double d = g[r * C + c] * gn->value[c];
                                   sum_d += d;
                                   sum_dx += d * xhat[r * C + c];
                               }
                               for (std::size_t c = 0; c < C; ++c) {
                                   const double d = g[r * C + c] * gn->value[c];
                                   gx[r * C + c] +=
                                       inv_std[r] * (d - invC * sum_d - xhat[r * C + c] * invC * sum_dx);
                               }
                           }
                       });
}

Tensor softmax(const Tensor& x, int axis) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank());
    const std::size_t len = x.shape()[ax];
    std::size_t inner = 1;
    for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    const std::size_t outer = x.size() / (len * inner);
    std::vector<double> out(x.size());
    auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * len * inner + j;
            double mx = xv[base];
            for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
            double total = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(xv[base + i * inner] - mx);
                out[base + i * inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
        }
    }
    Node* xn = x.node();
    return make_result("softmax", x.shape(), std::move(out), {x}, [xn, outer, len, inner](Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < inner; ++j) {
                const std::size_t base = o * len * inner + j;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) dot += self.grad[base + i * inner] * self.value[base + i * inner];
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t at = base + i * inner;
                    gx[at] += self.value[at] * (self.grad[at] - dot);
                }
            }
        }
    });
}

}  // namespace aspun::ad
