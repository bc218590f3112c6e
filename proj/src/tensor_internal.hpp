#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "aspun/tensor.hpp"

namespace aspun::ad::detail {

std::size_t normalize_axis(int axis, std::size_t rank);

/// Wraps an op output; records inputs and the backward closure only when an input needs a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                   std::function<void(Node&)> backward_fn);

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward_fn) {
    return make_result(op, std::move(shape), std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                       std::move(backward_fn));
}

/// target.grad += g when target requires a gradient.
void accumulate(Node* target, std::span<const double> g);

}  // namespace aspun::ad::detail
