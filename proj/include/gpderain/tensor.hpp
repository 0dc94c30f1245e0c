/*
 * Copyright 2026 The gpderain Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "gpderain/buffer.hpp"

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpderain {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for any shape or argument mismatch inside tensor operations.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until populated by backward
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major float64 tensor handle. Copies share storage; ops never
/// mutate their inputs, so a handle behaves as an immutable value once it
/// has been consumed by a recorded operation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor from_buffer(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only for parameters outside of a recorded forward.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Copy of the values with no gradient tracking.
  Tensor detach() const;

  /// Differentiable reshape; numel must match.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(const char*, Shape, Buffer,
                            const std::vector<Tensor>&,
                            std::function<void(std::span<const double>,
                                               std::vector<std::span<double>>&)>);
};

/// Backward callback: receives the output gradient and one span per input.
/// Spans for inputs that do not require a gradient are empty and must be
/// skipped. Gradients are accumulated (+=), never assigned.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::vector<std::span<double>>& grad_in)>;

/// Wraps freshly computed values as the output of an operation. When gradient
/// recording is enabled and any input requires a gradient, the node is
/// appended to the current thread's tape.
Tensor make_result(const char* op_name, Shape shape, Buffer values,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

/// Thread-local reverse-mode tape. Nodes are appended in execution order,
/// which is a valid topological order; backward walks them in reverse.
class Tape {
 public:
  static Tape& current();

  void backward(const Tensor& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  bool recording() const { return enabled_; }
  void set_recording(bool flag) { enabled_ = flag; }

 private:
  friend Tensor make_result(const char*, Shape, Buffer,
                            const std::vector<Tensor>&, BackwardFn);
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool enabled_ = true;
};

/// Disables recording for its lifetime (bank builds, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().recording()) {
    Tape::current().set_recording(false);
  }
  ~NoGradGuard() { Tape::current().set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Runs backward on the current thread's tape.
void backward(const Tensor& loss);

// Elementwise and reduction ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor abs_sum(const Tensor& a);
Tensor abs_mean(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
// Eval-only; result carries no gradient.
Tensor clamp(const Tensor& a, double lo, double hi);

// Matrix ops on rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Layout ops on [N,C,H,W] tensors.
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& a, std::size_t start, std::size_t count);
/// Image n of a batch, keeping a leading dimension of 1.
Tensor select_batch(const Tensor& a, std::size_t n);

// Convolution and resampling on [N,C,H,W] tensors.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t padding);
Tensor avg_pool2(const Tensor& input);
Tensor upsample_nearest2(const Tensor& input);

}  // namespace gpderain
