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

#include "gpderain/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gpderain {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& what) {
  if (!ok) throw TensorError(what);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw TensorError(std::string(op) + ": expected rank " + std::to_string(rank) +
                      " tensor, got " + shape_str(a.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
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

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw TensorError("Tensor::from: shape " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_buffer(Shape shape, Buffer values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw TensorError("Tensor::from_buffer: shape " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const {
  require(defined(), "use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  require(axis < s.size(), "dim: axis " + std::to_string(axis) + " out of range for " +
                               shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return defined() ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require(defined(), "use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require(defined(), "use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  require(numel() == 1, "item: tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  require(defined(), "use of undefined tensor");
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require(has_grad(), "grad: tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require(defined(), "use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (defined()) impl_->grad.clear();
}

Tensor Tensor::detach() const { return from_buffer(shape(), impl_->data, false); }

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw TensorError("reshape: cannot view " + shape_str(shape()) + " as " +
                      shape_str(new_shape));
  }
  return make_result("reshape", std::move(new_shape), impl_->data, {*this},
                     [](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Tape

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

Tensor make_result(const char* op_name, Shape shape, Buffer values,
                   const std::vector<Tensor>& inputs, BackwardFn backward_fn) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tape& tape = Tape::current();
  if (!tape.enabled_) return Tensor(std::move(impl));
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return Tensor(std::move(impl));

  if (tape.consumed_) tape.clear();
  impl->requires_grad = true;
  Tape::Node node{op_name, {}, impl, std::move(backward_fn)};
  node.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node.inputs.push_back(t.impl());
  tape.nodes_.push_back(std::move(node));
  return Tensor(std::move(impl));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw TensorError("backward: tape already consumed; run a new forward pass first");
  }
  if (nodes_.empty()) throw TensorError("backward: tape is empty");
  if (loss.numel() != 1) {
    throw TensorError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw TensorError("backward: loss does not depend on any tracked tensor");
  }
  loss.impl()->grad.assign(1, 1.0);

  std::vector<std::span<double>> grad_in;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (node.output->grad.empty()) continue;
    grad_in.assign(node.inputs.size(), std::span<double>());
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      auto& in = *node.inputs[i];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      grad_in[i] = in.grad;
    }
    node.backward(node.output->grad, grad_in);
  }
  nodes_.clear();
  consumed_ = true;
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Buffer out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (auto& dst : gi) {
                         if (dst.empty()) continue;
                         for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Buffer out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       if (!gi[0].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                       if (!gi[1].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Buffer out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [x, y](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       if (!gi[0].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * y[i];
                       if (!gi[1].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * x[i];
                     });
}

Tensor scale(const Tensor& a, double factor) {
  Buffer out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result("scale", a.shape(), std::move(out), {a},
                     [factor](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += factor * g[i];
                     });
}

Tensor add_scalar(const Tensor& a, double value) {
  Buffer out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  return make_result("add_scalar", a.shape(), std::move(out), {a},
                     [](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor square(const Tensor& a) {
  auto x = a.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return make_result("square", a.shape(), std::move(out), {a},
                     [x](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += 2.0 * x[i] * g[i];
                     });
}

Tensor log(const Tensor& a) {
  auto x = a.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) throw TensorError("log: non-positive input " + std::to_string(x[i]));
    out[i] = std::log(x[i]);
  }
  return make_result("log", a.shape(), std::move(out), {a},
                     [x](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] / x[i];
                     });
}

Tensor sum(const Tensor& a) {
  auto x = a.data();
  double s = std::accumulate(x.begin(), x.end(), 0.0);
  return make_result("sum", {}, {s}, {a},
                     [](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (double& v : gi[0]) v += g[0];
                     });
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean: empty tensor");
  auto x = a.data();
  const double n = static_cast<double>(x.size());
  double s = std::accumulate(x.begin(), x.end(), 0.0);
  return make_result("mean", {}, {s / n}, {a},
                     [n](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (double& v : gi[0]) v += g[0] / n;
                     });
}

Tensor abs_sum(const Tensor& a) {
  auto x = a.data();
  double s = 0.0;
  for (double v : x) s += std::abs(v);
  return make_result("abs_sum", {}, {s}, {a},
                     [x](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < x.size(); ++i) {
                         const double sgn = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
                         gi[0][i] += sgn * g[0];
                       }
                     });
}

Tensor abs_mean(const Tensor& a) {
  require(a.numel() > 0, "abs_mean: empty tensor");
  return scale(abs_sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor leaky_relu(const Tensor& a, double slope) {
  auto x = a.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  return make_result("leaky_relu", a.shape(), std::move(out), {a},
                     [x, slope](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gi[0][i] += x[i] >= 0.0 ? g[i] : slope * g[i];
                     });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Buffer out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::clamp(v, lo, hi);
  return Tensor::from_buffer(a.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Matrix

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw TensorError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  Buffer out(m * n);
  auto x = a.data(), y = b.data();
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(x.data(), m, k) * ConstMapMat(y.data(), k, n);
  return make_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [x, y, m, k, n](std::span<const double> g, std::vector<std::span<double>>& gi) {
        ConstMapMat G(g.data(), m, n);
        if (!gi[0].empty())
          MapMat(gi[0].data(), m, k).noalias() += G * ConstMapMat(y.data(), k, n).transpose();
        if (!gi[1].empty())
          MapMat(gi[1].data(), k, n).noalias() += ConstMapMat(x.data(), m, k).transpose() * G;
      });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  MapMat(out.data(), n, m) = ConstMapMat(a.data().data(), m, n).transpose();
  return make_result("transpose", {n, m}, std::move(out), {a},
                     [m, n](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       MapMat(gi[0].data(), m, n) += ConstMapMat(g.data(), n, m).transpose();
                     });
}

// ---------------------------------------------------------------------------
// Layout

Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  for (const Tensor& p : parts) require_rank("concat_channels", p, 4);
  const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t C = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W) {
      throw TensorError("concat_channels: part " + shape_str(p.shape()) +
                        " incompatible with " + shape_str(parts[0].shape()));
    }
    offsets.push_back(C);
    C += p.dim(1);
  }
  const std::size_t HW = H * W;
  Buffer out(N * C * HW);
  std::vector<std::size_t> widths;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t cp = parts[p].dim(1);
    widths.push_back(cp);
    auto src = parts[p].data();
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(src.begin() + n * cp * HW, cp * HW,
                  out.begin() + (n * C + offsets[p]) * HW);
  }
  return make_result(
      "concat_channels", {N, C, H, W}, std::move(out), parts,
      [N, C, HW, offsets, widths](std::span<const double> g,
                                  std::vector<std::span<double>>& gi) {
        for (std::size_t p = 0; p < gi.size(); ++p) {
          if (gi[p].empty()) continue;
          const std::size_t cp = widths[p];
          for (std::size_t n = 0; n < N; ++n) {
            const double* src = g.data() + (n * C + offsets[p]) * HW;
            double* dst = gi[p].data() + n * cp * HW;
            for (std::size_t i = 0; i < cp * HW; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor slice_channels(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank("slice_channels", a, 4);
  const std::size_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3), HW = H * W;
  if (start + count > C || count == 0) {
    throw TensorError("slice_channels: range [" + std::to_string(start) + ", " +
                      std::to_string(start + count) + ") outside channel dimension " +
                      std::to_string(C));
  }
  Buffer out(N * count * HW);
  auto src = a.data();
  for (std::size_t n = 0; n < N; ++n)
    std::copy_n(src.begin() + (n * C + start) * HW, count * HW,
                out.begin() + n * count * HW);
  return make_result("slice_channels", {N, count, H, W}, std::move(out), {a},
                     [N, C, HW, start, count](std::span<const double> g,
                                              std::vector<std::span<double>>& gi) {
                       for (std::size_t n = 0; n < N; ++n) {
                         const double* s = g.data() + n * count * HW;
                         double* d = gi[0].data() + (n * C + start) * HW;
                         for (std::size_t i = 0; i < count * HW; ++i) d[i] += s[i];
                       }
                     });
}

Tensor select_batch(const Tensor& a, std::size_t n) {
  require(a.rank() >= 1, "select_batch: scalar input");
  const std::size_t N = a.dim(0);
  require(n < N, "select_batch: index " + std::to_string(n) + " out of range for batch " +
                     std::to_string(N));
  const std::size_t stride = a.numel() / N;
  Shape shape = a.shape();
  shape[0] = 1;
  Buffer out(a.data().begin() + n * stride, a.data().begin() + (n + 1) * stride);
  return make_result("select_batch", std::move(shape), std::move(out), {a},
                     [n, stride](std::span<const double> g, std::vector<std::span<double>>& gi) {
                       double* d = gi[0].data() + n * stride;
                       for (std::size_t i = 0; i < stride; ++i) d[i] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// [C,H,W] -> [C*k*k, Ho*Wo] with zero fill.
void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t pad, std::size_t Ho, std::size_t Wo, double* col) {
  const auto iH = static_cast<std::ptrdiff_t>(H), iW = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          double* dst = row + oy * Wo;
          if (iy < 0 || iy >= iH) {
            std::fill_n(dst, Wo, 0.0);
            continue;
          }
          const double* src = img + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= iW) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t pad, std::size_t Ho, std::size_t Wo, double* img) {
  const auto iH = static_cast<std::ptrdiff_t>(H), iW = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= iH) continue;
          double* dst = img + (c * H + static_cast<std::size_t>(iy)) * W;
          const double* src = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < iW) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t padding) {
  require_rank("conv2d input", input, 4);
  require_rank("conv2d weight", weight, 4);
  require_rank("conv2d bias", bias, 1);
  const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin) {
    throw TensorError("conv2d: input channels " + std::to_string(Cin) +
                      " do not match weight in-channels " + std::to_string(weight.dim(1)) +
                      " (weight " + shape_str(weight.shape()) + ")");
  }
  if (weight.dim(3) != k || k % 2 == 0) {
    throw TensorError("conv2d: kernel must be square with odd size, got " +
                      shape_str(weight.shape()));
  }
  if (bias.dim(0) != Cout) {
    throw TensorError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                      " does not match out-channels " + std::to_string(Cout));
  }
  if (H + 2 * padding < k || W + 2 * padding < k) {
    throw TensorError("conv2d: spatial size " + shape_str(input.shape()) +
                      " too small for kernel " + std::to_string(k));
  }
  const std::size_t Ho = H + 2 * padding - k + 1, Wo = W + 2 * padding - k + 1;
  const std::size_t K = Cin * k * k, HWo = Ho * Wo, HWi = H * W;
  const bool pointwise = (k == 1 && padding == 0);

  auto x = input.data(), w = weight.data(), b = bias.data();
  Buffer out(N * Cout * HWo);
  Buffer col(pointwise ? 0 : K * HWo);
  ConstMapMat Wm(w.data(), Cout, K);
  for (std::size_t n = 0; n < N; ++n) {
    const double* img = x.data() + n * Cin * HWi;
    MapMat On(out.data() + n * Cout * HWo, Cout, HWo);
    if (pointwise) {
      On.noalias() = Wm * ConstMapMat(img, K, HWo);
    } else {
      im2col(img, Cin, H, W, k, padding, Ho, Wo, col.data());
      On.noalias() = Wm * ConstMapMat(col.data(), K, HWo);
    }
    for (std::size_t o = 0; o < Cout; ++o) On.row(o).array() += b[o];
  }

  return make_result(
      "conv2d", {N, Cout, Ho, Wo}, std::move(out), {input, weight, bias},
      [x, w, N, Cin, H, W, Cout, k, padding, Ho, Wo, K, HWo, HWi, pointwise](
          std::span<const double> g, std::vector<std::span<double>>& gi) {
        ConstMapMat Wm(w.data(), Cout, K);
        Buffer col(pointwise ? 0 : K * HWo);
        Buffer dcol(pointwise ? 0 : K * HWo);
        for (std::size_t n = 0; n < N; ++n) {
          ConstMapMat Gn(g.data() + n * Cout * HWo, Cout, HWo);
          const double* img = x.data() + n * Cin * HWi;
          if (!gi[2].empty()) {
            for (std::size_t o = 0; o < Cout; ++o) gi[2][o] += Gn.row(o).sum();
          }
          if (!gi[1].empty()) {
            MapMat dW(gi[1].data(), Cout, K);
            if (pointwise) {
              dW.noalias() += Gn * ConstMapMat(img, K, HWo).transpose();
            } else {
              im2col(img, Cin, H, W, k, padding, Ho, Wo, col.data());
              dW.noalias() += Gn * ConstMapMat(col.data(), K, HWo).transpose();
            }
          }
          if (!gi[0].empty()) {
            double* dimg = gi[0].data() + n * Cin * HWi;
            if (pointwise) {
              MapMat(dimg, K, HWo).noalias() += Wm.transpose() * Gn;
            } else {
              MapMat(dcol.data(), K, HWo).noalias() = Wm.transpose() * Gn;
              col2im(dcol.data(), Cin, H, W, k, padding, Ho, Wo, dimg);
            }
          }
        }
      });
}

Tensor avg_pool2(const Tensor& input) {
  require_rank("avg_pool2", input, 4);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw TensorError("avg_pool2: spatial size must be even, got " + shape_str(input.shape()));
  }
  const std::size_t Ho = H / 2, Wo = W / 2, planes = N * C;
  auto x = input.data();
  Buffer out(planes * Ho * Wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * H * W;
    double* dst = out.data() + p * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const double* r0 = src + (2 * y) * W + 2 * xx;
        const double* r1 = r0 + W;
        dst[y * Wo + xx] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  return make_result("avg_pool2", {N, C, Ho, Wo}, std::move(out), {input},
                     [planes, H, W, Ho, Wo](std::span<const double> g,
                                            std::vector<std::span<double>>& gi) {
                       for (std::size_t p = 0; p < planes; ++p) {
                         const double* src = g.data() + p * Ho * Wo;
                         double* dst = gi[0].data() + p * H * W;
                         for (std::size_t y = 0; y < Ho; ++y)
                           for (std::size_t xx = 0; xx < Wo; ++xx) {
                             const double v = 0.25 * src[y * Wo + xx];
                             double* r0 = dst + (2 * y) * W + 2 * xx;
                             double* r1 = r0 + W;
                             r0[0] += v;
                             r0[1] += v;
                             r1[0] += v;
                             r1[1] += v;
                           }
                       }
                     });
}

Tensor upsample_nearest2(const Tensor& input) {
  require_rank("upsample_nearest2", input, 4);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W, planes = N * C;
  auto x = input.data();
  Buffer out(planes * Ho * Wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * H * W;
    double* dst = out.data() + p * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) dst[y * Wo + xx] = src[(y / 2) * W + xx / 2];
  }
  return make_result("upsample_nearest2", {N, C, Ho, Wo}, std::move(out), {input},
                     [planes, H, W, Ho, Wo](std::span<const double> g,
                                            std::vector<std::span<double>>& gi) {
                       for (std::size_t p = 0; p < planes; ++p) {
                         const double* src = g.data() + p * Ho * Wo;
                         double* dst = gi[0].data() + p * H * W;
                         for (std::size_t y = 0; y < Ho; ++y)
                           for (std::size_t xx = 0; xx < Wo; ++xx)
                             dst[(y / 2) * W + xx / 2] += src[y * Wo + xx];
                       }
                     });
}

}  // namespace gpderain
