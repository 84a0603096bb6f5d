#pragma once

// Reverse-mode differentiation core: a shared-node Tensor, a Tape of recorded
// operations, and exactly the ops the descriptor pipeline needs. Scalar type
// is a template parameter: double where gradients are validated numerically,
// float where throughput matters.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"

namespace mvdesc {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    check(d >= 0, "tensor: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <class T>
class Tensor {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first touched; then same length as data
    bool requires_grad = false;
  };
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->data.assign(numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                          bool requires_grad = false) {
    check(numel(shape) == data.size(), "tensor: shape/data length mismatch");
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->data.size(); }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Gradient buffer, allocated (zeroed) on first access.
  std::vector<T>& grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    check(size() == 1, "item: tensor is not a scalar");
    return node_->data[0];
  }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

template <class T>
void ensure_grad(const typename Tensor<T>::NodePtr& n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
}

// Ordered log of executed operations. Backward replays records newest-first,
// which visits every node after all of its consumers because records can only
// consume tensors that already existed when they were appended.
template <class T>
class Tape {
 public:
  using NodePtr = typename Tensor<T>::NodePtr;

  void record(std::string name, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void()> backward_fn) {
    records_.push_back(Record{std::move(name), std::move(inputs),
                              std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const { return records_.size(); }

  // Zeroes the gradient buffers of every node this tape touches (inputs and
  // outputs alike), so the tape can be replayed from a clean slate.
  void zero_grads() {
    for (auto& r : records_) {
      for (auto& n : r.inputs) std::fill(n->grad.begin(), n->grad.end(), T(0));
      std::fill(r.output->grad.begin(), r.output->grad.end(), T(0));
    }
  }

  // Replays backward rules in reverse order; seeds must already be in place.
  void backward_seeded() {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
  }

  // First record (in execution order) whose output holds a non-finite value;
  // used to point at the origin of a NaN loss.
  std::optional<std::pair<std::size_t, std::string>> first_nonfinite() const {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      for (T v : records_[i].output->data) {
        if (!std::isfinite(static_cast<double>(v))) return {{i, records_[i].name}};
      }
    }
    return std::nullopt;
  }

 private:
  struct Record {
    std::string name;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> fn;
  };
  std::vector<Record> records_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape.
template <class T>
void backward(Tape<T>& tape, Tensor<T>& loss) {
  check(loss.size() == 1, "backward: loss must be scalar");
  ensure_grad<T>(loss.node());
  loss.node()->grad[0] += T(1);
  tape.backward_seeded();
}

namespace detail {

template <class T>
bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// ---- conv primitives (shared by conv2d / transposed_conv2d, both ways) ----

struct ConvGeom {
  int cin = 0, h = 0, w = 0;      // image side of the correlation
  int cout = 0, ho = 0, wo = 0;   // reduced side
  int kh = 0, kw = 0, stride = 1, pad = 0;
};

inline ConvGeom conv_geom(const std::vector<int>& xshape,
                          const std::vector<int>& wshape, int stride, int pad) {
  check(xshape.size() == 3, "conv2d: input must be rank 3 (C,H,W)");
  check(wshape.size() == 4, "conv2d: weight must be rank 4 (Cout,Cin,kh,kw)");
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(pad >= 0, "conv2d: padding must be >= 0");
  ConvGeom g;
  g.cin = xshape[0];
  g.h = xshape[1];
  g.w = xshape[2];
  g.cout = wshape[0];
  g.kh = wshape[2];
  g.kw = wshape[3];
  g.stride = stride;
  g.pad = pad;
  check(wshape[1] == g.cin, "conv2d: input channels " + std::to_string(g.cin) +
                                " do not match weight channels " +
                                std::to_string(wshape[1]));
  check(g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw,
        "conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Unfolds x (C,H,W) into a (C*kh*kw) x (ho*wo) row-major matrix.
template <class T>
void im2col(const T* x, const ConvGeom& g, std::vector<T>& col) {
  const std::size_t cols = static_cast<std::size_t>(g.ho) * g.wo;
  col.assign(static_cast<std::size_t>(g.cin) * g.kh * g.kw * cols, T(0));
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col.data() +
                 ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          T* dst = row + static_cast<std::size_t>(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ox] = src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: folds the column matrix back, accumulating into x.
template <class T>
void col2im_add(const std::vector<T>& col, const ConvGeom& g, T* x) {
  const std::size_t cols = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col.data() +
                       ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * cols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// y (Cout x ho*wo) = W (Cout x Cin*kh*kw) * col, then + bias per row.
template <class T>
void conv_forward(const T* x, const T* w, const T* b, const ConvGeom& g, T* y) {
  std::vector<T> col;
  im2col(x, g, col);
  const Eigen::Index rows = g.cout;
  const Eigen::Index inner = static_cast<Eigen::Index>(g.cin) * g.kh * g.kw;
  const Eigen::Index cols = static_cast<Eigen::Index>(g.ho) * g.wo;
  Eigen::Map<const RowMat<T>> wm(w, rows, inner);
  Eigen::Map<const RowMat<T>> cm(col.data(), inner, cols);
  Eigen::Map<RowMat<T>> ym(y, rows, cols);
  ym.noalias() = wm * cm;
  if (b) {
    for (Eigen::Index o = 0; o < rows; ++o) ym.row(o).array() += b[o];
  }
}

// gx += W^T * gy, folded back to image layout.
template <class T>
void conv_input_grad(const T* gy, const T* w, const ConvGeom& g, T* gx) {
  const Eigen::Index rows = g.cout;
  const Eigen::Index inner = static_cast<Eigen::Index>(g.cin) * g.kh * g.kw;
  const Eigen::Index cols = static_cast<Eigen::Index>(g.ho) * g.wo;
  std::vector<T> gcol(static_cast<std::size_t>(inner) * cols);
  Eigen::Map<const RowMat<T>> wm(w, rows, inner);
  Eigen::Map<const RowMat<T>> gym(gy, rows, cols);
  Eigen::Map<RowMat<T>> gcm(gcol.data(), inner, cols);
  gcm.noalias() = wm.transpose() * gym;
  col2im_add(gcol, g, gx);
}

// gw += gy * col(x)^T ; gb += row sums of gy.
template <class T>
void conv_weight_grad(const T* x, const T* gy, const ConvGeom& g, T* gw, T* gb) {
  std::vector<T> col;
  im2col(x, g, col);
  const Eigen::Index rows = g.cout;
  const Eigen::Index inner = static_cast<Eigen::Index>(g.cin) * g.kh * g.kw;
  const Eigen::Index cols = static_cast<Eigen::Index>(g.ho) * g.wo;
  Eigen::Map<const RowMat<T>> gym(gy, rows, cols);
  Eigen::Map<const RowMat<T>> cm(col.data(), inner, cols);
  Eigen::Map<RowMat<T>> gwm(gw, rows, inner);
  gwm.noalias() += gym * cm.transpose();
  if (gb) {
    // sequential accumulation: vectorized reductions are not bit-reproducible
    for (Eigen::Index o = 0; o < rows; ++o) {
      T acc = T(0);
      for (Eigen::Index c2 = 0; c2 < cols; ++c2) acc += gy[o * cols + c2];
      gb[o] += acc;
    }
  }
}

}  // namespace detail

// Zero-padded cross-correlation. weight is (Cout,Cin,kh,kw); bias is (Cout).
template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  const detail::ConvGeom g =
      detail::conv_geom(input.shape(), weight.shape(), stride, padding);
  check(bias.rank() == 1 && bias.shape()[0] == g.cout,
        "conv2d: bias must be rank 1 with Cout entries");
  Tensor<T> out({g.cout, g.ho, g.wo});
  detail::conv_forward(input.data().data(), weight.data().data(),
                       bias.data().data(), g, out.data().data());
  if (detail::want_grad(tape, {&input, &weight, &bias})) {
    out.set_requires_grad(true);
    auto xn = input.node(), wn = weight.node(), bn = bias.node(), yn = out.node();
    tape->record("conv2d", {xn, wn, bn}, yn, [xn, wn, bn, yn, g] {
      if (yn->grad.empty()) return;
      if (xn->requires_grad) {
        ensure_grad<T>(xn);
        detail::conv_input_grad(yn->grad.data(), wn->data.data(), g,
                                xn->grad.data());
      }
      if (wn->requires_grad || bn->requires_grad) {
        ensure_grad<T>(wn);
        ensure_grad<T>(bn);
        detail::conv_weight_grad(xn->data.data(), yn->grad.data(), g,
                                 wn->grad.data(),
                                 bn->requires_grad ? bn->grad.data() : nullptr);
      }
    });
  }
  return out;
}

// Adjoint of conv2d with the same weight layout: a (I,C,kh,kw) weight maps
// conv-style (C,H,W)->(I,h,w) and tconv-style (I,h,w)->(C,H,W). The output
// spatial size is (h-1)*stride - 2*padding + kh + output_padding.
template <class T>
Tensor<T> transposed_conv2d(Tape<T>* tape, const Tensor<T>& input,
                            const Tensor<T>& weight, const Tensor<T>& bias,
                            int stride, int padding, int output_padding = 1) {
  check(input.rank() == 3, "transposed_conv2d: input must be rank 3 (C,H,W)");
  check(weight.rank() == 4, "transposed_conv2d: weight must be rank 4");
  check(weight.shape()[0] == input.shape()[0],
        "transposed_conv2d: input channels " + std::to_string(input.shape()[0]) +
            " do not match weight dim 0 " + std::to_string(weight.shape()[0]));
  check(output_padding >= 0 && output_padding < stride,
        "transposed_conv2d: output_padding must be in [0, stride)");
  const int cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const int cout = weight.shape()[1], kh = weight.shape()[2], kw = weight.shape()[3];
  const int ho = (h - 1) * stride - 2 * padding + kh + output_padding;
  const int wo = (w - 1) * stride - 2 * padding + kw + output_padding;
  check(ho >= 1 && wo >= 1, "transposed_conv2d: empty output");
  check(bias.rank() == 1 && bias.shape()[0] == cout,
        "transposed_conv2d: bias must be rank 1 with Cout entries");
  // Geometry of the conv this op is the adjoint of: (cout,ho,wo) -> (cin,h,w).
  const detail::ConvGeom g =
      detail::conv_geom({cout, ho, wo}, weight.shape(), stride, padding);
  check(g.ho == h && g.wo == w,
        "transposed_conv2d: inconsistent geometry " + shape_str(input.shape()));

  Tensor<T> out({cout, ho, wo});
  {
    // out = col2im(W^T * input_mat), i.e. exactly conv_input_grad on zeros.
    detail::conv_input_grad(input.data().data(), weight.data().data(), g,
                            out.data().data());
    T* y = out.data().data();
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < cout; ++c) {
      const T b = bias.data()[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] += b;
    }
  }
  if (detail::want_grad(tape, {&input, &weight, &bias})) {
    out.set_requires_grad(true);
    auto xn = input.node(), wn = weight.node(), bn = bias.node(), yn = out.node();
    tape->record("transposed_conv2d", {xn, wn, bn}, yn, [xn, wn, bn, yn, g] {
      if (yn->grad.empty()) return;
      if (xn->requires_grad) {
        ensure_grad<T>(xn);
        // d/d(input) is the forward correlation of the output gradient;
        // computed into a scratch buffer because gradients accumulate.
        std::vector<T> tmp(xn->data.size());
        detail::conv_forward<T>(yn->grad.data(), wn->data.data(), nullptr, g,
                                tmp.data());
        for (std::size_t i = 0; i < tmp.size(); ++i) xn->grad[i] += tmp[i];
      }
      if (wn->requires_grad || bn->requires_grad) {
        ensure_grad<T>(wn);
        // gw: treat output grad as the conv input, tconv input as conv output.
        detail::conv_weight_grad<T>(yn->grad.data(), xn->data.data(), g,
                                    wn->grad.data(), nullptr);
      }
      if (bn->requires_grad) {
        ensure_grad<T>(bn);
        const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
        for (int c = 0; c < g.cin; ++c) {
          T s = T(0);
          for (std::size_t i = 0; i < plane; ++i) s += yn->grad[c * plane + i];
          bn->grad[static_cast<std::size_t>(c)] += s;
        }
      }
    });
  }
  return out;
}

// Per-channel normalization to zero mean / unit variance (population), no
// learnable affine.
template <class T>
Tensor<T> instance_norm(Tape<T>* tape, const Tensor<T>& input, T eps = T(1e-5)) {
  check(input.rank() == 3, "instance_norm: input must be rank 3 (C,H,W)");
  const int c = input.shape()[0];
  const std::size_t plane =
      static_cast<std::size_t>(input.shape()[1]) * input.shape()[2];
  check(plane >= 1, "instance_norm: empty channel plane");
  Tensor<T> out(input.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  const T* x = input.data().data();
  T* y = out.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x + ch * plane;
    T* yc = y + ch * plane;
    T mean = T(0);
    for (std::size_t i = 0; i < plane; ++i) mean += xc[i];
    mean /= static_cast<T>(plane);
    T var = T(0);
    for (std::size_t i = 0; i < plane; ++i) {
      const T d = xc[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(plane);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(ch)] = is;
    for (std::size_t i = 0; i < plane; ++i) yc[i] = (xc[i] - mean) * is;
  }
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    auto xn = input.node(), yn = out.node();
    tape->record("instance_norm", {xn}, yn, [xn, yn, inv_std, c, plane] {
      if (yn->grad.empty()) return;
      if (!xn->requires_grad) return;
      ensure_grad<T>(xn);
      for (int ch = 0; ch < c; ++ch) {
        const T* g = yn->grad.data() + ch * plane;
        const T* yv = yn->data.data() + ch * plane;
        T* gx = xn->grad.data() + ch * plane;
        T gmean = T(0), gymean = T(0);
        for (std::size_t i = 0; i < plane; ++i) {
          gmean += g[i];
          gymean += g[i] * yv[i];
        }
        gmean /= static_cast<T>(plane);
        gymean /= static_cast<T>(plane);
        const T is = (*inv_std)[static_cast<std::size_t>(ch)];
        for (std::size_t i = 0; i < plane; ++i) {
          gx[i] += is * (g[i] - gmean - yv[i] * gymean);
        }
      }
    });
  }
  return out;
}

// Elementwise max(x, 0); the subgradient at exactly 0 is 0.
template <class T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const std::size_t n = input.size();
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    auto xn = input.node(), yn = out.node();
    tape->record("relu", {xn}, yn, [xn, yn, n] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad<T>(xn);
      for (std::size_t i = 0; i < n; ++i) {
        if (xn->data[i] > T(0)) xn->grad[i] += yn->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias);

// y = W x for a rank-1 input.
template <class T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight) {
  check(weight.rank() == 2, "linear: weight must be rank 2");
  Tensor<T> zero({weight.shape()[0]}, T(0), false);
  return linear(tape, input, weight, zero);
}

// y = W x + b for a rank-1 input.
template <class T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  check(input.rank() == 1, "linear: input must be rank 1");
  check(weight.rank() == 2, "linear: weight must be rank 2");
  const int n = input.shape()[0], m = weight.shape()[0];
  check(weight.shape()[1] == n, "linear: weight columns " +
                                    std::to_string(weight.shape()[1]) +
                                    " do not match input length " +
                                    std::to_string(n));
  check(bias.rank() == 1 && bias.shape()[0] == m,
        "linear: bias must be rank 1 with M entries");
  Tensor<T> out({m});
  {
    // plain loops: a fixed accumulation order keeps results bit-reproducible,
    // which vectorized reductions (alignment-dependent peeling) do not
    const T* w = weight.data().data();
    const T* x = input.data().data();
    const T* b = bias.data().data();
    T* y = out.data().data();
    for (int o = 0; o < m; ++o) {
      T acc = b[o];
      const T* row = w + static_cast<std::size_t>(o) * n;
      for (int j = 0; j < n; ++j) acc += row[j] * x[j];
      y[o] = acc;
    }
  }
  if (detail::want_grad(tape, {&input, &weight, &bias})) {
    out.set_requires_grad(true);
    auto xn = input.node(), wn = weight.node(), bn = bias.node(), yn = out.node();
    tape->record("linear", {xn, wn, bn}, yn, [xn, wn, bn, yn, m, n] {
      if (yn->grad.empty()) return;
      const T* gy = yn->grad.data();
      if (xn->requires_grad) {
        ensure_grad<T>(xn);
        T* gx = xn->grad.data();
        for (int o = 0; o < m; ++o) {
          const T* row = wn->data.data() + static_cast<std::size_t>(o) * n;
          for (int j = 0; j < n; ++j) gx[j] += row[j] * gy[o];
        }
      }
      if (wn->requires_grad) {
        ensure_grad<T>(wn);
        const T* x = xn->data.data();
        T* gw = wn->grad.data();
        for (int o = 0; o < m; ++o) {
          T* row = gw + static_cast<std::size_t>(o) * n;
          for (int j = 0; j < n; ++j) row[j] += gy[o] * x[j];
        }
      }
      if (bn->requires_grad) {
        ensure_grad<T>(bn);
        T* gb = bn->grad.data();
        for (int o = 0; o < m; ++o) gb[o] += gy[o];
      }
    });
  }
  return out;
}

// x / max(||x||, eps); the zero vector stays zero.
template <class T>
Tensor<T> l2_normalize(Tape<T>* tape, const Tensor<T>& input, T eps = T(1e-12)) {
  check(input.rank() == 1, "l2_normalize: input must be rank 1");
  const std::size_t n = input.size();
  const T* x = input.data().data();
  T sq = T(0);
  for (std::size_t i = 0; i < n; ++i) sq += x[i] * x[i];
  const T norm = std::sqrt(sq);
  const T denom = std::max(norm, eps);
  Tensor<T> out(input.shape());
  T* y = out.data().data();
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] / denom;
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    const bool saturated = norm >= eps;
    auto xn = input.node(), yn = out.node();
    tape->record("l2_normalize", {xn}, yn, [xn, yn, n, denom, saturated] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad<T>(xn);
      if (!saturated) {
        // Below eps the map is linear: y = x / eps.
        for (std::size_t i = 0; i < n; ++i) xn->grad[i] += yn->grad[i] / denom;
        return;
      }
      T dot = T(0);
      for (std::size_t i = 0; i < n; ++i) dot += yn->grad[i] * yn->data[i];
      for (std::size_t i = 0; i < n; ++i) {
        xn->grad[i] += (yn->grad[i] - yn->data[i] * dot) / denom;
      }
    });
  }
  return out;
}

// Numerically stable softmax over a rank-1 tensor.
template <class T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& input) {
  check(input.rank() == 1 && input.size() >= 1,
        "softmax: input must be rank 1 and non-empty");
  const std::size_t n = input.size();
  const T* x = input.data().data();
  const T m = *std::max_element(x, x + n);
  Tensor<T> out(input.shape());
  T* y = out.data().data();
  T sum = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - m);
    sum += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
  if (detail::want_grad(tape, {&input})) {
    out.set_requires_grad(true);
    auto xn = input.node(), yn = out.node();
    tape->record("softmax", {xn}, yn, [xn, yn, n] {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad<T>(xn);
      T dot = T(0);
      for (std::size_t i = 0; i < n; ++i) dot += yn->grad[i] * yn->data[i];
      for (std::size_t i = 0; i < n; ++i) {
        xn->grad[i] += yn->data[i] * (yn->grad[i] - dot);
      }
    });
  }
  return out;
}

// ---- small structural / arithmetic ops used to assemble losses and tests ----

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = out.node();
    tape->record("add", {an, bn}, yn, [an, bn, yn, n] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        ensure_grad<T>(an);
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        ensure_grad<T>(bn);
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += yn->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = out.node();
    tape->record("mul", {an, bn}, yn, [an, bn, yn, n] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        ensure_grad<T>(an);
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        ensure_grad<T>(bn);
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += yn->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  if (detail::want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), yn = out.node();
    tape->record("scale", {an}, yn, [an, yn, n, s] {
      if (yn->grad.empty() || !an->requires_grad) return;
      ensure_grad<T>(an);
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i] * s;
    });
  }
  return out;
}

// Reduces every element to one scalar.
template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (detail::want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), yn = out.node();
    const std::size_t n = a.size();
    tape->record("sum", {an}, yn, [an, yn, n] {
      if (yn->grad.empty() || !an->requires_grad) return;
      ensure_grad<T>(an);
      const T g = yn->grad[0];
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += g;
    });
  }
  return out;
}

// Copies data into a new shape with the same element count. Flattening a
// (C,H,W) tensor this way yields channel-major order (C, then H, then W).
template <class T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& a, std::vector<int> shape) {
  check(numel(shape) == a.size(), "reshape: element count mismatch " +
                                      shape_str(a.shape()) + " -> " +
                                      shape_str(shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), a.data());
  if (detail::want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), yn = out.node();
    const std::size_t n = a.size();
    tape->record("reshape", {an}, yn, [an, yn, n] {
      if (yn->grad.empty() || !an->requires_grad) return;
      ensure_grad<T>(an);
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += yn->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> flatten(Tape<T>* tape, const Tensor<T>& a) {
  return reshape(tape, a, {static_cast<int>(a.size())});
}

// Rotates a rank-2 (H,W) patch by quarter_turns * 90 deg. One turn sends
// source pixel (r, c) to destination (c, H-1-r).
template <class T>
Tensor<T> rotate90(Tape<T>* tape, const Tensor<T>& a, int quarter_turns) {
  check(a.rank() == 2, "rotate90: input must be rank 2 (H,W)");
  const int q = ((quarter_turns % 4) + 4) % 4;
  const int h = a.shape()[0], w = a.shape()[1];
  const int ho = (q % 2 == 0) ? h : w;
  const int wo = (q % 2 == 0) ? w : h;
  // source index for each destination index
  auto src_of = [h, w, wo, q](std::size_t dst) {
    const int r = static_cast<int>(dst) / wo, c = static_cast<int>(dst) % wo;
    int sr = 0, sc = 0;
    switch (q) {
      case 0: sr = r; sc = c; break;
      case 1: sr = h - 1 - c; sc = r; break;   // one turn: (r,c) -> (c, H-1-r)
      case 2: sr = h - 1 - r; sc = w - 1 - c; break;
      default: sr = c; sc = w - 1 - r; break;  // three turns
    }
    return static_cast<std::size_t>(sr) * w + sc;
  };
  Tensor<T> out({ho, wo});
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[src_of(i)];
  if (detail::want_grad(tape, {&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), yn = out.node();
    tape->record("rotate90", {an}, yn, [an, yn, n, src_of] {
      if (yn->grad.empty() || !an->requires_grad) return;
      ensure_grad<T>(an);
      for (std::size_t i = 0; i < n; ++i) an->grad[src_of(i)] += yn->grad[i];
    });
  }
  return out;
}

namespace detail {

template <class T>
void check_same_shapes(const std::vector<Tensor<T>>& ts, const char* op) {
  check(!ts.empty(), std::string(op) + ": empty input list");
  for (const auto& t : ts) {
    check(t.shape() == ts.front().shape(),
          std::string(op) + ": mismatched shapes " + shape_str(t.shape()) +
              " vs " + shape_str(ts.front().shape()));
  }
}

template <class T>
bool any_requires(const std::vector<Tensor<T>>& ts) {
  for (const auto& t : ts) {
    if (t.requires_grad()) return true;
  }
  return false;
}

template <class T>
std::vector<typename Tensor<T>::NodePtr> nodes_of(const std::vector<Tensor<T>>& ts) {
  std::vector<typename Tensor<T>::NodePtr> ns;
  ns.reserve(ts.size());
  for (const auto& t : ts) ns.push_back(t.node());
  return ns;
}

}  // namespace detail

// Elementwise maximum across a list of same-shape tensors; ties route the
// gradient to the lowest list index.
template <class T>
Tensor<T> view_max_pool(Tape<T>* tape, const std::vector<Tensor<T>>& views) {
  detail::check_same_shapes(views, "view_max_pool");
  const std::size_t n = views.front().size();
  const std::size_t k = views.size();
  Tensor<T> out(views.front().shape());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(n, 0u);
  for (std::size_t i = 0; i < n; ++i) {
    T best = views[0].data()[i];
    std::uint32_t who = 0;
    for (std::size_t v = 1; v < k; ++v) {
      const T c = views[v].data()[i];
      if (c > best) {
        best = c;
        who = static_cast<std::uint32_t>(v);
      }
    }
    out.data()[i] = best;
    (*argmax)[i] = who;
  }
  if (tape && detail::any_requires(views)) {
    out.set_requires_grad(true);
    auto ns = detail::nodes_of(views);
    auto yn = out.node();
    tape->record("view_max_pool", ns, yn, [ns, yn, argmax, n] {
      if (yn->grad.empty()) return;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& src = ns[(*argmax)[i]];
        if (!src->requires_grad) continue;
        ensure_grad<T>(src);
        src->grad[i] += yn->grad[i];
      }
    });
  }
  return out;
}

// Elementwise mean across a list of same-shape tensors.
template <class T>
Tensor<T> view_avg_pool(Tape<T>* tape, const std::vector<Tensor<T>>& views) {
  detail::check_same_shapes(views, "view_avg_pool");
  const std::size_t n = views.front().size();
  const std::size_t k = views.size();
  Tensor<T> out(views.front().shape());
  for (std::size_t v = 0; v < k; ++v) {
    for (std::size_t i = 0; i < n; ++i) out.data()[i] += views[v].data()[i];
  }
  const T inv = T(1) / static_cast<T>(k);
  for (std::size_t i = 0; i < n; ++i) out.data()[i] *= inv;
  if (tape && detail::any_requires(views)) {
    out.set_requires_grad(true);
    auto ns = detail::nodes_of(views);
    auto yn = out.node();
    tape->record("view_avg_pool", ns, yn, [ns, yn, n, inv] {
      if (yn->grad.empty()) return;
      for (const auto& src : ns) {
        if (!src->requires_grad) continue;
        ensure_grad<T>(src);
        for (std::size_t i = 0; i < n; ++i) src->grad[i] += yn->grad[i] * inv;
      }
    });
  }
  return out;
}

// Per-element softmax blend: at every tensor location, scores are soft-maxed
// across the list and used as convex weights over the features.
template <class T>
Tensor<T> view_softmax_blend(Tape<T>* tape, const std::vector<Tensor<T>>& features,
                             const std::vector<Tensor<T>>& scores) {
  detail::check_same_shapes(features, "view_softmax_blend");
  detail::check_same_shapes(scores, "view_softmax_blend");
  check(features.size() == scores.size(),
        "view_softmax_blend: need one score map per feature map");
  check(features.front().shape() == scores.front().shape(),
        "view_softmax_blend: feature/score shape mismatch");
  const std::size_t n = features.front().size();
  const std::size_t k = features.size();
  Tensor<T> out(features.front().shape());
  auto alphas = std::make_shared<std::vector<T>>(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    T m = scores[0].data()[i];
    for (std::size_t v = 1; v < k; ++v) m = std::max(m, scores[v].data()[i]);
    T denom = T(0);
    for (std::size_t v = 0; v < k; ++v) {
      const T e = std::exp(scores[v].data()[i] - m);
      (*alphas)[v * n + i] = e;
      denom += e;
    }
    T acc = T(0);
    for (std::size_t v = 0; v < k; ++v) {
      const T a = (*alphas)[v * n + i] / denom;
      (*alphas)[v * n + i] = a;
      acc += a * features[v].data()[i];
    }
    out.data()[i] = acc;
  }
  const bool wants = tape && (detail::any_requires(features) ||
                              detail::any_requires(scores));
  if (wants) {
    out.set_requires_grad(true);
    auto fn = detail::nodes_of(features);
    auto sn = detail::nodes_of(scores);
    auto yn = out.node();
    std::vector<typename Tensor<T>::NodePtr> all = fn;
    all.insert(all.end(), sn.begin(), sn.end());
    tape->record("view_softmax_blend", all, yn, [fn, sn, yn, alphas, n, k] {
      if (yn->grad.empty()) return;
      for (std::size_t v = 0; v < k; ++v) {
        const bool wf = fn[v]->requires_grad;
        const bool ws = sn[v]->requires_grad;
        if (wf) ensure_grad<T>(fn[v]);
        if (ws) ensure_grad<T>(sn[v]);
        for (std::size_t i = 0; i < n; ++i) {
          const T g = yn->grad[i];
          if (g == T(0)) continue;
          const T a = (*alphas)[v * n + i];
          if (wf) fn[v]->grad[i] += g * a;
          if (ws) sn[v]->grad[i] += g * a * (fn[v]->data[i] - yn->data[i]);
        }
      }
    });
  }
  return out;
}

}  // namespace mvdesc
