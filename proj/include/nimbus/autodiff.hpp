#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// Every op builds a Node holding its value, its parents and a backward closure
// that accumulates into the parents' gradient buffers. backward() orders the
// reachable nodes topologically and runs each closure exactly once, so fan-out
// gradients sum additively. Ops are templated on the scalar so the same code
// runs in 32-bit for training and in 64-bit for finite-difference checks.

// coefficient-based small products reduce with address-dependent peeling; packed GEMM does not
#ifndef EIGEN_GEMM_TO_COEFFBASED_THRESHOLD
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 1
#endif
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/spectral.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::ad {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !grad.empty(); }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->op = "parameter";
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T{0});
  }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<Mat<T>>;
template <class T>
using CMapMat = Eigen::Map<const Mat<T>>;

template <class T, class F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, F&& backward_fn, const char* name) {
  for (const T& v : value.values())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + name);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = name;
  if (grad_mode()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (auto& in : inputs) n->parents.push_back(in.node());
      n->backward = std::forward<F>(backward_fn);
    }
  }
  return Var<T>(std::move(n));
}

template <class T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

template <class T>
Tensor<T>& pgrad(Node<T>& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

/// Adds `src` into parent i's gradient, copying instead when the buffer is still empty.
template <class T>
void accumulate(Node<T>& self, std::size_t i, const Tensor<T>& src) {
  auto& p = *self.parents[i];
  if (!p.has_grad()) {
    p.grad = src.reshaped(p.value.shape());
    return;
  }
  for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += src[k];
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DomainError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

}  // namespace detail

/// Reverse sweep from a scalar root; gradients accumulate into leaf buffers.
template <class T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw DomainError("backward needs a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (detail::wants(self, k)) detail::accumulate(self, k, self.grad);
  }, "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  }, "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  }, "mul");
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= c;
  return detail::make_op<T>(std::move(out), {a}, [c](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  }, "scale");
}

/// y[n, ...] = c[n] · x[n, ...] with constant per-sample coefficients.
template <class T>
Var<T> scale_rows(const Var<T>& a, std::vector<T> c) {
  if (c.size() != a.dim(0)) throw DomainError("scale_rows: one coefficient per leading index required");
  const std::size_t inner = a.size() / a.dim(0);
  Tensor<T> out = a.value();
  for (std::size_t n = 0; n < c.size(); ++n)
    for (std::size_t i = 0; i < inner; ++i) out[n * inner + i] *= c[n];
  return detail::make_op<T>(std::move(out), {a}, [c = std::move(c), inner](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t n = 0; n < c.size(); ++n)
      for (std::size_t i = 0; i < inner; ++i) g[n * inner + i] += c[n] * self.grad[n * inner + i];
  }, "scale_rows");
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  }, "exp");
}

template <class T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v / (T{1} + std::exp(-v));
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-x[i]));
      g[i] += self.grad[i] * s * (T{1} + x[i] * (T{1} - s));
    }
  }, "silu");
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  return detail::make_op<T>(Tensor<T>({1}, static_cast<T>(acc)), {a}, [](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (auto& v : g.values()) v += self.grad[0];
  }, "sum");
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.size())));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) { detail::accumulate(self, 0, self.grad); }, "reshape");
}

// ---------------------------------------------------------------- layout

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DomainError("concat of nothing");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DomainError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DomainError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != shape[i]) throw DomainError("concat: incompatible shapes");
    total += s[axis];
  }
  shape[axis] = total;
  Tensor<T> out(shape);
  const auto [outer, inner] = outer_inner(shape, axis);
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data() + o * len * inner, len * inner, out.data() + (o * total + offset) * inner);
    extents.push_back(len);
    offset += len;
  }
  return detail::make_op<T>(std::move(out), parts,
                            [extents, outer = outer, inner = inner, total](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t len = extents[k];
      if (detail::wants(self, k)) {
        auto& g = detail::pgrad(self, k);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < len * inner; ++i) g[o * len * inner + i] += self.grad[(o * total + off) * inner + i];
      }
      off += len;
    }
  }, "concat");
}

/// Entries [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  Shape shape = a.shape();
  if (axis >= shape.size() || begin > end || end > shape[axis]) throw DomainError("slice out of range");
  const std::size_t full = shape[axis];
  const auto [outer, inner] = outer_inner(shape, axis);
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  const std::size_t len = end - begin;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
  return detail::make_op<T>(std::move(out), {a}, [outer = outer, inner = inner, full, begin, len](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len * inner; ++i) g[(o * full + begin) * inner + i] += self.grad[o * len * inner + i];
  }, "slice");
}

// ---------------------------------------------------------------- convolution

struct ConvOptions {
  std::size_t stride_t = 1;
  std::size_t stride_hw = 1;
  std::size_t pad_h = 0;       // zero padding along latitude
  std::size_t pad_w = 0;       // padding along longitude
  bool circular_w = true;      // periodic longitude
};

namespace detail {

struct ConvGeometry {
  std::size_t C, T, H, W, O, KT, KH, KW, To, Ho, Wo;
  ConvOptions opt;
  std::size_t rows() const { return C * KT * KH * KW; }
  std::size_t cols() const { return To * Ho * Wo; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const ConvOptions& opt) {
  if (x.size() != 5 || w.size() != 5) throw DomainError("conv3d expects x (N,C,T,H,W) and w (O,C,KT,KH,KW)");
  if (x[1] != w[1]) throw DomainError("conv: channel mismatch " + shape_string(x) + " vs " + shape_string(w));
  ConvGeometry g{x[1], x[2], x[3], x[4], w[0], w[2], w[3], w[4], 0, 0, 0, opt};
  if (opt.stride_t == 0 || opt.stride_hw == 0) throw DomainError("conv: zero stride");
  if (g.T < g.KT || g.H + 2 * opt.pad_h < g.KH || g.W + 2 * opt.pad_w < g.KW)
    throw DomainError("conv: kernel larger than padded input " + shape_string(x));
  if (opt.circular_w && opt.pad_w > g.W) throw DomainError("conv: circular padding wider than the grid");
  g.To = (g.T - g.KT) / opt.stride_t + 1;
  g.Ho = (g.H + 2 * opt.pad_h - g.KH) / opt.stride_hw + 1;
  g.Wo = (g.W + 2 * opt.pad_w - g.KW) / opt.stride_hw + 1;
  return g;
}

/// Column index along longitude, or -1 for zero padding.
inline long source_w(const ConvGeometry& g, std::size_t wo, std::size_t kw) {
  const long w = static_cast<long>(wo * g.opt.stride_hw + kw) - static_cast<long>(g.opt.pad_w);
  const long W = static_cast<long>(g.W);
  if (g.opt.circular_w) return ((w % W) + W) % W;
  return (w < 0 || w >= W) ? -1 : w;
}

inline std::vector<long> column_map(const ConvGeometry& g) {
  std::vector<long> wmap(g.Wo * g.KW);
  for (std::size_t kw = 0; kw < g.KW; ++kw)
    for (std::size_t wo = 0; wo < g.Wo; ++wo) wmap[kw * g.Wo + wo] = source_w(g, wo, kw);
  return wmap;
}

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t P = g.cols();
  const auto wmap = column_map(g);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kt = 0; kt < g.KT; ++kt)
      for (std::size_t kh = 0; kh < g.KH; ++kh)
        for (std::size_t kw = 0; kw < g.KW; ++kw, ++row) {
          T* dst = cols + row * P;
          const long* wm = wmap.data() + kw * g.Wo;
          for (std::size_t to = 0; to < g.To; ++to) {
            const std::size_t t = to * g.opt.stride_t + kt;
            for (std::size_t ho = 0; ho < g.Ho; ++ho, dst += g.Wo) {
              const long h = static_cast<long>(ho * g.opt.stride_hw + kh) - static_cast<long>(g.opt.pad_h);
              if (h < 0 || h >= static_cast<long>(g.H)) {
                std::fill_n(dst, g.Wo, T{0});
                continue;
              }
              const T* src = x + ((c * g.T + t) * g.H + static_cast<std::size_t>(h)) * g.W;
              for (std::size_t wo = 0; wo < g.Wo; ++wo) dst[wo] = wm[wo] < 0 ? T{0} : src[wm[wo]];
            }
          }
        }
}

template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
  const std::size_t P = g.cols();
  const auto wmap = column_map(g);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kt = 0; kt < g.KT; ++kt)
      for (std::size_t kh = 0; kh < g.KH; ++kh)
        for (std::size_t kw = 0; kw < g.KW; ++kw, ++row) {
          const T* src = cols + row * P;
          const long* wm = wmap.data() + kw * g.Wo;
          for (std::size_t to = 0; to < g.To; ++to) {
            const std::size_t t = to * g.opt.stride_t + kt;
            for (std::size_t ho = 0; ho < g.Ho; ++ho, src += g.Wo) {
              const long h = static_cast<long>(ho * g.opt.stride_hw + kh) - static_cast<long>(g.opt.pad_h);
              if (h < 0 || h >= static_cast<long>(g.H)) continue;
              T* dst = x + ((c * g.T + t) * g.H + static_cast<std::size_t>(h)) * g.W;
              for (std::size_t wo = 0; wo < g.Wo; ++wo)
                if (wm[wo] >= 0) dst[wm[wo]] += src[wo];
            }
          }
        }
}

}  // namespace detail

/// 3D cross-correlation; x (N,C,T,H,W), kernel (O,C,KT,KH,KW), optional bias (O).
/// No temporal padding: causal padding is the caller's responsibility.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& kernel, const Var<T>* bias, const ConvOptions& opt) {
  const auto g = detail::conv_geometry(x.shape(), kernel.shape(), opt);
  const std::size_t N = x.dim(0), K = g.rows(), P = g.cols(), in_size = g.C * g.T * g.H * g.W;
  if (bias && bias->size() != g.O) throw DomainError("conv: bias size mismatch");
  Tensor<T> out({N, g.O, g.To, g.Ho, g.Wo});
  auto cols = std::make_shared<std::vector<T>>(N * K * P);
  detail::CMapMat<T> wm(kernel.value().data(), static_cast<Eigen::Index>(g.O), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < N; ++n) {
    T* cn = cols->data() + n * K * P;
    detail::im2col(g, x.value().data() + n * in_size, cn);
    detail::MapMat<T> on(out.data() + n * g.O * P, static_cast<Eigen::Index>(g.O), static_cast<Eigen::Index>(P));
    on.noalias() = wm * detail::CMapMat<T>(cn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    if (bias)
      for (std::size_t o = 0; o < g.O; ++o) on.row(static_cast<Eigen::Index>(o)).array() += bias->value()[o];
  }
  std::vector<Var<T>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return detail::make_op<T>(std::move(out), std::move(inputs), [g, N, K, P, in_size, cols, has_bias](Node<T>& self) {
    const auto& w = self.parents[1]->value;
    detail::CMapMat<T> wm(w.data(), static_cast<Eigen::Index>(g.O), static_cast<Eigen::Index>(K));
    detail::Mat<T> gcols;
    for (std::size_t n = 0; n < N; ++n) {
      detail::CMapMat<T> gn(self.grad.data() + n * g.O * P, static_cast<Eigen::Index>(g.O), static_cast<Eigen::Index>(P));
      detail::CMapMat<T> cn(cols->data() + n * K * P, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      if (detail::wants(self, 1)) {
        auto& gw = detail::pgrad(self, 1);
        detail::MapMat<T>(gw.data(), static_cast<Eigen::Index>(g.O), static_cast<Eigen::Index>(K)).noalias() +=
            gn * cn.transpose();
      }
      if (has_bias && detail::wants(self, 2)) {
        auto& gb = detail::pgrad(self, 2);
        for (std::size_t o = 0; o < g.O; ++o)
          for (std::size_t p = 0; p < P; ++p) gb[o] += self.grad[(n * g.O + o) * P + p];
      }
      if (detail::wants(self, 0)) {
        gcols.noalias() = wm.transpose() * gn;
        detail::col2im(g, gcols.data(), detail::pgrad(self, 0).data() + n * in_size);
      }
    }
  }, "conv3d");
}

/// 2D cross-correlation on (N,C,H,W) with zero latitude padding and circular longitude padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>* bias, std::size_t stride, std::size_t pad_h,
              std::size_t pad_w, bool circular_w = true) {
  if (x.shape().size() != 4 || kernel.shape().size() != 4) throw DomainError("conv2d expects 4-axis x and kernel");
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  auto x5 = reshape(x, {xs[0], xs[1], 1, xs[2], xs[3]});
  auto k5 = reshape(kernel, {ks[0], ks[1], 1, ks[2], ks[3]});
  auto y = conv3d(x5, k5, bias, ConvOptions{1, stride, pad_h, pad_w, circular_w});
  const auto& ys = y.shape();
  return reshape(y, {ys[0], ys[1], ys[3], ys[4]});
}

// ---------------------------------------------------------------- dense / normalization

/// y = x Wᵀ + b for x (N, in), W (out, in), b (out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.shape().size() != 2 || weight.shape().size() != 2 || weight.dim(1) != x.dim(1) || bias.size() != weight.dim(0))
    throw DomainError("linear: incompatible shapes");
  const auto N = static_cast<Eigen::Index>(x.dim(0)), I = static_cast<Eigen::Index>(x.dim(1)),
             O = static_cast<Eigen::Index>(weight.dim(0));
  Tensor<T> out({x.dim(0), weight.dim(0)});
  detail::MapMat<T> y(out.data(), N, O);
  y.noalias() = detail::CMapMat<T>(x.value().data(), N, I) * detail::CMapMat<T>(weight.value().data(), O, I).transpose();
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index o = 0; o < O; ++o) y(n, o) += bias.value()[static_cast<std::size_t>(o)];
  return detail::make_op<T>(std::move(out), {x, weight, bias}, [N, I, O](Node<T>& self) {
    detail::CMapMat<T> g(self.grad.data(), N, O);
    if (detail::wants(self, 0))
      detail::MapMat<T>(detail::pgrad(self, 0).data(), N, I).noalias() +=
          g * detail::CMapMat<T>(self.parents[1]->value.data(), O, I);
    if (detail::wants(self, 1))
      detail::MapMat<T>(detail::pgrad(self, 1).data(), O, I).noalias() +=
          g.transpose() * detail::CMapMat<T>(self.parents[0]->value.data(), N, I);
    if (detail::wants(self, 2)) {
      auto& gb = detail::pgrad(self, 2);
      for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index o = 0; o < O; ++o) gb[static_cast<std::size_t>(o)] += g(n, o);
    }
  }, "linear");
}

/// Root-mean-square normalization over axis 1 of (N, C, ...), scaled per channel.
template <class T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, T eps = T(1e-6)) {
  if (x.shape().size() < 2 || gain.size() != x.dim(1)) throw DomainError("rmsnorm: gain must have one entry per channel");
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
  Tensor<T> out(x.shape());
  auto inv_rms = std::make_shared<std::vector<T>>(N * S);
  const auto& xv = x.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t s = 0; s < S; ++s) {
      double ms = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = xv[(n * C + c) * S + s];
        ms += v * v;
      }
      const T r = static_cast<T>(1.0 / std::sqrt(ms / static_cast<double>(C) + static_cast<double>(eps)));
      (*inv_rms)[n * S + s] = r;
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * S + s] = xv[(n * C + c) * S + s] * r * gain.value()[c];
    }
  return detail::make_op<T>(std::move(out), {x, gain}, [N, C, S, inv_rms](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    const bool want_x = detail::wants(self, 0), want_g = detail::wants(self, 1);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t s = 0; s < S; ++s) {
        const T r = (*inv_rms)[n * S + s];
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (n * C + c) * S + s;
          dot += static_cast<double>(self.grad[i]) * gv[c] * xv[i];
          if (want_g) detail::pgrad(self, 1)[c] += self.grad[i] * xv[i] * r;
        }
        if (!want_x) continue;
        auto& gx = detail::pgrad(self, 0);
        const T k = static_cast<T>(dot) * r * r * r / static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (n * C + c) * S + s;
          gx[i] += gv[c] * self.grad[i] * r - xv[i] * k;
        }
      }
  }, "rmsnorm");
}

/// y = x·scale + shift with per-(sample, channel) modulation; scale/shift are (N, C).
template <class T>
Var<T> film(const Var<T>& x, const Var<T>& scale_nc, const Var<T>& shift_nc) {
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
  if (scale_nc.shape() != Shape{N, C} || shift_nc.shape() != Shape{N, C}) throw DomainError("film: modulation must be (N, C)");
  Tensor<T> out(x.shape());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t s = 0; s < S; ++s) out[nc * S + s] = x.value()[nc * S + s] * scale_nc.value()[nc] + shift_nc.value()[nc];
  return detail::make_op<T>(std::move(out), {x, scale_nc, shift_nc}, [N, C, S](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& sv = self.parents[1]->value;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      double gs = 0.0, gb = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        const T g = self.grad[nc * S + s];
        gs += static_cast<double>(g) * xv[nc * S + s];
        gb += g;
      }
      if (detail::wants(self, 0)) {
        auto& gx = detail::pgrad(self, 0);
        for (std::size_t s = 0; s < S; ++s) gx[nc * S + s] += self.grad[nc * S + s] * sv[nc];
      }
      if (detail::wants(self, 1)) detail::pgrad(self, 1)[nc] += static_cast<T>(gs);
      if (detail::wants(self, 2)) detail::pgrad(self, 2)[nc] += static_cast<T>(gb);
    }
  }, "film");
}

// ---------------------------------------------------------------- losses

/// Expand numpy-style broadcast weights (each axis equal or 1) to the full shape.
template <class T>
std::vector<T> broadcast_weights(const Tensor<T>& w, const Shape& full) {
  if (w.shape() == full) return w.storage();
  if (w.rank() != full.size()) throw DomainError("weights rank must match prediction rank");
  for (std::size_t i = 0; i < full.size(); ++i)
    if (w.dim(i) != full[i] && w.dim(i) != 1) throw DomainError("weights not broadcastable to " + shape_string(full));
  std::vector<T> out(shape_size(full));
  std::vector<std::size_t> idx(full.size(), 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < full.size(); ++a) off = off * w.dim(a) + (w.dim(a) == 1 ? 0 : idx[a]);
    out[flat] = w[off];
    for (std::size_t a = full.size(); a-- > 0;) {
      if (++idx[a] < full[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

/// Σ w·(pred − target)² / Σ w.
template <class T>
Var<T> weighted_mse(const Var<T>& pred, const Var<T>& target, const Tensor<T>& weights) {
  detail::require_same_shape(pred.shape(), target.shape(), "weighted_mse");
  auto w = std::make_shared<std::vector<T>>(broadcast_weights(weights, pred.shape()));
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < w->size(); ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target.value()[i];
    acc += (*w)[i] * d * d;
    wsum += (*w)[i];
  }
  if (!(wsum > 0.0)) throw DomainError("weighted_mse: weights sum to zero");
  return detail::make_op<T>(Tensor<T>({1}, static_cast<T>(acc / wsum)), {pred, target}, [w, wsum](Node<T>& self) {
    const auto& p = self.parents[0]->value;
    const auto& t = self.parents[1]->value;
    const T k = static_cast<T>(2.0 / wsum) * self.grad[0];
    for (std::size_t side = 0; side < 2; ++side) {
      if (!detail::wants(self, side)) continue;
      auto& g = detail::pgrad(self, side);
      const T sign = side == 0 ? T{1} : T{-1};
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * k * (*w)[i] * (p[i] - t[i]);
    }
  }, "weighted_mse");
}

/// KL(N(mu, e^logvar) ‖ N(0, I)) summed over latent elements, averaged over the batch axis.
template <class T>
Var<T> gaussian_kl(const Var<T>& mu, const Var<T>& logvar) {
  detail::require_same_shape(mu.shape(), logvar.shape(), "gaussian_kl");
  const double N = static_cast<double>(mu.dim(0));
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu.value()[i], lv = logvar.value()[i];
    acc += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  return detail::make_op<T>(Tensor<T>({1}, static_cast<T>(acc / N)), {mu, logvar}, [N](Node<T>& self) {
    const auto& m = self.parents[0]->value;
    const auto& lv = self.parents[1]->value;
    const T k = self.grad[0] / static_cast<T>(N);
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * m[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * T(0.5) * (std::exp(lv[i]) - T{1});
    }
  }, "gaussian_kl");
}

// ---------------------------------------------------------------- resampling / spectral

/// Block mean over factor×factor cells of the two trailing axes.
template <class T>
Var<T> avg_pool(const Var<T>& x, std::size_t factor) {
  const std::size_t r = x.shape().size(), H = x.dim(r - 2), W = x.dim(r - 1);
  if (factor == 0 || H % factor || W % factor) throw DomainError("avg_pool: factor must divide spatial dims");
  Shape s = x.shape();
  s[r - 2] = H / factor;
  s[r - 1] = W / factor;
  const std::size_t planes = x.size() / (H * W), h = H / factor, w = W / factor;
  Tensor<T> out(s);
  const T inv = T{1} / static_cast<T>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out[(p * h + i / factor) * w + j / factor] += x.value()[(p * H + i) * W + j] * inv;
  return detail::make_op<T>(std::move(out), {x}, [planes, H, W, h, w, factor, inv](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) g[(p * H + i) * W + j] += self.grad[(p * h + i / factor) * w + j / factor] * inv;
  }, "avg_pool");
}

/// Nearest-neighbour upsampling of the two trailing axes.
template <class T>
Var<T> upsample(const Var<T>& x, std::size_t factor) {
  const std::size_t r = x.shape().size(), h = x.dim(r - 2), w = x.dim(r - 1);
  Shape s = x.shape();
  s[r - 2] = h * factor;
  s[r - 1] = w * factor;
  const std::size_t planes = x.size() / (h * w), H = h * factor, W = w * factor;
  Tensor<T> out(s);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out[(p * H + i) * W + j] = x.value()[(p * h + i / factor) * w + j / factor];
  return detail::make_op<T>(std::move(out), {x}, [planes, H, W, h, w, factor](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) g[(p * h + i / factor) * w + j / factor] += self.grad[(p * H + i) * W + j];
  }, "upsample");
}

/// Parameter-free channel adapter on axis 1: group mean when shrinking, cyclic repeat when growing.
template <class T>
Var<T> channel_resize(const Var<T>& x, std::size_t out_channels) {
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
  if (out_channels == 0 || (C % out_channels != 0 && out_channels % C != 0))
    throw DomainError("channel_resize: channel counts must divide one another");
  Shape s = x.shape();
  s[1] = out_channels;
  Tensor<T> out(s);
  const bool shrink = C >= out_channels;
  const T inv = shrink ? T{1} / static_cast<T>(C / out_channels) : T{1};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < std::max(C, out_channels); ++c) {
      const std::size_t ci = shrink ? c : c % C, co = shrink ? c % out_channels : c;
      for (std::size_t k = 0; k < S; ++k) out[(n * out_channels + co) * S + k] += x.value()[(n * C + ci) * S + k] * inv;
    }
  return detail::make_op<T>(std::move(out), {x}, [N, C, S, out_channels, shrink, inv](Node<T>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < std::max(C, out_channels); ++c) {
        const std::size_t ci = shrink ? c : c % C, co = shrink ? c % out_channels : c;
        for (std::size_t k = 0; k < S; ++k) g[(n * C + ci) * S + k] += self.grad[(n * out_channels + co) * S + k] * inv;
      }
  }, "channel_resize");
}

/// Circular low-pass M(r < r_cut) on every trailing (h, w) plane. The projection is
/// self-adjoint, so the backward pass low-passes the incoming gradient.
template <class T>
Var<T> spectral_lowpass(const Var<T>& x, double r_cut) {
  const std::size_t r = x.shape().size(), h = x.dim(r - 2), w = x.dim(r - 1);
  Tensor<T> out = x.value();
  spectral::lowpass_slices(out.values(), h, w, r_cut);
  return detail::make_op<T>(std::move(out), {x}, [h, w, r_cut](Node<T>& self) {
    Tensor<T> g = self.grad;
    spectral::lowpass_slices(g.values(), h, w, r_cut);
    auto& pg = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
  }, "spectral_lowpass");
}

}  // namespace nimbus::ad
