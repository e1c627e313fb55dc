#pragma once

// Causal 3D convolution encoder with stage-windowed streaming.
//
// The input window of k+1 frames is prefixed with three zero frames, giving the
// padded sequence P of length k+4. Stage s (1-based) sees P[2s−2 .. 2s+1]; the two
// oldest of those frames are the previous stage's tail and live in the cache, so
// each stage receives two new frames and emits one latent frame. Every layer keeps
// the last (kt − stride_t) frames of its own input as cache; for the first layer
// that is exactly two frames, and the initial zero cache coincides with the first
// two padding frames.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "nimbus/autodiff.hpp"
#include "nimbus/error.hpp"
#include "nimbus/nn.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::causal {

using ad::Var;

inline constexpr std::size_t kLeadPad = 3;

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kt = 1;
  std::size_t ks = 3;  // spatial kernel (ks × ks)
  std::size_t stride_t = 1;
  std::size_t stride_hw = 1;

  std::size_t cache() const { return kt - stride_t; }
};

/// Default three-layer stack: 4× spatial downsampling, temporal stride in the middle layer.
inline std::vector<LayerSpec> default_layers(std::size_t in, std::size_t hidden, std::size_t latent) {
  return {{in, hidden, 3, 3, 1, 2}, {hidden, hidden, 3, 3, 2, 2}, {hidden, latent, 2, 1, 1, 1}};
}

inline void validate_layers(const std::vector<LayerSpec>& layers) {
  if (layers.size() < 2) throw DomainError("causal stack needs at least two layers");
  if (layers[0].kt != 3 || layers[0].stride_t != 1)
    throw DomainError("first causal layer must have kt = 3, stride_t = 1 (two cached frames per stage)");
  std::size_t strided = 0, strided_at = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    if (s.stride_t != 1 && s.stride_t != 2) throw DomainError("temporal stride must be 1 or 2");
    if (s.kt < s.stride_t) throw DomainError("temporal kernel shorter than its stride");
    if (s.stride_t == 2) {
      ++strided;
      strided_at = l;
    }
    if (l > 0 && layers[l - 1].out != s.in) throw DomainError("causal layer channel chain broken");
  }
  if (strided != 1 || strided_at == 0) throw DomainError("exactly one intermediate layer must carry temporal stride 2");
}

template <class T>
struct CausalStack {
  std::vector<LayerSpec> layers;
  std::vector<Var<T>> kernels;
  std::vector<Var<T>> biases;  // empty when the stack has no bias terms

  std::size_t in_channels() const { return layers.front().in; }
  std::size_t out_channels() const { return layers.back().out; }
  std::size_t spatial_factor() const {
    std::size_t f = 1;
    for (const auto& l : layers) f *= l.stride_hw;
    return f;
  }
};

template <class T>
CausalStack<T> make_stack(nn::ParamStore<T>& store, const std::string& prefix, std::vector<LayerSpec> layers,
                          std::mt19937_64& rng, bool bias = true) {
  validate_layers(layers);
  CausalStack<T> s;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::size_t fan_in = L.in * L.kt * L.ks * L.ks;
    s.kernels.push_back(store.add(prefix + ".l" + std::to_string(l) + ".w",
                                  nn::scaled_uniform<T>({L.out, L.in, L.kt, L.ks, L.ks}, fan_in, rng)));
    if (bias) s.biases.push_back(store.add(prefix + ".l" + std::to_string(l) + ".b", Tensor<T>({L.out})));
  }
  s.layers = std::move(layers);
  return s;
}

/// Per-layer cached input frames plus the stage counter.
template <class T>
struct CacheState {
  std::vector<Var<T>> frames;  // layer l: (N, C_l, cache_l, H_l, W_l)
  std::size_t stage = 0;
  Shape frame_shape;  // expected (N, C, 2, H, W) of the incoming stage pair
};

template <class T>
CacheState<T> init_cache(const CausalStack<T>& stack, std::size_t batch, std::size_t height, std::size_t width) {
  CacheState<T> c;
  std::size_t h = height, w = width;
  for (const auto& L : stack.layers) {
    c.frames.push_back(Var<T>::constant(Tensor<T>({batch, L.in, L.cache(), h, w})));
    h = (h + 2 * (L.ks / 2) - L.ks) / L.stride_hw + 1;
    w = (w + 2 * (L.ks / 2) - L.ks) / L.stride_hw + 1;
  }
  c.frame_shape = {batch, stack.in_channels(), 2, height, width};
  return c;
}

namespace detail {

inline ad::ConvOptions options(const LayerSpec& L) {
  return {L.stride_t, L.stride_hw, L.ks / 2, L.ks / 2, true};
}

template <class T>
Var<T> apply_layer(const CausalStack<T>& stack, std::size_t l, const Var<T>& x) {
  const Var<T>* b = stack.biases.empty() ? nullptr : &stack.biases[l];
  auto y = ad::conv3d(x, stack.kernels[l], b, options(stack.layers[l]));
  return l + 1 < stack.layers.size() ? ad::silu(y) : y;
}

}  // namespace detail

/// One stage: two new frames (N, C, 2, H, W) in, one latent frame (N, C_out, 1, h, w) out.
template <class T>
Var<T> encode_streaming(const CausalStack<T>& stack, const Var<T>& pair, CacheState<T>& cache) {
  if (pair.shape() != cache.frame_shape)
    throw StateError("stage input " + shape_string(pair.shape()) + " does not match cached shape " +
                     shape_string(cache.frame_shape));
  Var<T> h = pair;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const std::size_t keep = stack.layers[l].cache();
    const Var<T>& prev = cache.frames[l];
    Var<T> x = keep == 0 ? h : ad::concat<T>({prev, h}, 2);
    const std::size_t len = x.dim(2);
    if (keep > 0) {
      Var<T> tail = ad::slice(x, 2, len - keep, len);
      if (tail.shape() != prev.shape()) throw StateError("cache shape drift at layer " + std::to_string(l));
      cache.frames[l] = tail;
    }
    h = detail::apply_layer(stack, l, x);
  }
  if (h.dim(2) != 1) throw StateError("stage emitted " + std::to_string(h.dim(2)) + " frames");
  ++cache.stage;
  return h;
}

/// (0, 0, 0, X_0, …, X_k) along axis 2 with X_k zeroed when `mask_last`. Input (N, C, k+1, H, W).
template <class T>
Var<T> pad_and_mask(const Var<T>& x, bool mask_last) {
  if (x.shape().size() != 5) throw DomainError("pad_and_mask expects (N, C, T, H, W)");
  const std::size_t frames = x.dim(2);
  if (frames < 3 || (frames - 1) % 2 != 0) throw DomainError("window must hold k+1 frames with k even, k >= 2");
  Shape zs = x.shape();
  zs[2] = kLeadPad;
  std::vector<Var<T>> parts{Var<T>::constant(Tensor<T>(zs))};
  if (mask_last) {
    parts.push_back(ad::slice(x, 2, 0, frames - 1));
    zs[2] = 1;
    parts.push_back(Var<T>::constant(Tensor<T>(zs)));
  } else {
    parts.push_back(x);
  }
  return ad::concat(parts, 2);
}

/// Streams the padded window stage by stage; output (N, C_out, 1 + k/2, h, w).
template <class T>
Var<T> encode_full(const CausalStack<T>& stack, const Var<T>& x, bool mask_last) {
  const Var<T> padded = pad_and_mask(x, mask_last);
  auto cache = init_cache(stack, x.dim(0), x.dim(3), x.dim(4));
  const std::size_t stages = 1 + (x.dim(2) - 1) / 2;
  std::vector<Var<T>> out;
  for (std::size_t s = 1; s <= stages; ++s) out.push_back(encode_streaming(stack, ad::slice(padded, 2, 2 * s, 2 * s + 2), cache));
  return ad::concat(out, 2);
}

/// Monolithic causal convolution over the whole padded sequence (no cache); each
/// layer after the first is left-padded with (kt − stride_t) zero frames.
template <class T>
Var<T> encode_direct(const CausalStack<T>& stack, const Var<T>& x, bool mask_last) {
  Var<T> h = pad_and_mask(x, mask_last);
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const std::size_t pad = l == 0 ? 0 : stack.layers[l].cache();
    if (pad > 0) {
      Shape zs = h.shape();
      zs[2] = pad;
      h = ad::concat<T>({Var<T>::constant(Tensor<T>(zs)), h}, 2);
    }
    h = detail::apply_layer(stack, l, h);
  }
  return h;
}

}  // namespace nimbus::causal
