#pragma once

// Named parameter storage, initialization, checkpoints and the AdamW optimizer.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nimbus/autodiff.hpp"
#include "nimbus/error.hpp"
#include "nimbus/io.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::nn {

using ad::Var;

/// Uniform init with variance gain/fan_in.
template <class T>
Tensor<T> scaled_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  const double bound = std::sqrt(3.0 * gain / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
class ParamStore {
 public:
  Var<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw DomainError("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>::parameter(std::move(init))});
    return entries_.back().second;
  }

  const Var<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DomainError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }

  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  std::vector<io::NamedTensor> export_tensors() const {
    std::vector<io::NamedTensor> out;
    for (const auto& [name, v] : entries_) out.push_back({name, v.value().template cast<float>()});
    return out;
  }

  /// Copies values by name; every stored parameter must be present with a matching shape.
  void import_tensors(const std::vector<io::NamedTensor>& tensors) {
    std::unordered_map<std::string, const io::NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;
    for (auto& [name, v] : entries_) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("checkpoint lacks parameter '" + name + "'");
      if (it->second->value.shape() != v.shape())
        throw ConfigError("checkpoint parameter '" + name + "' has shape " + shape_string(it->second->value.shape()) +
                          ", expected " + shape_string(v.shape()));
      v.mutable_value() = it->second->value.template cast<T>();
    }
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, io::encode_params(export_tensors())); }

  void load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("missing checkpoint: expected " + path.string());
    import_tensors(io::decode_params(io::read_file(path)));
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 1;

  Var<T> operator()(const Var<T>& x) const { return ad::conv2d(x, weight, bias ? &bias : nullptr, stride, pad, pad); }
};

template <class T>
Conv2d<T> make_conv2d(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                      std::size_t stride, std::mt19937_64& rng, bool zero_init = false) {
  Conv2d<T> c;
  Tensor<T> w = zero_init ? Tensor<T>({out, in, k, k}) : scaled_uniform<T>({out, in, k, k}, in * k * k, rng);
  c.weight = store.add(name + ".w", std::move(w));
  c.bias = store.add(name + ".b", Tensor<T>({out}));
  c.stride = stride;
  c.pad = k / 2;
  return c;
}

template <class T>
struct Linear {
  Var<T> weight;
  Var<T> bias;
  Var<T> operator()(const Var<T>& x) const { return ad::linear(x, weight, bias); }
};

template <class T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                      std::mt19937_64& rng, bool zero_init = false) {
  Tensor<T> w = zero_init ? Tensor<T>({out, in}) : scaled_uniform<T>({out, in}, in, rng);
  return {store.add(name + ".w", std::move(w)), store.add(name + ".b", Tensor<T>({out}))};
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One AdamW update of a single tensor; m and v are the running moments, step is 1-based.
template <class T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, std::vector<double>& m, std::vector<double>& v,
                std::size_t step, const AdamConfig& cfg) {
  if (m.size() != param.size()) m.assign(param.size(), 0.0);
  if (v.size() != param.size()) v.assign(param.size(), 0.0);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.size() == param.size() ? static_cast<double>(grad[i]) : 0.0;
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    double p = param[i];
    p -= cfg.lr * cfg.weight_decay * p;
    p -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    param[i] = static_cast<T>(p);
  }
}

template <class T>
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Var<T>>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
    }
    if (m_.size() != params.size()) throw StateError("optimizer parameter list changed");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var<T> p = params[i];
      adamw_step(p.mutable_value(), p.grad(), m_[i], v_[i], t_, cfg_);
    }
  }

  std::size_t steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace nimbus::nn
