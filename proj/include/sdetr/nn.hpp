// Named parameter storage and small layer helpers.
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/ops.hpp"
#include "sdetr/rng.hpp"
#include "sdetr/tensor.hpp"

namespace sdetr {

/// Ordered collection of trainable tensors keyed by dotted path
/// (e.g. "decoder.layer0.cross.f_q.weight").
template <class T>
class ParamStore {
 public:
  BasicTensor<T>& add(const std::string& name, BasicTensor<T> tensor) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    tensor.set_requires_grad(true);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(tensor));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const BasicTensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return tensors_[it->second];
  }
  BasicTensor<T>& get(const std::string& name) {
    return const_cast<BasicTensor<T>&>(static_cast<const ParamStore&>(*this).get(name));
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }
  BasicTensor<T>& at(std::size_t i) { return tensors_[i]; }
  const BasicTensor<T>& at(std::size_t i) const { return tensors_[i]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  /// Overwrites values of `name` in place (shape must match).
  void assign(const std::string& name, const std::vector<T>& values) {
    auto& t = get(name);
    if (values.size() != t.numel()) {
      throw ShapeError("ParamStore::assign: " + name + " expects " + std::to_string(t.numel()) + " values, got " +
                       std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }

  template <class To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.add(names_[i], sdetr::cast<To>(tensors_[i]));
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Xavier-uniform [out, in] weight.
template <class T>
BasicTensor<T> xavier_uniform(std::size_t out, std::size_t in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> w(out * in);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
  return BasicTensor<T>({out, in}, std::move(w));
}

template <class T>
void add_linear(ParamStore<T>& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                bool bias = true) {
  ps.add(prefix + ".weight", xavier_uniform<T>(out, in, rng));
  if (bias) ps.add(prefix + ".bias", BasicTensor<T>::zeros({out}));
}

template <class T>
void add_norm(ParamStore<T>& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".gamma", BasicTensor<T>::full({dim}, T(1)));
  ps.add(prefix + ".beta", BasicTensor<T>::zeros({dim}));
}

template <class T>
BasicTensor<T> linear(const ParamStore<T>& ps, const std::string& prefix, const BasicTensor<T>& x) {
  const std::string bias = prefix + ".bias";
  if (ps.contains(bias)) return affine(x, ps.get(prefix + ".weight"), ps.get(bias));
  return affine<T>(x, ps.get(prefix + ".weight"), static_cast<const BasicTensor<T>*>(nullptr));
}

template <class T>
BasicTensor<T> layer_norm(const ParamStore<T>& ps, const std::string& prefix, const BasicTensor<T>& x) {
  return layer_norm(x, ps.get(prefix + ".gamma"), ps.get(prefix + ".beta"));
}

}  // namespace sdetr
