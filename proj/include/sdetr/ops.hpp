// Differentiable primitives over BasicTensor.
//
// Broadcasting is limited to leading-dim expansion: in a binary op the
// lower-rank operand's shape must be a suffix of the other's.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sdetr/tensor.hpp"

namespace sdetr {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

struct BroadcastPlan {
  Shape out;
  std::size_t n_out, n_a, n_b;
};

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {a, shape_numel(a), shape_numel(a), shape_numel(a)};
  if (is_suffix(b, a)) return {a, shape_numel(a), shape_numel(a), shape_numel(b)};
  if (is_suffix(a, b)) return {b, shape_numel(b), shape_numel(a), shape_numel(b)};
  throw shape_error(op, a, b);
}

template <class T, class F, class DA, class DB>
BasicTensor<T> binary(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b, F f, DA da, DB db) {
  auto plan = plan_broadcast(op, a.shape(), b.shape());
  std::vector<T> out(plan.n_out);
  const auto& x = a.values();
  const auto& y = b.values();
  const std::size_t na = plan.n_a, nb = plan.n_b;
  if (na == plan.n_out && nb == plan.n_out) {
    for (std::size_t i = 0; i < plan.n_out; ++i) out[i] = f(x[i], y[i]);
  } else {
    for (std::size_t i = 0; i < plan.n_out; ++i) out[i] = f(x[i % na], y[i % nb]);
  }
  return make_result<T>(op, plan.out, std::move(out), {a, b}, [na, nb, da, db](Node<T>& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    const auto& g = self.grad;
    auto* ga = input_grad(self, 0);
    auto* gb = input_grad(self, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T xi = x[i % na], yi = y[i % nb];
      if (ga) (*ga)[i % na] += g[i] * da(xi, yi, self.data[i]);
      if (gb) (*gb)[i % nb] += g[i] * db(xi, yi, self.data[i]);
    }
  });
}

template <class T, class F, class D>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& a, F f, D d) {
  std::vector<T> out(a.numel());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(op, a.shape(), std::move(out), {a}, [d](Node<T>& self) {
    auto* ga = input_grad(self, 0);
    if (!ga) return;
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * d(x[i], self.data[i]);
  });
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(s));
  }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

/// Elementwise min/max; on ties the gradient goes to the first operand.
template <class T>
BasicTensor<T> minimum(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary<T>(
      "minimum", a, b, [](T x, T y) { return x <= y ? x : y; }, [](T x, T y, T) { return T(x <= y); },
      [](T x, T y, T) { return T(!(x <= y)); });
}

template <class T>
BasicTensor<T> maximum(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; }, [](T x, T y, T) { return T(x >= y); },
      [](T x, T y, T) { return T(!(x >= y)); });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return detail::unary<T>("scale", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  return detail::unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return scale(a, T(-1));
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return detail::unary<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return T(x > T(0)); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return detail::unary<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
BasicTensor<T> abs(const BasicTensor<T>& a) {
  return detail::unary<T>(
      "abs", a, [](T x) { return std::abs(x); }, [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& a, T lo, T hi) {
  return detail::unary<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return T(x > lo && x < hi); });
}

// ---- linear algebra ----------------------------------------------------------

/// [M,K] x [K,N] -> [M,N].
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw shape_error("matmul", a.shape(), b.shape());
  std::vector<T> out(m * n);
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (auto* ga = detail::input_grad(self, 0)) {
      MatMap<T>(ga->data(), m, k).noalias() += g * ConstMatMap<T>(self.inputs[1]->data.data(), k, n).transpose();
    }
    if (auto* gb = detail::input_grad(self, 1)) {
      MatMap<T>(gb->data(), k, n).noalias() += ConstMatMap<T>(self.inputs[0]->data.data(), m, k).transpose() * g;
    }
  });
}

/// 2-D transpose.
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_rank("transpose", a.shape(), 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  detail::MatMap<T>(out.data(), c, r) = detail::ConstMatMap<T>(a.data().data(), r, c).transpose();
  return detail::make_result<T>("transpose", {c, r}, std::move(out), {a}, [r, c](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      detail::MatMap<T>(ga->data(), r, c) += detail::ConstMatMap<T>(self.grad.data(), c, r).transpose();
    }
  });
}

/// x [M,in] with weight [out,in] and bias [out]: x Wᵀ + b.
template <class T>
BasicTensor<T> affine(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias) {
  detail::require_rank("affine", x.shape(), 2);
  detail::require_rank("affine", weight.shape(), 2);
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) throw shape_error("affine", x.shape(), weight.shape());
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim)) throw shape_error("affine(bias)", weight.shape(), bias->shape());
  using detail::ConstMatMap;
  using detail::MatMap;
  std::vector<T> out(m * out_dim);
  MatMap<T> y(out.data(), m, out_dim);
  y.noalias() = ConstMatMap<T>(x.data().data(), m, in) * ConstMatMap<T>(weight.data().data(), out_dim, in).transpose();
  if (bias) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->data().data(), out_dim);
  std::vector<BasicTensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>("affine", {m, out_dim}, std::move(out), std::move(inputs),
                                [m, in, out_dim](Node<T>& self) {
                                  ConstMatMap<T> g(self.grad.data(), m, out_dim);
                                  if (auto* gx = detail::input_grad(self, 0)) {
                                    MatMap<T>(gx->data(), m, in).noalias() +=
                                        g * ConstMatMap<T>(self.inputs[1]->data.data(), out_dim, in);
                                  }
                                  if (auto* gw = detail::input_grad(self, 1)) {
                                    MatMap<T>(gw->data(), out_dim, in).noalias() +=
                                        g.transpose() * ConstMatMap<T>(self.inputs[0]->data.data(), m, in);
                                  }
                                  if (self.inputs.size() > 2) {
                                    if (auto* gb = detail::input_grad(self, 2)) {
                                      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), out_dim) +=
                                          g.colwise().sum();
                                    }
                                  }
                                });
}

template <class T>
BasicTensor<T> affine(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  return affine(x, weight, &bias);
}

// ---- structural ----------------------------------------------------------------

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw shape_error("reshape", a.shape(), shape);
  return detail::make_result<T>("reshape", std::move(shape), a.values(), {a}, [](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
  });
}

namespace detail {
// View a shape as [outer, axis, inner] around `axis`.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

/// Concatenates along `axis`; all other dims must agree.
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for shape " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw shape_error("concat", first, probe);
    probe[axis] = first[axis];
    if (probe != first) throw shape_error("concat", first, p.shape());
    lens.push_back(p.dim(axis));
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer, total, inner;
  detail::split_axis(out_shape, axis, outer, total, inner);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& src = parts[p].values();
    const std::size_t block = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset * inner));
    }
    offset += lens[p];
  }
  return detail::make_result<T>("concat", out_shape, std::move(out), parts, [lens, outer, total, inner](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      const std::size_t block = lens[p] * inner;
      if (auto* gp = detail::input_grad(self, p)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * total * inner + offset * inner;
          T* dst = gp->data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
        }
      }
      offset += lens[p];
    }
  });
}

/// Contiguous slice [start, start+len) along `axis`.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank() || start + len > a.dim(axis)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " of shape " + shape_str(a.shape()));
  }
  std::size_t outer, full, inner;
  detail::split_axis(a.shape(), axis, outer, full, inner);
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<T> out(outer * len * inner);
  const auto& src = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  }
  return detail::make_result<T>("slice", out_shape, std::move(out), {a}, [outer, full, inner, start, len](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        const T* g = self.grad.data() + o * len * inner;
        T* dst = ga->data() + (o * full + start) * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
      }
    }
  });
}

/// Gathers rows (axis 0) by index; indices may repeat.
template <class T>
BasicTensor<T> index_rows(const BasicTensor<T>& a, const std::vector<std::size_t>& rows) {
  if (a.rank() < 1) throw ShapeError("index_rows: scalar input");
  const std::size_t row = a.numel() / std::max<std::size_t>(a.dim(0), 1);
  Shape out_shape = a.shape();
  out_shape[0] = rows.size();
  std::vector<T> out(rows.size() * row);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) {
      throw ShapeError("index_rows: row " + std::to_string(rows[r]) + " out of range for shape " + shape_str(a.shape()));
    }
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(rows[r] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  return detail::make_result<T>("index_rows", out_shape, std::move(out), {a}, [rows, row](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t i = 0; i < row; ++i) (*ga)[rows[r] * row + i] += self.grad[r * row + i];
      }
    }
  });
}

// ---- reductions ----------------------------------------------------------------

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  return detail::make_result<T>("sum", {}, {acc}, {a}, [](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (auto& g : *ga) g += self.grad[0];
    }
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Mean over all leading dims: [..., C] -> [C].
template <class T>
BasicTensor<T> mean_leading(const BasicTensor<T>& a) {
  if (a.rank() < 1 || a.numel() == 0) throw ShapeError("mean_leading: empty input " + shape_str(a.shape()));
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.numel() / c;
  std::vector<T> out(c, T(0));
  const auto& x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) out[j] += x[r * c + j];
  }
  const T inv = T(1) / static_cast<T>(rows);
  for (auto& v : out) v *= inv;
  return detail::make_result<T>("mean_leading", {c}, std::move(out), {a}, [rows, c, inv](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) (*ga)[r * c + j] += self.grad[j] * inv;
      }
    }
  });
}

/// Spatial mean of an H×W×C map -> C.
template <class T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& x) {
  detail::require_rank("global_average_pool", x.shape(), 3);
  return mean_leading(x);
}

/// Row sums over the last axis: [..., C] -> [...].
template <class T>
BasicTensor<T> sum_last(const BasicTensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("sum_last: scalar input");
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.numel() / std::max<std::size_t>(c, 1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r] += a.values()[r * c + j];
  }
  return detail::make_result<T>("sum_last", out_shape, std::move(out), {a}, [rows, c](Node<T>& self) {
    if (auto* ga = detail::input_grad(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) (*ga)[r * c + j] += self.grad[r];
      }
    }
  });
}

// ---- softmax family ----------------------------------------------------------

/// Softmax along `axis`; the axis max is subtracted before exponentiation.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  if (len == 0) throw ShapeError("softmax: empty axis in shape " + shape_str(x.shape()));
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = in[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
      T denom = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const T e = std::exp(in[base + l * inner] - mx);
        out[base + l * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] *= inv;
    }
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x}, [outer, len, inner](Node<T>& self) {
    auto* gx = detail::input_grad(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          (*gx)[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("log_softmax: axis invalid for shape " + shape_str(x.shape()));
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  if (len == 0) throw ShapeError("log_softmax: empty axis in shape " + shape_str(x.shape()));
  std::vector<T> out(x.numel());
  const auto& in = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = in[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
      T denom = 0;
      for (std::size_t l = 0; l < len; ++l) denom += std::exp(in[base + l * inner] - mx);
      const T lse = mx + std::log(denom);
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] = in[base + l * inner] - lse;
    }
  }
  return detail::make_result<T>("log_softmax", x.shape(), std::move(out), {x}, [outer, len, inner](Node<T>& self) {
    auto* gx = detail::input_grad(self, 0);
    if (!gx) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T gsum = 0;
        for (std::size_t l = 0; l < len; ++l) gsum += g[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          (*gx)[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

// ---- attention -------------------------------------------------------------------

/// Scaled dot-product attention over `heads` column groups of already
/// projected q [Nq,C], k [L,C], v [L,C]. Head h uses columns
/// [h·d, (h+1)·d) with d = C/heads; outputs are written back into the same
/// columns, so the result is the concatenation of the heads: [Nq,C].
/// If `weights_out` is given it receives the head-averaged attention
/// (Nq×L, rows sum to 1).
template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                    std::size_t heads, std::vector<T>* weights_out = nullptr) {
  detail::require_rank("attention", q.shape(), 2);
  detail::require_rank("attention", k.shape(), 2);
  detail::require_rank("attention", v.shape(), 2);
  const std::size_t nq = q.dim(0), len = k.dim(0), c = q.dim(1);
  if (k.dim(1) != c || v.dim(1) != c || v.dim(0) != len) throw shape_error("attention", q.shape(), k.shape());
  if (heads == 0 || c % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(c) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (len == 0) throw ShapeError("attention: empty key sequence");
  const std::size_t d = c / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  using Stride = Eigen::OuterStride<>;
  using Block = Eigen::Map<const detail::RowMat<T>, 0, Stride>;
  using MutBlock = Eigen::Map<detail::RowMat<T>, 0, Stride>;
  auto probs = std::make_shared<std::vector<T>>(heads * nq * len);
  std::vector<T> out(nq * c);
  if (weights_out) weights_out->assign(nq * len, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    Block qh(q.data().data() + h * d, nq, d, Stride(c));
    Block kh(k.data().data() + h * d, len, d, Stride(c));
    Block vh(v.data().data() + h * d, len, d, Stride(c));
    detail::MatMap<T> p(probs->data() + h * nq * len, nq, len);
    p.noalias() = (qh * kh.transpose()) * scale;
    const Eigen::Matrix<T, Eigen::Dynamic, 1> mx = p.rowwise().maxCoeff();
    p.colwise() -= mx;
    p = p.array().exp().matrix();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> inv = p.rowwise().sum().cwiseInverse();
    p = inv.asDiagonal() * p;
    MutBlock(out.data() + h * d, nq, d, Stride(c)).noalias() = p * vh;
    if (weights_out) detail::MatMap<T>(weights_out->data(), nq, len) += p / static_cast<T>(heads);
  }
  return detail::make_result<T>(
      "attention", {nq, c}, std::move(out), {q, k, v}, [nq, len, c, d, heads, scale, probs](Node<T>& self) {
        auto* gq = detail::input_grad(self, 0);
        auto* gk = detail::input_grad(self, 1);
        auto* gv = detail::input_grad(self, 2);
        const T* qd = self.inputs[0]->data.data();
        const T* kd = self.inputs[1]->data.data();
        const T* vd = self.inputs[2]->data.data();
        detail::RowMat<T> ds(nq, len);
        for (std::size_t h = 0; h < heads; ++h) {
          detail::ConstMatMap<T> p(probs->data() + h * nq * len, nq, len);
          Block go(self.grad.data() + h * d, nq, d, Stride(c));
          if (gv) MutBlock(gv->data() + h * d, len, d, Stride(c)).noalias() += p.transpose() * go;
          if (!gq && !gk) continue;
          ds.noalias() = go * Block(vd + h * d, len, d, Stride(c)).transpose();
          const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = ds.cwiseProduct(p).rowwise().sum();
          ds.colwise() -= dot;
          ds = ds.cwiseProduct(p) * scale;
          if (gq) MutBlock(gq->data() + h * d, nq, d, Stride(c)).noalias() += ds * Block(kd + h * d, len, d, Stride(c));
          if (gk) {
            MutBlock(gk->data() + h * d, len, d, Stride(c)).noalias() +=
                ds.transpose() * Block(qd + h * d, nq, d, Stride(c));
          }
        }
      });
}

// ---- normalization ---------------------------------------------------------------

inline constexpr double kNormEpsilon = 1e-5;

/// Normalizes over the last dim, then applies per-channel gamma/beta.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw shape_error("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / c;
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  const auto& in = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[r] = T(1) / std::sqrt(var + T(kNormEpsilon));
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (row[j] - mu) * inv_std[r];
      out[r * c + j] = xhat[r * c + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& g = self.grad;
        const auto& gam = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gg = detail::input_grad(self, 1);
        auto* gb = detail::input_grad(self, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = r * c + j;
            const T dy = g[k] * gam[j];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat[k];
            if (gg) (*gg)[j] += g[k] * xhat[k];
            if (gb) (*gb)[j] += g[k];
          }
          if (gx) {
            const T inv_c = T(1) / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t k = r * c + j;
              const T dy = g[k] * gam[j];
              (*gx)[k] += inv_std[r] * (dy - inv_c * sum_dy - xhat[k] * inv_c * sum_dy_xhat);
            }
          }
        }
      });
}

/// Batch norm over axis 0 of a [B,C] batch using current-batch statistics
/// (population variance).
template <class T>
BasicTensor<T> batch_norm_1d(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta) {
  detail::require_rank("batch_norm_1d", x.shape(), 2);
  const std::size_t b = x.dim(0), c = x.dim(1);
  if (b < 2) throw ShapeError("batch_norm_1d: batch size " + std::to_string(b) + " has undefined variance (need >= 2)");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw shape_error("batch_norm_1d", x.shape(), gamma.shape());
  std::vector<T> xhat(x.numel()), inv_std(c), out(x.numel());
  const auto& in = x.values();
  for (std::size_t j = 0; j < c; ++j) {
    T mu = 0;
    for (std::size_t i = 0; i < b; ++i) mu += in[i * c + j];
    mu /= static_cast<T>(b);
    T var = 0;
    for (std::size_t i = 0; i < b; ++i) var += (in[i * c + j] - mu) * (in[i * c + j] - mu);
    var /= static_cast<T>(b);
    inv_std[j] = T(1) / std::sqrt(var + T(kNormEpsilon));
    for (std::size_t i = 0; i < b; ++i) {
      xhat[i * c + j] = (in[i * c + j] - mu) * inv_std[j];
      out[i * c + j] = xhat[i * c + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_result<T>(
      "batch_norm_1d", x.shape(), std::move(out), {x, gamma, beta},
      [b, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& g = self.grad;
        const auto& gam = self.inputs[1]->data;
        auto* gx = detail::input_grad(self, 0);
        auto* gg = detail::input_grad(self, 1);
        auto* gb = detail::input_grad(self, 2);
        const T inv_b = T(1) / static_cast<T>(b);
        for (std::size_t j = 0; j < c; ++j) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t i = 0; i < b; ++i) {
            const std::size_t k = i * c + j;
            const T dy = g[k] * gam[j];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat[k];
            if (gg) (*gg)[j] += g[k] * xhat[k];
            if (gb) (*gb)[j] += g[k];
          }
          if (gx) {
            for (std::size_t i = 0; i < b; ++i) {
              const std::size_t k = i * c + j;
              const T dy = g[k] * gam[j];
              (*gx)[k] += inv_std[j] * (dy - inv_b * sum_dy - xhat[k] * inv_b * sum_dy_xhat);
            }
          }
        }
      });
}

// ---- similarity ----------------------------------------------------------------

inline constexpr double kMinNorm = 1e-12;

/// Unit-normalizes each row over the last dim. Rows with norm <= 1e-12 are
/// rejected with their row index.
template <class T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("l2_normalize: scalar input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / std::max<std::size_t>(c, 1);
  std::vector<T> out(x.numel()), norms(rows);
  const auto& in = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += in[r * c + j] * in[r * c + j];
    const T n = std::sqrt(ss);
    if (!(n > T(kMinNorm))) throw std::domain_error("l2_normalize: row " + std::to_string(r) + " has zero norm");
    norms[r] = n;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = in[r * c + j] / n;
  }
  return detail::make_result<T>("l2_normalize", x.shape(), std::move(out), {x},
                                [rows, c, norms = std::move(norms)](Node<T>& self) {
                                  auto* gx = detail::input_grad(self, 0);
                                  if (!gx) return;
                                  const auto& y = self.data;
                                  const auto& g = self.grad;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    T dot = 0;
                                    for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
                                    for (std::size_t j = 0; j < c; ++j) {
                                      (*gx)[r * c + j] += (g[r * c + j] - y[r * c + j] * dot) / norms[r];
                                    }
                                  }
                                });
}

/// Cosine similarity along the last dim: [..., C] x [..., C] -> [...].
template <class T>
BasicTensor<T> cosine(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_error("cosine", a.shape(), b.shape());
  return sum_last(mul(l2_normalize(a), l2_normalize(b)));
}

}  // namespace sdetr
