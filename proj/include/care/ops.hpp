#pragma once

// Differentiable kernels. Each forward computes values eagerly and, when
// recording, attaches a backward rule that accumulates into input gradients.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "care/errors.hpp"
#include "care/rng.hpp"
#include "care/tensor.hpp"

namespace care {

inline constexpr double kLogSigmaMin = -10.0;
inline constexpr double kLogSigmaMax = 10.0;

/// Boolean matrix; `true` marks a position that may be attended to.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> keep;

  static Mask all(std::size_t r, std::size_t c, bool value = true) {
    return {r, c, std::vector<unsigned char>(r * c, value ? 1 : 0)};
  }
  /// Lower-triangular: row t sees columns 0..t.
  static Mask causal(std::size_t n) {
    Mask m = all(n, n, false);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.keep[i * n + j] = 1;
    return m;
  }
  /// Every row sees exactly the columns where `key_keep` is true.
  static Mask keys(std::size_t r, std::span<const unsigned char> key_keep) {
    Mask m = all(r, key_keep.size(), false);
    for (std::size_t i = 0; i < r; ++i)
      std::copy(key_keep.begin(), key_keep.end(), m.keep.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    return m;
  }
  bool allowed(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }
};

/// Elementwise AND of two masks of equal shape.
inline Mask operator&(const Mask& a, const Mask& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("mask shape mismatch");
  Mask m = a;
  for (std::size_t i = 0; i < m.keep.size(); ++i) m.keep[i] = a.keep[i] && b.keep[i];
  return m;
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const std::vector<double>& v, Shape s) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}
inline MutMap view(std::vector<double>& v, Shape s) {
  return MutMap(v.data(), static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline bool wants_grad(const Node& n) { return n.requires_grad; }

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double clamp_log_sigma(double v) { return std::clamp(v, kLogSigmaMin, kLogSigmaMax); }
inline bool inside_clamp(double v) { return v >= kLogSigmaMin && v <= kLogSigmaMax; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const Shape out{a.rows(), b.cols()};
  std::vector<double> v(out.size());
  detail::view(v, out).noalias() = detail::view(a.node().value, a.shape()) * detail::view(b.node().value, b.shape());
  return Tensor::make_result(out, std::move(v), {a, b}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    auto g = detail::view(self.grad, self.shape);
    if (na.requires_grad) detail::view(na.ensure_grad(), na.shape).noalias() += g * detail::view(nb.value, nb.shape).transpose();
    if (nb.requires_grad) detail::view(nb.ensure_grad(), nb.shape).noalias() += detail::view(na.value, na.shape).transpose() * g;
  });
}

/// a · bᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: column counts differ " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  const Shape out{a.rows(), b.rows()};
  std::vector<double> v(out.size());
  detail::view(v, out).noalias() =
      detail::view(a.node().value, a.shape()) * detail::view(b.node().value, b.shape()).transpose();
  return Tensor::make_result(out, std::move(v), {a, b}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    auto g = detail::view(self.grad, self.shape);
    if (na.requires_grad) detail::view(na.ensure_grad(), na.shape).noalias() += g * detail::view(nb.value, nb.shape);
    if (nb.requires_grad) detail::view(nb.ensure_grad(), nb.shape).noalias() += g.transpose() * detail::view(na.value, na.shape);
  });
}

/// Z Zᵀ. Entry (j, i) is a copy of (i, j), so the result is symmetric to the bit.
inline Tensor gram(const Tensor& z) {
  const std::size_t n = z.rows(), d = z.cols();
  const Shape out{n, n};
  std::vector<double> v(out.size());
  const auto& zv = z.node().value;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += zv[i * d + k] * zv[j * d + k];
      v[i * n + j] = s;
      v[j * n + i] = s;
    }
  }
  return Tensor::make_result(out, std::move(v), {z}, [](detail::Node& self) {
    auto& nz = *self.inputs[0];
    auto g = detail::view(self.grad, self.shape);
    detail::view(nz.ensure_grad(), nz.shape).noalias() += (g + g.transpose()) * detail::view(nz.value, nz.shape);
  });
}

inline Tensor transpose(const Tensor& a) {
  const Shape out{a.cols(), a.rows()};
  std::vector<double> v(out.size());
  detail::view(v, out) = detail::view(a.node().value, a.shape()).transpose();
  return Tensor::make_result(out, std::move(v), {a}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    detail::view(na.ensure_grad(), na.shape) += detail::view(self.grad, self.shape).transpose();
  });
}

/// Sparse symmetric-or-not operator applied from the left: out = S · x.
/// Stored as coordinate triplets sorted by row.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  struct Entry {
    std::size_t row;
    std::size_t col;
    double value;
  };
  std::vector<Entry> entries;

  std::vector<double> dense() const {
    std::vector<double> d(rows * cols, 0.0);
    for (const auto& e : entries) d[e.row * cols + e.col] += e.value;
    return d;
  }
};

inline Tensor sparse_matmul(const SparseMatrix& s, const Tensor& x) {
  if (s.cols != x.rows()) {
    throw DimensionError("sparse_matmul: operator is " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                         " but input has " + std::to_string(x.rows()) + " rows");
  }
  const std::size_t d = x.cols();
  const Shape out{s.rows, d};
  std::vector<double> v(out.size(), 0.0);
  const auto& xv = x.node().value;
  for (const auto& e : s.entries)
    for (std::size_t k = 0; k < d; ++k) v[e.row * d + k] += e.value * xv[e.col * d + k];
  return Tensor::make_result(out, std::move(v), {x}, [s](detail::Node& self) {
    auto& nx = *self.inputs[0];
    auto& gx = nx.ensure_grad();
    const std::size_t d = self.shape.cols;
    for (const auto& e : s.entries)
      for (std::size_t k = 0; k < d; ++k) gx[e.col * d + k] += e.value * self.grad[e.row * d + k];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= bd[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= s;
  return Tensor::make_result(a.shape(), std::move(v), {a}, [s](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// m×n plus a 1×n row broadcast over every row.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " + to_string(row.shape()));
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  const auto rd = row.data();
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += rd[i % n];
  return Tensor::make_result(a.shape(), std::move(v), {a, row}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nr = *self.inputs[1];
    const std::size_t n = self.shape.cols;
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nr.requires_grad) {
      auto& g = nr.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

namespace detail {

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x = fwd(x);
  return Tensor::make_result(a.shape(), std::move(v), {a}, [deriv](Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return detail::sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Gradient passes only where the input lies inside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Inverted dropout. Identity when `rate` is 0.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout rate must lie in [0, 1)");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(a.size());
  for (double& f : factor) f = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> v(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= factor[i];
  return Tensor::make_result(a.shape(), std::move(v), {a}, [factor = std::move(factor)](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  const auto d = a.data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return Tensor::make_result({1, 1}, {s}, {a}, [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (double& x : g) x += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Normalization

enum class Axis { rows = 0, cols = 1 };

namespace detail {

// Softmax along each row; masked entries are exactly zero.
inline Tensor softmax_rows(const Tensor& x, const Mask* mask) {
  const Shape s = x.shape();
  if (mask && (mask->rows != s.rows || mask->cols != s.cols)) {
    throw DimensionError("softmax: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                         " does not match input " + to_string(s));
  }
  std::vector<double> v(s.size(), 0.0);
  const auto xd = x.data();
  for (std::size_t r = 0; r < s.rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < s.cols; ++c)
      if (!mask || mask->allowed(r, c)) mx = std::max(mx, xd[r * s.cols + c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DegenerateMaskError("softmax: row " + std::to_string(r) + " is fully masked");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) {
      if (mask && !mask->allowed(r, c)) continue;
      const double e = std::exp(xd[r * s.cols + c] - mx);
      v[r * s.cols + c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < s.cols; ++c) v[r * s.cols + c] /= total;
  }
  return Tensor::make_result(s, std::move(v), {x}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const std::size_t cols = self.shape.cols;
    for (std::size_t r = 0; r < self.shape.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.value[r * cols + c] * self.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        g[i] += self.value[i] * (self.grad[i] - dot);
      }
    }
  });
}

}  // namespace detail

/// Softmax along `axis`. Entries where `mask` is false come out exactly 0.
inline Tensor softmax(const Tensor& x, Axis axis = Axis::cols, const Mask* mask = nullptr) {
  if (axis == Axis::cols) return detail::softmax_rows(x, mask);
  if (!mask) return transpose(detail::softmax_rows(transpose(x), nullptr));
  Mask t = Mask::all(mask->cols, mask->rows, false);
  for (std::size_t r = 0; r < mask->rows; ++r)
    for (std::size_t c = 0; c < mask->cols; ++c) t.keep[c * t.cols + r] = mask->keep[r * mask->cols + c];
  return transpose(detail::softmax_rows(transpose(x), &t));
}

/// Row-wise (x - mean) / sqrt(var + eps) * gain + bias, population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const Shape s = x.shape();
  if (s.cols < 2) throw ContractError("layer_norm: normalized axis needs length >= 2");
  if (gain.shape() != Shape{1, s.cols} || bias.shape() != Shape{1, s.cols}) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(s.cols));
  }
  std::vector<double> normalized(s.size());
  std::vector<double> inv_std(s.rows);
  std::vector<double> v(s.size());
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  const double n = static_cast<double>(s.cols);
  for (std::size_t r = 0; r < s.rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) mu += xd[r * s.cols + c];
    mu /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) {
      const double dlt = xd[r * s.cols + c] - mu;
      var += dlt * dlt;
    }
    var /= n;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < s.cols; ++c) {
      const std::size_t i = r * s.cols + c;
      normalized[i] = (xd[i] - mu) * inv_std[r];
      v[i] = normalized[i] * gd[c] + bd[c];
    }
  }
  return Tensor::make_result(
      s, std::move(v), {x, gain, bias},
      [normalized = std::move(normalized), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nb = *self.inputs[2];
        const std::size_t rows = self.shape.rows, cols = self.shape.cols;
        const double n = static_cast<double>(cols);
        if (ng.requires_grad) {
          auto& g = ng.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % cols] += self.grad[i] * normalized[i];
        }
        if (nb.requires_grad) {
          auto& g = nb.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % cols] += self.grad[i];
        }
        if (nx.requires_grad) {
          auto& g = nx.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const std::size_t i = r * cols + c;
              const double dxhat = self.grad[i] * ng.value[c];
              mean_d += dxhat;
              mean_dx += dxhat * normalized[i];
            }
            mean_d /= n;
            mean_dx /= n;
            for (std::size_t c = 0; c < cols; ++c) {
              const std::size_t i = r * cols + c;
              const double dxhat = self.grad[i] * ng.value[c];
              g[i] += inv_std[r] * (dxhat - mean_d - normalized[i] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  const std::size_t d = table.cols();
  for (std::size_t id : ids) {
    if (id >= table.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    }
  }
  std::vector<double> v(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, v.begin() + static_cast<std::ptrdiff_t>(i * d));
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return Tensor::make_result({ids.size(), d}, std::move(v), {table}, [idx = std::move(idx)](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const std::size_t d = self.shape.cols;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < d; ++k) g[idx[i] * d + k] += self.grad[i * d + k];
  });
}

inline Tensor gather_rows(const Tensor& table, std::initializer_list<std::size_t> ids) {
  return gather_rows(table, std::span<const std::size_t>(ids.begin(), ids.size()));
}

/// Stacks tensors with equal column counts vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  std::vector<double> v;
  v.reserve(rows * cols);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  return Tensor::make_result({rows, cols}, std::move(v), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += in->value.size();
    }
  });
}

/// Places tensors with equal row counts side by side.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  std::vector<double> v(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) v[r * cols + offset + c] = pd[r * p.cols() + c];
    offset += p.cols();
  }
  return Tensor::make_result({rows, cols}, std::move(v), parts, [](detail::Node& self) {
    const std::size_t cols = self.shape.cols;
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t pc = in->shape.cols;
      if (in->requires_grad) {
        auto& g = in->ensure_grad();
        for (std::size_t r = 0; r < self.shape.rows; ++r)
          for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad[r * cols + offset + c];
      }
      offset += pc;
    }
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) throw DimensionError("slice_cols: range exceeds " + std::to_string(a.cols()) + " columns");
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> v(rows * count);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) v[r * count + c] = ad[r * cols + start + c];
  return Tensor::make_result({rows, count}, std::move(v), {a}, [start](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    const std::size_t count = self.shape.cols, cols = in.shape.cols;
    for (std::size_t r = 0; r < self.shape.rows; ++r)
      for (std::size_t c = 0; c < count; ++c) g[r * cols + start + c] += self.grad[r * count + c];
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) throw DimensionError("slice_rows: range exceeds " + std::to_string(a.rows()) + " rows");
  const std::size_t cols = a.cols();
  const auto ad = a.data();
  std::vector<double> v(ad.begin() + static_cast<std::ptrdiff_t>(start * cols),
                        ad.begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
  return Tensor::make_result({count, cols}, std::move(v), {a}, [start](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const std::size_t off = start * self.shape.cols;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

/// Row-wise inner products z_head · z_tail for each (head, tail) pair; n×1.
inline Tensor pair_dot(const Tensor& z, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  const std::size_t d = z.cols();
  std::vector<double> v(pairs.size());
  const auto zd = z.data();
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [h, t] = pairs[k];
    if (h >= z.rows() || t >= z.rows()) throw IndexError("pair_dot: node index out of range");
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += zd[h * d + c] * zd[t * d + c];
    v[k] = s;
  }
  std::vector<std::pair<std::size_t, std::size_t>> p(pairs.begin(), pairs.end());
  return Tensor::make_result({pairs.size(), 1}, std::move(v), {z}, [p = std::move(p)](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    const std::size_t d = in.shape.cols;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const auto [h, t] = p[k];
      for (std::size_t c = 0; c < d; ++c) {
        g[h * d + c] += self.grad[k] * in.value[t * d + c];
        g[t * d + c] += self.grad[k] * in.value[h * d + c];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Probabilistic kernels

/// mu + exp(clamp(log_sigma)) ⊙ eps with caller-supplied noise (frozen ε).
inline Tensor gaussian_reparam_sample(const Tensor& mu, const Tensor& log_sigma, std::span<const double> eps) {
  detail::require_same_shape(mu, log_sigma, "gaussian_reparam_sample");
  if (eps.size() != mu.size()) throw DimensionError("gaussian_reparam_sample: noise length mismatch");
  std::vector<double> v(mu.size());
  const auto md = mu.data();
  const auto ld = log_sigma.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = md[i] + std::exp(detail::clamp_log_sigma(ld[i])) * eps[i];
  std::vector<double> noise(eps.begin(), eps.end());
  return Tensor::make_result(mu.shape(), std::move(v), {mu, log_sigma}, [noise = std::move(noise)](detail::Node& self) {
    auto& nm = *self.inputs[0];
    auto& nl = *self.inputs[1];
    if (nm.requires_grad) {
      auto& g = nm.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nl.requires_grad) {
      auto& g = nl.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (detail::inside_clamp(nl.value[i])) g[i] += self.grad[i] * std::exp(nl.value[i]) * noise[i];
    }
  });
}

/// Draws ε ~ N(0, I) from `rng` and applies the reparameterization.
inline Tensor gaussian_reparam_sample(const Tensor& mu, const Tensor& log_sigma, Rng& rng) {
  std::vector<double> eps(mu.size());
  for (double& e : eps) e = rng.normal();
  return gaussian_reparam_sample(mu, log_sigma, eps);
}

/// KL(N(mu_q, σ_q²) ‖ N(mu_p, σ_p²)) summed over all entries; σ = exp(clamped log_sigma).
inline Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& log_sigma_q, const Tensor& mu_p,
                                const Tensor& log_sigma_p) {
  detail::require_same_shape(mu_q, log_sigma_q, "kl_diag_gaussians");
  detail::require_same_shape(mu_q, mu_p, "kl_diag_gaussians");
  detail::require_same_shape(mu_q, log_sigma_p, "kl_diag_gaussians");
  const auto mq = mu_q.data(), lq = log_sigma_q.data(), mp = mu_p.data(), lp = log_sigma_p.data();
  double total = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    const double a = detail::clamp_log_sigma(lq[i]);
    const double b = detail::clamp_log_sigma(lp[i]);
    const double diff = mq[i] - mp[i];
    total += b - a + (std::exp(2 * a) + diff * diff) / (2 * std::exp(2 * b)) - 0.5;
  }
  // Rounding can leave -1e-17 when the distributions coincide.
  total = std::max(total, 0.0);
  return Tensor::make_result({1, 1}, {total}, {mu_q, log_sigma_q, mu_p, log_sigma_p}, [](detail::Node& self) {
    auto& nmq = *self.inputs[0];
    auto& nlq = *self.inputs[1];
    auto& nmp = *self.inputs[2];
    auto& nlp = *self.inputs[3];
    const double g = self.grad[0];
    const std::size_t n = nmq.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double a = detail::clamp_log_sigma(nlq.value[i]);
      const double b = detail::clamp_log_sigma(nlp.value[i]);
      const double inv_vp = std::exp(-2 * b);
      const double diff = nmq.value[i] - nmp.value[i];
      if (nmq.requires_grad) nmq.ensure_grad()[i] += g * diff * inv_vp;
      if (nmp.requires_grad) nmp.ensure_grad()[i] -= g * diff * inv_vp;
      if (nlq.requires_grad && detail::inside_clamp(nlq.value[i]))
        nlq.ensure_grad()[i] += g * (-1.0 + std::exp(2 * a) * inv_vp);
      if (nlp.requires_grad && detail::inside_clamp(nlp.value[i]))
        nlp.ensure_grad()[i] += g * (1.0 - (std::exp(2 * a) + diff * diff) * inv_vp);
    }
  });
}

/// Mean over entries of −[w·y·log σ(x) + (1−y)·log(1−σ(x))].
inline Tensor weighted_bce_logits(const Tensor& logits, std::span<const double> targets, double pos_weight) {
  if (targets.size() != logits.size()) throw DimensionError("weighted_bce_logits: target length mismatch");
  if (logits.size() == 0) throw ContractError("weighted_bce_logits: empty input");
  const auto x = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double y = targets[i];
    if (y != 0.0 && y != 1.0) throw ContractError("weighted_bce_logits: targets must be 0 or 1");
    total += pos_weight * y * detail::softplus(-x[i]) + (1.0 - y) * detail::softplus(x[i]);
  }
  const double n = static_cast<double>(x.size());
  std::vector<double> t(targets.begin(), targets.end());
  return Tensor::make_result({1, 1}, {total / n}, {logits}, [t = std::move(t), pos_weight, n](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = detail::sigmoid(in.value[i]);
      g[i] += self.grad[0] * (-pos_weight * t[i] * (1.0 - s) + (1.0 - t[i]) * s) / n;
    }
  });
}

inline Tensor weighted_bce_logits(const Tensor& logits, const Tensor& targets, double pos_weight) {
  detail::require_same_shape(logits, targets, "weighted_bce_logits");
  return weighted_bce_logits(logits, targets.data(), pos_weight);
}

/// Mean negative log-likelihood of `targets[t]` under softmax(logits row t).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const Shape s = logits.shape();
  if (targets.size() != s.rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(s.rows) + " rows");
  }
  if (s.rows == 0) throw ContractError("cross_entropy: no positions");
  const auto x = logits.data();
  std::vector<double> probs(s.size());
  double total = 0.0;
  for (std::size_t r = 0; r < s.rows; ++r) {
    if (targets[r] >= s.cols) throw IndexError("cross_entropy: target id out of range");
    const double* row = x.data() + r * s.cols;
    const double mx = *std::max_element(row, row + s.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) z += std::exp(row[c] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t c = 0; c < s.cols; ++c) probs[r * s.cols + c] = std::exp(row[c] - log_z);
    total += log_z - row[targets[r]];
  }
  const double n = static_cast<double>(s.rows);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return Tensor::make_result({1, 1}, {total / n}, {logits},
                             [probs = std::move(probs), tg = std::move(tg), n](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               auto& g = in.ensure_grad();
                               const std::size_t cols = in.shape.cols;
                               const double scale = self.grad[0] / n;
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * probs[i];
                               for (std::size_t r = 0; r < tg.size(); ++r) g[r * cols + tg[r]] -= scale;
                             });
}

}  // namespace care
