#pragma once

// Tape-based reverse-mode differentiation over a fixed op set: matmul, add,
// mul, layer norm, sigmoid, GELU, gathers (embedding lookup), concatenation,
// masked row softmax and the attention ops in attention.hpp.

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "moc/core.hpp"

namespace moc {

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    require(!params_.count(name), "duplicate parameter name: " + name);
    grads_[name] = Tensor(init.shape());
    return params_[name] = std::move(init);
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), "unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "unknown parameter: " + name);
    return it->second;
  }

  Tensor& grad(const std::string& name) {
    auto it = grads_.find(name);
    require(it != grads_.end(), "unknown parameter: " + name);
    return it->second;
  }
  const Tensor& grad(const std::string& name) const {
    auto it = grads_.find(name);
    require(it != grads_.end(), "unknown parameter: " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [_, g] : grads_) std::fill(g.values().begin(), g.values().end(), 0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [n, _] : params_) out.push_back(n);
    return out;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.size();
    return n;
  }

  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> grads_;
};

class Tape;

// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self, const Tensor& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  // Leaf bound to a named parameter. Repeated lookups return the same node.
  Var param(const ParamStore& store, const std::string& name) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = push(store.at(name), record_, nullptr);
    param_nodes_.emplace(name, v.id());
    return v;
  }

  Var push(Tensor value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  void backward(const Var& loss) {
    require(record_, "backward on a non-recording tape");
    require(loss.value().size() == 1, "backward requires a scalar loss");
    require(std::isfinite(loss.value()[0]), "non-finite loss");
    grad(loss.id())[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i, n.grad);
    }
  }

  // Adds gradients of parameter leaves into the store's gradient buffers.
  void accumulate_grads(ParamStore& store) {
    for (const auto& [name, id] : param_nodes_) {
      const Tensor& g = nodes_[id].grad;
      if (g.empty()) continue;
      Tensor& dst = store.grad(name);
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
  bool record_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const auto& v : vs)
    if (v.needs_grad()) return true;
  return false;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (a.value().shape() != b.value().shape())
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.value().shape()) + " vs " +
                shape_str(b.value().shape()));
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = a.tape();
  require(a.cols() == b.rows(), "matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + ")");
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  out.mat().noalias() = a.value().mat() * b.value().mat();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) tp.grad(ia).mat().noalias() += g.mat() * tp.value(ib).mat().transpose();
    if (tp.needs_grad(ib)) tp.grad(ib).mat().noalias() += tp.value(ia).mat().transpose() * g.mat();
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = a.tape();
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  Tensor out = Tensor::matrix(a.rows(), b.rows());
  out.mat().noalias() = a.value().mat() * b.value().mat().transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) tp.grad(ia).mat().noalias() += g.mat() * tp.value(ib).mat();
    if (tp.needs_grad(ib)) tp.grad(ib).mat().noalias() += g.mat().transpose() * tp.value(ia).mat();
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a, b, "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) detail::add_into(tp.grad(ia), g);
    if (tp.needs_grad(ib)) detail::add_into(tp.grad(ib), g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) detail::add_into(tp.grad(ia), g);
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

// a[r, c] + row[c]
inline Var add_row(const Var& a, const Var& row) {
  require(row.value().size() == a.cols(), "add_row: width mismatch");
  Tensor out = a.value();
  out.mat().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(row.value().data(), static_cast<Eigen::Index>(a.cols()));
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().push(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) detail::add_into(tp.grad(ia), g);
    if (tp.needs_grad(ir)) {
      Tensor& gr = tp.grad(ir);
      const auto colsum = g.mat().colwise().sum();
      for (std::size_t c = 0; c < gr.size(); ++c) gr[c] += colsum(static_cast<Eigen::Index>(c));
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      const Tensor& vb = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      const Tensor& va = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

// a[r, c] * row[c]
inline Var mul_row(const Var& a, const Var& row) {
  require(row.value().size() == a.cols(), "mul_row: width mismatch");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = a.value();
  const Tensor& rv = row.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] *= rv[c];
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().push(std::move(out), detail::any_grad({a, row}), [ia, ir, n, m](Tape& tp, std::size_t, const Tensor& g) {
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      const Tensor& rv2 = tp.value(ir);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += g[r * m + c] * rv2[c];
    }
    if (tp.needs_grad(ir)) {
      Tensor& gr = tp.grad(ir);
      const Tensor& va = tp.value(ia);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gr[c] += g[r * m + c] * va[r * m + c];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia, s](Tape& tp, std::size_t, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(),
                       [ia](Tape& tp, std::size_t, const Tensor& g) { detail::add_into(tp.grad(ia), g); });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia](Tape& tp, std::size_t self, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    const Tensor& y = tp.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Tensor out = a.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia](Tape& tp, std::size_t, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    const Tensor& x = tp.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = x[i];
      const double d = 0.5 * (1.0 + std::erf(xi * kInvSqrt2)) + xi * kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
      ga[i] += g[i] * d;
    }
  });
}

// Row-wise normalization to zero mean / unit variance, no affine terms.
inline Var layer_norm(const Var& a, double eps = 1e-6) {
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = a.value();
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * m;
    double mean = 0.0;
    for (std::size_t c = 0; c < m; ++c) mean += row[c];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < m; ++c) row[c] = (row[c] - mean) * is;
  }
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(),
                       [ia, inv_std, n, m](Tape& tp, std::size_t self, const Tensor& g) {
                         Tensor& ga = tp.grad(ia);
                         const Tensor& y = tp.value(self);
                         for (std::size_t r = 0; r < n; ++r) {
                           const double* gr = g.data() + r * m;
                           const double* yr = y.data() + r * m;
                           double mg = 0.0, mgy = 0.0;
                           for (std::size_t c = 0; c < m; ++c) {
                             mg += gr[c];
                             mgy += gr[c] * yr[c];
                           }
                           mg /= static_cast<double>(m);
                           mgy /= static_cast<double>(m);
                           const double is = (*inv_std)[r];
                           for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += is * (gr[c] - mg - yr[c] * mgy);
                         }
                       });
}

// Selects rows (with repetition allowed) and the column range [c0, c1).
inline Var gather(const Var& a, std::vector<std::size_t> rows, std::size_t c0, std::size_t c1) {
  const std::size_t m = a.cols();
  require(c0 < c1 && c1 <= m, "gather: bad column range");
  const std::size_t w = c1 - c0;
  Tensor out = Tensor::matrix(rows.size(), w);
  const Tensor& av = a.value();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < a.rows(), "gather: row index out of range");
    std::copy_n(av.data() + rows[r] * m + c0, w, out.data() + r * w);
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return a.tape().push(std::move(out), a.needs_grad(), [ia, idx, m, c0, w](Tape& tp, std::size_t, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = ga.data() + (*idx)[r] * m + c0;
      const double* src = g.data() + r * w;
      for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
    }
  });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> rows) {
  return gather(a, std::move(rows), 0, a.cols());
}

inline Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
  std::vector<std::size_t> rows(r1 - r0);
  std::iota(rows.begin(), rows.end(), r0);
  return gather(a, std::move(rows), 0, a.cols());
}

inline Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
  std::vector<std::size_t> rows(a.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return gather(a, std::move(rows), c0, c1);
}

// Flat element gather into a column vector; negative indices read the constant 1.
inline Var gather_or_one(const Var& a, std::vector<std::ptrdiff_t> flat) {
  Tensor out = Tensor::matrix(flat.size(), 1);
  const Tensor& av = a.value();
  for (std::size_t k = 0; k < flat.size(); ++k) {
    require(flat[k] < static_cast<std::ptrdiff_t>(av.size()), "gather_or_one: index out of range");
    out[k] = flat[k] < 0 ? 1.0 : av[static_cast<std::size_t>(flat[k])];
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(std::move(flat));
  return a.tape().push(std::move(out), a.needs_grad(), [ia, idx](Tape& tp, std::size_t, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t k = 0; k < idx->size(); ++k)
      if ((*idx)[k] >= 0) ga[static_cast<std::size_t>((*idx)[k])] += g[k];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  bool ng = false;
  for (const auto& p : parts) {
    require(p.cols() == m, "concat_rows: width mismatch");
    n += p.rows();
    ng = ng || p.needs_grad();
  }
  Tensor out = Tensor::matrix(n, m);
  std::size_t off = 0;
  auto ids = std::make_shared<std::vector<std::size_t>>();
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.value().size();
    ids->push_back(p.id());
  }
  return t.push(std::move(out), ng, [ids](Tape& tp, std::size_t, const Tensor& g) {
    std::size_t o = 0;
    for (std::size_t id : *ids) {
      const std::size_t sz = tp.value(id).size();
      if (tp.needs_grad(id)) {
        Tensor& gp = tp.grad(id);
        for (std::size_t k = 0; k < sz; ++k) gp[k] += g[o + k];
      }
      o += sz;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  bool ng = false;
  for (const auto& p : parts) {
    require(p.rows() == n, "concat_cols: height mismatch");
    m += p.cols();
    ng = ng || p.needs_grad();
  }
  Tensor out = Tensor::matrix(n, m);
  auto ids = std::make_shared<std::vector<std::size_t>>();
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(p.value().data() + r * w, w, out.data() + r * m + c0);
    c0 += w;
    ids->push_back(p.id());
  }
  return t.push(std::move(out), ng, [ids, n, m](Tape& tp, std::size_t, const Tensor& g) {
    std::size_t c = 0;
    for (std::size_t id : *ids) {
      const std::size_t w = tp.value(id).cols();
      if (tp.needs_grad(id)) {
        Tensor& gp = tp.grad(id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t k = 0; k < w; ++k) gp[r * w + k] += g[r * m + c + k];
      }
      c += w;
    }
  });
}

// Row softmax restricted to entries where mask is nonzero; other entries are 0.
// Rows with no admissible entry produce a zero row.
inline Var softmax_rows(const Var& a, std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr) {
  const std::size_t n = a.rows(), m = a.cols();
  require(!mask || mask->size() == n * m, "softmax_rows: mask shape mismatch");
  Tensor out = Tensor::matrix(n, m);
  const Tensor& x = a.value();
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c)
      if (!mask || (*mask)[r * m + c]) mx = std::max(mx, x[r * m + c]);
    if (!std::isfinite(mx)) continue;
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c)
      if (!mask || (*mask)[r * m + c]) s += (out[r * m + c] = std::exp(x[r * m + c] - mx));
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] /= s;
  }
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), a.needs_grad(), [ia, n, m](Tape& tp, std::size_t self, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    const Tensor& y = tp.value(self);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * y[r * m + c];
      for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += y[r * m + c] * (g[r * m + c] - dot);
    }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().push(Tensor({1, 1}, s), a.needs_grad(), [ia](Tape& tp, std::size_t, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (auto& v : ga.values()) v += g[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Mean over all elements of (a - b)^2.
inline Var mse(const Var& a, const Var& b) {
  detail::check_same(a, b, "mse");
  const std::size_t n = a.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push(Tensor({1, 1}, s / static_cast<double>(n)), detail::any_grad({a, b}),
                       [ia, ib, n](Tape& tp, std::size_t, const Tensor& g) {
                         const double k = 2.0 * g[0] / static_cast<double>(n);
                         const Tensor& va = tp.value(ia);
                         const Tensor& vb = tp.value(ib);
                         if (tp.needs_grad(ia)) {
                           Tensor& ga = tp.grad(ia);
                           for (std::size_t i = 0; i < n; ++i) ga[i] += k * (va[i] - vb[i]);
                         }
                         if (tp.needs_grad(ib)) {
                           Tensor& gb = tp.grad(ib);
                           for (std::size_t i = 0; i < n; ++i) gb[i] -= k * (va[i] - vb[i]);
                         }
                       });
}

inline Var linear(const Var& x, const Var& w, const Var& b) { return add_row(matmul(x, w), b); }

}  // namespace moc
