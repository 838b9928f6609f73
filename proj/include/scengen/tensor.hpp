#pragma once

#include <Eigen/Dense>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>

#include "scengen/common.hpp"

// Reverse-mode autodiff on a flat tape. Tensors are row-major 2-D blocks of
// doubles; ops record a backward closure at creation. backward() seeds the
// scalar loss with 1 and sweeps the tape once in reverse creation order,
// which is a valid topological order, so every node's backward runs at most
// once. Gradients accumulate additively: running backward twice on the same
// tape doubles them, and parameters used at several tape sites receive the
// sum over sites.

namespace scengen::ad {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

enum class Init { kFanIn, kZeros, kOnes, kConstant };

struct Parameter {
  std::string name;
  int rows = 0, cols = 0;
  Init init = Init::kFanIn;
  double init_value = 0.0;
  std::vector<double> value;
  std::vector<double> grad;  // persistent accumulator, zeroed by the optimizer
  std::vector<double> m, v;  // Adam moments

  int size() const { return rows * cols; }
};

class ParameterStore {
 public:
  Parameter& create(const std::string& name, int rows, int cols,
                    Init init = Init::kFanIn, double init_value = 0.0) {
    if (index_.count(name))
      throw ValidationError("ParameterStore: duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->rows = rows;
    p->cols = cols;
    p->init = init;
    p->init_value = init_value;
    p->value.assign(static_cast<size_t>(rows) * cols, 0.0);
    p->grad.assign(p->value.size(), 0.0);
    p->m.assign(p->value.size(), 0.0);
    p->v.assign(p->value.size(), 0.0);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

  // Fan-in-scaled uniform for weights, fixed fills otherwise, in registration
  // order so a given seed always produces the same initialization.
  void init_values(Rng& rng) {
    for (auto& p : params_) {
      switch (p->init) {
        case Init::kFanIn: {
          const double bound = 1.0 / std::sqrt(std::max(1, p->rows));
          for (auto& v : p->value) v = rng.uniform(-bound, bound);
          break;
        }
        case Init::kZeros:
          std::fill(p->value.begin(), p->value.end(), 0.0);
          break;
        case Init::kOnes:
          std::fill(p->value.begin(), p->value.end(), 1.0);
          break;
        case Init::kConstant:
          std::fill(p->value.begin(), p->value.end(), p->init_value);
          break;
      }
    }
  }

  void zero_grads() {
    for (auto& p : params_)
      std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  // FNV over raw value bytes; used by freeze contracts ("training stage X
  // must not touch model Y").
  uint64_t checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) {
      for (double v : p->value) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
          h ^= b;
          h *= 1099511628211ull;
        }
      }
    }
    return h;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, size_t> index_;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  inline int rows() const;
  inline int cols() const;
  int size() const { return rows() * cols(); }
  inline const std::vector<double>& val() const;
  inline const std::vector<double>& grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct Node {
  int rows = 0, cols = 0;
  std::vector<double> val;
  std::vector<double> grad;  // allocated lazily during backward
  std::function<void(Tape&, int)> backward;
  Parameter* param = nullptr;
};

class Tape {
 public:
  void clear() { nodes_.clear(); }
  int size() const { return static_cast<int>(nodes_.size()); }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  Tensor alloc(int rows, int cols) {
    if (rows <= 0 || cols <= 0)
      throw ValidationError("Tape::alloc: non-positive shape");
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.val.assign(static_cast<size_t>(rows) * cols, 0.0);
    nodes_.push_back(std::move(n));
    return Tensor(this, size() - 1);
  }

  Tensor constant(int rows, int cols, const double* data) {
    Tensor t = alloc(rows, cols);
    std::copy(data, data + static_cast<size_t>(rows) * cols,
              node(t.id()).val.begin());
    return t;
  }

  Tensor constant(int rows, int cols, const std::vector<double>& data) {
    if (data.size() != static_cast<size_t>(rows) * cols)
      throw ValidationError("Tape::constant: data size mismatch");
    return constant(rows, cols, data.data());
  }

  Tensor scalar(double v) { return constant(1, 1, &v); }

  // Leaf bound to a parameter: values snapshot at creation, gradients flow
  // into Parameter::grad during backward.
  Tensor use(Parameter& p) {
    Tensor t = constant(p.rows, p.cols, p.value.data());
    node(t.id()).param = &p;
    return t;
  }

  void ensure_grad(int id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
  }

  void backward(const Tensor& loss) {
    if (!loss.valid() || loss.tape() != this)
      throw ValidationError("Tape::backward: loss is not on this tape");
    Node& ln = node(loss.id());
    if (ln.rows * ln.cols != 1)
      throw ValidationError("Tape::backward: loss must be a scalar");
    ensure_grad(loss.id());
    node(loss.id()).grad[0] += 1.0;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        auto& pg = n.param->grad;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

  // Gradient of a tensor after backward; zeros if it never received any.
  std::vector<double> grad_of(const Tensor& t) {
    const Node& n = node(t.id());
    if (n.grad.empty()) return std::vector<double>(n.val.size(), 0.0);
    return n.grad;
  }

 private:
  std::vector<Node> nodes_;
};

inline int Tensor::rows() const { return tape_->node(id_).rows; }
inline int Tensor::cols() const { return tape_->node(id_).cols; }
inline const std::vector<double>& Tensor::val() const {
  return tape_->node(id_).val;
}
inline const std::vector<double>& Tensor::grad() const {
  return tape_->node(id_).grad;
}

namespace detail {

inline Tape& same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw ValidationError("tensor op: operands live on different tapes");
  return *a.tape();
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  Tape& t = *a.tape();
  Tensor out = t.alloc(a.rows(), a.cols());
  {
    const auto& av = t.node(a.id()).val;
    auto& ov = t.node(out.id()).val;
    for (size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
  }
  const int aid = a.id();
  t.node(out.id()).backward = [aid, df](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    Node& o = tp.node(oid);
    Node& an = tp.node(aid);
    for (size_t i = 0; i < an.val.size(); ++i)
      an.grad[i] += df(an.val[i], o.val[i]) * o.grad[i];
  };
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows())
    throw ValidationError("matmul: inner dimensions disagree");
  Tensor out = t.alloc(a.rows(), b.cols());
  {
    CMatMap A(t.node(a.id()).val.data(), a.rows(), a.cols());
    CMatMap B(t.node(b.id()).val.data(), b.rows(), b.cols());
    MatMap C(t.node(out.id()).val.data(), a.rows(), b.cols());
    C.noalias() = A * B;
  }
  const int aid = a.id(), bid = b.id();
  t.node(out.id()).backward = [aid, bid](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    tp.ensure_grad(bid);
    Node& o = tp.node(oid);
    Node& an = tp.node(aid);
    Node& bn = tp.node(bid);
    CMatMap G(o.grad.data(), o.rows, o.cols);
    CMatMap A(an.val.data(), an.rows, an.cols);
    CMatMap B(bn.val.data(), bn.rows, bn.cols);
    MatMap GA(an.grad.data(), an.rows, an.cols);
    MatMap GB(bn.grad.data(), bn.rows, bn.cols);
    GA.noalias() += G * B.transpose();
    GB.noalias() += A.transpose() * G;
  };
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("add: shape mismatch");
  Tensor out = t.alloc(a.rows(), a.cols());
  {
    const auto& av = t.node(a.id()).val;
    const auto& bv = t.node(b.id()).val;
    auto& ov = t.node(out.id()).val;
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
  }
  const int aid = a.id(), bid = b.id();
  t.node(out.id()).backward = [aid, bid](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    tp.ensure_grad(bid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    auto& gb = tp.node(bid).grad;
    for (size_t i = 0; i < o.grad.size(); ++i) {
      ga[i] += o.grad[i];
      gb[i] += o.grad[i];
    }
  };
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("sub: shape mismatch");
  Tensor out = t.alloc(a.rows(), a.cols());
  {
    const auto& av = t.node(a.id()).val;
    const auto& bv = t.node(b.id()).val;
    auto& ov = t.node(out.id()).val;
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
  }
  const int aid = a.id(), bid = b.id();
  t.node(out.id()).backward = [aid, bid](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    tp.ensure_grad(bid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    auto& gb = tp.node(bid).grad;
    for (size_t i = 0; i < o.grad.size(); ++i) {
      ga[i] += o.grad[i];
      gb[i] -= o.grad[i];
    }
  };
  return out;
}

// Elementwise product. mul(x, x) correctly accumulates both slots, giving
// the 2x factor of a square.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("mul: shape mismatch");
  Tensor out = t.alloc(a.rows(), a.cols());
  {
    const auto& av = t.node(a.id()).val;
    const auto& bv = t.node(b.id()).val;
    auto& ov = t.node(out.id()).val;
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
  }
  const int aid = a.id(), bid = b.id();
  t.node(out.id()).backward = [aid, bid](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    tp.ensure_grad(bid);
    Node& o = tp.node(oid);
    Node& an = tp.node(aid);
    Node& bn = tp.node(bid);
    for (size_t i = 0; i < o.grad.size(); ++i) {
      an.grad[i] += bn.val[i] * o.grad[i];
      bn.grad[i] += an.val[i] * o.grad[i];
    }
  };
  return out;
}

// a[m x n] + bias[1 x n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  Tape& t = detail::same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ValidationError("add_rowvec: bias must be [1 x cols]");
  Tensor out = t.alloc(a.rows(), a.cols());
  {
    const auto& av = t.node(a.id()).val;
    const auto& bv = t.node(bias.id()).val;
    auto& ov = t.node(out.id()).val;
    const int n = a.cols();
    for (int r = 0; r < a.rows(); ++r)
      for (int c = 0; c < n; ++c)
        ov[static_cast<size_t>(r) * n + c] =
            av[static_cast<size_t>(r) * n + c] + bv[static_cast<size_t>(c)];
  }
  const int aid = a.id(), bid = bias.id();
  t.node(out.id()).backward = [aid, bid](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    tp.ensure_grad(bid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    auto& gb = tp.node(bid).grad;
    const int n = o.cols;
    for (int r = 0; r < o.rows; ++r)
      for (int c = 0; c < n; ++c) {
        const double g = o.grad[static_cast<size_t>(r) * n + c];
        ga[static_cast<size_t>(r) * n + c] += g;
        gb[static_cast<size_t>(c)] += g;
      }
  };
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; },
                       [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; },
                       [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sum_all(const Tensor& a) {
  Tape& t = *a.tape();
  Tensor out = t.alloc(1, 1);
  {
    const auto& av = t.node(a.id()).val;
    double s = 0.0;
    for (double v : av) s += v;
    t.node(out.id()).val[0] = s;
  }
  const int aid = a.id();
  t.node(out.id()).backward = [aid](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    const double g = tp.node(oid).grad[0];
    for (auto& x : tp.node(aid).grad) x += g;
  };
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / a.size());
}

// sum_i w[i] * a_flat[i] -> scalar. Used for masked reductions.
inline Tensor weighted_sum(const Tensor& a, std::vector<double> w) {
  Tape& t = *a.tape();
  if (w.size() != static_cast<size_t>(a.size()))
    throw ValidationError("weighted_sum: weight size mismatch");
  Tensor out = t.alloc(1, 1);
  {
    const auto& av = t.node(a.id()).val;
    double s = 0.0;
    for (size_t i = 0; i < av.size(); ++i) s += w[i] * av[i];
    t.node(out.id()).val[0] = s;
  }
  const int aid = a.id();
  auto ws = std::make_shared<std::vector<double>>(std::move(w));
  t.node(out.id()).backward = [aid, ws](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    const double g = tp.node(oid).grad[0];
    auto& ga = tp.node(aid).grad;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*ws)[i] * g;
  };
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows())
    throw ValidationError("concat_cols: row count mismatch");
  const int na = a.cols(), nb = b.cols();
  Tensor out = t.alloc(a.rows(), na + nb);
  {
    const auto& av = t.node(a.id()).val;
    const auto& bv = t.node(b.id()).val;
    auto& ov = t.node(out.id()).val;
    for (int r = 0; r < a.rows(); ++r) {
      std::copy(av.begin() + static_cast<size_t>(r) * na,
                av.begin() + static_cast<size_t>(r + 1) * na,
                ov.begin() + static_cast<size_t>(r) * (na + nb));
      std::copy(bv.begin() + static_cast<size_t>(r) * nb,
                bv.begin() + static_cast<size_t>(r + 1) * nb,
                ov.begin() + static_cast<size_t>(r) * (na + nb) + na);
    }
  }
  const int aid = a.id(), bid = b.id();
  t.node(out.id()).backward = [aid, bid, na, nb](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    tp.ensure_grad(bid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    auto& gb = tp.node(bid).grad;
    for (int r = 0; r < o.rows; ++r)
      for (int c = 0; c < na + nb; ++c) {
        const double g = o.grad[static_cast<size_t>(r) * (na + nb) + c];
        if (c < na)
          ga[static_cast<size_t>(r) * na + c] += g;
        else
          gb[static_cast<size_t>(r) * nb + (c - na)] += g;
      }
  };
  return out;
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  auto it = parts.begin();
  if (it == parts.end()) throw ValidationError("concat_cols: empty list");
  Tensor acc = *it++;
  for (; it != parts.end(); ++it) acc = concat_cols(acc, *it);
  return acc;
}

inline Tensor slice_cols(const Tensor& a, int c0, int len) {
  Tape& t = *a.tape();
  if (c0 < 0 || len <= 0 || c0 + len > a.cols())
    throw ValidationError("slice_cols: range out of bounds");
  Tensor out = t.alloc(a.rows(), len);
  {
    const auto& av = t.node(a.id()).val;
    auto& ov = t.node(out.id()).val;
    const int n = a.cols();
    for (int r = 0; r < a.rows(); ++r)
      std::copy(av.begin() + static_cast<size_t>(r) * n + c0,
                av.begin() + static_cast<size_t>(r) * n + c0 + len,
                ov.begin() + static_cast<size_t>(r) * len);
  }
  const int aid = a.id(), n = a.cols();
  t.node(out.id()).backward = [aid, c0, len, n](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    for (int r = 0; r < o.rows; ++r)
      for (int c = 0; c < len; ++c)
        ga[static_cast<size_t>(r) * n + c0 + c] +=
            o.grad[static_cast<size_t>(r) * len + c];
  };
  return out;
}

inline Tensor gather_rows(const Tensor& a, std::vector<int> idx) {
  Tape& t = *a.tape();
  for (int i : idx)
    if (i < 0 || i >= a.rows())
      throw ValidationError("gather_rows: index out of range");
  const int n = a.cols();
  Tensor out = t.alloc(static_cast<int>(idx.size()), n);
  {
    const auto& av = t.node(a.id()).val;
    auto& ov = t.node(out.id()).val;
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy(av.begin() + static_cast<size_t>(idx[r]) * n,
                av.begin() + static_cast<size_t>(idx[r] + 1) * n,
                ov.begin() + r * n);
  }
  const int aid = a.id();
  auto is = std::make_shared<std::vector<int>>(std::move(idx));
  t.node(out.id()).backward = [aid, is, n](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    for (size_t r = 0; r < is->size(); ++r)
      for (int c = 0; c < n; ++c)
        ga[static_cast<size_t>((*is)[r]) * n + c] += o.grad[r * n + c];
  };
  return out;
}

inline Tensor repeat_row(const Tensor& a, int times) {
  if (a.rows() != 1) throw ValidationError("repeat_row: input must have 1 row");
  return gather_rows(a, std::vector<int>(static_cast<size_t>(times), 0));
}

// Mean of the rows of e assigned to each segment; empty segments yield zeros.
inline Tensor segment_mean_rows(const Tensor& e, std::vector<int> seg,
                                int nseg) {
  Tape& t = *e.tape();
  if (seg.size() != static_cast<size_t>(e.rows()))
    throw ValidationError("segment_mean_rows: segment list size mismatch");
  for (int s : seg)
    if (s < 0 || s >= nseg)
      throw ValidationError("segment_mean_rows: segment id out of range");
  const int n = e.cols();
  Tensor out = t.alloc(nseg, n);
  auto counts = std::make_shared<std::vector<double>>(nseg, 0.0);
  {
    for (int s : seg) (*counts)[static_cast<size_t>(s)] += 1.0;
    const auto& ev = t.node(e.id()).val;
    auto& ov = t.node(out.id()).val;
    for (size_t r = 0; r < seg.size(); ++r) {
      const double inv = 1.0 / (*counts)[static_cast<size_t>(seg[r])];
      for (int c = 0; c < n; ++c)
        ov[static_cast<size_t>(seg[r]) * n + c] += ev[r * n + c] * inv;
    }
  }
  const int eid = e.id();
  auto ss = std::make_shared<std::vector<int>>(std::move(seg));
  t.node(out.id()).backward = [eid, ss, counts, n](Tape& tp, int oid) {
    tp.ensure_grad(eid);
    Node& o = tp.node(oid);
    auto& ge = tp.node(eid).grad;
    for (size_t r = 0; r < ss->size(); ++r) {
      const double inv = 1.0 / (*counts)[static_cast<size_t>((*ss)[r])];
      for (int c = 0; c < n; ++c)
        ge[r * n + c] += o.grad[static_cast<size_t>((*ss)[r]) * n + c] * inv;
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Tensor tanh_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu_t(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor relu_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

inline Tensor sin_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::sin(x); },
                       [](double x, double) { return std::cos(x); });
}

inline Tensor cos_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::cos(x); },
                       [](double x, double) { return -std::sin(x); });
}

inline Tensor sqrt_t(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}

inline Tensor square_t(const Tensor& a) { return mul(a, a); }

// Derivative defined as 0 exactly at and beyond the bounds.
inline Tensor clamp_t(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Group normalization over column groups of each row, biased variance,
// no learned affine (modulation is applied outside).
// ---------------------------------------------------------------------------

inline Tensor group_norm(const Tensor& a, int groups, double eps = 1e-5) {
  Tape& t = *a.tape();
  const int m = a.rows(), n = a.cols();
  if (groups <= 0 || n % groups != 0)
    throw ValidationError("group_norm: width not divisible by group count");
  const int gs = n / groups;
  Tensor out = t.alloc(m, n);
  auto inv_std = std::make_shared<std::vector<double>>(
      static_cast<size_t>(m) * groups, 0.0);
  {
    const auto& av = t.node(a.id()).val;
    auto& ov = t.node(out.id()).val;
    for (int r = 0; r < m; ++r) {
      for (int g = 0; g < groups; ++g) {
        const size_t base = static_cast<size_t>(r) * n + static_cast<size_t>(g) * gs;
        double mu = 0.0;
        for (int i = 0; i < gs; ++i) mu += av[base + i];
        mu /= gs;
        double var = 0.0;
        for (int i = 0; i < gs; ++i) {
          const double d = av[base + i] - mu;
          var += d * d;
        }
        var /= gs;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r) * groups + g] = inv;
        for (int i = 0; i < gs; ++i) ov[base + i] = (av[base + i] - mu) * inv;
      }
    }
  }
  const int aid = a.id();
  t.node(out.id()).backward = [aid, groups, gs, inv_std](Tape& tp, int oid) {
    tp.ensure_grad(aid);
    Node& o = tp.node(oid);
    auto& ga = tp.node(aid).grad;
    const int n = o.cols;
    for (int r = 0; r < o.rows; ++r) {
      for (int g = 0; g < groups; ++g) {
        const size_t base = static_cast<size_t>(r) * n + static_cast<size_t>(g) * gs;
        const double inv = (*inv_std)[static_cast<size_t>(r) * groups + g];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int i = 0; i < gs; ++i) {
          sum_g += o.grad[base + i];
          sum_gx += o.grad[base + i] * o.val[base + i];
        }
        for (int i = 0; i < gs; ++i) {
          const double xhat = o.val[base + i];
          ga[base + i] +=
              inv / gs * (gs * o.grad[base + i] - sum_g - xhat * sum_gx);
        }
      }
    }
  };
  return out;
}

}  // namespace scengen::ad
