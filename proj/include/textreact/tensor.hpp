#pragma once

// Tape-based reverse-mode autograd over dense 2-D tensors. Creation order
// is the topological order; backward walks the tape in reverse. Matmul
// kernels go through Eigen (single-threaded, deterministic).

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "textreact/rng.hpp"

namespace textreact::nn {

enum class NnErrorKind {
  ShapeMismatch,
  SequenceTooLong,
  IdOutOfRange,
  NonScalarLoss,
  AllPositionsIgnored,
  NoMaskedPositions,
  EmptyInput,
};

struct NnError : std::runtime_error {
  NnErrorKind kind;
  NnError(NnErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

template <typename T>
struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<T> val;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string name;  // nonempty for parameters
  std::function<void()> backprop;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

template <typename T>
using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
EigenMap<T> as_mat(std::vector<T>& v, int rows, int cols) {
  return EigenMap<T>(v.data(), rows, cols);
}
template <typename T>
ConstEigenMap<T> as_cmat(const std::vector<T>& v, int rows, int cols) {
  return ConstEigenMap<T>(v.data(), rows, cols);
}

template <typename T>
class Tape {
 public:
  Node<T>* param(const std::string& name, int rows, int cols, bool requires_grad = true) {
    auto n = std::make_unique<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->val.assign(n->size(), T(0));
    n->grad.assign(n->size(), T(0));
    n->requires_grad = requires_grad;
    n->name = name;
    params_.push_back(std::move(n));
    param_index_[name] = params_.back().get();
    return params_.back().get();
  }

  Node<T>* temp(int rows, int cols, bool requires_grad) {
    auto n = std::make_unique<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->val.assign(n->size(), T(0));
    if (requires_grad) n->grad.assign(n->size(), T(0));
    n->requires_grad = requires_grad;
    temps_.push_back(std::move(n));
    return temps_.back().get();
  }

  // reverse-mode accumulation; zeroes every gradient first
  void backward(Node<T>* loss) {
    if (loss->rows != 1 || loss->cols != 1)
      throw NnError(NnErrorKind::NonScalarLoss, "backward: loss must be scalar");
    zero_grad();
    if (!loss->requires_grad) return;
    loss->grad[0] = T(1);
    for (auto it = temps_.rbegin(); it != temps_.rend(); ++it) {
      Node<T>* n = it->get();
      if (n->requires_grad && n->backprop) n->backprop();
    }
  }

  void zero_grad() {
    for (auto& n : params_) std::fill(n->grad.begin(), n->grad.end(), T(0));
    for (auto& n : temps_)
      if (n->requires_grad) std::fill(n->grad.begin(), n->grad.end(), T(0));
  }

  void clear_temps() { temps_.clear(); }

  std::vector<Node<T>*> params() const {
    std::vector<Node<T>*> out;
    out.reserve(params_.size());
    for (auto& n : params_) out.push_back(n.get());
    return out;
  }

  Node<T>* find_param(const std::string& name) const {
    auto it = param_index_.find(name);
    return it == param_index_.end() ? nullptr : it->second;
  }

  std::size_t num_temps() const { return temps_.size(); }

 private:
  std::deque<std::unique_ptr<Node<T>>> params_;
  std::deque<std::unique_ptr<Node<T>>> temps_;
  std::unordered_map<std::string, Node<T>*> param_index_;
};

// ------------------------------------------------------------------ ops

namespace ops {

template <typename T>
void check_same_shape(const Node<T>* a, const Node<T>* b, const char* what) {
  if (a->rows != b->rows || a->cols != b->cols)
    throw NnError(NnErrorKind::ShapeMismatch, std::string(what) + ": shape mismatch");
}

// C = A * B
template <typename T>
Node<T>* matmul(Tape<T>& t, Node<T>* a, Node<T>* b) {
  if (a->cols != b->rows)
    throw NnError(NnErrorKind::ShapeMismatch, "matmul: inner dims differ");
  Node<T>* c = t.temp(a->rows, b->cols, a->requires_grad || b->requires_grad);
  as_mat(c->val, c->rows, c->cols).noalias() =
      as_cmat(a->val, a->rows, a->cols) * as_cmat(b->val, b->rows, b->cols);
  if (c->requires_grad)
    c->backprop = [a, b, c]() {
      auto gc = as_cmat(c->grad, c->rows, c->cols);
      if (a->requires_grad)
        as_mat(a->grad, a->rows, a->cols).noalias() +=
            gc * as_cmat(b->val, b->rows, b->cols).transpose();
      if (b->requires_grad)
        as_mat(b->grad, b->rows, b->cols).noalias() +=
            as_cmat(a->val, a->rows, a->cols).transpose() * gc;
    };
  return c;
}

// C = A * B^T   (A: m x k, B: n x k -> m x n)
template <typename T>
Node<T>* matmul_nt(Tape<T>& t, Node<T>* a, Node<T>* b) {
  if (a->cols != b->cols)
    throw NnError(NnErrorKind::ShapeMismatch, "matmul_nt: inner dims differ");
  Node<T>* c = t.temp(a->rows, b->rows, a->requires_grad || b->requires_grad);
  as_mat(c->val, c->rows, c->cols).noalias() =
      as_cmat(a->val, a->rows, a->cols) * as_cmat(b->val, b->rows, b->cols).transpose();
  if (c->requires_grad)
    c->backprop = [a, b, c]() {
      auto gc = as_cmat(c->grad, c->rows, c->cols);
      if (a->requires_grad)
        as_mat(a->grad, a->rows, a->cols).noalias() += gc * as_cmat(b->val, b->rows, b->cols);
      if (b->requires_grad)
        as_mat(b->grad, b->rows, b->cols).noalias() +=
            gc.transpose() * as_cmat(a->val, a->rows, a->cols);
    };
  return c;
}

template <typename T>
Node<T>* add(Tape<T>& t, Node<T>* a, Node<T>* b) {
  check_same_shape(a, b, "add");
  Node<T>* c = t.temp(a->rows, a->cols, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < c->size(); ++i) c->val[i] = a->val[i] + b->val[i];
  if (c->requires_grad)
    c->backprop = [a, b, c]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < c->size(); ++i) b->grad[i] += c->grad[i];
    };
  return c;
}

// A + row-broadcast bias (1 x cols)
template <typename T>
Node<T>* add_rowwise(Tape<T>& t, Node<T>* a, Node<T>* bias) {
  if (bias->rows != 1 || bias->cols != a->cols)
    throw NnError(NnErrorKind::ShapeMismatch, "add_rowwise: bias shape");
  Node<T>* c = t.temp(a->rows, a->cols, a->requires_grad || bias->requires_grad);
  for (int r = 0; r < a->rows; ++r)
    for (int j = 0; j < a->cols; ++j)
      c->val[r * a->cols + j] = a->val[r * a->cols + j] + bias->val[j];
  if (c->requires_grad)
    c->backprop = [a, bias, c]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i];
      if (bias->requires_grad)
        for (int r = 0; r < c->rows; ++r)
          for (int j = 0; j < c->cols; ++j) bias->grad[j] += c->grad[r * c->cols + j];
    };
  return c;
}

template <typename T>
Node<T>* scale(Tape<T>& t, Node<T>* a, double s) {
  Node<T>* c = t.temp(a->rows, a->cols, a->requires_grad);
  for (std::size_t i = 0; i < c->size(); ++i) c->val[i] = a->val[i] * static_cast<T>(s);
  if (c->requires_grad)
    c->backprop = [a, c, s]() {
      for (std::size_t i = 0; i < c->size(); ++i)
        a->grad[i] += c->grad[i] * static_cast<T>(s);
    };
  return c;
}

template <typename T>
Node<T>* slice_cols(Tape<T>& t, Node<T>* a, int c0, int len) {
  if (c0 < 0 || c0 + len > a->cols)
    throw NnError(NnErrorKind::ShapeMismatch, "slice_cols: out of range");
  Node<T>* c = t.temp(a->rows, len, a->requires_grad);
  for (int r = 0; r < a->rows; ++r)
    for (int j = 0; j < len; ++j) c->val[r * len + j] = a->val[r * a->cols + c0 + j];
  if (c->requires_grad)
    c->backprop = [a, c, c0, len]() {
      for (int r = 0; r < c->rows; ++r)
        for (int j = 0; j < len; ++j)
          a->grad[r * a->cols + c0 + j] += c->grad[r * len + j];
    };
  return c;
}

template <typename T>
Node<T>* slice_rows(Tape<T>& t, Node<T>* a, int r0, int len) {
  if (r0 < 0 || r0 + len > a->rows)
    throw NnError(NnErrorKind::ShapeMismatch, "slice_rows: out of range");
  Node<T>* c = t.temp(len, a->cols, a->requires_grad);
  std::copy(a->val.begin() + static_cast<std::size_t>(r0) * a->cols,
            a->val.begin() + static_cast<std::size_t>(r0 + len) * a->cols, c->val.begin());
  if (c->requires_grad)
    c->backprop = [a, c, r0]() {
      for (std::size_t i = 0; i < c->size(); ++i)
        a->grad[static_cast<std::size_t>(r0) * a->cols + i] += c->grad[i];
    };
  return c;
}

template <typename T>
Node<T>* concat_cols(Tape<T>& t, const std::vector<Node<T>*>& parts) {
  if (parts.empty()) throw NnError(NnErrorKind::EmptyInput, "concat_cols: no parts");
  int rows = parts[0]->rows, cols = 0;
  bool rg = false;
  for (auto* p : parts) {
    if (p->rows != rows) throw NnError(NnErrorKind::ShapeMismatch, "concat_cols: rows");
    cols += p->cols;
    rg = rg || p->requires_grad;
  }
  Node<T>* c = t.temp(rows, cols, rg);
  int off = 0;
  for (auto* p : parts) {
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < p->cols; ++j) c->val[r * cols + off + j] = p->val[r * p->cols + j];
    off += p->cols;
  }
  if (rg)
    c->backprop = [parts, c]() {
      int off = 0;
      for (auto* p : parts) {
        if (p->requires_grad)
          for (int r = 0; r < c->rows; ++r)
            for (int j = 0; j < p->cols; ++j)
              p->grad[r * p->cols + j] += c->grad[r * c->cols + off + j];
        off += p->cols;
      }
    };
  return c;
}

template <typename T>
Node<T>* concat_rows(Tape<T>& t, const std::vector<Node<T>*>& parts) {
  if (parts.empty()) throw NnError(NnErrorKind::EmptyInput, "concat_rows: no parts");
  int cols = parts[0]->cols, rows = 0;
  bool rg = false;
  for (auto* p : parts) {
    if (p->cols != cols) throw NnError(NnErrorKind::ShapeMismatch, "concat_rows: cols");
    rows += p->rows;
    rg = rg || p->requires_grad;
  }
  Node<T>* c = t.temp(rows, cols, rg);
  std::size_t off = 0;
  for (auto* p : parts) {
    std::copy(p->val.begin(), p->val.end(), c->val.begin() + off);
    off += p->size();
  }
  if (rg)
    c->backprop = [parts, c]() {
      std::size_t off = 0;
      for (auto* p : parts) {
        if (p->requires_grad)
          for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += c->grad[off + i];
        off += p->size();
      }
    };
  return c;
}

// (v - mean)/sqrt(var + eps) * gain + bias, rowwise; gain/bias are 1 x cols
template <typename T>
Node<T>* layer_norm(Tape<T>& t, Node<T>* a, Node<T>* gain, Node<T>* bias,
                    double eps = 1e-5) {
  if (gain->cols != a->cols || bias->cols != a->cols)
    throw NnError(NnErrorKind::ShapeMismatch, "layer_norm: gain/bias shape");
  const int C = a->cols;
  Node<T>* c =
      t.temp(a->rows, C, a->requires_grad || gain->requires_grad || bias->requires_grad);
  // cache normalized values and inverse stddev per row for backward
  auto xhat = std::make_shared<std::vector<T>>(a->size());
  auto inv_std = std::make_shared<std::vector<T>>(a->rows);
  for (int r = 0; r < a->rows; ++r) {
    const T* x = &a->val[static_cast<std::size_t>(r) * C];
    T mean = 0;
    for (int j = 0; j < C; ++j) mean += x[j];
    mean /= static_cast<T>(C);
    T var = 0;
    for (int j = 0; j < C; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<T>(C);
    const T istd = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = istd;
    for (int j = 0; j < C; ++j) {
      const T xh = (x[j] - mean) * istd;
      (*xhat)[static_cast<std::size_t>(r) * C + j] = xh;
      c->val[static_cast<std::size_t>(r) * C + j] = xh * gain->val[j] + bias->val[j];
    }
  }
  if (c->requires_grad)
    c->backprop = [a, gain, bias, c, xhat, inv_std, C]() {
      for (int r = 0; r < c->rows; ++r) {
        const T* g = &c->grad[static_cast<std::size_t>(r) * C];
        const T* xh = &(*xhat)[static_cast<std::size_t>(r) * C];
        if (gain->requires_grad || bias->requires_grad) {
          for (int j = 0; j < C; ++j) {
            if (gain->requires_grad) gain->grad[j] += g[j] * xh[j];
            if (bias->requires_grad) bias->grad[j] += g[j];
          }
        }
        if (a->requires_grad) {
          // gy = g * gain; dx = istd * (gy - mean(gy) - xhat * mean(gy*xhat))
          T sum_gy = 0, sum_gy_xh = 0;
          for (int j = 0; j < C; ++j) {
            const T gy = g[j] * gain->val[j];
            sum_gy += gy;
            sum_gy_xh += gy * xh[j];
          }
          const T mean_gy = sum_gy / static_cast<T>(C);
          const T mean_gy_xh = sum_gy_xh / static_cast<T>(C);
          for (int j = 0; j < C; ++j) {
            const T gy = g[j] * gain->val[j];
            a->grad[static_cast<std::size_t>(r) * C + j] +=
                (*inv_std)[r] * (gy - mean_gy - xh[j] * mean_gy_xh);
          }
        }
      }
    };
  return c;
}

// exact GELU: x * Phi(x)
template <typename T>
Node<T>* gelu(Tape<T>& t, Node<T>* a) {
  Node<T>* c = t.temp(a->rows, a->cols, a->requires_grad);
  for (std::size_t i = 0; i < c->size(); ++i) {
    const T x = a->val[i];
    c->val[i] = x * static_cast<T>(0.5) *
                (T(1) + static_cast<T>(std::erf(static_cast<double>(x) / M_SQRT2)));
  }
  if (c->requires_grad)
    c->backprop = [a, c]() {
      for (std::size_t i = 0; i < c->size(); ++i) {
        const double x = static_cast<double>(a->val[i]);
        const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        const double cdf = 0.5 * (1.0 + std::erf(x / M_SQRT2));
        a->grad[i] += c->grad[i] * static_cast<T>(cdf + x * phi);
      }
    };
  return c;
}

// rowwise softmax with optional additive mask (not differentiated through)
template <typename T>
Node<T>* softmax_rows(Tape<T>& t, Node<T>* a,
                      const std::vector<T>* add_mask = nullptr) {
  if (add_mask && add_mask->size() != a->size())
    throw NnError(NnErrorKind::ShapeMismatch, "softmax_rows: mask size");
  const int C = a->cols;
  Node<T>* c = t.temp(a->rows, C, a->requires_grad);
  for (int r = 0; r < a->rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * C;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < C; ++j) {
      T v = a->val[base + j] + (add_mask ? (*add_mask)[base + j] : T(0));
      if (v > mx) mx = v;
    }
    T sum = 0;
    for (int j = 0; j < C; ++j) {
      T v = a->val[base + j] + (add_mask ? (*add_mask)[base + j] : T(0));
      const T e = std::exp(v - mx);
      c->val[base + j] = e;
      sum += e;
    }
    for (int j = 0; j < C; ++j) c->val[base + j] /= sum;
  }
  if (c->requires_grad)
    c->backprop = [a, c, C]() {
      for (int r = 0; r < c->rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * C;
        T dot = 0;
        for (int j = 0; j < C; ++j) dot += c->grad[base + j] * c->val[base + j];
        for (int j = 0; j < C; ++j)
          a->grad[base + j] += c->val[base + j] * (c->grad[base + j] - dot);
      }
    };
  return c;
}

// rows of an embedding table selected by id
template <typename T>
Node<T>* embedding(Tape<T>& t, Node<T>* table, const std::vector<int>& ids) {
  if (ids.empty()) throw NnError(NnErrorKind::EmptyInput, "embedding: no ids");
  for (int id : ids)
    if (id < 0 || id >= table->rows)
      throw NnError(NnErrorKind::IdOutOfRange,
                    "embedding: id " + std::to_string(id) + " out of range");
  const int C = table->cols;
  Node<T>* c = t.temp(static_cast<int>(ids.size()), C, table->requires_grad);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy(table->val.begin() + static_cast<std::size_t>(ids[r]) * C,
              table->val.begin() + static_cast<std::size_t>(ids[r] + 1) * C,
              c->val.begin() + r * C);
  if (c->requires_grad) {
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    c->backprop = [table, c, ids_copy, C]() {
      for (std::size_t r = 0; r < ids_copy->size(); ++r)
        for (int j = 0; j < C; ++j)
          table->grad[static_cast<std::size_t>((*ids_copy)[r]) * C + j] +=
              c->grad[r * C + j];
    };
  }
  return c;
}

enum class Reduction { mean, sum };

// NLL over non-ignored rows of logits against integer targets
template <typename T>
Node<T>* cross_entropy(Tape<T>& t, Node<T>* logits, const std::vector<int>& targets,
                       int ignore_id, Reduction reduction = Reduction::mean) {
  if (static_cast<int>(targets.size()) != logits->rows)
    throw NnError(NnErrorKind::ShapeMismatch, "cross_entropy: target count");
  const int V = logits->cols;
  int count = 0;
  for (int y : targets)
    if (y != ignore_id) {
      if (y < 0 || y >= V)
        throw NnError(NnErrorKind::IdOutOfRange, "cross_entropy: target out of range");
      ++count;
    }
  if (count == 0)
    throw NnError(NnErrorKind::AllPositionsIgnored, "cross_entropy: all positions ignored");
  Node<T>* c = t.temp(1, 1, logits->requires_grad);
  // cache row log-sum-exp for backward
  auto lse = std::make_shared<std::vector<T>>(logits->rows, T(0));
  T total = 0;
  for (int r = 0; r < logits->rows; ++r) {
    if (targets[r] == ignore_id) continue;
    const std::size_t base = static_cast<std::size_t>(r) * V;
    T mx = logits->val[base];
    for (int j = 1; j < V; ++j) mx = std::max(mx, logits->val[base + j]);
    T sum = 0;
    for (int j = 0; j < V; ++j) sum += std::exp(logits->val[base + j] - mx);
    const T l = mx + std::log(sum);
    (*lse)[r] = l;
    total += l - logits->val[base + targets[r]];
  }
  c->val[0] = reduction == Reduction::mean ? total / static_cast<T>(count) : total;
  if (c->requires_grad) {
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    c->backprop = [logits, c, targets_copy, lse, ignore_id, reduction, V, count]() {
      const T gscale =
          c->grad[0] / (reduction == Reduction::mean ? static_cast<T>(count) : T(1));
      for (int r = 0; r < logits->rows; ++r) {
        if ((*targets_copy)[r] == ignore_id) continue;
        const std::size_t base = static_cast<std::size_t>(r) * V;
        for (int j = 0; j < V; ++j) {
          const T p = std::exp(logits->val[base + j] - (*lse)[r]);
          logits->grad[base + j] += gscale * (p - ((*targets_copy)[r] == j ? T(1) : T(0)));
        }
      }
    };
  }
  return c;
}

template <typename T>
Node<T>* sum_all(Tape<T>& t, Node<T>* a) {
  Node<T>* c = t.temp(1, 1, a->requires_grad);
  T total = 0;
  for (std::size_t i = 0; i < a->size(); ++i) total += a->val[i];
  c->val[0] = total;
  if (c->requires_grad)
    c->backprop = [a, c]() {
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += c->grad[0];
    };
  return c;
}

// inverted dropout; identity when rate == 0
template <typename T>
Node<T>* dropout(Tape<T>& t, Node<T>* a, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return a;
  Node<T>* c = t.temp(a->rows, a->cols, a->requires_grad);
  auto keep = std::make_shared<std::vector<T>>(a->size());
  const T inv = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < a->size(); ++i) {
    (*keep)[i] = rng->bernoulli(rate) ? T(0) : inv;
    c->val[i] = a->val[i] * (*keep)[i];
  }
  if (c->requires_grad)
    c->backprop = [a, c, keep]() {
      for (std::size_t i = 0; i < c->size(); ++i) a->grad[i] += c->grad[i] * (*keep)[i];
    };
  return c;
}

}  // namespace ops

// ---------------------------------------------------------- free softmax

// Standalone numeric softmax (no tape), max-subtracted.
template <typename T>
std::vector<T> softmax(const std::vector<T>& v) {
  if (v.empty()) throw NnError(NnErrorKind::EmptyInput, "softmax: empty");
  T mx = v[0];
  for (T x : v) mx = std::max(mx, x);
  std::vector<T> out(v.size());
  T sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (auto& x : out) x /= sum;
  return out;
}

template <typename T>
std::vector<T> log_softmax(const std::vector<T>& v) {
  if (v.empty()) throw NnError(NnErrorKind::EmptyInput, "log_softmax: empty");
  T mx = v[0];
  for (T x : v) mx = std::max(mx, x);
  T sum = 0;
  for (T x : v) sum += std::exp(x - mx);
  const T lse = mx + std::log(sum);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

}  // namespace textreact::nn
