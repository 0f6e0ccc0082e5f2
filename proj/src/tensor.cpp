#include "evp/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace evp {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatRM>;
using MutMap = Eigen::Map<MatRM>;

ConstMap cmap(const std::vector<double>& v, int rows, int cols) {
  return ConstMap(v.data(), rows, cols);
}
MutMap mmap(std::vector<double>& v, int rows, int cols) {
  return MutMap(v.data(), rows, cols);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                     " vs " + shape_str(b->shape));
  }
}

void require_rank2(const TensorPtr& a, const char* op) {
  if (a->rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " +
                     shape_str(a->shape));
  }
}

// result node whose requires_grad is derived from its operands
TensorPtr node(std::vector<int> shape, std::initializer_list<TensorPtr> parents) {
  auto t = Tensor::zeros(std::move(shape));
  for (const auto& p : parents) {
    if (p->requires_grad) {
      t->requires_grad = true;
      break;
    }
  }
  if (t->requires_grad) t->parents.assign(parents);
  return t;
}

TensorPtr node(std::vector<int> shape, const std::vector<TensorPtr>& parents) {
  auto t = Tensor::zeros(std::move(shape));
  for (const auto& p : parents) {
    if (p->requires_grad) {
      t->requires_grad = true;
      break;
    }
  }
  if (t->requires_grad) t->parents = parents;
  return t;
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

int64_t numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  int64_t n = numel(shape);
  t->shape = std::move(shape);
  t->data.assign(static_cast<size_t>(n), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

TensorPtr Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad) {
  int64_t n = numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw ShapeError("from_data: " + shape_str(shape) + " needs " +
                     std::to_string(n) + " values, got " +
                     std::to_string(data.size()));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

TensorPtr Tensor::trunc_normal(std::vector<int> shape, Rng& rng, double sigma,
                               bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  for (auto& v : t->data) v = rng.next_trunc_normal(sigma);
  return t;
}

double Tensor::value() const {
  if (size() != 1) {
    throw ShapeError("value(): tensor has " + std::to_string(size()) + " elements");
  }
  return data[0];
}

void Tensor::ensure_grad() {
  if (!requires_grad) {
    throw DomainError("ensure_grad on a tensor without requires_grad");
  }
  if (grad.empty()) {
    grad.assign(data.size(), 0.0);
    grad_allocated_ = true;
  }
}

void Tensor::zero_grad() {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

void Tensor::backward() {
  if (size() != 1) throw ShapeError("backward(): root must be a scalar");
  if (!requires_grad) {
    throw DomainError("backward(): root does not require grad");
  }

  // iterative post-order over the requires_grad sub-DAG
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> seen;
  std::vector<std::pair<Tensor*, size_t>> stack;
  stack.emplace_back(this, 0);
  seen.insert(this);
  while (!stack.empty()) {
    auto& top = stack.back();
    Tensor* n = top.first;
    if (top.second < n->parents.size()) {
      Tensor* p = n->parents[top.second++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  ensure_grad();
  grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn();
  }
}

// ---- elementwise ------------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "add");
  auto out = node(a->shape, {a, b});
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    out->backward_fn = [o, pa, pb, n]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pa->grad[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pb->grad[i] += o->grad[i];
      }
    };
  }
  return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "sub");
  auto out = node(a->shape, {a, b});
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    out->backward_fn = [o, pa, pb, n]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pa->grad[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pb->grad[i] -= o->grad[i];
      }
    };
  }
  return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "mul");
  auto out = node(a->shape, {a, b});
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    out->backward_fn = [o, pa, pb, n]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pa->grad[i] += o->grad[i] * pb->data[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pb->grad[i] += o->grad[i] * pa->data[i];
      }
    };
  }
  return out;
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "div");
  auto out = node(a->shape, {a, b});
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] / b->data[i];
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    out->backward_fn = [o, pa, pb, n]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pa->grad[i] += o->grad[i] / pb->data[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          pb->grad[i] -= o->grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
        }
      }
    };
  }
  return out;
}

TensorPtr affine(const TensorPtr& a, double s, double shift) {
  auto out = node(a->shape, {a});
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = s * a->data[i] + shift;
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    out->backward_fn = [o, pa, s, n]() {
      pa->ensure_grad();
      for (int64_t i = 0; i < n; ++i) pa->grad[i] += s * o->grad[i];
    };
  }
  return out;
}

TensorPtr scale(const TensorPtr& a, double s) { return affine(a, s, 0.0); }

TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& bias) {
  require_rank2(a, "add_rowvec");
  const int rows = a->dim(0), cols = a->dim(1);
  if (bias->size() != cols) {
    throw ShapeError("add_rowvec: bias length " + std::to_string(bias->size()) +
                     " vs " + std::to_string(cols) + " columns");
  }
  auto out = node(a->shape, {a, bias});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      out->data[static_cast<size_t>(r) * cols + c] =
          a->data[static_cast<size_t>(r) * cols + c] + bias->data[c];
    }
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    Tensor* pb = bias.get();
    out->backward_fn = [o, pa, pb, rows, cols]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        const int64_t n = static_cast<int64_t>(rows) * cols;
        for (int64_t i = 0; i < n; ++i) pa->grad[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < cols; ++c) {
            pb->grad[c] += o->grad[static_cast<size_t>(r) * cols + c];
          }
        }
      }
    };
  }
  return out;
}

// ---- matmul & friends --------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a->dim(0), k = a->dim(1), k2 = b->dim(0), n2 = b->dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a->shape) +
                     " x " + shape_str(b->shape));
  }
  auto out = node({m, n2}, {a, b});
  mmap(out->data, m, n2).noalias() = cmap(a->data, m, k) * cmap(b->data, k, n2);
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    Tensor* pb = b.get();
    out->backward_fn = [o, pa, pb, m, k, n2]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        mmap(pa->grad, m, k).noalias() +=
            cmap(o->grad, m, n2) * cmap(pb->data, k, n2).transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        mmap(pb->grad, k, n2).noalias() +=
            cmap(pa->data, m, k).transpose() * cmap(o->grad, m, n2);
      }
    };
  }
  return out;
}

TensorPtr transpose(const TensorPtr& a) {
  require_rank2(a, "transpose");
  const int m = a->dim(0), n = a->dim(1);
  auto out = node({n, m}, {a});
  mmap(out->data, n, m) = cmap(a->data, m, n).transpose();
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pa = a.get();
    out->backward_fn = [o, pa, m, n]() {
      pa->ensure_grad();
      mmap(pa->grad, m, n) += cmap(o->grad, n, m).transpose();
    };
  }
  return out;
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- activations ---------------------------------------------------------

TensorPtr gelu(const TensorPtr& x) {
  auto out = node(x->shape, {x});
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i) {
    const double v = x->data[i];
    out->data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, n]() {
      px->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const double v = px->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        px->grad[i] += o->grad[i] * (cdf + v * pdf);
      }
    };
  }
  return out;
}

TensorPtr relu(const TensorPtr& x) {
  auto out = node(x->shape, {x});
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] > 0 ? x->data[i] : 0.0;
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, n]() {
      px->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        if (px->data[i] > 0) px->grad[i] += o->grad[i];
      }
    };
  }
  return out;
}

TensorPtr sigmoid(const TensorPtr& x) {
  auto out = node(x->shape, {x});
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i) out->data[i] = stable_sigmoid(x->data[i]);
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, n]() {
      px->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const double s = o->data[i];
        px->grad[i] += o->grad[i] * s * (1.0 - s);
      }
    };
  }
  return out;
}

TensorPtr softmax_rows(const TensorPtr& x) {
  require_rank2(x, "softmax_rows");
  const int rows = x->dim(0), cols = x->dim(1);
  auto out = node(x->shape, {x});
  for (int r = 0; r < rows; ++r) {
    const double* in = x->data.data() + static_cast<size_t>(r) * cols;
    double* dst = out->data.data() + static_cast<size_t>(r) * cols;
    double mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double z = 0;
    for (int c = 0; c < cols; ++c) {
      dst[c] = std::exp(in[c] - mx);
      z += dst[c];
    }
    for (int c = 0; c < cols; ++c) dst[c] /= z;
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, rows, cols]() {
      px->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* s = o->data.data() + static_cast<size_t>(r) * cols;
        const double* g = o->grad.data() + static_cast<size_t>(r) * cols;
        double dot = 0;
        for (int c = 0; c < cols; ++c) dot += g[c] * s[c];
        double* dst = px->grad.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) dst[c] += s[c] * (g[c] - dot);
      }
    };
  }
  return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, double eps) {
  require_rank2(x, "layer_norm");
  const int rows = x->dim(0), cols = x->dim(1);
  if (gamma->size() != cols || beta->size() != cols) {
    throw ShapeError("layer_norm: gamma/beta length must equal feature dim");
  }
  auto out = node(x->shape, {x, gamma, beta});
  std::vector<double> mu(static_cast<size_t>(rows));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* in = x->data.data() + static_cast<size_t>(r) * cols;
    double m = 0;
    for (int c = 0; c < cols; ++c) m += in[c];
    m /= cols;
    double var = 0;
    for (int c = 0; c < cols; ++c) var += (in[c] - m) * (in[c] - m);
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    inv_std[r] = is;
    double* dst = out->data.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) {
      dst[c] = gamma->data[c] * (in[c] - m) * is + beta->data[c];
    }
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    Tensor* pg = gamma.get();
    Tensor* pb = beta.get();
    out->backward_fn = [o, px, pg, pb, rows, cols, mu = std::move(mu),
                        inv_std = std::move(inv_std)]() {
      for (int r = 0; r < rows; ++r) {
        const double* in = px->data.data() + static_cast<size_t>(r) * cols;
        const double* g = o->grad.data() + static_cast<size_t>(r) * cols;
        const double m = mu[r];
        const double is = inv_std[r];
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (int c = 0; c < cols; ++c) pg->grad[c] += g[c] * (in[c] - m) * is;
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int c = 0; c < cols; ++c) pb->grad[c] += g[c];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          double* dst = px->grad.data() + static_cast<size_t>(r) * cols;
          // dxhat = g * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          double sum_dxh = 0, sum_dxh_xh = 0;
          for (int c = 0; c < cols; ++c) {
            const double xh = (in[c] - m) * is;
            const double dxh = g[c] * pg->data[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          const double inv_c = 1.0 / cols;
          for (int c = 0; c < cols; ++c) {
            const double xh = (in[c] - m) * is;
            const double dxh = g[c] * pg->data[c];
            dst[c] += is * (dxh - inv_c * sum_dxh - xh * inv_c * sum_dxh_xh);
          }
        }
      }
    };
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

TensorPtr sum(const TensorPtr& x) {
  auto out = node({1}, {x});
  double acc = 0;
  for (double v : x->data) acc += v;
  out->data[0] = acc;
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px]() {
      px->ensure_grad();
      const double g = o->grad[0];
      for (auto& gv : px->grad) gv += g;
    };
  }
  return out;
}

TensorPtr mean(const TensorPtr& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x->size()));
}

TensorPtr add_n(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty operand list");
  for (const auto& x : xs) require_same_shape(xs[0], x, "add_n");
  auto out = node(xs[0]->shape, xs);
  const int64_t n = xs[0]->size();
  for (const auto& x : xs) {
    for (int64_t i = 0; i < n; ++i) out->data[i] += x->data[i];
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    std::vector<Tensor*> ps;
    ps.reserve(xs.size());
    for (const auto& x : xs) ps.push_back(x.get());
    out->backward_fn = [o, ps, n]() {
      for (Tensor* p : ps) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (int64_t i = 0; i < n; ++i) p->grad[i] += o->grad[i];
      }
    };
  }
  return out;
}

// ---- views -----------------------------------------------------------------

TensorPtr reshape(const TensorPtr& x, std::vector<int> new_shape) {
  if (numel(new_shape) != x->size()) {
    throw ShapeError("reshape: " + shape_str(x->shape) + " -> " +
                     shape_str(new_shape) + " changes element count");
  }
  auto out = node(std::move(new_shape), {x});
  out->data = x->data;
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px]() {
      px->ensure_grad();
      const int64_t n = px->size();
      for (int64_t i = 0; i < n; ++i) px->grad[i] += o->grad[i];
    };
  }
  return out;
}

TensorPtr slice_rows(const TensorPtr& x, int row0, int nrows) {
  require_rank2(x, "slice_rows");
  const int rows = x->dim(0), cols = x->dim(1);
  require(row0 >= 0 && nrows > 0 && row0 + nrows <= rows, "slice_rows: out of range");
  auto out = node({nrows, cols}, {x});
  std::copy_n(x->data.begin() + static_cast<size_t>(row0) * cols,
              static_cast<size_t>(nrows) * cols, out->data.begin());
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, row0, nrows, cols]() {
      px->ensure_grad();
      const int64_t n = static_cast<int64_t>(nrows) * cols;
      double* dst = px->grad.data() + static_cast<size_t>(row0) * cols;
      for (int64_t i = 0; i < n; ++i) dst[i] += o->grad[i];
    };
  }
  return out;
}

TensorPtr slice_cols(const TensorPtr& x, int col0, int ncols) {
  require_rank2(x, "slice_cols");
  const int rows = x->dim(0), cols = x->dim(1);
  require(col0 >= 0 && ncols > 0 && col0 + ncols <= cols, "slice_cols: out of range");
  auto out = node({rows, ncols}, {x});
  for (int r = 0; r < rows; ++r) {
    std::copy_n(x->data.begin() + static_cast<size_t>(r) * cols + col0, ncols,
                out->data.begin() + static_cast<size_t>(r) * ncols);
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, col0, ncols, rows, cols]() {
      px->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* src = o->grad.data() + static_cast<size_t>(r) * ncols;
        double* dst = px->grad.data() + static_cast<size_t>(r) * cols + col0;
        for (int c = 0; c < ncols; ++c) dst[c] += src[c];
      }
    };
  }
  return out;
}

TensorPtr concat_rows(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty operand list");
  const int cols = xs[0]->dim(1);
  int rows = 0;
  for (const auto& x : xs) {
    require_rank2(x, "concat_rows");
    if (x->dim(1) != cols) throw ShapeError("concat_rows: column mismatch");
    rows += x->dim(0);
  }
  auto out = node({rows, cols}, xs);
  size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->data.begin(), x->data.end(), out->data.begin() + off);
    off += x->data.size();
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    std::vector<Tensor*> ps;
    for (const auto& x : xs) ps.push_back(x.get());
    out->backward_fn = [o, ps]() {
      size_t off = 0;
      for (Tensor* p : ps) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += o->grad[off + i];
        }
        off += p->data.size();
      }
    };
  }
  return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: empty operand list");
  const int rows = xs[0]->dim(0);
  int cols = 0;
  for (const auto& x : xs) {
    require_rank2(x, "concat_cols");
    if (x->dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
    cols += x->dim(1);
  }
  auto out = node({rows, cols}, xs);
  int coff = 0;
  for (const auto& x : xs) {
    const int xc = x->dim(1);
    for (int r = 0; r < rows; ++r) {
      std::copy_n(x->data.begin() + static_cast<size_t>(r) * xc, xc,
                  out->data.begin() + static_cast<size_t>(r) * cols + coff);
    }
    coff += xc;
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    std::vector<Tensor*> ps;
    for (const auto& x : xs) ps.push_back(x.get());
    out->backward_fn = [o, ps, rows, cols]() {
      int coff = 0;
      for (Tensor* p : ps) {
        const int xc = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int r = 0; r < rows; ++r) {
            const double* src = o->grad.data() + static_cast<size_t>(r) * cols + coff;
            double* dst = p->grad.data() + static_cast<size_t>(r) * xc;
            for (int c = 0; c < xc; ++c) dst[c] += src[c];
          }
        }
        coff += xc;
      }
    };
  }
  return out;
}

// ---- image-shaped ops --------------------------------------------------------

int grid_extent(int in, int kernel, int stride, int pad) {
  const int span = in + 2 * pad - kernel;
  if (span < 0) {
    throw ShapeError("grid_extent: window larger than padded input");
  }
  return span / stride + 1;
}

TensorPtr im2col(const TensorPtr& x, int kernel, int stride, int pad) {
  if (x->rank() != 3) {
    throw ShapeError("im2col: expected C x H x W input, got " + shape_str(x->shape));
  }
  const int ch = x->dim(0), h = x->dim(1), w = x->dim(2);
  const int gh = grid_extent(h, kernel, stride, pad);
  const int gw = grid_extent(w, kernel, stride, pad);
  const int patch = ch * kernel * kernel;
  auto out = node({gh * gw, patch}, {x});
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      double* dst = out->data.data() + (static_cast<size_t>(gy) * gw + gx) * patch;
      int col = 0;
      for (int c = 0; c < ch; ++c) {
        for (int ky = 0; ky < kernel; ++ky) {
          const int y = gy * stride - pad + ky;
          for (int kx = 0; kx < kernel; ++kx, ++col) {
            const int xx = gx * stride - pad + kx;
            if (y < 0 || y >= h || xx < 0 || xx >= w) {
              dst[col] = 0.0;
            } else {
              dst[col] = x->data[(static_cast<size_t>(c) * h + y) * w + xx];
            }
          }
        }
      }
    }
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* px = x.get();
    out->backward_fn = [o, px, ch, h, w, gh, gw, kernel, stride, pad, patch]() {
      px->ensure_grad();
      for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
          const double* src =
              o->grad.data() + (static_cast<size_t>(gy) * gw + gx) * patch;
          int col = 0;
          for (int c = 0; c < ch; ++c) {
            for (int ky = 0; ky < kernel; ++ky) {
              const int y = gy * stride - pad + ky;
              for (int kx = 0; kx < kernel; ++kx, ++col) {
                const int xx = gx * stride - pad + kx;
                if (y >= 0 && y < h && xx >= 0 && xx < w) {
                  px->grad[(static_cast<size_t>(c) * h + y) * w + xx] += src[col];
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

TensorPtr tokens_to_map(const TensorPtr& tokens, int gh, int gw) {
  require_rank2(tokens, "tokens_to_map");
  const int n = tokens->dim(0), c = tokens->dim(1);
  if (n != gh * gw) {
    throw ShapeError("tokens_to_map: " + std::to_string(n) + " tokens vs grid " +
                     std::to_string(gh) + "x" + std::to_string(gw));
  }
  auto out = node({c, gh, gw}, {tokens});
  for (int t = 0; t < n; ++t) {
    for (int ci = 0; ci < c; ++ci) {
      out->data[static_cast<size_t>(ci) * n + t] =
          tokens->data[static_cast<size_t>(t) * c + ci];
    }
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pt = tokens.get();
    out->backward_fn = [o, pt, n, c]() {
      pt->ensure_grad();
      for (int t = 0; t < n; ++t) {
        for (int ci = 0; ci < c; ++ci) {
          pt->grad[static_cast<size_t>(t) * c + ci] +=
              o->grad[static_cast<size_t>(ci) * n + t];
        }
      }
    };
  }
  return out;
}

TensorPtr map_to_tokens(const TensorPtr& map) {
  if (map->rank() != 3) {
    throw ShapeError("map_to_tokens: expected C x H x W, got " + shape_str(map->shape));
  }
  const int c = map->dim(0), n = map->dim(1) * map->dim(2);
  auto out = node({n, c}, {map});
  for (int ci = 0; ci < c; ++ci) {
    for (int t = 0; t < n; ++t) {
      out->data[static_cast<size_t>(t) * c + ci] =
          map->data[static_cast<size_t>(ci) * n + t];
    }
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pm = map.get();
    out->backward_fn = [o, pm, n, c]() {
      pm->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        for (int t = 0; t < n; ++t) {
          pm->grad[static_cast<size_t>(ci) * n + t] +=
              o->grad[static_cast<size_t>(t) * c + ci];
        }
      }
    };
  }
  return out;
}

namespace {

struct LerpIdx {
  int lo, hi;
  double t;
};

// half-pixel source coordinates, clamped at the borders
std::vector<LerpIdx> lerp_table(int out_n, int in_n) {
  std::vector<LerpIdx> tab(static_cast<size_t>(out_n));
  const double r = static_cast<double>(in_n) / out_n;
  for (int i = 0; i < out_n; ++i) {
    double s = (i + 0.5) * r - 0.5;
    double f = std::floor(s);
    double t = s - f;
    int lo = static_cast<int>(f);
    int hi = lo + 1;
    lo = std::clamp(lo, 0, in_n - 1);
    hi = std::clamp(hi, 0, in_n - 1);
    tab[i] = {lo, hi, t};
  }
  return tab;
}

}  // namespace

TensorPtr upsample_bilinear(const TensorPtr& map, int out_h, int out_w) {
  if (map->rank() != 3) {
    throw ShapeError("upsample_bilinear: expected C x H x W, got " +
                     shape_str(map->shape));
  }
  const int c = map->dim(0), h = map->dim(1), w = map->dim(2);
  auto ty = lerp_table(out_h, h);
  auto tx = lerp_table(out_w, w);
  auto out = node({c, out_h, out_w}, {map});
  for (int ci = 0; ci < c; ++ci) {
    const double* src = map->data.data() + static_cast<size_t>(ci) * h * w;
    double* dst = out->data.data() + static_cast<size_t>(ci) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const auto& iy = ty[y];
      for (int x = 0; x < out_w; ++x) {
        const auto& ix = tx[x];
        const double top =
            (1.0 - ix.t) * src[iy.lo * w + ix.lo] + ix.t * src[iy.lo * w + ix.hi];
        const double bot =
            (1.0 - ix.t) * src[iy.hi * w + ix.lo] + ix.t * src[iy.hi * w + ix.hi];
        dst[y * out_w + x] = (1.0 - iy.t) * top + iy.t * bot;
      }
    }
  }
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pm = map.get();
    out->backward_fn = [o, pm, c, h, w, out_h, out_w, ty = std::move(ty),
                        tx = std::move(tx)]() {
      pm->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        double* dst = pm->grad.data() + static_cast<size_t>(ci) * h * w;
        const double* g = o->grad.data() + static_cast<size_t>(ci) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
          const auto& iy = ty[y];
          for (int x = 0; x < out_w; ++x) {
            const auto& ix = tx[x];
            const double gv = g[y * out_w + x];
            dst[iy.lo * w + ix.lo] += (1.0 - iy.t) * (1.0 - ix.t) * gv;
            dst[iy.lo * w + ix.hi] += (1.0 - iy.t) * ix.t * gv;
            dst[iy.hi * w + ix.lo] += iy.t * (1.0 - ix.t) * gv;
            dst[iy.hi * w + ix.hi] += iy.t * ix.t * gv;
          }
        }
      }
    };
  }
  return out;
}

// ---- fused losses --------------------------------------------------------------

namespace {

void require_loss_pair(const TensorPtr& logits, const TensorPtr& target,
                       const char* op) {
  if (logits->size() != target->size()) {
    throw ShapeError(std::string(op) + ": logits " + shape_str(logits->shape) +
                     " vs target " + shape_str(target->shape));
  }
  for (double y : target->data) {
    if (y != 0.0 && y != 1.0) {
      throw DomainError(std::string(op) + ": target entries must be exactly 0 or 1");
    }
  }
}

}  // namespace

TensorPtr weighted_bce_with_logits(const TensorPtr& logits, const TensorPtr& target,
                                   double w_pos, double w_neg) {
  require_loss_pair(logits, target, "bce_with_logits");
  const int64_t n = logits->size();
  auto out = node({1}, {logits, target});
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = logits->data[i];
    const double y = target->data[i];
    const double ell = std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    acc += (y > 0.5 ? w_pos : w_neg) * ell;
  }
  out->data[0] = acc / static_cast<double>(n);
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pl = logits.get();
    Tensor* pt = target.get();
    out->backward_fn = [o, pl, pt, w_pos, w_neg, n]() {
      if (!pl->requires_grad) return;
      pl->ensure_grad();
      const double g = o->grad[0] / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) {
        const double y = pt->data[i];
        const double wgt = y > 0.5 ? w_pos : w_neg;
        pl->grad[i] += g * wgt * (stable_sigmoid(pl->data[i]) - y);
      }
    };
  }
  return out;
}

TensorPtr bce_with_logits(const TensorPtr& logits, const TensorPtr& target) {
  return weighted_bce_with_logits(logits, target, 1.0, 1.0);
}

TensorPtr mse(const TensorPtr& pred, const TensorPtr& target) {
  if (pred->size() != target->size()) {
    throw ShapeError("mse: size mismatch");
  }
  const int64_t n = pred->size();
  auto out = node({1}, {pred, target});
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = pred->data[i] - target->data[i];
    acc += d * d;
  }
  out->data[0] = acc / static_cast<double>(n);
  if (out->requires_grad) {
    Tensor* o = out.get();
    Tensor* pp = pred.get();
    Tensor* pt = target.get();
    out->backward_fn = [o, pp, pt, n]() {
      const double g = o->grad[0] * 2.0 / static_cast<double>(n);
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          pp->grad[i] += g * (pp->data[i] - pt->data[i]);
        }
      }
      if (pt->requires_grad) {
        pt->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          pt->grad[i] -= g * (pp->data[i] - pt->data[i]);
        }
      }
    };
  }
  return out;
}

}  // namespace evp
