#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evp/error.hpp"
#include "evp/rng.hpp"

namespace evp {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

int64_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major tensor participating in a reverse-mode graph.
//
// Ops are free functions: they compute eagerly, capture their operands and
// register a pull-style backward closure on the result. A node requires grad
// iff one of its operands does, so constant subgraphs carry no autodiff
// state at all. Grad buffers are allocated lazily and only on requires_grad
// tensors; a frozen parameter therefore never owns one. Accumulation is
// additive and callers zero grads explicitly between optimizer steps.
//
// Tensors are immutable after construction except for the grad buffer. One
// graph is built and differentiated by a single thread; distinct graphs may
// live on distinct threads.
class Tensor : public std::enable_shared_from_this<Tensor> {
 public:
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  std::vector<TensorPtr> parents;
  std::function<void()> backward_fn;

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr full(std::vector<int> shape, double value,
                        bool requires_grad = false);
  static TensorPtr from_data(std::vector<int> shape, std::vector<double> data,
                             bool requires_grad = false);
  static TensorPtr scalar(double v, bool requires_grad = false);
  // truncated normal init (clipped at two sigma), zero-mean
  static TensorPtr trunc_normal(std::vector<int> shape, Rng& rng, double sigma,
                                bool requires_grad = false);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // scalar convenience; throws unless size() == 1
  double value() const;

  void ensure_grad();
  void zero_grad();
  bool grad_ever_allocated() const { return grad_allocated_; }

  // reverse-mode sweep from a scalar root; seeds the root with +1
  void backward();

 private:
  bool grad_allocated_ = false;
};

// ---- elementwise / algebra -------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);
// scale * a + shift, elementwise
TensorPtr affine(const TensorPtr& a, double scale, double shift);
TensorPtr scale(const TensorPtr& a, double s);
// a: N x C, bias: length-C vector broadcast over rows
TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& bias);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);
// x: N x In, w: In x Out, b: length Out
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

TensorPtr gelu(const TensorPtr& x);  // exact erf form
TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr softmax_rows(const TensorPtr& x);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, double eps = 1e-5);

TensorPtr sum(const TensorPtr& x);
TensorPtr mean(const TensorPtr& x);
TensorPtr add_n(const std::vector<TensorPtr>& xs);

// ---- views (materialized copies with permutation backward) -----------------

TensorPtr reshape(const TensorPtr& x, std::vector<int> new_shape);
TensorPtr slice_rows(const TensorPtr& x, int row0, int nrows);
TensorPtr slice_cols(const TensorPtr& x, int col0, int ncols);
TensorPtr concat_rows(const std::vector<TensorPtr>& xs);
TensorPtr concat_cols(const std::vector<TensorPtr>& xs);

// ---- image-shaped ops (rank-3 C x H x W) ------------------------------------

// output spatial extent of a strided window
int grid_extent(int in, int kernel, int stride, int pad);
// overlapped patches with zero padding -> (gh*gw) x (C*k*k); row r corresponds
// to grid cell (r / gw, r % gw), columns ordered channel-major then ky, kx
TensorPtr im2col(const TensorPtr& x, int kernel, int stride, int pad);
// N x C tokens (row-major over the grid) -> C x gh x gw map and back
TensorPtr tokens_to_map(const TensorPtr& tokens, int gh, int gw);
TensorPtr map_to_tokens(const TensorPtr& map);
// bilinear, half-pixel centers (align_corners = false), edges clamped
TensorPtr upsample_bilinear(const TensorPtr& map, int out_h, int out_w);

// ---- fused losses (mean over elements) --------------------------------------

// numerically stable log-sum-exp form; target entries must be exactly 0 or 1
TensorPtr bce_with_logits(const TensorPtr& logits, const TensorPtr& target);
TensorPtr weighted_bce_with_logits(const TensorPtr& logits,
                                   const TensorPtr& target, double w_pos,
                                   double w_neg);
TensorPtr mse(const TensorPtr& pred, const TensorPtr& target);

}  // namespace evp
