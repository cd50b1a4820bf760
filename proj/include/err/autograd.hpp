#pragma once

#include <functional>
#include <vector>

#include "err/matrix.hpp"
#include "err/params.hpp"
#include "err/rng.hpp"

namespace err::ag {

using err::Mat;

// Handle into a Tape. Cheap to copy; only valid for the tape that created it.
struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

// Reverse-mode tape over dense double matrices. A forward pass appends nodes;
// backward() walks them in reverse creation order and accumulates gradients
// into the ParameterStore tensors referenced by param()/gather() leaves.
//
// Tapes are single-threaded and meant to be built per training step (or per
// forward call) and discarded.
class Tape {
 public:
  // ---- leaves ----
  Var constant(Mat v);
  Var scalar(double v);
  // Leaf bound to a store tensor; backward adds into t.grad.
  Var param(Tensor& t);
  // Row gather from an embedding table; gradient is scattered directly into
  // table.grad without materializing a dense table-sized buffer.
  Var gather_rows(Tensor& table, const std::vector<int>& ids);

  // ---- elementwise / linear algebra ----
  Var matmul(Var a, Var b);     // A*B
  Var matmul_nt(Var a, Var b);  // A*B^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_rowvec(Var a, Var row);  // broadcast 1xN row over A's rows
  Var mul_elem(Var a, Var b);
  Var cmul(Var a, double c);
  Var relu(Var a);

  // ---- structural ----
  Var slice_rows(Var a, long r0, long n);
  Var slice_cols(Var a, long c0, long n);
  Var concat_cols(Var a, Var b);
  Var concat_rows(const std::vector<Var>& parts);

  // ---- normalization / attention ----
  // Row softmax over the columns flagged valid (mask[j] != 0); invalid
  // columns produce exact zeros and receive zero gradient.
  Var softmax_rows_masked(Var a, const std::vector<int>& col_mask);
  // y = gamma .* (x - mean) / sqrt(var + eps) + beta, per row.
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
  // Per-row x / ||x||_2; throws on a zero-norm row.
  Var rows_l2_normalize(Var a);
  // Inverted dropout with keep-prob 1-p. p == 0 returns `a` unchanged (no
  // node is appended and the rng is untouched).
  Var dropout(Var a, double p, Rng& rng);

  // ---- reductions / scalars ----
  Var cosine(Var a, Var b);  // 1xN vs 1xN -> 1x1; throws on zero norm
  Var sum_all(Var a);        // 1x1
  Var mean_all(Var a);       // 1x1
  Var logsumexp_rows(Var a);  // NxM -> Nx1
  Var take_diag(Var a);       // NxN -> Nx1

  // ---- execution ----
  const Mat& val(Var v) const;
  double scalar_val(Var v) const;
  // Accumulates d(loss)/d(theta) into every touched store tensor. loss must
  // be 1x1. Throws "no recorded computation" when the tape is empty or the
  // handle does not belong to it.
  void backward(Var loss);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    const Mat* ext = nullptr;  // set for param leaves; value lives in the store
    Mat grad;
    bool requires_grad = false;
    bool grad_touched = false;
    std::function<void(Tape&)> back;  // empty for leaves without parents
  };

  const Mat& node_val(int i) const { return nodes_[i].ext ? *nodes_[i].ext : nodes_[i].val; }
  void add_grad(int i, const Mat& g);
  Var push(Node n);
  Var check(Var v) const;

  std::vector<Node> nodes_;
};

}  // namespace err::ag
