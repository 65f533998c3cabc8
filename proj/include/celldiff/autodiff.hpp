#pragma once

#include <functional>
#include <vector>

#include "celldiff/tensor.hpp"

namespace celldiff::ad {

// Primitive set of the computation record. Everything the denoiser and the
// training losses need, nothing more.
enum class Op {
  kInput,
  kAdd,        // elementwise, same shape
  kSub,        // elementwise, same shape
  kMul,        // elementwise, same shape
  kAddRow,     // matrix + broadcast row vector
  kMulRow,     // matrix * broadcast row vector
  kAffine,    // a*x + b with constants a, b
  kMatmul,
  kTranspose,  // 2-D
  kReshape,
  kConcatLast,  // concat along last axis
  kSliceLast,   // contiguous slice along last axis
  kRow,         // select one row of a matrix
  kSumAll,
  kMeanAll,
  kSqrt,
  kExp,
  kLog,
  kRelu,
  kLayerNorm,    // normalize last axis, eps 1e-5, no affine
  kSoftmaxLast,  // softmax over last axis
  kPairDist,     // pairwise euclidean distances between row sets
  kStopGrad,
};

// Reverse-mode tape. Building an op evaluates it immediately and records
// enough to replay the forward pass bit-exactly and to run backward once the
// output is known. Node ids are indices into the record; inputs always
// precede consumers.
class Tape {
 public:
  using Id = int;

  // --- graph construction -------------------------------------------------
  Id input(Tensor value, bool requires_grad = true);
  void set_input(Id id, Tensor value);  // swap a leaf value before replay()

  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id add_row(Id mat, Id row);
  Id mul_row(Id mat, Id row);
  Id affine(Id a, double scale, double shift);
  Id scale(Id a, double s) { return affine(a, s, 0.0); }
  Id matmul(Id a, Id b);
  Id transpose(Id a);
  Id reshape(Id a, std::vector<int> shape);
  Id concat_last(const std::vector<Id>& parts);
  Id slice_last(Id a, int start, int len);
  Id row(Id mat, int r);
  Id sum_all(Id a);
  Id mean_all(Id a);
  Id sqrt_(Id a);
  Id exp_(Id a);
  Id log_(Id a);
  Id relu(Id a);
  Id layer_norm(Id a);
  Id softmax_last(Id a);
  Id pair_dist(Id x, Id y);
  Id stop_grad(Id a);

  // --- evaluation ----------------------------------------------------------
  const Tensor& value(Id id) const { return nodes_[id].val; }
  // Recompute every non-input node in record order from current leaf values.
  void replay();
  // Reverse sweep from `output` seeded with `seed` (same shape as output).
  // Gradients accumulate additively over fan-out; stop_grad blocks flow.
  void backward(Id output, const Tensor& seed);
  const Tensor& grad(Id id) const { return nodes_[id].grad; }

  int size() const { return static_cast<int>(nodes_.size()); }

  static constexpr double kLayerNormEps = 1e-5;

 private:
  struct Node {
    Op op;
    std::vector<Id> in;
    Tensor val;
    Tensor grad;
    std::vector<int> aux;       // op-specific ints (slice offsets, shapes...)
    double a = 0.0, b = 0.0;    // affine constants
    std::vector<double> saved;  // per-row inv-std for layer_norm
    bool requires_grad = true;
  };

  Id push(Node n);
  void eval(Node& n);
  void backprop(const Node& n);

  std::vector<Node> nodes_;
};

// Max over coordinates of |analytic - central difference| / max(1, |cd|) for
// a scalar-valued function of one tensor input.
double check_gradients(const std::function<Tape::Id(Tape&, Tape::Id)>& fn,
                       const Tensor& point, double step);

// Same check restricted to `coords` coordinates of the input (for large
// parameter vectors).
double check_gradients_sampled(
    const std::function<Tape::Id(Tape&, Tape::Id)>& fn, const Tensor& point,
    double step, const std::vector<int64_t>& coords);

}  // namespace celldiff::ad
