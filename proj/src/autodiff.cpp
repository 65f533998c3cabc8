#include "celldiff/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace celldiff::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

MapCM as_mat(const Tensor& t, int r, int c) { return MapCM(t.v.data(), r, c); }

// rows of the last-axis view: product of leading extents
int lead_rows(const Tensor& t) {
  if (t.ndim() == 0) throw std::invalid_argument("empty tensor");
  int64_t r = 1;
  for (int i = 0; i + 1 < t.ndim(); ++i) r *= t.shape[i];
  return static_cast<int>(t.ndim() == 1 ? 1 : r);
}
int last_dim(const Tensor& t) { return t.shape.back(); }

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  Id id = static_cast<Id>(nodes_.size() - 1);
  if (nodes_[id].op != Op::kInput) eval(nodes_[id]);
  return id;
}

Tape::Id Tape::input(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kInput;
  n.val = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

void Tape::set_input(Id id, Tensor value) {
  require(nodes_[id].op == Op::kInput, "set_input: not an input node");
  require(value.shape == nodes_[id].val.shape, "set_input: shape mismatch");
  nodes_[id].val = std::move(value);
}

#define BINARY_SAME_SHAPE(NAME, OPK)                                   \
  Tape::Id Tape::NAME(Id a, Id b) {                                    \
    require(nodes_[a].val.same_shape(nodes_[b].val),                   \
            #NAME ": shape mismatch " + shape_str(nodes_[a].val.shape) \
                + " vs " + shape_str(nodes_[b].val.shape));            \
    Node n;                                                            \
    n.op = OPK;                                                        \
    n.in = {a, b};                                                     \
    return push(std::move(n));                                         \
  }

BINARY_SAME_SHAPE(add, Op::kAdd)
BINARY_SAME_SHAPE(sub, Op::kSub)
BINARY_SAME_SHAPE(mul, Op::kMul)
#undef BINARY_SAME_SHAPE

Tape::Id Tape::add_row(Id mat, Id row) {
  require(last_dim(nodes_[mat].val) == static_cast<int>(nodes_[row].val.numel()),
          "add_row: row width mismatch");
  Node n;
  n.op = Op::kAddRow;
  n.in = {mat, row};
  return push(std::move(n));
}

Tape::Id Tape::mul_row(Id mat, Id row) {
  require(last_dim(nodes_[mat].val) == static_cast<int>(nodes_[row].val.numel()),
          "mul_row: row width mismatch");
  Node n;
  n.op = Op::kMulRow;
  n.in = {mat, row};
  return push(std::move(n));
}

Tape::Id Tape::affine(Id a, double s, double shift) {
  Node n;
  n.op = Op::kAffine;
  n.in = {a};
  n.a = s;
  n.b = shift;
  return push(std::move(n));
}

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& A = nodes_[a].val;
  const Tensor& B = nodes_[b].val;
  require(A.ndim() <= 2 && B.ndim() == 2, "matmul: expects matrices");
  require(A.cols() == B.rows(), "matmul: inner dimension mismatch "
          + shape_str(A.shape) + " x " + shape_str(B.shape));
  Node n;
  n.op = Op::kMatmul;
  n.in = {a, b};
  return push(std::move(n));
}

Tape::Id Tape::transpose(Id a) {
  require(nodes_[a].val.ndim() == 2, "transpose: 2-D only");
  Node n;
  n.op = Op::kTranspose;
  n.in = {a};
  return push(std::move(n));
}

Tape::Id Tape::reshape(Id a, std::vector<int> shape) {
  require(Tensor::numel_of(shape) == nodes_[a].val.numel(),
          "reshape: element count mismatch");
  Node n;
  n.op = Op::kReshape;
  n.in = {a};
  n.aux.assign(shape.begin(), shape.end());
  return push(std::move(n));
}

Tape::Id Tape::concat_last(const std::vector<Id>& parts) {
  require(!parts.empty(), "concat_last: no parts");
  const int r = lead_rows(nodes_[parts[0]].val);
  const int nd = nodes_[parts[0]].val.ndim();
  for (Id p : parts) {
    require(nodes_[p].val.ndim() == nd && lead_rows(nodes_[p].val) == r,
            "concat_last: incompatible shapes");
  }
  Node n;
  n.op = Op::kConcatLast;
  n.in = parts;
  return push(std::move(n));
}

Tape::Id Tape::slice_last(Id a, int start, int len) {
  require(start >= 0 && len >= 1 && start + len <= last_dim(nodes_[a].val),
          "slice_last: out of range");
  Node n;
  n.op = Op::kSliceLast;
  n.in = {a};
  n.aux = {start, len};
  return push(std::move(n));
}

Tape::Id Tape::row(Id mat, int r) {
  require(nodes_[mat].val.ndim() == 2, "row: 2-D only");
  require(r >= 0 && r < nodes_[mat].val.rows(), "row: index out of range");
  Node n;
  n.op = Op::kRow;
  n.in = {mat};
  n.aux = {r};
  return push(std::move(n));
}

#define UNARY(NAME, OPK)      \
  Tape::Id Tape::NAME(Id a) { \
    Node n;                   \
    n.op = OPK;               \
    n.in = {a};               \
    return push(std::move(n)); \
  }

UNARY(sum_all, Op::kSumAll)
UNARY(mean_all, Op::kMeanAll)
UNARY(sqrt_, Op::kSqrt)
UNARY(exp_, Op::kExp)
UNARY(log_, Op::kLog)
UNARY(relu, Op::kRelu)
UNARY(layer_norm, Op::kLayerNorm)
UNARY(softmax_last, Op::kSoftmaxLast)
UNARY(stop_grad, Op::kStopGrad)
#undef UNARY

Tape::Id Tape::pair_dist(Id x, Id y) {
  const Tensor& X = nodes_[x].val;
  const Tensor& Y = nodes_[y].val;
  require(X.ndim() == 2 && Y.ndim() == 2, "pair_dist: 2-D only");
  require(X.cols() == Y.cols(), "pair_dist: feature dimension mismatch");
  Node n;
  n.op = Op::kPairDist;
  n.in = {x, y};
  return push(std::move(n));
}

void Tape::eval(Node& n) {
  switch (n.op) {
    case Op::kInput:
      break;
    case Op::kAdd: {
      const Tensor &a = nodes_[n.in[0]].val, &b = nodes_[n.in[1]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = a.v[i] + b.v[i];
      break;
    }
    case Op::kSub: {
      const Tensor &a = nodes_[n.in[0]].val, &b = nodes_[n.in[1]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = a.v[i] - b.v[i];
      break;
    }
    case Op::kMul: {
      const Tensor &a = nodes_[n.in[0]].val, &b = nodes_[n.in[1]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = a.v[i] * b.v[i];
      break;
    }
    case Op::kAddRow:
    case Op::kMulRow: {
      const Tensor &a = nodes_[n.in[0]].val, &r = nodes_[n.in[1]].val;
      const int rows = lead_rows(a), d = last_dim(a);
      n.val = Tensor::zeros(a.shape);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) {
          const double x = a.v[static_cast<size_t>(i) * d + j];
          n.val.v[static_cast<size_t>(i) * d + j] =
              n.op == Op::kAddRow ? x + r.v[j] : x * r.v[j];
        }
      break;
    }
    case Op::kAffine: {
      const Tensor& a = nodes_[n.in[0]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = n.a * a.v[i] + n.b;
      break;
    }
    case Op::kMatmul: {
      const Tensor &A = nodes_[n.in[0]].val, &B = nodes_[n.in[1]].val;
      const int m = A.rows(), k = A.cols(), p = B.cols();
      n.val = A.ndim() == 1 ? Tensor::zeros({p}) : Tensor::zeros({m, p});
      MapM(n.val.v.data(), m, p) = as_mat(A, m, k) * as_mat(B, k, p);
      break;
    }
    case Op::kTranspose: {
      const Tensor& A = nodes_[n.in[0]].val;
      n.val = Tensor::zeros({A.shape[1], A.shape[0]});
      MapM(n.val.v.data(), A.shape[1], A.shape[0]) =
          as_mat(A, A.shape[0], A.shape[1]).transpose();
      break;
    }
    case Op::kReshape: {
      n.val = nodes_[n.in[0]].val;
      n.val.shape.assign(n.aux.begin(), n.aux.end());
      break;
    }
    case Op::kConcatLast: {
      const Tensor& first = nodes_[n.in[0]].val;
      const int rows = lead_rows(first);
      int total = 0;
      for (Id p : n.in) total += last_dim(nodes_[p].val);
      std::vector<int> shape = first.shape;
      shape.back() = total;
      n.val = Tensor::zeros(shape);
      for (int i = 0; i < rows; ++i) {
        int off = 0;
        for (Id p : n.in) {
          const Tensor& part = nodes_[p].val;
          const int d = last_dim(part);
          for (int j = 0; j < d; ++j)
            n.val.v[static_cast<size_t>(i) * total + off + j] =
                part.v[static_cast<size_t>(i) * d + j];
          off += d;
        }
      }
      break;
    }
    case Op::kSliceLast: {
      const Tensor& a = nodes_[n.in[0]].val;
      const int rows = lead_rows(a), d = last_dim(a);
      const int start = n.aux[0], len = n.aux[1];
      std::vector<int> shape = a.shape;
      shape.back() = len;
      n.val = Tensor::zeros(shape);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < len; ++j)
          n.val.v[static_cast<size_t>(i) * len + j] =
              a.v[static_cast<size_t>(i) * d + start + j];
      break;
    }
    case Op::kRow: {
      const Tensor& a = nodes_[n.in[0]].val;
      const int d = a.cols();
      n.val = Tensor::zeros({1, d});
      for (int j = 0; j < d; ++j) n.val.v[j] = a.at(n.aux[0], j);
      break;
    }
    case Op::kSumAll:
    case Op::kMeanAll: {
      const Tensor& a = nodes_[n.in[0]].val;
      double s = 0.0;
      for (double x : a.v) s += x;
      if (n.op == Op::kMeanAll) s /= static_cast<double>(a.numel());
      n.val = Tensor::scalar(s);
      break;
    }
    case Op::kSqrt: {
      const Tensor& a = nodes_[n.in[0]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = std::sqrt(a.v[i]);
      break;
    }
    case Op::kExp: {
      const Tensor& a = nodes_[n.in[0]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = std::exp(a.v[i]);
      break;
    }
    case Op::kLog: {
      const Tensor& a = nodes_[n.in[0]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i) n.val.v[i] = std::log(a.v[i]);
      break;
    }
    case Op::kRelu: {
      const Tensor& a = nodes_[n.in[0]].val;
      n.val = Tensor::zeros(a.shape);
      for (int64_t i = 0; i < a.numel(); ++i)
        n.val.v[i] = a.v[i] > 0.0 ? a.v[i] : 0.0;
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& a = nodes_[n.in[0]].val;
      const int rows = lead_rows(a), d = last_dim(a);
      n.val = Tensor::zeros(a.shape);
      n.saved.assign(rows, 0.0);
      for (int i = 0; i < rows; ++i) {
        const double* x = &a.v[static_cast<size_t>(i) * d];
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        n.saved[i] = inv;
        for (int j = 0; j < d; ++j)
          n.val.v[static_cast<size_t>(i) * d + j] = (x[j] - mean) * inv;
      }
      break;
    }
    case Op::kSoftmaxLast: {
      const Tensor& a = nodes_[n.in[0]].val;
      const int rows = lead_rows(a), d = last_dim(a);
      n.val = Tensor::zeros(a.shape);
      for (int i = 0; i < rows; ++i) {
        const double* x = &a.v[static_cast<size_t>(i) * d];
        double* y = &n.val.v[static_cast<size_t>(i) * d];
        double mx = x[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
          y[j] = std::exp(x[j] - mx);
          z += y[j];
        }
        for (int j = 0; j < d; ++j) y[j] /= z;
      }
      break;
    }
    case Op::kPairDist: {
      const Tensor &X = nodes_[n.in[0]].val, &Y = nodes_[n.in[1]].val;
      const int m = X.rows(), q = Y.rows(), d = X.cols();
      n.val = Tensor::zeros({m, q});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < q; ++j) {
          double s = 0.0;
          for (int c = 0; c < d; ++c) {
            const double diff = X.at(i, c) - Y.at(j, c);
            s += diff * diff;
          }
          n.val.at(i, j) = std::sqrt(s);
        }
      break;
    }
    case Op::kStopGrad:
      n.val = nodes_[n.in[0]].val;
      break;
  }
}

void Tape::replay() {
  for (auto& n : nodes_)
    if (n.op != Op::kInput) eval(n);
}

void Tape::backward(Id output, const Tensor& seed) {
  require(seed.shape == nodes_[output].val.shape,
          "backward: seed shape mismatch with output");
  for (auto& n : nodes_) n.grad = Tensor::zeros(n.val.shape);
  nodes_[output].grad = seed;
  for (Id id = output; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (n.op == Op::kInput || n.op == Op::kStopGrad) continue;
    backprop(n);
  }
}

void Tape::backprop(const Node& n) {
  const Tensor& g = n.grad;
  auto gin = [&](int k) -> Tensor& { return nodes_[n.in[k]].grad; };
  switch (n.op) {
    case Op::kAdd:
      for (int64_t i = 0; i < g.numel(); ++i) {
        gin(0).v[i] += g.v[i];
        gin(1).v[i] += g.v[i];
      }
      break;
    case Op::kSub:
      for (int64_t i = 0; i < g.numel(); ++i) {
        gin(0).v[i] += g.v[i];
        gin(1).v[i] -= g.v[i];
      }
      break;
    case Op::kMul: {
      const Tensor &a = nodes_[n.in[0]].val, &b = nodes_[n.in[1]].val;
      for (int64_t i = 0; i < g.numel(); ++i) {
        gin(0).v[i] += g.v[i] * b.v[i];
        gin(1).v[i] += g.v[i] * a.v[i];
      }
      break;
    }
    case Op::kAddRow: {
      const int rows = lead_rows(n.val), d = last_dim(n.val);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) {
          const double gx = g.v[static_cast<size_t>(i) * d + j];
          gin(0).v[static_cast<size_t>(i) * d + j] += gx;
          gin(1).v[j] += gx;
        }
      break;
    }
    case Op::kMulRow: {
      const Tensor &a = nodes_[n.in[0]].val, &r = nodes_[n.in[1]].val;
      const int rows = lead_rows(n.val), d = last_dim(n.val);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) {
          const double gx = g.v[static_cast<size_t>(i) * d + j];
          gin(0).v[static_cast<size_t>(i) * d + j] += gx * r.v[j];
          gin(1).v[j] += gx * a.v[static_cast<size_t>(i) * d + j];
        }
      break;
    }
    case Op::kAffine:
      for (int64_t i = 0; i < g.numel(); ++i) gin(0).v[i] += n.a * g.v[i];
      break;
    case Op::kMatmul: {
      const Tensor &A = nodes_[n.in[0]].val, &B = nodes_[n.in[1]].val;
      const int m = A.rows(), k = A.cols(), p = B.cols();
      MapM(gin(0).v.data(), m, k).noalias() +=
          as_mat(g, m, p) * as_mat(B, k, p).transpose();
      MapM(gin(1).v.data(), k, p).noalias() +=
          as_mat(A, m, k).transpose() * as_mat(g, m, p);
      break;
    }
    case Op::kTranspose: {
      const int r = n.val.shape[0], c = n.val.shape[1];
      MapM(gin(0).v.data(), c, r) += as_mat(g, r, c).transpose();
      break;
    }
    case Op::kReshape:
      for (int64_t i = 0; i < g.numel(); ++i) gin(0).v[i] += g.v[i];
      break;
    case Op::kConcatLast: {
      const int rows = lead_rows(n.val), total = last_dim(n.val);
      for (int i = 0; i < rows; ++i) {
        int off = 0;
        for (size_t k = 0; k < n.in.size(); ++k) {
          Tensor& gk = nodes_[n.in[k]].grad;
          const int d = last_dim(nodes_[n.in[k]].val);
          for (int j = 0; j < d; ++j)
            gk.v[static_cast<size_t>(i) * d + j] +=
                g.v[static_cast<size_t>(i) * total + off + j];
          off += d;
        }
      }
      break;
    }
    case Op::kSliceLast: {
      const Tensor& a = nodes_[n.in[0]].val;
      const int rows = lead_rows(a), d = last_dim(a);
      const int start = n.aux[0], len = n.aux[1];
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < len; ++j)
          gin(0).v[static_cast<size_t>(i) * d + start + j] +=
              g.v[static_cast<size_t>(i) * len + j];
      break;
    }
    case Op::kRow: {
      const int d = n.val.numel();
      Tensor& ga = gin(0);
      const int cols = nodes_[n.in[0]].val.cols();
      for (int j = 0; j < d; ++j)
        ga.v[static_cast<size_t>(n.aux[0]) * cols + j] += g.v[j];
      break;
    }
    case Op::kSumAll:
      for (auto& x : gin(0).v) x += g.v[0];
      break;
    case Op::kMeanAll: {
      const double s = g.v[0] / static_cast<double>(gin(0).numel());
      for (auto& x : gin(0).v) x += s;
      break;
    }
    case Op::kSqrt:
      for (int64_t i = 0; i < g.numel(); ++i)
        gin(0).v[i] += g.v[i] * 0.5 / n.val.v[i];
      break;
    case Op::kExp:
      for (int64_t i = 0; i < g.numel(); ++i) gin(0).v[i] += g.v[i] * n.val.v[i];
      break;
    case Op::kLog: {
      const Tensor& a = nodes_[n.in[0]].val;
      for (int64_t i = 0; i < g.numel(); ++i) gin(0).v[i] += g.v[i] / a.v[i];
      break;
    }
    case Op::kRelu: {
      const Tensor& a = nodes_[n.in[0]].val;
      // subgradient 0 at the kink
      for (int64_t i = 0; i < g.numel(); ++i)
        if (a.v[i] > 0.0) gin(0).v[i] += g.v[i];
      break;
    }
    case Op::kLayerNorm: {
      const int rows = lead_rows(n.val), d = last_dim(n.val);
      for (int i = 0; i < rows; ++i) {
        const double* y = &n.val.v[static_cast<size_t>(i) * d];
        const double* gy = &g.v[static_cast<size_t>(i) * d];
        double mg = 0.0, mgy = 0.0;
        for (int j = 0; j < d; ++j) {
          mg += gy[j];
          mgy += gy[j] * y[j];
        }
        mg /= d;
        mgy /= d;
        const double inv = n.saved[i];
        for (int j = 0; j < d; ++j)
          gin(0).v[static_cast<size_t>(i) * d + j] +=
              inv * (gy[j] - mg - y[j] * mgy);
      }
      break;
    }
    case Op::kSoftmaxLast: {
      const int rows = lead_rows(n.val), d = last_dim(n.val);
      for (int i = 0; i < rows; ++i) {
        const double* y = &n.val.v[static_cast<size_t>(i) * d];
        const double* gy = &g.v[static_cast<size_t>(i) * d];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < d; ++j)
          gin(0).v[static_cast<size_t>(i) * d + j] += y[j] * (gy[j] - dot);
      }
      break;
    }
    case Op::kPairDist: {
      const Tensor &X = nodes_[n.in[0]].val, &Y = nodes_[n.in[1]].val;
      const int m = X.rows(), q = Y.rows(), d = X.cols();
      Tensor &gx = gin(0), &gy = gin(1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < q; ++j) {
          const double dist = n.val.at(i, j);
          if (dist == 0.0) continue;  // subgradient 0 for coincident points
          const double s = g.at(i, j) / dist;
          for (int c = 0; c < d; ++c) {
            const double diff = X.at(i, c) - Y.at(j, c);
            gx.v[static_cast<size_t>(i) * d + c] += s * diff;
            gy.v[static_cast<size_t>(j) * d + c] -= s * diff;
          }
        }
      break;
    }
    case Op::kInput:
    case Op::kStopGrad:
      break;
  }
}

namespace {

double check_impl(const std::function<Tape::Id(Tape&, Tape::Id)>& fn,
                  const Tensor& point, double step,
                  const std::vector<int64_t>* coords) {
  Tape tape;
  Tape::Id x = tape.input(point);
  Tape::Id y = fn(tape, x);
  if (tape.value(y).numel() != 1)
    throw std::invalid_argument("check_gradients: fn must be scalar-valued");
  if (step <= 0.0) throw std::invalid_argument("check_gradients: step <= 0");
  tape.backward(y, Tensor::scalar(1.0));
  Tensor analytic = tape.grad(x);

  auto eval_at = [&](const Tensor& p) {
    tape.set_input(x, p);
    tape.replay();
    return tape.value(y).v[0];
  };

  double max_err = 0.0;
  auto probe = [&](int64_t i) {
    Tensor p = point;
    p.v[i] = point.v[i] + step;
    const double fp = eval_at(p);
    p.v[i] = point.v[i] - step;
    const double fm = eval_at(p);
    const double cd = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic.v[i] - cd) / std::max(1.0, std::abs(cd));
    max_err = std::max(max_err, err);
  };
  if (coords) {
    for (int64_t i : *coords) probe(i);
  } else {
    for (int64_t i = 0; i < point.numel(); ++i) probe(i);
  }
  return max_err;
}

}  // namespace

double check_gradients(const std::function<Tape::Id(Tape&, Tape::Id)>& fn,
                       const Tensor& point, double step) {
  return check_impl(fn, point, step, nullptr);
}

double check_gradients_sampled(
    const std::function<Tape::Id(Tape&, Tape::Id)>& fn, const Tensor& point,
    double step, const std::vector<int64_t>& coords) {
  return check_impl(fn, point, step, &coords);
}

}  // namespace celldiff::ad
