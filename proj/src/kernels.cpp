#include "celldiff/kernels.hpp"

#include <cmath>
#include <stdexcept>

#include "celldiff/rng.hpp"

namespace celldiff {

void validate_cell_batch(const CellBatch& x) {
  if (x.ndim() != 2 || x.shape[0] < 1 || x.shape[1] < 1)
    throw std::invalid_argument("cell batch must be a non-empty m x G matrix, got "
                                + shape_str(x.shape));
}

FiniteKernel FiniteKernel::linear(int gene_dim) {
  FiniteKernel k;
  k.kind_ = Kind::kLinear;
  k.input_dim_ = gene_dim;
  k.feature_dim_ = gene_dim;
  return k;
}

FiniteKernel FiniteKernel::random_features(int gene_dim, int feature_dim,
                                           uint64_t seed) {
  FiniteKernel k;
  k.kind_ = Kind::kRandomFeatures;
  k.input_dim_ = gene_dim;
  k.feature_dim_ = feature_dim;
  k.freqs_.resize(feature_dim, gene_dim);
  k.phases_.resize(feature_dim);
  Rng rng(seed);
  for (int i = 0; i < feature_dim; ++i) {
    for (int j = 0; j < gene_dim; ++j) k.freqs_(i, j) = rng.normal();
    k.phases_(i) = 2.0 * M_PI * rng.uniform();
  }
  k.amplitude_ = std::sqrt(2.0 / feature_dim);
  return k;
}

Tensor FiniteKernel::features(const CellBatch& x) const {
  validate_cell_batch(x);
  if (x.shape[1] != input_dim_)
    throw std::invalid_argument("kernel expects gene dimension "
                                + std::to_string(input_dim_));
  const int m = x.shape[0];
  if (kind_ == Kind::kLinear) return x;
  Tensor out = Tensor::zeros({m, feature_dim_});
  for (int i = 0; i < m; ++i) {
    Eigen::Map<const Eigen::VectorXd> xi(&x.v[static_cast<size_t>(i) * input_dim_],
                                         input_dim_);
    Eigen::VectorXd arg = freqs_ * xi + phases_;
    for (int f = 0; f < feature_dim_; ++f)
      out.at(i, f) = amplitude_ * std::cos(arg(f));
  }
  return out;
}

double FiniteKernel::k(const double* a, const double* b) const {
  if (kind_ == Kind::kLinear) {
    double s = 0.0;
    for (int j = 0; j < input_dim_; ++j) s += a[j] * b[j];
    return s;
  }
  Eigen::Map<const Eigen::VectorXd> va(a, input_dim_), vb(b, input_dim_);
  Eigen::VectorXd fa = (freqs_ * va + phases_).array().cos();
  Eigen::VectorXd fb = (freqs_ * vb + phases_).array().cos();
  return amplitude_ * amplitude_ * fa.dot(fb);
}

Eigen::MatrixXd FiniteKernel::jacobian(const double* x) const {
  if (kind_ == Kind::kLinear)
    return Eigen::MatrixXd::Identity(feature_dim_, input_dim_);
  Eigen::Map<const Eigen::VectorXd> vx(x, input_dim_);
  Eigen::VectorXd arg = freqs_ * vx + phases_;
  Eigen::MatrixXd jac(feature_dim_, input_dim_);
  for (int f = 0; f < feature_dim_; ++f)
    jac.row(f) = -amplitude_ * std::sin(arg(f)) * freqs_.row(f);
  return jac;
}

Eigen::VectorXd embed(const CellBatch& x, const FiniteKernel& k) {
  Tensor phi = k.features(x);
  const int m = phi.shape[0], d = phi.shape[1];
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < m; ++i)
    mu += Eigen::Map<const Eigen::VectorXd>(&phi.v[static_cast<size_t>(i) * d], d);
  return mu / m;
}

namespace {

// mean over all ordered pairs of k(rows of A, rows of B)
double mean_kernel(const Tensor& a, const Tensor& b, const FiniteKernel& k) {
  const int m = a.shape[0], n = b.shape[0], g = a.shape[1];
  double s = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      s += k.k(&a.v[static_cast<size_t>(i) * g], &b.v[static_cast<size_t>(j) * g]);
  return s / (static_cast<double>(m) * n);
}

double mean_pair_norm(const Tensor& a, const Tensor& b) {
  const int m = a.shape[0], n = b.shape[0], g = a.shape[1];
  double s = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double d2 = 0.0;
      for (int c = 0; c < g; ++c) {
        const double diff = a.at(i, c) - b.at(j, c);
        d2 += diff * diff;
      }
      s += std::sqrt(d2);
    }
  return s / (static_cast<double>(m) * n);
}

}  // namespace

double mmd_sq(const CellBatch& x, const CellBatch& y, const FiniteKernel& k) {
  validate_cell_batch(x);
  validate_cell_batch(y);
  if (x.shape[1] != y.shape[1])
    throw std::invalid_argument("mmd_sq: gene dimension mismatch");
  return mean_kernel(x, x, k) + mean_kernel(y, y, k) - 2.0 * mean_kernel(x, y, k);
}

double energy_distance(const CellBatch& x, const CellBatch& y) {
  validate_cell_batch(x);
  validate_cell_batch(y);
  if (x.shape[1] != y.shape[1])
    throw std::invalid_argument("energy_distance: gene dimension mismatch");
  return 2.0 * mean_pair_norm(x, y) - mean_pair_norm(x, x) - mean_pair_norm(y, y);
}

ad::Tape::Id energy_distance_node(ad::Tape& tape, ad::Tape::Id x,
                                  ad::Tape::Id y) {
  auto cross = tape.mean_all(tape.pair_dist(x, y));
  auto within_x = tape.mean_all(tape.pair_dist(x, x));
  auto within_y = tape.mean_all(tape.pair_dist(y, y));
  return tape.sub(tape.affine(cross, 2.0, 0.0), tape.add(within_x, within_y));
}

Eigen::MatrixXd noise_covariance_oracle(const CellBatch& x,
                                        const FiniteKernel& k) {
  validate_cell_batch(x);
  const int m = x.shape[0], g = x.shape[1];
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(k.feature_dim(), k.feature_dim());
  for (int j = 0; j < m; ++j) {
    Eigen::MatrixXd jac = k.jacobian(&x.v[static_cast<size_t>(j) * g]);
    c.noalias() += jac * jac.transpose();
  }
  return c / (static_cast<double>(m) * m);
}

Eigen::MatrixXd simulate_embedding_noise(const CellBatch& x,
                                         const FiniteKernel& k, double sigma,
                                         int trials, uint64_t seed) {
  validate_cell_batch(x);
  if (sigma <= 0.0) throw std::invalid_argument("simulate_embedding_noise: sigma <= 0");
  if (trials < 2) throw std::invalid_argument("simulate_embedding_noise: trials < 2");
  const int d = k.feature_dim();
  Rng rng(seed);
  Eigen::VectorXd mu0 = embed(x, k);
  Eigen::MatrixXd deltas(trials, d);
  CellBatch noisy = x;
  for (int t = 0; t < trials; ++t) {
    for (size_t i = 0; i < x.v.size(); ++i) noisy.v[i] = x.v[i] + sigma * rng.normal();
    deltas.row(t) = (embed(noisy, k) - mu0).transpose();
  }
  Eigen::RowVectorXd mean = deltas.colwise().mean();
  Eigen::MatrixXd centered = deltas.rowwise() - mean;
  return centered.transpose() * centered / (trials - 1.0);
}

double gaussian_kl_shared_cov(const Eigen::VectorXd& m1,
                              const Eigen::VectorXd& m2,
                              const Eigen::MatrixXd& c) {
  if (m1.size() != m2.size() || c.rows() != c.cols() || c.rows() != m1.size())
    throw std::invalid_argument("gaussian_kl_shared_cov: dimension mismatch");
  if (!c.isApprox(c.transpose(), 1e-10))
    throw std::invalid_argument("gaussian_kl_shared_cov: covariance not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("gaussian_kl_shared_cov: covariance not SPD");
  Eigen::VectorXd diff = m1 - m2;
  return 0.5 * diff.dot(llt.solve(diff));
}

}  // namespace celldiff
