#pragma once

#include <Eigen/Dense>

#include <cstdint>

#include "celldiff/autodiff.hpp"
#include "celldiff/tensor.hpp"

namespace celldiff {

// A batch of cells is an m x G matrix treated as an empirical distribution.
using CellBatch = Tensor;

void validate_cell_batch(const CellBatch& x);

// Kernel with an explicit finite-dimensional feature map, so the kernel mean
// embedding is an ordinary D-vector and every RKHS identity can be checked
// exactly. Two kinds: linear (phi = identity) and random cosine features.
class FiniteKernel {
 public:
  static FiniteKernel linear(int gene_dim);
  static FiniteKernel random_features(int gene_dim, int feature_dim,
                                      uint64_t seed);

  int input_dim() const { return input_dim_; }
  int feature_dim() const { return feature_dim_; }

  // phi(x) for every row of X: m x D
  Tensor features(const CellBatch& x) const;
  // k(a, b) = <phi(a), phi(b)> by construction
  double k(const double* a, const double* b) const;
  // Jacobian of phi at x: D x G
  Eigen::MatrixXd jacobian(const double* x) const;

 private:
  enum class Kind { kLinear, kRandomFeatures };
  Kind kind_;
  int input_dim_ = 0;
  int feature_dim_ = 0;
  Eigen::MatrixXd freqs_;          // D x G, rows are frequency vectors
  Eigen::VectorXd phases_;         // D
  double amplitude_ = 1.0;         // sqrt(2/D)
};

// Empirical kernel mean embedding (1/m) sum_j phi(x_j).
Eigen::VectorXd embed(const CellBatch& x, const FiniteKernel& k);

// V-statistic MMD^2 = mean k(x,x') + mean k(y,y') - 2 mean k(x,y), all
// ordered pairs including i == j. Equals |embed(X) - embed(Y)|^2 exactly.
double mmd_sq(const CellBatch& x, const CellBatch& y, const FiniteKernel& k);

// Energy distance V-statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'|.
double energy_distance(const CellBatch& x, const CellBatch& y);

// Differentiable energy distance between two tape nodes holding m x G and
// n x G batches. This is the L_MMD term of the training objective.
ad::Tape::Id energy_distance_node(ad::Tape& tape, ad::Tape::Id x,
                                  ad::Tape::Id y);

// Covariance operator of the embedding perturbation induced by i.i.d.
// per-cell Gaussian noise: (1/m^2) sum_j J_j J_j^T with J_j the Jacobian of
// phi at x_j.
Eigen::MatrixXd noise_covariance_oracle(const CellBatch& x,
                                        const FiniteKernel& k);

// Monte-Carlo check of the above: empirical covariance of
// embed(X + sigma*eps) - embed(X) over `trials` draws.
Eigen::MatrixXd simulate_embedding_noise(const CellBatch& x,
                                         const FiniteKernel& k, double sigma,
                                         int trials, uint64_t seed);

// KL between Gaussians with means m1, m2 and shared SPD covariance C:
// 0.5 * <m1 - m2, C^{-1} (m1 - m2)>.
double gaussian_kl_shared_cov(const Eigen::VectorXd& m1,
                              const Eigen::VectorXd& m2,
                              const Eigen::MatrixXd& c);

}  // namespace celldiff
