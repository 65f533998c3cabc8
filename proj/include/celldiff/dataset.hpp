#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "celldiff/kernels.hpp"
#include "celldiff/rng.hpp"
#include "celldiff/tensor.hpp"

namespace celldiff {

enum class Split { kTrain, kValid, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct CellMeta {
  int cell_id = 0;
  int context = 0;
  int perturbation = 0;  // 0 is the unperturbed control population
  int dose = 0;
  int replicate = 0;
  Split split = Split::kTrain;

  bool operator==(const CellMeta&) const = default;
};

struct Dataset {
  Tensor matrix;  // N x G expression values
  std::vector<CellMeta> meta;
  std::vector<std::string> genes;

  int cells() const { return matrix.rows(); }
  int gene_dim() const { return matrix.cols(); }
  // Row-count consistency and split integrity: a (context, perturbation)
  // pair with any test cell must be entirely test.
  void validate() const;
};

struct SynthConfig {
  int gene_dim = 64;
  int contexts = 8;
  int perturbations = 20;      // ids 1..perturbations; 0 is control
  int replicates = 3;          // latent-factor draws per condition
  int cells_per_replicate = 64;
  double sigma_latent = 0.05;  // per-replicate distribution shift scale
  int effect_rank = 4;
  double effect_scale = 0.15;
  double noise_scale = 0.05;   // per-cell observation noise
  double zero_inflation = 0.3;
  double holdout_fraction = 0.3;  // fraction of perturbations with test contexts
  double valid_fraction = 0.1;    // fraction of trainable pairs used for validation
  uint64_t seed = 0;

  void validate() const;
};

// Family of condition distributions: context base mean, additive low-rank
// perturbation effect, per-replicate latent mean shift (same condition,
// different replicate => different realized distribution), relu + dropout
// observation model. Held-out perturbations lose >= 1 context to the test
// split but keep the rest in train.
Dataset generate_synthetic(const SynthConfig& cfg);

// Per cell: rescale to total 1e4, log1p, divide by 10. All-zero cells stay
// zero.
Tensor preprocess(const Tensor& raw_counts);

// Top-k gene indices by expression variance, descending; ties to the lower
// index.
std::vector<int> select_hvg(const Tensor& mat, int k);

// Condition filter; -1 means any.
struct BatchFilter {
  int context = -1;
  int perturbation = -1;
  int dose = -1;
  int split = -1;  // static_cast<int>(Split) or -1

  std::string describe() const;
};

std::vector<int> matching_cells(const Dataset& ds, const BatchFilter& f);

// m uniform draws: with replacement when fewer than m cells match, a
// without-replacement subsample otherwise.
CellBatch sample_batch(const Dataset& ds, const BatchFilter& f, int m,
                       Rng& rng);

// <prefix>.matrix.tsv (gene-name header + one row per cell, %.9g) and
// <prefix>.meta.tsv (cell_id, context, perturbation, dose, replicate, split).
void save_dataset(const Dataset& ds, const std::string& prefix);
Dataset load_dataset(const std::string& prefix);

}  // namespace celldiff
