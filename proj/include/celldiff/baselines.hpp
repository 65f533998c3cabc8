#pragma once

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

#include "celldiff/dataset.hpp"
#include "celldiff/metrics.hpp"

namespace celldiff {

enum class MeanLevel { kPerturbation, kContext, kCondition, kOverall };

const std::vector<std::string>& mean_level_names();
MeanLevel mean_level_from_name(const std::string& name);

// Constant row repeated m times (pseudobulk predictors emit cells this way).
CellBatch replicate_profile(const std::vector<double>& profile, int m);

// Group-mean predictor over the training split; unseen groups fall back to
// the overall mean of perturbed training cells.
class MeanBaseline {
 public:
  static MeanBaseline fit(const Dataset& ds, MeanLevel level);
  std::vector<double> predict(const ConditionKey& key) const;
  MeanLevel level() const { return level_; }

 private:
  MeanLevel level_ = MeanLevel::kOverall;
  std::vector<double> overall_;
  std::map<int, std::vector<double>> by_pert_;
  std::map<int, std::vector<double>> by_context_;
  std::map<std::pair<int, int>, std::vector<double>> by_condition_;
};

// Ridge regression from [1, context one-hot, perturbation one-hot, control
// pseudobulk] onto the perturbed pseudobulk, one training row per train
// (context, perturbation) pair. The intercept column is unpenalized.
class LinearBaseline {
 public:
  static LinearBaseline fit(const Dataset& ds, double ridge = 1e-6);
  std::vector<double> predict(const ConditionKey& key,
                              const std::vector<double>& ctrl_pseudobulk) const;

 private:
  int n_contexts_ = 0;
  int n_perts_ = 0;  // perturbation ids 1..n_perts_
  int gene_dim_ = 0;
  Eigen::MatrixXd coef_;  // (1 + C + P + G) x G
};

}  // namespace celldiff
