#include "celldiff/baselines.hpp"

#include <stdexcept>

namespace celldiff {

const std::vector<std::string>& mean_level_names() {
  static const std::vector<std::string> names{"perturbation", "context",
                                              "condition", "overall"};
  return names;
}

MeanLevel mean_level_from_name(const std::string& name) {
  if (name == "perturbation") return MeanLevel::kPerturbation;
  if (name == "context") return MeanLevel::kContext;
  if (name == "condition") return MeanLevel::kCondition;
  if (name == "overall") return MeanLevel::kOverall;
  std::string valid;
  for (const auto& n : mean_level_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown mean level '" + name
                              + "' (valid: " + valid + ")");
}

CellBatch replicate_profile(const std::vector<double>& profile, int m) {
  if (m < 1 || profile.empty())
    throw std::invalid_argument("replicate_profile: need m >= 1 and a profile");
  Tensor out = Tensor::zeros({m, int(profile.size())});
  for (int i = 0; i < m; ++i)
    for (size_t j = 0; j < profile.size(); ++j)
      out.at(i, int(j)) = profile[j];
  return out;
}

namespace {

struct Accum {
  std::vector<double> sum;
  int n = 0;

  void add(const Tensor& mat, int row) {
    if (sum.empty()) sum.assign(mat.cols(), 0.0);
    for (int j = 0; j < mat.cols(); ++j) sum[j] += mat.at(row, j);
    ++n;
  }
  std::vector<double> mean() const {
    std::vector<double> out = sum;
    for (auto& x : out) x /= n;
    return out;
  }
};

}  // namespace

MeanBaseline MeanBaseline::fit(const Dataset& ds, MeanLevel level) {
  ds.validate();
  MeanBaseline b;
  b.level_ = level;
  Accum overall;
  std::map<int, Accum> by_pert, by_context;
  std::map<std::pair<int, int>, Accum> by_condition;
  for (int i = 0; i < ds.cells(); ++i) {
    const CellMeta& m = ds.meta[i];
    if (m.split != Split::kTrain) continue;
    if (m.perturbation > 0) overall.add(ds.matrix, i);
    by_pert[m.perturbation].add(ds.matrix, i);
    by_context[m.context].add(ds.matrix, i);
    by_condition[{m.context, m.perturbation}].add(ds.matrix, i);
  }
  if (overall.n == 0)
    throw std::invalid_argument("mean baseline: no perturbed training cells");
  b.overall_ = overall.mean();
  for (const auto& [k, a] : by_pert) b.by_pert_[k] = a.mean();
  for (const auto& [k, a] : by_context) b.by_context_[k] = a.mean();
  for (const auto& [k, a] : by_condition) b.by_condition_[k] = a.mean();
  return b;
}

std::vector<double> MeanBaseline::predict(const ConditionKey& key) const {
  switch (level_) {
    case MeanLevel::kOverall:
      return overall_;
    case MeanLevel::kPerturbation: {
      auto it = by_pert_.find(key.perturbation);
      return it == by_pert_.end() ? overall_ : it->second;
    }
    case MeanLevel::kContext: {
      auto it = by_context_.find(key.context);
      return it == by_context_.end() ? overall_ : it->second;
    }
    case MeanLevel::kCondition: {
      auto it = by_condition_.find({key.context, key.perturbation});
      return it == by_condition_.end() ? overall_ : it->second;
    }
  }
  throw std::logic_error("mean baseline: bad level enum");
}

LinearBaseline LinearBaseline::fit(const Dataset& ds, double ridge) {
  ds.validate();
  if (ridge < 0.0)
    throw std::invalid_argument("linear baseline: ridge must be nonnegative");
  LinearBaseline b;
  b.gene_dim_ = ds.gene_dim();
  for (const auto& m : ds.meta) {
    b.n_contexts_ = std::max(b.n_contexts_, m.context + 1);
    b.n_perts_ = std::max(b.n_perts_, m.perturbation);
  }
  const int g = b.gene_dim_;
  const int d = 1 + b.n_contexts_ + b.n_perts_ + g;

  // training pseudobulks per (context, perturbation) pair
  std::map<std::pair<int, int>, Accum> pairs;
  for (int i = 0; i < ds.cells(); ++i) {
    const CellMeta& m = ds.meta[i];
    if (m.split != Split::kTrain) continue;
    pairs[{m.context, m.perturbation}].add(ds.matrix, i);
  }
  Accum ctrl_overall;
  std::map<int, std::vector<double>> ctrl_by_context;
  for (const auto& [key, a] : pairs) {
    if (key.second != 0) continue;
    ctrl_by_context[key.first] = a.mean();
  }
  for (int i = 0; i < ds.cells(); ++i)
    if (ds.meta[i].split == Split::kTrain && ds.meta[i].perturbation == 0)
      ctrl_overall.add(ds.matrix, i);

  std::vector<std::vector<double>> xs, ys;
  for (const auto& [key, a] : pairs) {
    const auto [c, tau] = key;
    if (tau == 0) continue;
    std::vector<double> x(d, 0.0);
    x[0] = 1.0;
    x[1 + c] = 1.0;
    x[1 + b.n_contexts_ + (tau - 1)] = 1.0;
    const auto it = ctrl_by_context.find(c);
    const std::vector<double> ctrl = it != ctrl_by_context.end()
                                         ? it->second
                                         : (ctrl_overall.n
                                                ? ctrl_overall.mean()
                                                : std::vector<double>(g, 0.0));
    for (int j = 0; j < g; ++j) x[1 + b.n_contexts_ + b.n_perts_ + j] = ctrl[j];
    xs.push_back(std::move(x));
    ys.push_back(a.mean());
  }
  if (xs.empty())
    throw std::invalid_argument("linear baseline: no perturbed training pairs");

  const int n = int(xs.size());
  Eigen::MatrixXd x_mat(n, d), y_mat(n, g);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x_mat(i, j) = xs[i][j];
    for (int j = 0; j < g; ++j) y_mat(i, j) = ys[i][j];
  }
  Eigen::MatrixXd gram = x_mat.transpose() * x_mat;
  for (int j = 1; j < d; ++j) gram(j, j) += ridge;  // intercept unpenalized
  gram(0, 0) += 1e-12;  // numerical floor only
  b.coef_ = gram.ldlt().solve(x_mat.transpose() * y_mat);
  return b;
}

std::vector<double> LinearBaseline::predict(
    const ConditionKey& key, const std::vector<double>& ctrl_pseudobulk) const {
  if (int(ctrl_pseudobulk.size()) != gene_dim_)
    throw std::invalid_argument("linear baseline: control profile length "
                                + std::to_string(ctrl_pseudobulk.size())
                                + " != gene count " + std::to_string(gene_dim_));
  const int d = 1 + n_contexts_ + n_perts_ + gene_dim_;
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(d);
  x(0) = 1.0;
  if (key.context >= 0 && key.context < n_contexts_) x(1 + key.context) = 1.0;
  if (key.perturbation >= 1 && key.perturbation <= n_perts_)
    x(1 + n_contexts_ + key.perturbation - 1) = 1.0;
  for (int j = 0; j < gene_dim_; ++j)
    x(1 + n_contexts_ + n_perts_ + j) = ctrl_pseudobulk[j];
  Eigen::RowVectorXd y = x * coef_;
  return std::vector<double>(y.data(), y.data() + gene_dim_);
}

}  // namespace celldiff
