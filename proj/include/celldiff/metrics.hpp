#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "celldiff/kernels.hpp"
#include "celldiff/rng.hpp"

namespace celldiff {

// One evaluated unit: a perturbation within a cellular context.
struct ConditionKey {
  int context = 0;
  int perturbation = 0;

  auto operator<=>(const ConditionKey&) const = default;
  std::string label() const;
};

std::vector<double> pseudobulk(const CellBatch& cells);

// mean(pert) - mean(ctrl), the relative perturbation effect
std::vector<double> pseudobulk_delta(const CellBatch& pert,
                                     const CellBatch& ctrl);

// Equalize cell counts by subsampling the larger batch (fixed seed).
void match_counts(CellBatch& a, CellBatch& b, uint64_t seed);

enum class DeltaDistance { kL1, kL2, kCosine };

// Discrimination score 1 - mean normalized strict rank: for each prediction,
// count true effects strictly closer than its own (ties don't count).
double pds(const std::map<ConditionKey, std::vector<double>>& pred,
           const std::map<ConditionKey, std::vector<double>>& truth,
           DeltaDistance dist);

struct DEResult {
  std::vector<double> p;
  std::vector<double> p_adj;
  std::vector<double> logfc;       // log2((mean_p + eps) / (mean_c + eps))
  std::vector<bool> significant;   // p_adj < 0.05

  int n_significant() const;
  std::vector<double> neglog10_padj() const;
};

// Per-gene rank-sum tests + BH + log fold changes, eps = 1e-8.
DEResult de_analysis(const CellBatch& pert, const CellBatch& ctrl);

// Overlap of top-k |logfc| significant genes; k from the truth for the first
// value, from the prediction for the second. NaN when the owning side has no
// significant gene.
struct OverlapScores {
  double de_over = 0.0;
  double de_prec = 0.0;
};
OverlapScores de_overlap_precision(const DEResult& truth, const DEResult& pred);

// Sign agreement over the significant-set intersection; NaN when empty.
double dir_agreement(const DEResult& truth, const DEResult& pred);

// Spearman of log fold changes over truth-significant genes; NaN when fewer
// than 2 or rank-degenerate.
double lfc_spearman(const DEResult& truth, const DEResult& pred);

// labels = truth significance, scores = prediction -log10 p_adj
struct RankScores {
  double auroc = 0.0;
  double auprc = 0.0;
};
RankScores de_rank_scores(const DEResult& truth, const DEResult& pred);

// Spearman over per-perturbation DE counts; NaN on zero variance.
double effect_size_corr(const std::vector<int>& true_counts,
                        const std::vector<int>& pred_counts);

struct EvalCondition {
  ConditionKey key;
  CellBatch truth;
  CellBatch pred;
  CellBatch ctrl;
};

struct PerConditionMetrics {
  ConditionKey key;
  double pdcorr = 0.0;
  double mae = 0.0;
  double mse = 0.0;
  double r2 = 0.0;
  double de_over = 0.0;
  double de_prec = 0.0;
  double dir_agr = 0.0;
  double lfc_spear = 0.0;
  double auroc = 0.0;
  double auprc = 0.0;
  int n_true_de = 0;
  int n_pred_de = 0;
};

// Metric column names in report order, and the matching member accessors.
const std::vector<std::string>& metric_names();
const std::vector<double PerConditionMetrics::*>& metric_accessors();

struct MetricReport {
  std::vector<PerConditionMetrics> rows;
  double pds_l1 = 0.0;
  double pds_l2 = 0.0;
  double pds_cos = 0.0;
  double es = 0.0;  // effect-size rank correlation, NaN when degenerate
  std::map<std::string, double> means;  // over defined rows only
  std::map<std::string, int> skipped;   // undefined-row counts
  std::vector<std::vector<double>> pred_scores;  // per row: -log10 p_adj

  std::string to_json(const std::string& method = "") const;
  static MetricReport from_json(const std::string& text,
                                std::string* method = nullptr);
  std::string per_condition_tsv() const;
};

// Full evaluation over matched conditions. Each side is subsampled to the
// smallest of (truth, pred, ctrl) counts so N_ctrl == N_pert in every test.
MetricReport evaluate(const std::vector<EvalCondition>& conds, uint64_t seed);

}  // namespace celldiff
