#pragma once

#include <vector>

namespace celldiff {

// Average ranks (1-based); tied values share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& v);

// Pearson correlation; NaN when either side has zero variance.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Spearman = Pearson of average ranks; NaN on zero rank variance.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Two-sided rank-sum test p-value. Exact enumeration over all group
// assignments when |x| + |y| <= 10, otherwise the normal approximation with
// tie and continuity corrections.
double wilcoxon_rank_sum(const std::vector<double>& x,
                         const std::vector<double>& y);

// The two branches, exposed so they can be compared on the same input.
double wilcoxon_exact_p(const std::vector<double>& x,
                        const std::vector<double>& y);
double wilcoxon_normal_p(const std::vector<double>& x,
                         const std::vector<double>& y);

// Benjamini-Hochberg step-up adjustment, order preserved.
std::vector<double> bh_adjust(const std::vector<double>& p);

// Rank-statistic AUROC; tied scores count 1/2. NaN unless both classes occur.
double auroc(const std::vector<bool>& labels, const std::vector<double>& scores);

// Area under the precision-recall curve, step interpolation, tied scores
// processed as one cutoff. NaN without positives.
double auprc(const std::vector<bool>& labels, const std::vector<double>& scores);

}  // namespace celldiff
