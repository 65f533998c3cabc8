#include "celldiff/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace celldiff {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double mean_rank = 0.5 * (double(i + 1) + double(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("pearson: need two equal-length vectors, n >= 2");
  const double n = double(x.size());
  double sx = 0, sy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

namespace {

double rank_sum_of_x(const std::vector<double>& x, const std::vector<double>& y,
                     std::vector<double>* pooled_ranks_out) {
  std::vector<double> pooled = x;
  pooled.insert(pooled.end(), y.begin(), y.end());
  std::vector<double> ranks = average_ranks(pooled);
  double w = 0.0;
  for (size_t i = 0; i < x.size(); ++i) w += ranks[i];
  if (pooled_ranks_out) *pooled_ranks_out = std::move(ranks);
  return w;
}

}  // namespace

double wilcoxon_exact_p(const std::vector<double>& x,
                        const std::vector<double>& y) {
  const int n = int(x.size()), m = int(y.size()), total = n + m;
  if (n < 1 || m < 1)
    throw std::invalid_argument("wilcoxon: both samples must be non-empty");
  std::vector<double> ranks;
  const double w_obs = rank_sum_of_x(x, y, &ranks);
  const double mean = n * double(total + 1) / 2.0;
  const double dev = std::abs(w_obs - mean);

  // walk all size-n index subsets of the pooled ranks
  std::vector<int> pick(n);
  std::iota(pick.begin(), pick.end(), 0);
  int64_t hits = 0, count = 0;
  while (true) {
    double w = 0.0;
    for (int i : pick) w += ranks[i];
    ++count;
    if (std::abs(w - mean) >= dev - 1e-12) ++hits;
    int i = n - 1;
    while (i >= 0 && pick[i] == total - n + i) --i;
    if (i < 0) break;
    ++pick[i];
    for (int j = i + 1; j < n; ++j) pick[j] = pick[j - 1] + 1;
  }
  return double(hits) / double(count);
}

double wilcoxon_normal_p(const std::vector<double>& x,
                         const std::vector<double>& y) {
  const double n = double(x.size()), m = double(y.size());
  if (x.empty() || y.empty())
    throw std::invalid_argument("wilcoxon: both samples must be non-empty");
  const double total = n + m;
  std::vector<double> ranks;
  const double w = rank_sum_of_x(x, y, &ranks);
  const double mean = n * (total + 1) / 2.0;

  // tie correction: sum over tie groups of (t^3 - t)
  std::vector<double> pooled = x;
  pooled.insert(pooled.end(), y.begin(), y.end());
  std::sort(pooled.begin(), pooled.end());
  double tie_term = 0.0;
  size_t i = 0;
  while (i < pooled.size()) {
    size_t j = i;
    while (j + 1 < pooled.size() && pooled[j + 1] == pooled[i]) ++j;
    const double t = double(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  const double var = n * m / 12.0 *
                     ((total + 1) - tie_term / (total * (total - 1)));
  if (var <= 0.0) return 1.0;
  double num = w - mean;
  // continuity correction toward the mean
  if (num > 0.5) num -= 0.5;
  else if (num < -0.5) num += 0.5;
  else num = 0.0;
  const double z = num / std::sqrt(var);
  return std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
}

double wilcoxon_rank_sum(const std::vector<double>& x,
                         const std::vector<double>& y) {
  if (x.size() + y.size() <= 10) return wilcoxon_exact_p(x, y);
  return wilcoxon_normal_p(x, y);
}

std::vector<double> bh_adjust(const std::vector<double>& p) {
  const size_t n = p.size();
  for (double v : p)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("bh_adjust: p-values must be in [0,1]");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return p[a] < p[b]; });
  std::vector<double> adj(n, 0.0);
  double running = 1.0;
  for (size_t i = n; i-- > 0;) {
    const double q = std::min(1.0, p[order[i]] * double(n) / double(i + 1));
    running = std::min(running, q);
    adj[order[i]] = running;
  }
  return adj;
}

double auroc(const std::vector<bool>& labels,
             const std::vector<double>& scores) {
  if (labels.size() != scores.size())
    throw std::invalid_argument("auroc: size mismatch");
  int64_t pos = 0, neg = 0;
  for (bool b : labels) (b ? pos : neg)++;
  if (pos == 0 || neg == 0) return kNaN;
  const std::vector<double> ranks = average_ranks(scores);
  double rank_pos = 0.0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) rank_pos += ranks[i];
  return (rank_pos - double(pos) * (pos + 1) / 2.0) / (double(pos) * neg);
}

double auprc(const std::vector<bool>& labels,
             const std::vector<double>& scores) {
  if (labels.size() != scores.size())
    throw std::invalid_argument("auprc: size mismatch");
  int64_t pos = 0;
  for (bool b : labels) pos += b;
  if (pos == 0 || pos == int64_t(labels.size())) return kNaN;

  std::vector<size_t> order(labels.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  double area = 0.0, prev_recall = 0.0;
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    // tied scores form one cutoff
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    for (size_t k = i; k <= j; ++k) (labels[order[k]] ? tp : fp)++;
    const double recall = double(tp) / double(pos);
    const double precision = double(tp) / double(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j + 1;
  }
  return area;
}

}  // namespace celldiff
