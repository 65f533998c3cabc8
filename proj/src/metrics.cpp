#include "celldiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "celldiff/stats.hpp"

namespace celldiff {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kLogFcEps = 1e-8;
constexpr double kSigLevel = 0.05;

using MetricField = double PerConditionMetrics::*;

const std::vector<std::pair<std::string, MetricField>>& metric_fields() {
  static const std::vector<std::pair<std::string, MetricField>> fields{
      {"pdcorr", &PerConditionMetrics::pdcorr},
      {"mae", &PerConditionMetrics::mae},
      {"mse", &PerConditionMetrics::mse},
      {"r2", &PerConditionMetrics::r2},
      {"de_over", &PerConditionMetrics::de_over},
      {"de_prec", &PerConditionMetrics::de_prec},
      {"dir_agr", &PerConditionMetrics::dir_agr},
      {"lfc_spear", &PerConditionMetrics::lfc_spear},
      {"auroc", &PerConditionMetrics::auroc},
      {"auprc", &PerConditionMetrics::auprc},
  };
  return fields;
}

std::string fmt9(double x) {
  if (std::isnan(x)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

}  // namespace

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, _] : metric_fields()) n.push_back(name);
    return n;
  }();
  return names;
}

const std::vector<double PerConditionMetrics::*>& metric_accessors() {
  static const std::vector<MetricField> fields = [] {
    std::vector<MetricField> f;
    for (const auto& [_, field] : metric_fields()) f.push_back(field);
    return f;
  }();
  return fields;
}

std::string ConditionKey::label() const {
  return "c" + std::to_string(context) + ":p" + std::to_string(perturbation);
}

std::vector<double> pseudobulk(const CellBatch& cells) {
  if (cells.rows() < 1)
    throw std::invalid_argument("pseudobulk: empty cell set");
  std::vector<double> out(cells.cols(), 0.0);
  for (int i = 0; i < cells.rows(); ++i)
    for (int j = 0; j < cells.cols(); ++j) out[j] += cells.at(i, j);
  for (auto& x : out) x /= cells.rows();
  return out;
}

std::vector<double> pseudobulk_delta(const CellBatch& pert,
                                     const CellBatch& ctrl) {
  if (pert.cols() != ctrl.cols())
    throw std::invalid_argument("pseudobulk_delta: gene dimension mismatch");
  std::vector<double> p = pseudobulk(pert), c = pseudobulk(ctrl);
  for (size_t j = 0; j < p.size(); ++j) p[j] -= c[j];
  return p;
}

namespace {

CellBatch subsample_rows(const CellBatch& x, int n, Rng& rng) {
  if (x.rows() <= n) return x;
  std::vector<int> idx(x.rows());
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < n; ++k) {
    const int j = k + int(rng.uniform_int(uint64_t(idx.size() - k)));
    std::swap(idx[k], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  Tensor out = Tensor::zeros({n, x.cols()});
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < x.cols(); ++j) out.at(k, j) = x.at(idx[k], j);
  return out;
}

}  // namespace

void match_counts(CellBatch& a, CellBatch& b, uint64_t seed) {
  const int n = std::min(a.rows(), b.rows());
  if (n < 1) throw std::invalid_argument("match_counts: empty batch");
  Rng rng(seed);
  Rng ra = rng.fork(1), rb = rng.fork(2);
  a = subsample_rows(a, n, ra);
  b = subsample_rows(b, n, rb);
}

namespace {

double delta_distance(const std::vector<double>& a,
                      const std::vector<double>& b, DeltaDistance dist) {
  switch (dist) {
    case DeltaDistance::kL1: {
      double s = 0.0;
      for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
      return s;
    }
    case DeltaDistance::kL2: {
      double s = 0.0;
      for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      return std::sqrt(s);
    }
    case DeltaDistance::kCosine: {
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      if (aa == 0.0 && bb == 0.0) return 0.0;
      if (aa == 0.0 || bb == 0.0) return 1.0;
      return 1.0 - ab / std::sqrt(aa * bb);
    }
  }
  throw std::logic_error("delta_distance: bad enum");
}

}  // namespace

double pds(const std::map<ConditionKey, std::vector<double>>& pred,
           const std::map<ConditionKey, std::vector<double>>& truth,
           DeltaDistance dist) {
  if (pred.size() != truth.size() || pred.size() < 2)
    throw std::invalid_argument("pds: need >= 2 matched conditions");
  for (const auto& [key, _] : pred)
    if (!truth.count(key))
      throw std::invalid_argument("pds: prediction for unknown condition "
                                  + key.label());
  const double m = double(pred.size());
  double rank_sum = 0.0;
  for (const auto& [key, dhat] : pred) {
    const double own = delta_distance(dhat, truth.at(key), dist);
    int r = 0;
    for (const auto& [other, dtrue] : truth) {
      if (other == key) continue;
      if (delta_distance(dhat, dtrue, dist) < own) ++r;
    }
    rank_sum += double(r) / m;
  }
  return 1.0 - rank_sum / m;
}

int DEResult::n_significant() const {
  int n = 0;
  for (bool s : significant) n += s;
  return n;
}

std::vector<double> DEResult::neglog10_padj() const {
  std::vector<double> out(p_adj.size());
  for (size_t i = 0; i < p_adj.size(); ++i)
    out[i] = -std::log10(std::max(p_adj[i], 1e-300));
  return out;
}

DEResult de_analysis(const CellBatch& pert, const CellBatch& ctrl) {
  if (pert.cols() != ctrl.cols())
    throw std::invalid_argument("de_analysis: gene dimension mismatch");
  const int g = pert.cols();
  DEResult res;
  res.p.resize(g);
  res.logfc.resize(g);
  std::vector<double> x(pert.rows()), y(ctrl.rows());
  for (int j = 0; j < g; ++j) {
    double mp = 0.0, mc = 0.0;
    for (int i = 0; i < pert.rows(); ++i) {
      x[i] = pert.at(i, j);
      mp += x[i];
    }
    for (int i = 0; i < ctrl.rows(); ++i) {
      y[i] = ctrl.at(i, j);
      mc += y[i];
    }
    mp /= pert.rows();
    mc /= ctrl.rows();
    res.p[j] = wilcoxon_rank_sum(x, y);
    res.logfc[j] = std::log2((mp + kLogFcEps) / (mc + kLogFcEps));
  }
  res.p_adj = bh_adjust(res.p);
  res.significant.resize(g);
  for (int j = 0; j < g; ++j) res.significant[j] = res.p_adj[j] < kSigLevel;
  return res;
}

namespace {

// indices of the k largest |logfc| among a side's significant genes
std::vector<int> top_k_significant(const DEResult& r, int k) {
  std::vector<int> sig;
  for (size_t j = 0; j < r.significant.size(); ++j)
    if (r.significant[j]) sig.push_back(int(j));
  std::sort(sig.begin(), sig.end(), [&](int a, int b) {
    const double da = std::abs(r.logfc[a]), db = std::abs(r.logfc[b]);
    if (da != db) return da > db;
    return a < b;
  });
  if (int(sig.size()) > k) sig.resize(k);
  return sig;
}

double overlap_ratio(const std::vector<int>& reference,
                     const std::vector<int>& candidate) {
  int shared = 0;
  for (int gidx : candidate)
    if (std::find(reference.begin(), reference.end(), gidx) != reference.end())
      ++shared;
  return double(shared) / double(reference.size());
}

}  // namespace

OverlapScores de_overlap_precision(const DEResult& truth, const DEResult& pred) {
  if (truth.significant.size() != pred.significant.size())
    throw std::invalid_argument("de_overlap_precision: gene universe mismatch");
  OverlapScores out;
  const int kt = truth.n_significant(), kp = pred.n_significant();
  if (kt == 0) {
    out.de_over = kNaN;
  } else {
    auto ref = top_k_significant(truth, kt);
    auto cand = top_k_significant(pred, kt);
    out.de_over = overlap_ratio(ref, cand);
  }
  if (kp == 0) {
    out.de_prec = kNaN;
  } else {
    auto ref = top_k_significant(pred, kp);
    auto cand = top_k_significant(truth, kp);
    out.de_prec = overlap_ratio(ref, cand);
  }
  return out;
}

double dir_agreement(const DEResult& truth, const DEResult& pred) {
  if (truth.significant.size() != pred.significant.size())
    throw std::invalid_argument("dir_agreement: gene universe mismatch");
  int shared = 0, agree = 0;
  for (size_t j = 0; j < truth.significant.size(); ++j) {
    if (!truth.significant[j] || !pred.significant[j]) continue;
    ++shared;
    const double a = truth.logfc[j], b = pred.logfc[j];
    const int sa = (a > 0) - (a < 0), sb = (b > 0) - (b < 0);
    agree += sa == sb;
  }
  if (shared == 0) return kNaN;
  return double(agree) / shared;
}

double lfc_spearman(const DEResult& truth, const DEResult& pred) {
  if (truth.significant.size() != pred.significant.size())
    throw std::invalid_argument("lfc_spearman: gene universe mismatch");
  std::vector<double> a, b;
  for (size_t j = 0; j < truth.significant.size(); ++j) {
    if (!truth.significant[j]) continue;
    a.push_back(truth.logfc[j]);
    b.push_back(pred.logfc[j]);
  }
  if (a.size() < 2) return kNaN;
  return spearman(a, b);
}

RankScores de_rank_scores(const DEResult& truth, const DEResult& pred) {
  if (truth.significant.size() != pred.significant.size())
    throw std::invalid_argument("de_rank_scores: gene universe mismatch");
  RankScores out;
  out.auroc = auroc(truth.significant, pred.neglog10_padj());
  out.auprc = auprc(truth.significant, pred.neglog10_padj());
  return out;
}

double effect_size_corr(const std::vector<int>& true_counts,
                        const std::vector<int>& pred_counts) {
  if (true_counts.size() != pred_counts.size() || true_counts.size() < 2)
    throw std::invalid_argument("effect_size_corr: need >= 2 matched counts");
  std::vector<double> a(true_counts.begin(), true_counts.end());
  std::vector<double> b(pred_counts.begin(), pred_counts.end());
  return spearman(a, b);
}

MetricReport evaluate(const std::vector<EvalCondition>& conds, uint64_t seed) {
  if (conds.empty()) throw std::invalid_argument("evaluate: no conditions");
  const int g = conds.front().truth.cols();
  for (const auto& c : conds)
    if (c.truth.cols() != g || c.pred.cols() != g || c.ctrl.cols() != g)
      throw std::invalid_argument("evaluate: gene dimension mismatch at "
                                  + c.key.label());

  MetricReport rep;
  std::map<ConditionKey, std::vector<double>> true_deltas, pred_deltas;
  std::vector<int> true_counts, pred_counts;
  Rng root(seed);

  for (size_t ci = 0; ci < conds.size(); ++ci) {
    const auto& c = conds[ci];
    const int n = std::min({c.truth.rows(), c.pred.rows(), c.ctrl.rows()});
    if (n < 1)
      throw std::invalid_argument("evaluate: empty batch at " + c.key.label());
    Rng rng = root.fork(ci + 1);
    Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3);
    CellBatch truth = subsample_rows(c.truth, n, r1);
    CellBatch pred = subsample_rows(c.pred, n, r2);
    CellBatch ctrl = subsample_rows(c.ctrl, n, r3);

    std::vector<double> dt = pseudobulk_delta(truth, ctrl);
    std::vector<double> dp = pseudobulk_delta(pred, ctrl);
    true_deltas[c.key] = dt;
    pred_deltas[c.key] = dp;

    PerConditionMetrics row;
    row.key = c.key;
    row.pdcorr = g >= 2 ? pearson(dp, dt) : kNaN;
    double l1 = 0.0, l2 = 0.0;
    for (int j = 0; j < g; ++j) {
      l1 += std::abs(dp[j] - dt[j]);
      l2 += (dp[j] - dt[j]) * (dp[j] - dt[j]);
    }
    row.mae = l1 / g;
    row.mse = l2 / g;

    // R^2 on pseudobulk profiles against the truth mean
    std::vector<double> pb_t = pseudobulk(truth), pb_p = pseudobulk(pred);
    double mean_t = 0.0;
    for (double x : pb_t) mean_t += x;
    mean_t /= g;
    double ss_res = 0.0, ss_tot = 0.0;
    for (int j = 0; j < g; ++j) {
      ss_res += (pb_t[j] - pb_p[j]) * (pb_t[j] - pb_p[j]);
      ss_tot += (pb_t[j] - mean_t) * (pb_t[j] - mean_t);
    }
    row.r2 = ss_tot == 0.0 ? kNaN : 1.0 - ss_res / ss_tot;

    DEResult det = de_analysis(truth, ctrl);
    DEResult dep = de_analysis(pred, ctrl);
    row.n_true_de = det.n_significant();
    row.n_pred_de = dep.n_significant();
    OverlapScores ov = de_overlap_precision(det, dep);
    row.de_over = ov.de_over;
    row.de_prec = ov.de_prec;
    row.dir_agr = dir_agreement(det, dep);
    row.lfc_spear = lfc_spearman(det, dep);
    RankScores rs = de_rank_scores(det, dep);
    row.auroc = rs.auroc;
    row.auprc = rs.auprc;

    true_counts.push_back(row.n_true_de);
    pred_counts.push_back(row.n_pred_de);
    rep.pred_scores.push_back(dep.neglog10_padj());
    rep.rows.push_back(row);
  }

  if (conds.size() >= 2) {
    rep.pds_l1 = pds(pred_deltas, true_deltas, DeltaDistance::kL1);
    rep.pds_l2 = pds(pred_deltas, true_deltas, DeltaDistance::kL2);
    rep.pds_cos = pds(pred_deltas, true_deltas, DeltaDistance::kCosine);
    rep.es = effect_size_corr(true_counts, pred_counts);
  } else {
    rep.pds_l1 = rep.pds_l2 = rep.pds_cos = rep.es = kNaN;
  }

  for (const auto& [name, field] : metric_fields()) {
    double sum = 0.0;
    int defined = 0, skip = 0;
    for (const auto& row : rep.rows) {
      const double v = row.*field;
      if (std::isnan(v)) {
        ++skip;
      } else {
        sum += v;
        ++defined;
      }
    }
    rep.means[name] = defined ? sum / defined : kNaN;
    rep.skipped[name] = skip;
  }
  return rep;
}

namespace {

nlohmann::json num_or_null(double x) {
  if (std::isnan(x)) return nullptr;
  return x;
}

double null_to_nan(const nlohmann::json& j) {
  if (j.is_null()) return kNaN;
  return j.get<double>();
}

}  // namespace

std::string MetricReport::to_json(const std::string& method) const {
  nlohmann::json j;
  j["method"] = method;
  j["pds_l1"] = num_or_null(pds_l1);
  j["pds_l2"] = num_or_null(pds_l2);
  j["pds_cos"] = num_or_null(pds_cos);
  j["es"] = num_or_null(es);
  j["means"] = nlohmann::json::object();
  j["skipped"] = nlohmann::json::object();
  for (const auto& [k, v] : means) j["means"][k] = num_or_null(v);
  for (const auto& [k, v] : skipped) j["skipped"][k] = v;
  j["conditions"] = nlohmann::json::array();
  for (const auto& row : rows) {
    nlohmann::json r;
    r["context"] = row.key.context;
    r["perturbation"] = row.key.perturbation;
    for (const auto& [name, field] : metric_fields())
      r[name] = num_or_null(row.*field);
    r["n_true_de"] = row.n_true_de;
    r["n_pred_de"] = row.n_pred_de;
    j["conditions"].push_back(std::move(r));
  }
  j["pred_scores"] = nlohmann::json::array();
  for (const auto& scores : pred_scores) j["pred_scores"].push_back(scores);
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text,
                                     std::string* method) {
  nlohmann::json j = nlohmann::json::parse(text);
  MetricReport rep;
  if (method) *method = j.value("method", "");
  rep.pds_l1 = null_to_nan(j.at("pds_l1"));
  rep.pds_l2 = null_to_nan(j.at("pds_l2"));
  rep.pds_cos = null_to_nan(j.at("pds_cos"));
  rep.es = null_to_nan(j.at("es"));
  for (const auto& [k, v] : j.at("means").items())
    rep.means[k] = null_to_nan(v);
  for (const auto& [k, v] : j.at("skipped").items()) rep.skipped[k] = v;
  for (const auto& r : j.at("conditions")) {
    PerConditionMetrics row;
    row.key.context = r.at("context");
    row.key.perturbation = r.at("perturbation");
    for (const auto& [name, field] : metric_fields())
      row.*field = null_to_nan(r.at(name));
    row.n_true_de = r.at("n_true_de");
    row.n_pred_de = r.at("n_pred_de");
    rep.rows.push_back(row);
  }
  if (j.contains("pred_scores"))
    for (const auto& s : j.at("pred_scores"))
      rep.pred_scores.push_back(s.get<std::vector<double>>());
  return rep;
}

std::string MetricReport::per_condition_tsv() const {
  std::string out = "context\tperturbation";
  for (const auto& name : metric_names()) out += "\t" + name;
  out += "\tn_true_de\tn_pred_de\n";
  for (const auto& row : rows) {
    out += std::to_string(row.key.context) + "\t"
           + std::to_string(row.key.perturbation);
    for (const auto& [_, field] : metric_fields())
      out += "\t" + fmt9(row.*field);
    out += "\t" + std::to_string(row.n_true_de) + "\t"
           + std::to_string(row.n_pred_de) + "\n";
  }
  return out;
}

}  // namespace celldiff
