// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Criteria 1-8 are oracle and property
// checks; 9-11 are scaled-down end-to-end behavioral experiments.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "celldiff/baselines.hpp"
#include "celldiff/dataset.hpp"
#include "celldiff/diffusion.hpp"
#include "celldiff/kernels.hpp"
#include "celldiff/metrics.hpp"
#include "celldiff/mmdit.hpp"
#include "celldiff/stats.hpp"
#include "celldiff/trainer.hpp"

using namespace celldiff;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int num, bool ok, const std::string& detail) {
  std::printf("criterion %2d: %s  (%s)\n", num, ok ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ------------------------------------------------------------ criterion 1

// RKHS equivalence: |embed(X) - embed(Y)|^2 equals the pairwise-kernel
// V-statistic exactly, for both finite kernels.
void criterion_1() {
  const auto t0 = Clock::now();
  const int g = 6;
  const FiniteKernel kernels[2] = {FiniteKernel::linear(g),
                                   FiniteKernel::random_features(g, 32, 1)};
  Rng rng(10);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + int(rng.uniform_int(8));
    const int n = 1 + int(rng.uniform_int(8));
    Tensor x = Tensor::randn({m, g}, rng);
    Tensor y = Tensor::randn({n, g}, rng);
    for (const auto& k : kernels) {
      const double lhs = (embed(x, k) - embed(y, k)).squaredNorm();
      const double rhs = mmd_sq(x, y, k);
      worst = std::max(worst, std::abs(lhs - rhs));
    }
  }
  report(1, worst < 1e-12,
         fmt("max |embed gap - mmd_sq| = %.2e over 200 pairs x 2 kernels, "
             "%.1fs",
             worst, seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 2

// Per-cell Gaussian noise perturbs the embedding with covariance
// (1/m^2) sum_j J_j J_j^T. Linear kernel: exactly I/m.
void criterion_2() {
  const auto t0 = Clock::now();
  const int g = 5, m = 8;
  Rng rng(20);
  Tensor x = Tensor::randn({m, g}, rng);

  const auto lin = FiniteKernel::linear(g);
  const Eigen::MatrixXd mc = simulate_embedding_noise(x, lin, 1.0, 100000, 3);
  const Eigen::MatrixXd want = Eigen::MatrixXd::Identity(g, g) / m;
  double worst = 0.0;
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j)
      worst = std::max(worst, std::abs(mc(i, j) - want(i, j)));
  const bool linear_ok = worst <= 0.05 / m;

  // Random features: the Jacobian formula is the small-noise limit. The
  // linearization error scales as sigma^2 (odd noise moments vanish) and
  // sits far below any affordable Monte-Carlo floor, so all covariances
  // share one noise stream and the run at sigma = 1e-5 serves as a control
  // variate: it is the Jacobian term evaluated on those exact draws, and
  // differencing against it cancels the Monte-Carlo error.
  const auto rf = FiniteKernel::random_features(g, 16, 9);
  const Eigen::MatrixXd oracle = noise_covariance_oracle(x, rf);
  const int trials = 20000;
  auto cov_at = [&](double sigma) {
    return Eigen::MatrixXd(simulate_embedding_noise(x, rf, sigma, trials, 11)
                           / (sigma * sigma));
  };
  const Eigen::MatrixXd ref = cov_at(1e-5);
  // the reference itself must match the analytic formula within MC noise
  const double ref_dev = (ref - oracle).norm() / oracle.norm();
  const double dev_hi = (cov_at(1e-2) - ref).norm() / oracle.norm();
  const double dev_lo = (cov_at(1e-3) - ref).norm() / oracle.norm();
  const bool rf_ok = ref_dev < 0.05 && dev_lo < dev_hi;

  report(2, linear_ok && rf_ok,
         fmt("linear max entry err %.4f (cap %.4f); rf formula dev %.4f, "
             "linearization err %.1e -> %.1e, %.1fs",
             worst, 0.05 / m, ref_dev, dev_hi, dev_lo, seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 3

// Closed-form marginal: B_t = sqrt(abar_t) B_0 + sqrt(1 - abar_t) eps.
void criterion_3() {
  const auto t0 = Clock::now();
  const NoiseSchedule s = make_linear_schedule(1000);
  const int m = 32, g = 8, draws = 10000;
  Rng rng(30);
  Tensor b0 = Tensor::zeros({m, g});
  std::vector<double> row(g);
  for (int j = 0; j < g; ++j) row[j] = 2.0 + 4.0 * rng.uniform();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < g; ++j) b0.at(i, j) = row[j];

  bool ok = true;
  std::string detail;
  for (int t : {10, 500, 990}) {
    const double sa = std::sqrt(s.alpha_bar(t));
    std::vector<double> mean(g, 0.0);
    double var_acc = 0.0;
    for (int d = 0; d < draws; ++d) {
      Tensor eps = Tensor::randn({m, g}, rng);
      Tensor bt = q_sample(b0, t, eps, s);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < g; ++j) {
          mean[j] += bt.at(i, j) / (double(draws) * m);
          const double c = bt.at(i, j) - sa * row[j];
          var_acc += c * c;
        }
    }
    double err_sq = 0.0, exact_sq = 0.0;
    for (int j = 0; j < g; ++j) {
      err_sq += (mean[j] - sa * row[j]) * (mean[j] - sa * row[j]);
      exact_sq += sa * row[j] * sa * row[j];
    }
    const double mean_err =
        std::sqrt(err_sq) / std::max(1.0, std::sqrt(exact_sq));
    const double var = var_acc / (double(draws) * m * g);
    const double var_err = std::abs(var - (1.0 - s.alpha_bar(t)))
                           / (1.0 - s.alpha_bar(t));
    ok = ok && mean_err < 0.01 && var_err < 0.05;
    detail += fmt("t=%d mean %.4f var %.4f; ", t, mean_err, var_err);
  }
  report(3, ok, detail + fmt("%.1fs", seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 4

void criterion_4() {
  const auto t0 = Clock::now();
  const NoiseSchedule s = make_linear_schedule(1000);
  Rng rng(40);

  // eps <-> x0 round trip
  double worst_rt = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 1 + int(rng.uniform_int(6));
    const int g = 1 + int(rng.uniform_int(6));
    const int t = 1 + int(rng.uniform_int(1000));
    Tensor b0 = Tensor::randn({m, g}, rng);
    Tensor eps = Tensor::randn({m, g}, rng);
    Tensor bt = q_sample(b0, t, eps, s);
    Tensor rec = eps_from_x0(bt, b0, t, s);
    for (size_t i = 0; i < eps.v.size(); ++i)
      worst_rt = std::max(worst_rt, std::abs(rec.v[i] - eps.v[i]));
  }

  // deterministic DDIM with a perfect-x0 stub reconstructs B0
  const int m = 4, g = 5;
  Tensor target = Tensor::randn({m, g}, rng);
  for (auto& v : target.v) v = std::abs(v);  // keep the final clamp inert
  DenoiserFn stub = [&](const Tensor&, const Tensor&, const Tensor&, int,
                        const Condition&) { return target; };
  double worst_rec = 0.0;
  for (int K : {1, 10, 1000}) {
    SamplerConfig cfg;
    cfg.num_steps = K;
    cfg.eta = 0.0;
    cfg.seed = 5;
    Tensor out = sample(stub, Condition{}, Tensor::zeros({m, g}), m, g, cfg, s);
    for (size_t i = 0; i < out.v.size(); ++i)
      worst_rec = std::max(worst_rec, std::abs(out.v[i] - target.v[i]));
  }

  // same seed, byte-identical trajectories (eta > 0 consumes randomness)
  SamplerConfig cfg;
  cfg.num_steps = 25;
  cfg.eta = 0.5;
  cfg.seed = 77;
  Tensor a = sample(stub, Condition{}, Tensor::zeros({m, g}), m, g, cfg, s);
  Tensor b = sample(stub, Condition{}, Tensor::zeros({m, g}), m, g, cfg, s);
  const bool bytes_equal =
      a.v.size() == b.v.size()
      && std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;

  report(4, worst_rt < 1e-12 && worst_rec < 1e-9 && bytes_equal,
         fmt("round trip %.2e, stub reconstruction %.2e, same-seed identical "
             "%s, %.1fs",
             worst_rt, worst_rec, bytes_equal ? "yes" : "no",
             seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 5

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.gene_dim = 6;
  cfg.width = 8;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.n_contexts = 3;
  cfg.n_perturbations = 4;
  cfg.n_doses = 2;
  return cfg;
}

void criterion_5() {
  const auto t0 = Clock::now();
  MmDit model(tiny_config(), 50);
  Rng rng(51);
  // non-degenerate weights so gradients flow everywhere
  for (size_t i = 0; i < model.params().count(); ++i)
    for (auto& x : model.params().tensor(i).v) x = 0.2 * rng.normal();

  const int m = 4, g = 6, t = 321;
  const Condition cond{1, 2, 1};
  Tensor b0 = Tensor::randn({m, g}, rng);
  Tensor bt = Tensor::randn({m, g}, rng);
  Tensor sc = Tensor::randn({m, g}, rng);
  Tensor ctrl = Tensor::randn({m, g}, rng);

  auto loss_graph = [&](ad::Tape& tape, const std::vector<ad::Tape::Id>& pids) {
    auto out = model.forward_raw(tape, pids, tape.input(bt, false),
                                 tape.input(sc, false),
                                 tape.input(ctrl, false), t, cond);
    auto b0n = tape.input(b0, false);
    auto ed = energy_distance_node(tape, b0n, out);
    auto diff = tape.sub(b0n, out);
    auto mse = tape.scale(tape.sum_all(tape.mul(diff, diff)), 1.0 / m);
    return tape.add(ed, mse);
  };
  auto loss_value = [&]() {
    ad::Tape tape;
    auto pids = model.register_params(tape, model.params());
    return tape.value(loss_graph(tape, pids)).v[0];
  };

  // analytic gradients
  std::vector<Tensor> an;
  {
    ad::Tape tape;
    auto pids = model.register_params(tape, model.params());
    tape.backward(loss_graph(tape, pids), Tensor::scalar(1.0));
    for (auto id : pids) an.push_back(tape.grad(id));
  }

  // central differences on 64 random parameter coordinates
  Rng pick(52);
  double worst = 0.0;
  const double h = 1e-5;
  for (int c = 0; c < 64; ++c) {
    const size_t ti = size_t(pick.uniform_int(int64_t(model.params().count())));
    Tensor& p = model.params().tensor(ti);
    const size_t ei = size_t(pick.uniform_int(int64_t(p.v.size())));
    const double keep = p.v[ei];
    p.v[ei] = keep + h;
    const double up = loss_value();
    p.v[ei] = keep - h;
    const double dn = loss_value();
    p.v[ei] = keep;
    const double fd = (up - dn) / (2.0 * h);
    const double rel = std::abs(an[ti].v[ei] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, rel);
  }

  // self-conditioning first pass sits behind stop-grad: exactly zero gradient
  double sc_grad = 0.0;
  {
    ad::Tape tape;
    auto pids = model.register_params(tape, model.params());
    auto bt_n = tape.input(bt, false);
    auto ctrl_n = tape.input(ctrl, false);
    auto first = model.forward(tape, pids, bt_n,
                               tape.input(Tensor::zeros({m, g}), false),
                               ctrl_n, t, cond);
    auto out = model.forward_raw(tape, pids, bt_n, tape.stop_grad(first),
                                 ctrl_n, t, cond);
    auto b0n = tape.input(b0, false);
    auto ed = energy_distance_node(tape, b0n, out);
    auto diff = tape.sub(b0n, out);
    auto mse = tape.scale(tape.sum_all(tape.mul(diff, diff)), 1.0 / m);
    tape.backward(tape.add(ed, mse), Tensor::scalar(1.0));
    for (double v : tape.grad(first).v) sc_grad = std::max(sc_grad, std::abs(v));
  }

  report(5, worst < 1e-4 && sc_grad == 0.0,
         fmt("max rel grad err %.2e over 64 coords, first-pass grad %.1e, "
             "%.1fs",
             worst, sc_grad, seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 6

void criterion_6() {
  const auto t0 = Clock::now();

  // freshly initialized model: output is exactly zero
  MmDit zero_model(tiny_config(), 7);
  Rng rng(60);
  Tensor bt = Tensor::randn({3, 6}, rng);
  Tensor sc = Tensor::randn({3, 6}, rng);
  Tensor ctrl = Tensor::randn({3, 6}, rng);
  Tensor out = zero_model.denoise(zero_model.params(), bt, sc, ctrl, 40,
                                  {1, 2, 1});
  bool zeros_ok = true;
  for (double x : out.v) zeros_ok = zeros_ok && x == 0.0;

  // blocks are identities: with only the head randomized, the output equals
  // relu of the input embedding pushed through the head, bit for bit
  MmDit model(tiny_config(), 7);
  auto& head_w = model.params().by_name("head.w");
  auto& head_b = model.params().by_name("head.b");
  for (auto& x : head_w.v) x = rng.normal();
  for (auto& x : head_b.v) x = rng.normal();
  Tensor got = model.denoise(model.params(), bt, sc, ctrl, 10, {0, 0, 0});

  const auto& in_w = model.params().by_name("in_pert.w");
  const auto& in_b = model.params().by_name("in_pert.b");
  const int d = 8, g = 6;
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> h(d);
    for (int j = 0; j < d; ++j) {
      h[j] = in_b.v[j];
      for (int k = 0; k < g; ++k)
        h[j] += bt.at(i, k) * in_w.at(k, j) + sc.at(i, k) * in_w.at(g + k, j);
    }
    for (int o = 0; o < g; ++o) {
      double y = head_b.v[o];
      for (int j = 0; j < d; ++j) y += h[j] * head_w.at(j, o);
      worst = std::max(worst,
                       std::abs(got.at(i, o) - std::max(0.0, y))
                           / std::max(1.0, std::abs(y)));
    }
  }

  report(6, zeros_ok && worst < 1e-12,
         fmt("fresh output all zero %s, identity-path rel err %.2e, %.1fs",
             zeros_ok ? "yes" : "no", worst, seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 7

double auroc_pair_oracle(const std::vector<bool>& labels,
                         const std::vector<double>& scores) {
  double num = 0.0;
  int pos = 0, neg = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) ++pos; else ++neg;
    for (size_t j = 0; j < labels.size(); ++j) {
      if (!labels[i] || labels[j]) continue;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / (double(pos) * neg);
}

void criterion_7() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;

  // AUROC vs exhaustive pair enumeration on tie-heavy scores
  {
    const std::vector<double> scores{3, 1, 4, 1, 5, 9, 2, 6, 5, 3};
    const int n = int(scores.size());
    double worst = 0.0;
    for (int mask = 1; mask < (1 << n) - 1; ++mask) {
      std::vector<bool> labels(n);
      for (int i = 0; i < n; ++i) labels[i] = (mask >> i) & 1;
      worst = std::max(worst, std::abs(auroc(labels, scores)
                                       - auroc_pair_oracle(labels, scores)));
    }
    ok = ok && worst < 1e-12;
    detail += fmt("auroc %.1e; ", worst);
  }

  // Wilcoxon normal approximation vs exact enumeration, pooled n = 8
  {
    const std::vector<double> pool{0.3, 1.2, 0.8, 2.1, 1.7, 0.5, 1.1, 1.9};
    double worst = 0.0;
    for (int mask = 0; mask < (1 << 8); ++mask) {
      if (__builtin_popcount(mask) != 3) continue;
      std::vector<double> a, b;
      for (int i = 0; i < 8; ++i)
        ((mask >> i) & 1 ? a : b).push_back(pool[i]);
      worst = std::max(worst,
                       std::abs(wilcoxon_exact_p(a, b)
                                - wilcoxon_normal_p(a, b)));
    }
    ok = ok && worst < 0.05;
    detail += fmt("wilcoxon %.3f; ", worst);
  }

  // BH step-up running-minimum example
  {
    const auto q = bh_adjust({0.01, 0.02, 0.03, 0.04});
    for (double v : q) ok = ok && std::abs(v - 0.04) < 1e-15;
    detail += "bh ok; ";
  }

  // PDS hand instance vs brute force
  {
    std::map<ConditionKey, std::vector<double>> truth{
        {{0, 1}, {1, 0}}, {{0, 2}, {0, 1}}, {{0, 3}, {-1, 0}}};
    auto pred = truth;
    pred[{0, 1}] = {0.1, 0.9};  // strictly nearer truth 2 than truth 1
    const double got = pds(pred, truth, DeltaDistance::kL1);
    const double want = 1.0 - (1.0 / 3.0) / 3.0;
    ok = ok && std::abs(got - want) < 1e-12;
    detail += fmt("pds %.4f; ", got);
  }

  // shared-covariance KL vs the full multivariate Gaussian formula
  {
    Rng rng(70);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const int d = 2 + int(rng.uniform_int(5));
      Eigen::MatrixXd a(d, d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
      const Eigen::MatrixXd c =
          a * a.transpose() + Eigen::MatrixXd::Identity(d, d);
      Eigen::VectorXd m1(d), m2(d);
      for (int i = 0; i < d; ++i) {
        m1(i) = rng.normal();
        m2(i) = rng.normal();
      }
      // full KL with equal covariances: trace and log-det terms cancel
      const Eigen::MatrixXd ci = c.inverse();
      const double full = 0.5 * ((ci * c).trace()
                                 + (m2 - m1).dot(ci * (m2 - m1)) - d
                                 + 0.0);
      worst = std::max(worst,
                       std::abs(full - gaussian_kl_shared_cov(m1, m2, c)));
    }
    ok = ok && worst < 1e-10;
    detail += fmt("kl %.1e; ", worst);
  }

  report(7, ok, detail + fmt("%.1fs", seconds_since(t0)));
}

// ------------------------------------------------------------ criterion 8

void criterion_8() {
  const auto t0 = Clock::now();
  const int g = 20, n = 50, planted = 7, runs = 100;
  int detected = 0;
  double fdr_acc = 0.0;
  Rng root(80);
  for (int run = 0; run < runs; ++run) {
    Rng rng = root.fork(run + 1);
    Tensor ctrl = Tensor::zeros({n, g});
    Tensor pert = Tensor::zeros({n, g});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < g; ++j) {
        ctrl.at(i, j) = 1.0 + 0.1 * rng.normal();
        pert.at(i, j) = 1.0 + 0.1 * rng.normal()
                        + (j == planted ? 1.0 : 0.0);  // +10 sigma
      }
    DEResult de = de_analysis(pert, ctrl);
    if (de.significant[planted]) ++detected;
    int v = 0, r = 0;
    for (int j = 0; j < g; ++j)
      if (de.significant[j]) {
        ++r;
        if (j != planted) ++v;
      }
    if (r > 0) fdr_acc += double(v) / r;
  }
  const double power = double(detected) / runs;
  const double fdr = fdr_acc / runs;
  report(8, power >= 0.95 && fdr <= 0.08,
         fmt("planted-gene power %.2f, empirical FDR %.3f, %.1fs", power, fdr,
             seconds_since(t0)));
}

// -------------------------------------------------- end-to-end machinery

struct CondInfo {
  ConditionKey key;
  int dose = 0;
};

std::vector<CondInfo> pairs_of(const Dataset& ds, Split sp) {
  std::map<ConditionKey, int> seen;
  for (const auto& m : ds.meta)
    if (m.split == sp && m.perturbation > 0)
      seen.emplace(ConditionKey{m.context, m.perturbation}, m.dose);
  std::vector<CondInfo> out;
  for (const auto& [k, d] : seen) out.push_back({k, d});
  return out;
}

CellBatch cells_of(const Dataset& ds, int context, int perturbation,
                   int split = -1) {
  BatchFilter f;
  f.context = context;
  f.perturbation = perturbation;
  f.split = split;
  const auto idx = matching_cells(ds, f);
  Tensor out = Tensor::zeros({int(idx.size()), ds.gene_dim()});
  for (size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < ds.gene_dim(); ++j)
      out.at(int(i), j) = ds.matrix.at(idx[i], j);
  return out;
}

ModelConfig config_for(const Dataset& ds) {
  ModelConfig mc;
  mc.gene_dim = ds.gene_dim();
  mc.width = 64;
  mc.blocks = 2;
  mc.heads = 4;
  for (const auto& m : ds.meta) {
    mc.n_contexts = std::max(mc.n_contexts, m.context + 1);
    mc.n_perturbations = std::max(mc.n_perturbations, m.perturbation + 1);
    mc.n_doses = std::max(mc.n_doses, m.dose + 1);
  }
  return mc;
}

BatchProvider pair_provider(const Dataset& ds,
                            const std::vector<CondInfo>& pairs, int batch) {
  return [&ds, &pairs, batch](int, Rng& rng) {
    BatchPair bp;
    const CondInfo& pr = pairs[rng.uniform_int(int64_t(pairs.size()))];
    bp.b_pert = sample_batch(
        ds, {pr.key.context, pr.key.perturbation, -1, int(Split::kTrain)},
        batch, rng);
    bp.b_ctrl = sample_batch(ds, {pr.key.context, 0, -1, int(Split::kTrain)},
                             batch, rng);
    bp.cond = Condition{pr.key.context, pr.key.perturbation, pr.dose};
    return bp;
  };
}

// Generated cells for every listed condition, paired with matching truth and
// control batches.
std::vector<EvalCondition> generate_conditions(
    const MmDit& model, const Dataset& ds, const std::vector<CondInfo>& pairs,
    int cells, int sampler_steps, uint64_t seed) {
  const NoiseSchedule sched = make_linear_schedule(1000);
  SamplerConfig scfg;
  scfg.num_steps = sampler_steps;
  scfg.self_cond = model.config().self_cond;
  std::vector<EvalCondition> conds;
  Rng root(seed);
  int n = 0;
  for (const auto& pr : pairs) {
    Rng rng = root.fork(++n);
    CellBatch ctrl = sample_batch(
        ds, {pr.key.context, 0, -1, int(Split::kTrain)}, cells, rng);
    scfg.seed = rng.next_u64();
    EvalCondition ec;
    ec.key = pr.key;
    ec.pred = sample(model.denoiser_fn(true),
                     Condition{pr.key.context, pr.key.perturbation, pr.dose},
                     ctrl, cells, ds.gene_dim(), scfg, sched);
    ec.truth = cells_of(ds, pr.key.context, pr.key.perturbation);
    ec.ctrl = ctrl;
    conds.push_back(std::move(ec));
  }
  return conds;
}

double delta_pdcorr(const std::vector<EvalCondition>& conds) {
  double acc = 0.0;
  int n = 0;
  for (const auto& c : conds) {
    const double r = pearson(pseudobulk_delta(c.pred, c.ctrl),
                             pseudobulk_delta(c.truth, c.ctrl));
    if (std::isfinite(r)) {
      acc += r;
      ++n;
    }
  }
  return n ? acc / n : 0.0;
}

double delta_pds(const std::vector<EvalCondition>& conds) {
  std::map<ConditionKey, std::vector<double>> pred, truth;
  for (const auto& c : conds) {
    pred[c.key] = pseudobulk_delta(c.pred, c.ctrl);
    truth[c.key] = pseudobulk_delta(c.truth, c.ctrl);
  }
  return pds(pred, truth, DeltaDistance::kL1);
}

MmDit train_scratch(const Dataset& ds, const std::vector<CondInfo>& pairs,
                    int steps, double lambda_ed, uint64_t seed) {
  MmDit model(config_for(ds), seed);
  TrainConfig tc;
  tc.total_steps = steps;
  tc.warmup_steps = 200;
  tc.eval_interval = steps;
  tc.ema_interval = 1;
  tc.lambda_ed = lambda_ed;
  tc.seed = seed;
  const NoiseSchedule sched = make_linear_schedule(1000);
  const BatchProvider bp = pair_provider(ds, pairs, 32);
  fit(model, bp, tc, sched, {}, nullptr);
  return model;
}

// ------------------------------------------------------------ criterion 9

void criterion_9() {
  const auto t0 = Clock::now();
  SynthConfig sc;  // defaults: G=64, 8 contexts, 20 perturbations, 30% held
  sc.seed = 42;    // out, sigma_latent = 0.05 > 0
  Dataset ds = generate_synthetic(sc);
  const auto train_pairs = pairs_of(ds, Split::kTrain);
  const auto test_pairs = pairs_of(ds, Split::kTest);

  MmDit model = train_scratch(ds, train_pairs, 3000, 1.0, 42);
  const auto conds = generate_conditions(model, ds, test_pairs, 64, 36, 942);
  const double model_pds = delta_pds(conds);
  const double model_pdcorr = delta_pdcorr(conds);

  // overall-mean baseline on the same held-out conditions
  MeanBaseline mb = MeanBaseline::fit(ds, MeanLevel::kOverall);
  std::map<ConditionKey, std::vector<double>> pred, truth;
  for (const auto& pr : test_pairs) {
    const auto ctrl = pseudobulk(cells_of(ds, pr.key.context, 0,
                                          int(Split::kTrain)));
    const auto prof = mb.predict(pr.key);
    const auto tp = pseudobulk(cells_of(ds, pr.key.context,
                                        pr.key.perturbation));
    std::vector<double> dp(prof.size()), dt(prof.size());
    for (size_t j = 0; j < prof.size(); ++j) {
      dp[j] = prof[j] - ctrl[j];
      dt[j] = tp[j] - ctrl[j];
    }
    pred[pr.key] = dp;
    truth[pr.key] = dt;
  }
  const double base_pds = pds(pred, truth, DeltaDistance::kL1);

  const double elapsed = seconds_since(t0);
  report(9,
         model_pds >= 0.65 && model_pdcorr >= 0.4 && base_pds >= 0.4
             && base_pds <= 0.6 && elapsed < 1800.0,
         fmt("model pds_l1 %.3f (>=0.65), pdcorr %.3f (>=0.4), mean baseline "
             "pds_l1 %.3f (in [0.4,0.6]), %d held-out conditions, %.0fs",
             model_pds, model_pdcorr, base_pds, int(test_pairs.size()),
             elapsed));
}

// ----------------------------------------------------------- criterion 10

void criterion_10() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.seed = 42;
  sc.zero_inflation = 0.85;
  sc.effect_scale = 0.3;
  Dataset ds = generate_synthetic(sc);
  const auto train_pairs = pairs_of(ds, Split::kTrain);
  const auto test_pairs = pairs_of(ds, Split::kTest);

  MmDit full = train_scratch(ds, train_pairs, 2500, 1.0, 42);
  MmDit mse_only = train_scratch(ds, train_pairs, 2500, 0.0, 42);

  MetricReport ra =
      evaluate(generate_conditions(full, ds, test_pairs, 128, 36, 1042), 43);
  MetricReport rb = evaluate(
      generate_conditions(mse_only, ds, test_pairs, 128, 36, 1042), 43);

  const double de_a = ra.means.at("de_over"), de_b = rb.means.at("de_over");
  const double au_a = ra.means.at("auroc"), au_b = rb.means.at("auroc");
  report(10, de_a >= de_b && au_a >= au_b,
         fmt("de_over %.3f vs %.3f, auroc %.3f vs %.3f (hybrid vs mse-only), "
             "%.0fs",
             de_a, de_b, au_a, au_b, seconds_since(t0)));
}

// ----------------------------------------------------------- criterion 11

Dataset downsample_train(const Dataset& ds, double frac, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> keep;
  for (int i = 0; i < ds.cells(); ++i)
    if (ds.meta[i].split != Split::kTrain || rng.uniform() < frac)
      keep.push_back(i);
  Dataset out;
  out.genes = ds.genes;
  out.matrix = Tensor::zeros({int(keep.size()), ds.gene_dim()});
  for (size_t i = 0; i < keep.size(); ++i) {
    for (int j = 0; j < ds.gene_dim(); ++j)
      out.matrix.at(int(i), j) = ds.matrix.at(keep[i], j);
    out.meta.push_back(ds.meta[keep[i]]);
    out.meta.back().cell_id = int(i);
  }
  return out;
}

void criterion_11() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.seed = 42;
  Dataset full = generate_synthetic(sc);
  Dataset small = downsample_train(full, 0.05, 47);
  const auto train_pairs = pairs_of(small, Split::kTrain);
  auto valid_pairs = pairs_of(small, Split::kValid);
  if (valid_pairs.size() > 6) valid_pairs.resize(6);

  const NoiseSchedule sched = make_linear_schedule(1000);
  // Marginal pretraining transfers the data manifold, not the conditional
  // response, so its edge shows at short budgets.
  const int scratch_steps = 800;

  auto run = [&](MmDit& model, int steps) {
    TrainConfig tc;
    tc.total_steps = steps;
    tc.warmup_steps = 100;
    tc.eval_interval = 200;
    tc.ema_interval = 1;
    tc.seed = 42;
    EvalFn ev = [&](const MmDit& m, int) {
      return delta_pdcorr(
          generate_conditions(m, small, valid_pairs, 32, 20, 1142));
    };
    const BatchProvider bp = pair_provider(small, train_pairs, 32);
    return fit(model, bp, tc, sched, ev, nullptr);
  };

  MmDit scratch(config_for(small), 42);
  const FitResult rs = run(scratch, scratch_steps);

  // marginal pretraining on the full dataset
  MmDit pre(config_for(full), 42);
  {
    std::vector<int> ctxs;
    std::set<int> s;
    for (const auto& m : full.meta)
      if (m.split == Split::kTrain) s.insert(m.context);
    ctxs.assign(s.begin(), s.end());
    TrainConfig tc;
    tc.total_steps = 1500;
    tc.warmup_steps = 100;
    tc.eval_interval = 1500;
    tc.ema_interval = 1;
    tc.mode = TrainMode::kMarginalPretrain;
    tc.seed = 42;
    const BatchProvider bp = [&](int, Rng& rng) {
      BatchPair b;
      const int ctx = ctxs[rng.uniform_int(int64_t(ctxs.size()))];
      b.b_pert = sample_batch(full, {ctx, -1, -1, int(Split::kTrain)}, 32,
                              rng);
      b.b_ctrl = Tensor::zeros({32, full.gene_dim()});
      b.cond = Condition{ctx, 0, 0};
      return b;
    };
    fit(pre, bp, tc, sched, {}, nullptr);
  }
  const FitResult rf = run(pre, scratch_steps / 2);

  report(11, rf.best_metric >= rs.best_metric,
         fmt("scratch best pdcorr %.3f in %d steps; finetuned %.3f in %d "
             "steps (budget %d), %.0fs",
             rs.best_metric, scratch_steps, rf.best_metric, scratch_steps / 2,
             scratch_steps / 2, seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  void (*const criteria[])() = {criterion_1, criterion_2, criterion_3,
                                criterion_4, criterion_5, criterion_6,
                                criterion_7, criterion_8, criterion_9,
                                criterion_10, criterion_11};
  if (argc > 1) {
    // optional subset, e.g. "acceptance 1 2 7"
    for (int i = 1; i < argc; ++i) {
      const int n = std::atoi(argv[i]);
      if (n < 1 || n > 11) {
        std::fprintf(stderr, "unknown criterion %s\n", argv[i]);
        return 2;
      }
      criteria[n - 1]();
    }
  } else {
    for (auto* c : criteria) c();
  }
  if (failures) std::printf("%d criteria FAILED\n", failures);
  else std::printf("all listed criteria passed\n");
  return failures ? 1 : 0;
}
