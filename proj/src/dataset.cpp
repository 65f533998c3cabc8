#include "celldiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace celldiff {

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  throw std::logic_error("split_name: bad enum");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split name: " + name);
}

void Dataset::validate() const {
  if (static_cast<int>(meta.size()) != cells())
    throw std::invalid_argument("dataset: metadata rows ("
                                + std::to_string(meta.size())
                                + ") != matrix rows ("
                                + std::to_string(cells()) + ")");
  if (static_cast<int>(genes.size()) != gene_dim())
    throw std::invalid_argument("dataset: gene name count mismatch");
  std::map<std::pair<int, int>, std::set<Split>> pair_splits;
  for (const auto& m : meta)
    pair_splits[{m.context, m.perturbation}].insert(m.split);
  for (const auto& [key, splits] : pair_splits) {
    if (splits.count(Split::kTest) && splits.size() > 1)
      throw std::invalid_argument(
          "dataset: split leakage for (context=" + std::to_string(key.first)
          + ", perturbation=" + std::to_string(key.second)
          + "): test cells mixed with other splits");
  }
}

void SynthConfig::validate() const {
  if (gene_dim < 1 || contexts < 1 || perturbations < 1 || replicates < 1 ||
      cells_per_replicate < 1 || effect_rank < 1)
    throw std::invalid_argument("synth config: counts must be positive");
  if (!(zero_inflation >= 0.0 && zero_inflation < 1.0))
    throw std::invalid_argument("synth config: zero inflation must be in [0,1)");
  if (sigma_latent < 0.0 || effect_scale < 0.0 || noise_scale < 0.0)
    throw std::invalid_argument("synth config: scales must be nonnegative");
  if (!(holdout_fraction >= 0.0 && holdout_fraction <= 1.0) ||
      !(valid_fraction >= 0.0 && valid_fraction < 1.0))
    throw std::invalid_argument("synth config: bad split fractions");
  const int held = static_cast<int>(std::ceil(holdout_fraction * perturbations));
  if (held >= perturbations)
    throw std::invalid_argument(
        "synth config: infeasible split, holdout fraction "
        + std::to_string(holdout_fraction) + " leaves no training perturbation");
}

namespace {

// first n_take entries of a shuffled copy of `pool`
std::vector<int> draw_subset(std::vector<int> pool, int n_take, Rng& rng) {
  for (int i = 0; i < n_take; ++i) {
    const int j = i + int(rng.uniform_int(uint64_t(pool.size() - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n_take);
  return pool;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng structure = root.fork(1);
  Rng split_rng = root.fork(2);
  Rng cell_rng = root.fork(3);

  const int g = cfg.gene_dim, nc = cfg.contexts, np = cfg.perturbations;
  const int r = cfg.effect_rank;

  // context base means, strictly positive
  std::vector<std::vector<double>> base(nc, std::vector<double>(g));
  for (auto& mu : base)
    for (auto& x : mu) x = 0.3 + 0.2 * std::abs(structure.normal());

  // shared low-rank loadings and per-perturbation factors
  std::vector<double> loadings(size_t(g) * r);
  for (auto& x : loadings) x = structure.normal() / std::sqrt(double(r));
  std::vector<std::vector<double>> effect(np + 1, std::vector<double>(g, 0.0));
  for (int tau = 1; tau <= np; ++tau) {
    std::vector<double> w(r);
    for (auto& x : w) x = cfg.effect_scale * structure.normal();
    for (int j = 0; j < g; ++j) {
      double s = 0.0;
      for (int a = 0; a < r; ++a) s += loadings[size_t(j) * r + a] * w[a];
      effect[tau][j] = s;
    }
  }

  // pair-level splits: held perturbations lose a context subset to test
  const int n_held = static_cast<int>(std::ceil(cfg.holdout_fraction * np));
  std::vector<int> perts(np);
  std::iota(perts.begin(), perts.end(), 1);
  std::vector<int> held = draw_subset(perts, n_held, split_rng);
  std::map<std::pair<int, int>, Split> pair_split;
  for (int c = 0; c < nc; ++c)
    for (int tau = 0; tau <= np; ++tau) pair_split[{c, tau}] = Split::kTrain;
  for (int tau : held) {
    const int n_hc = std::max(1, std::min(nc - 1, int(std::lround(0.4 * nc))));
    std::vector<int> ctxs(nc);
    std::iota(ctxs.begin(), ctxs.end(), 0);
    for (int c : draw_subset(ctxs, n_hc, split_rng))
      pair_split[{c, tau}] = Split::kTest;
  }
  for (auto& [key, sp] : pair_split) {
    if (key.second == 0 || sp == Split::kTest) continue;
    if (split_rng.uniform() < cfg.valid_fraction) sp = Split::kValid;
  }

  Dataset ds;
  const int n_cells = nc * (np + 1) * cfg.replicates * cfg.cells_per_replicate;
  ds.matrix = Tensor::zeros({n_cells, g});
  ds.meta.reserve(n_cells);
  ds.genes.reserve(g);
  for (int j = 0; j < g; ++j) ds.genes.push_back("g" + std::to_string(j));

  int row = 0;
  std::vector<double> mean(g);
  for (int c = 0; c < nc; ++c) {
    for (int tau = 0; tau <= np; ++tau) {
      for (int rep = 0; rep < cfg.replicates; ++rep) {
        // one latent realization of the condition distribution
        for (int j = 0; j < g; ++j)
          mean[j] = base[c][j] + effect[tau][j]
                    + cfg.sigma_latent * cell_rng.normal();
        for (int k = 0; k < cfg.cells_per_replicate; ++k, ++row) {
          for (int j = 0; j < g; ++j) {
            double x = mean[j] + cfg.noise_scale * cell_rng.normal();
            if (x < 0.0) x = 0.0;
            if (cfg.zero_inflation > 0.0 &&
                cell_rng.uniform() < cfg.zero_inflation)
              x = 0.0;
            ds.matrix.at(row, j) = x;
          }
          CellMeta m;
          m.cell_id = row;
          m.context = c;
          m.perturbation = tau;
          m.dose = 0;
          m.replicate = rep;
          m.split = pair_split[{c, tau}];
          ds.meta.push_back(m);
        }
      }
    }
  }
  ds.validate();
  return ds;
}

Tensor preprocess(const Tensor& raw) {
  for (double x : raw.v)
    if (x < 0.0)
      throw std::invalid_argument("preprocess: negative raw count");
  const int n = raw.rows(), g = raw.cols();
  Tensor out = Tensor::zeros(raw.shape);
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int j = 0; j < g; ++j) total += raw.at(i, j);
    if (total == 0.0) continue;
    const double scale = 1e4 / total;
    for (int j = 0; j < g; ++j)
      out.at(i, j) = std::log1p(raw.at(i, j) * scale) / 10.0;
  }
  return out;
}

std::vector<int> select_hvg(const Tensor& mat, int k) {
  const int g = mat.cols(), n = mat.rows();
  if (k < 0 || k > g)
    throw std::invalid_argument("select_hvg: k must be in [0, G]");
  if (n < 1) throw std::invalid_argument("select_hvg: empty matrix");
  std::vector<double> var(g, 0.0);
  for (int j = 0; j < g; ++j) {
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = mat.at(i, j);
      s += x;
      s2 += x * x;
    }
    const double mean = s / n;
    var[j] = s2 / n - mean * mean;
  }
  std::vector<int> idx(g);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (var[a] != var[b]) return var[a] > var[b];
    return a < b;
  });
  idx.resize(k);
  return idx;
}

std::string BatchFilter::describe() const {
  auto field = [](int v) { return v < 0 ? std::string("any") : std::to_string(v); };
  std::string s = "context=" + field(context)
                  + " perturbation=" + field(perturbation)
                  + " dose=" + field(dose) + " split=";
  s += split < 0 ? "any" : split_name(static_cast<Split>(split));
  return s;
}

std::vector<int> matching_cells(const Dataset& ds, const BatchFilter& f) {
  std::vector<int> idx;
  for (int i = 0; i < ds.cells(); ++i) {
    const CellMeta& m = ds.meta[i];
    if (f.context >= 0 && m.context != f.context) continue;
    if (f.perturbation >= 0 && m.perturbation != f.perturbation) continue;
    if (f.dose >= 0 && m.dose != f.dose) continue;
    if (f.split >= 0 && m.split != static_cast<Split>(f.split)) continue;
    idx.push_back(i);
  }
  return idx;
}

CellBatch sample_batch(const Dataset& ds, const BatchFilter& f, int m,
                       Rng& rng) {
  if (m < 1) throw std::invalid_argument("sample_batch: m must be positive");
  std::vector<int> idx = matching_cells(ds, f);
  if (idx.empty())
    throw std::invalid_argument("sample_batch: no cells match " + f.describe());
  std::vector<int> chosen;
  chosen.reserve(m);
  if (static_cast<int>(idx.size()) < m) {
    for (int k = 0; k < m; ++k)
      chosen.push_back(idx[rng.uniform_int(uint64_t(idx.size()))]);
  } else {
    for (int k = 0; k < m; ++k) {
      const int j = k + int(rng.uniform_int(uint64_t(idx.size() - k)));
      std::swap(idx[k], idx[j]);
      chosen.push_back(idx[k]);
    }
  }
  Tensor batch = Tensor::zeros({m, ds.gene_dim()});
  for (int k = 0; k < m; ++k)
    for (int j = 0; j < ds.gene_dim(); ++j)
      batch.at(k, j) = ds.matrix.at(chosen[k], j);
  return batch;
}

namespace {

std::string fmt9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void parse_fail(const std::string& file, int line,
                             const std::string& what) {
  throw std::runtime_error(file + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& prefix) {
  ds.validate();
  if (ds.cells() == 0)
    throw std::invalid_argument("save_dataset: empty dataset");
  const std::string mpath = prefix + ".matrix.tsv";
  std::ofstream mf(mpath);
  if (!mf) throw std::runtime_error("cannot write " + mpath);
  for (int j = 0; j < ds.gene_dim(); ++j)
    mf << (j ? "\t" : "") << ds.genes[j];
  mf << '\n';
  for (int i = 0; i < ds.cells(); ++i) {
    for (int j = 0; j < ds.gene_dim(); ++j)
      mf << (j ? "\t" : "") << fmt9(ds.matrix.at(i, j));
    mf << '\n';
  }
  if (!mf) throw std::runtime_error("write failed: " + mpath);

  const std::string tpath = prefix + ".meta.tsv";
  std::ofstream tf(tpath);
  if (!tf) throw std::runtime_error("cannot write " + tpath);
  tf << "cell_id\tcontext\tperturbation\tdose\treplicate\tsplit\n";
  for (const auto& m : ds.meta)
    tf << m.cell_id << '\t' << m.context << '\t' << m.perturbation << '\t'
       << m.dose << '\t' << m.replicate << '\t' << split_name(m.split) << '\n';
  if (!tf) throw std::runtime_error("write failed: " + tpath);
}

Dataset load_dataset(const std::string& prefix) {
  const std::string mpath = prefix + ".matrix.tsv";
  std::ifstream mf(mpath);
  if (!mf) throw std::runtime_error("cannot open " + mpath);
  Dataset ds;
  std::string line;
  if (!std::getline(mf, line)) parse_fail(mpath, 1, "missing gene header");
  ds.genes = split_tabs(line);
  if (ds.genes.empty() || ds.genes[0].empty())
    parse_fail(mpath, 1, "malformed gene header");
  const int g = static_cast<int>(ds.genes.size());

  std::vector<double> values;
  int lineno = 1;
  while (std::getline(mf, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (static_cast<int>(fields.size()) != g)
      parse_fail(mpath, lineno,
                 "expected " + std::to_string(g) + " columns, found "
                 + std::to_string(fields.size()));
    for (const auto& f : fields) {
      size_t used = 0;
      double x;
      try {
        x = std::stod(f, &used);
      } catch (const std::exception&) {
        parse_fail(mpath, lineno, "bad number '" + f + "'");
      }
      if (used != f.size()) parse_fail(mpath, lineno, "bad number '" + f + "'");
      values.push_back(x);
    }
  }
  const int n = static_cast<int>(values.size()) / g;
  ds.matrix = Tensor({n, g}, std::move(values));

  const std::string tpath = prefix + ".meta.tsv";
  std::ifstream tf(tpath);
  if (!tf) throw std::runtime_error("cannot open " + tpath);
  if (!std::getline(tf, line)) parse_fail(tpath, 1, "missing header");
  if (line != "cell_id\tcontext\tperturbation\tdose\treplicate\tsplit")
    parse_fail(tpath, 1, "malformed header '" + line + "'");
  lineno = 1;
  while (std::getline(tf, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 6)
      parse_fail(tpath, lineno, "expected 6 columns, found "
                 + std::to_string(fields.size()));
    CellMeta m;
    try {
      m.cell_id = std::stoi(fields[0]);
      m.context = std::stoi(fields[1]);
      m.perturbation = std::stoi(fields[2]);
      m.dose = std::stoi(fields[3]);
      m.replicate = std::stoi(fields[4]);
      m.split = split_from_name(fields[5]);
    } catch (const std::runtime_error&) {
      throw;
    } catch (const std::exception& e) {
      parse_fail(tpath, lineno, e.what());
    }
    ds.meta.push_back(m);
  }
  if (static_cast<int>(ds.meta.size()) != n)
    throw std::runtime_error(prefix + ": expected " + std::to_string(n)
                             + " metadata rows, found "
                             + std::to_string(ds.meta.size()));
  ds.validate();
  return ds;
}

}  // namespace celldiff
