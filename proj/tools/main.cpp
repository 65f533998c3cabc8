// Command-line driver: dataset synthesis, model training, sampling,
// evaluation, baselines, and report aggregation. Exit codes: 0 success,
// 2 rejected precondition, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "celldiff/baselines.hpp"
#include "celldiff/dataset.hpp"
#include "celldiff/diffusion.hpp"
#include "celldiff/metrics.hpp"
#include "celldiff/mmdit.hpp"
#include "celldiff/stats.hpp"
#include "celldiff/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace celldiff;

namespace {

constexpr int kExitPrecondition = 2;
constexpr int kExitNumerical = 3;

struct PreconditionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  uint64_t seed = 0;
  std::string out;
  std::string config;
  bool force = false;
  int threads = 1;
};

// Config file support: each non-comment line is key=value where key is a long
// option name without the leading dashes. Keys already given on the command
// line are skipped, so explicit flags win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::set<std::string> given;
  for (const auto& a : args)
    if (a.rfind("--", 0) == 0) given.insert(a.substr(0, a.find('=')));
  std::ifstream in(path);
  if (!in)
    throw std::invalid_argument("cannot read config file '" + path + "'");
  const auto strip = [](const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    const std::string key = eq == std::string::npos ? "" : strip(line.substr(0, eq));
    if (key.empty())
      throw std::invalid_argument(path + ":" + std::to_string(lineno)
                                  + ": expected key=value");
    if (!given.count("--" + key))
      args.push_back("--" + key + "=" + strip(line.substr(eq + 1)));
  }
  return args;
}

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config,
                  "key=value config file (explicit flags win)");
  cmd->add_option("--seed", c.seed, "random seed")->capture_default_str();
  auto* out = cmd->add_option("--out", c.out, "output path or prefix");
  if (out_required) out->required();
  cmd->add_flag("--force", c.force, "overwrite existing output files");
  cmd->add_option("--threads", c.threads, "worker threads for linear algebra")
      ->capture_default_str();
}

void apply_threads(const Common& c) {
  if (c.threads < 1) throw PreconditionError("--threads must be >= 1");
  Eigen::setNbThreads(c.threads);
}

void refuse_existing(const std::string& path, bool force) {
  if (!force && fs::exists(path))
    throw PreconditionError("refusing to overwrite existing file '" + path
                            + "' (pass --force to allow)");
}

void refuse_dataset_overwrite(const std::string& prefix, bool force) {
  refuse_existing(prefix + ".matrix.tsv", force);
  refuse_existing(prefix + ".meta.tsv", force);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw PreconditionError("cannot write '" + path + "'");
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Distinct perturbed (context, perturbation) pairs in a split, sorted, with
// the dose of the first matching cell.
struct CondInfo {
  ConditionKey key;
  int dose = 0;
};

std::vector<CondInfo> perturbed_conditions(const Dataset& ds, Split split) {
  std::map<ConditionKey, int> seen;
  for (const auto& m : ds.meta) {
    if (m.split != split || m.perturbation == 0) continue;
    seen.emplace(ConditionKey{m.context, m.perturbation}, m.dose);
  }
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
  if (idx.empty())
    throw PreconditionError("no cells match " + f.describe());
  Tensor out = Tensor::zeros({int(idx.size()), ds.gene_dim()});
  for (size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < ds.gene_dim(); ++j)
      out.at(int(i), j) = ds.matrix.at(idx[i], j);
  return out;
}

// Prediction artifact: dataset-format matrix/meta plus a provenance json.
void save_predictions(const std::string& prefix, const Dataset& pred,
                      const json& provenance, bool force) {
  refuse_dataset_overwrite(prefix, force);
  refuse_existing(prefix + ".pred.json", force);
  save_dataset(pred, prefix);
  write_text(prefix + ".pred.json", provenance.dump(2) + "\n");
}

Dataset dataset_from_batches(
    const std::vector<std::pair<CondInfo, CellBatch>>& batches,
    const std::vector<std::string>& genes) {
  Dataset out;
  out.genes = genes;
  int total = 0;
  for (const auto& [info, cells] : batches) total += cells.rows();
  out.matrix = Tensor::zeros({total, int(genes.size())});
  int row = 0;
  for (const auto& [info, cells] : batches) {
    for (int i = 0; i < cells.rows(); ++i, ++row) {
      for (int j = 0; j < cells.cols(); ++j)
        out.matrix.at(row, j) = cells.at(i, j);
      CellMeta m;
      m.cell_id = row;
      m.context = info.key.context;
      m.perturbation = info.key.perturbation;
      m.dose = info.dose;
      m.replicate = 0;
      m.split = Split::kTest;
      out.meta.push_back(m);
    }
  }
  return out;
}

int count_distinct(const Dataset& ds, Split split, int CellMeta::* field) {
  std::set<int> vals;
  for (const auto& m : ds.meta)
    if (m.split == split) vals.insert(m.*field);
  return int(vals.size());
}

// ---------------------------------------------------------------- synth ----

int cmd_synth(const Common& c, const SynthConfig& scfg_in) {
  SynthConfig scfg = scfg_in;
  scfg.seed = c.seed;
  scfg.validate();
  refuse_dataset_overwrite(c.out, c.force);
  Dataset ds = generate_synthetic(scfg);
  save_dataset(ds, c.out);

  std::cout << "split\tcells\tperturbations\tcontexts\tpairs\n";
  for (Split sp : {Split::kTrain, Split::kValid, Split::kTest}) {
    int cells = 0;
    std::set<std::pair<int, int>> pairs;
    for (const auto& m : ds.meta)
      if (m.split == sp) {
        ++cells;
        pairs.insert({m.context, m.perturbation});
      }
    std::cout << split_name(sp) << '\t' << cells << '\t'
              << count_distinct(ds, sp, &CellMeta::perturbation) << '\t'
              << count_distinct(ds, sp, &CellMeta::context) << '\t'
              << pairs.size() << '\n';
  }
  std::cout << "wrote " << c.out << ".matrix.tsv and " << c.out
            << ".meta.tsv\n";
  return 0;
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
  std::string data;
  std::string mode = "scratch";
  std::string from;
  int width = 64;
  int blocks = 2;
  int heads = 4;
  bool no_self_cond = false;
  int batch_size = 32;
  int eval_conditions = 4;
  int eval_sample_steps = 20;
  bool eval_ema = true;
  TrainConfig tcfg;
};

// Mean pseudobulk-delta correlation over validation conditions, the
// checkpoint-selection metric.
double validation_pdcorr(const MmDit& model, const Dataset& ds,
                         const std::vector<CondInfo>& conds, int m,
                         int sample_steps, bool use_ema, uint64_t seed) {
  const NoiseSchedule sched = make_linear_schedule(1000);
  SamplerConfig scfg;
  scfg.num_steps = sample_steps;
  scfg.self_cond = model.config().self_cond;
  double acc = 0.0;
  int n = 0;
  Rng root(seed);
  for (const auto& info : conds) {
    Rng rng = root.fork(uint64_t(n) + 1);
    CellBatch ctrl = sample_batch(
        ds, {info.key.context, 0, -1, int(Split::kTrain)}, m, rng);
    Condition cond{info.key.context, info.key.perturbation, info.dose};
    scfg.seed = rng.next_u64();
    Tensor pred = sample(model.denoiser_fn(use_ema), cond, ctrl, m,
                         ds.gene_dim(), scfg, sched);
    CellBatch truth = cells_of(ds, info.key.context, info.key.perturbation);
    const auto dp = pseudobulk_delta(pred, ctrl);
    const auto dt = pseudobulk_delta(truth, ctrl);
    const double r = pearson(dp, dt);
    if (std::isfinite(r)) {
      acc += r;
      ++n;
    }
  }
  return n ? acc / n : 0.0;
}

int cmd_train(const Common& c, const TrainArgs& a) {
  Dataset ds = load_dataset(a.data);
  ds.validate();

  ModelConfig mcfg;
  mcfg.gene_dim = ds.gene_dim();
  mcfg.width = a.width;
  mcfg.blocks = a.blocks;
  mcfg.heads = a.heads;
  mcfg.self_cond = !a.no_self_cond;
  for (const auto& m : ds.meta) {
    mcfg.n_contexts = std::max(mcfg.n_contexts, m.context + 1);
    mcfg.n_perturbations = std::max(mcfg.n_perturbations, m.perturbation + 1);
    mcfg.n_doses = std::max(mcfg.n_doses, m.dose + 1);
  }

  TrainConfig tcfg = a.tcfg;
  tcfg.seed = c.seed;
  if (a.mode == "pretrain") tcfg.mode = TrainMode::kMarginalPretrain;
  else if (a.mode == "scratch" || a.mode == "finetune")
    tcfg.mode = TrainMode::kPerturbation;
  else
    throw PreconditionError("unknown mode '" + a.mode
                            + "' (valid: scratch, pretrain, finetune)");

  refuse_existing(c.out, c.force);

  MmDit model = [&] {
    if (a.mode != "finetune") return MmDit(mcfg, c.seed);
    if (a.from.empty())
      throw PreconditionError("finetune requires --from <checkpoint>");
    MmDit loaded = MmDit::load_checkpoint(a.from);
    const ModelConfig& lc = loaded.config();
    auto mismatch = [](const char* what, int got, int want) {
      return std::string(what) + " " + std::to_string(got) + " != "
             + std::to_string(want);
    };
    std::vector<std::string> bad;
    if (lc.gene_dim != mcfg.gene_dim)
      bad.push_back(mismatch("gene_dim", lc.gene_dim, mcfg.gene_dim));
    if (lc.width != mcfg.width)
      bad.push_back(mismatch("width", lc.width, mcfg.width));
    if (lc.blocks != mcfg.blocks)
      bad.push_back(mismatch("blocks", lc.blocks, mcfg.blocks));
    if (lc.n_contexts < mcfg.n_contexts)
      bad.push_back(mismatch("n_contexts", lc.n_contexts, mcfg.n_contexts));
    if (lc.n_perturbations < mcfg.n_perturbations)
      bad.push_back(
          mismatch("n_perturbations", lc.n_perturbations, mcfg.n_perturbations));
    if (!bad.empty()) {
      std::string msg = "checkpoint '" + a.from + "' incompatible:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw PreconditionError(msg);
    }
    return loaded;
  }();

  if (tcfg.total_steps == 0) {
    model.save_checkpoint(c.out);
    std::cout << "wrote initialization checkpoint " << c.out << "\n";
    return 0;
  }

  // Trainable condition pools.
  std::vector<CondInfo> train_pairs = perturbed_conditions(ds, Split::kTrain);
  std::vector<CondInfo> valid_pairs = perturbed_conditions(ds, Split::kValid);
  std::vector<int> train_contexts;
  {
    std::set<int> cs;
    for (const auto& m : ds.meta)
      if (m.split == Split::kTrain) cs.insert(m.context);
    train_contexts.assign(cs.begin(), cs.end());
  }
  const bool marginal = tcfg.mode == TrainMode::kMarginalPretrain;
  if (!marginal && train_pairs.empty())
    throw PreconditionError("no perturbed training pairs in '" + a.data + "'");
  if (marginal && train_contexts.empty())
    throw PreconditionError("no training cells in '" + a.data + "'");

  BatchProvider batches = [&](int, Rng& rng) {
    BatchPair bp;
    if (marginal) {
      const int ctx = train_contexts[rng.uniform_int(train_contexts.size())];
      bp.b_pert = sample_batch(ds, {ctx, -1, -1, int(Split::kTrain)},
                               a.batch_size, rng);
      bp.b_ctrl = Tensor::zeros({a.batch_size, ds.gene_dim()});
      bp.cond = Condition{ctx, 0, 0};
    } else {
      const CondInfo& info = train_pairs[rng.uniform_int(train_pairs.size())];
      bp.b_pert = sample_batch(
          ds, {info.key.context, info.key.perturbation, -1, int(Split::kTrain)},
          a.batch_size, rng);
      bp.b_ctrl = sample_batch(ds, {info.key.context, 0, -1, int(Split::kTrain)},
                               a.batch_size, rng);
      bp.cond = Condition{info.key.context, info.key.perturbation, info.dose};
    }
    return bp;
  };

  std::vector<CondInfo> eval_pairs = valid_pairs;
  if (int(eval_pairs.size()) > a.eval_conditions)
    eval_pairs.resize(a.eval_conditions);

  EvalFn eval;
  if (!marginal && !eval_pairs.empty()) {
    eval = [&](const MmDit& m, int step) {
      const double r =
          validation_pdcorr(m, ds, eval_pairs, a.batch_size,
                            a.eval_sample_steps, a.eval_ema, c.seed + 1);
      std::cout << "eval\tstep=" << step << "\tpdcorr=" << r << std::endl;
      return r;
    };
  }

  std::ofstream log(c.out + ".train.log");
  const NoiseSchedule sched = make_linear_schedule(1000);
  FitResult res = fit(model, batches, tcfg, sched, eval, log ? &log : nullptr);
  model.save_checkpoint(c.out);
  std::cout << "wrote checkpoint " << c.out;
  if (res.evaluated)
    std::cout << " (best step " << res.best_step << ", metric "
              << res.best_metric << ")";
  std::cout << "\n";
  return 0;
}

// --------------------------------------------------------------- sample ----

struct SampleArgs {
  std::string ckpt;
  std::string data;
  int context = -1;
  int perturbation = -1;
  std::string split = "test";
  int cells = 64;
  bool zero_shot = false;
  bool no_ema = false;
  SamplerConfig scfg;
};

int cmd_sample(const Common& c, const SampleArgs& a) {
  MmDit model = MmDit::load_checkpoint(a.ckpt);
  Dataset ds = load_dataset(a.data);
  ds.validate();
  if (ds.gene_dim() != model.config().gene_dim)
    throw PreconditionError(
        "dataset gene count " + std::to_string(ds.gene_dim())
        + " != checkpoint gene_dim "
        + std::to_string(model.config().gene_dim));

  std::vector<CondInfo> conds =
      perturbed_conditions(ds, split_from_name(a.split));
  std::erase_if(conds, [&](const CondInfo& i) {
    return (a.context >= 0 && i.key.context != a.context)
           || (a.perturbation >= 0 && i.key.perturbation != a.perturbation);
  });
  if (conds.empty())
    throw PreconditionError("no perturbed conditions match the filter in split '"
                            + a.split + "'");

  const NoiseSchedule sched = make_linear_schedule(1000);
  SamplerConfig scfg = a.scfg;
  scfg.self_cond = model.config().self_cond;

  std::vector<std::pair<CondInfo, CellBatch>> batches;
  json skipped = json::array();
  json emitted = json::array();
  Rng root(c.seed);
  for (size_t i = 0; i < conds.size(); ++i) {
    const CondInfo& info = conds[i];
    if (info.key.context >= model.config().n_contexts
        || info.key.perturbation >= model.config().n_perturbations
        || info.dose >= model.config().n_doses) {
      std::cerr << "skipping unknown condition " << info.key.label() << "\n";
      skipped.push_back(info.key.label());
      continue;
    }
    Rng rng = root.fork(i + 1);
    CellBatch ctrl = sample_batch(
        ds, {info.key.context, 0, -1, int(Split::kTrain)}, a.cells, rng);
    Condition cond{info.key.context, info.key.perturbation, info.dose};
    cond.marginal = a.zero_shot;  // mask the perturbation token only
    scfg.seed = rng.next_u64();
    Tensor pred = sample(model.denoiser_fn(!a.no_ema), cond, ctrl, a.cells,
                         ds.gene_dim(), scfg, sched);
    batches.emplace_back(info, std::move(pred));
    emitted.push_back({{"context", info.key.context},
                       {"perturbation", a.zero_shot
                                            ? json(nullptr)
                                            : json(info.key.perturbation)},
                       {"dose", info.dose},
                       {"cells", a.cells}});
  }
  if (batches.empty()) {
    std::cerr << "all conditions were skipped\n";
    return kExitPrecondition;
  }

  json prov{{"kind", "model"},
            {"checkpoint", a.ckpt},
            {"zero_shot", a.zero_shot},
            {"guidance", scfg.guidance},
            {"eta", scfg.eta},
            {"num_steps", scfg.num_steps},
            {"seed", c.seed},
            {"conditions", emitted},
            {"skipped", skipped}};
  save_predictions(c.out, dataset_from_batches(batches, ds.genes), prov,
                   c.force);
  std::cout << "wrote " << batches.size() << " conditions to " << c.out
            << ".{matrix,meta}.tsv\n";
  return 0;
}

// ------------------------------------------------------------- baseline ----

struct BaselineArgs {
  std::string data;
  std::string kind = "mean";
  std::string level = "perturbation";
  double ridge = 1e-6;
  int cells = 64;
  std::string split = "test";
};

int cmd_baseline(const Common& c, const BaselineArgs& a) {
  Dataset ds = load_dataset(a.data);
  ds.validate();
  if (a.kind != "mean" && a.kind != "linear")
    throw PreconditionError("unknown baseline kind '" + a.kind
                            + "' (valid: mean, linear)");
  std::vector<CondInfo> conds =
      perturbed_conditions(ds, split_from_name(a.split));
  if (conds.empty())
    throw PreconditionError("no perturbed conditions in split '" + a.split
                            + "'");

  std::vector<std::pair<CondInfo, CellBatch>> batches;
  std::string method;
  if (a.kind == "mean") {
    MeanBaseline mb = MeanBaseline::fit(ds, mean_level_from_name(a.level));
    method = "mean/" + a.level;
    for (const auto& info : conds)
      batches.emplace_back(info,
                           replicate_profile(mb.predict(info.key), a.cells));
  } else {
    LinearBaseline lb = LinearBaseline::fit(ds, a.ridge);
    method = "linear";
    for (const auto& info : conds) {
      const auto ctrl = pseudobulk(
          cells_of(ds, info.key.context, 0, int(Split::kTrain)));
      batches.emplace_back(
          info, replicate_profile(lb.predict(info.key, ctrl), a.cells));
    }
  }

  json prov{{"kind", "baseline"}, {"method", method}, {"seed", c.seed}};
  save_predictions(c.out, dataset_from_batches(batches, ds.genes), prov,
                   c.force);
  std::cout << "wrote " << batches.size() << " conditions to " << c.out
            << ".{matrix,meta}.tsv\n";
  return 0;
}

// ----------------------------------------------------------------- eval ----

struct EvalArgs {
  std::string truth;
  std::vector<std::string> predictions;  // name=prefix
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  Dataset truth = load_dataset(a.truth);
  truth.validate();
  fs::create_directories(c.out);

  const std::vector<CondInfo> truth_conds =
      perturbed_conditions(truth, Split::kTest);

  std::vector<std::pair<std::string, MetricReport>> reports;
  for (const auto& spec : a.predictions) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
      throw PreconditionError("prediction must be name=prefix, got '" + spec
                              + "'");
    const std::string name = spec.substr(0, eq);
    const std::string prefix = spec.substr(eq + 1);
    Dataset pred = load_dataset(prefix);

    if (pred.genes != truth.genes) {
      std::string bad;
      for (size_t i = 0; i < std::max(pred.genes.size(), truth.genes.size());
           ++i) {
        const std::string p = i < pred.genes.size() ? pred.genes[i] : "<none>";
        const std::string t = i < truth.genes.size() ? truth.genes[i] : "<none>";
        if (p != t) bad += " " + p + "!=" + t;
      }
      throw PreconditionError("gene vocabulary mismatch for '" + name + "':"
                              + bad);
    }

    std::vector<EvalCondition> conds;
    json missing = json::array();
    std::set<ConditionKey> pred_keys;
    for (const auto& info : perturbed_conditions(pred, Split::kTest))
      pred_keys.insert(info.key);
    for (const auto& info : truth_conds) {
      if (!pred_keys.count(info.key)) {
        missing.push_back(info.key.label());
        continue;
      }
      EvalCondition ec;
      ec.key = info.key;
      ec.truth = cells_of(truth, info.key.context, info.key.perturbation,
                          int(Split::kTest));
      ec.pred = cells_of(pred, info.key.context, info.key.perturbation);
      ec.ctrl = cells_of(truth, info.key.context, 0);
      conds.push_back(std::move(ec));
    }
    if (conds.empty())
      throw PreconditionError("prediction '" + name
                              + "' covers no test condition of the truth");

    MetricReport rep = evaluate(conds, c.seed);
    json out = json::parse(rep.to_json(name));
    out["skipped_conditions"] = missing;
    write_text(c.out + "/" + name + ".report.json", out.dump(2) + "\n");
    write_text(c.out + "/" + name + ".per_condition.tsv",
               rep.per_condition_tsv());
    if (!missing.empty())
      std::cout << name << ": skipped " << missing.size()
                << " truth conditions missing from the prediction\n";
    reports.emplace_back(name, std::move(rep));
  }

  // Radar data: one row per (method, metric) aggregate.
  {
    std::ostringstream csv;
    csv << "method,metric,value\n";
    for (const auto& [name, rep] : reports) {
      csv << name << ",pds_l1," << rep.pds_l1 << "\n";
      csv << name << ",pds_l2," << rep.pds_l2 << "\n";
      csv << name << ",pds_cos," << rep.pds_cos << "\n";
      csv << name << ",es," << rep.es << "\n";
      for (const auto& m : metric_names())
        csv << name << "," << m << "," << rep.means.at(m) << "\n";
    }
    write_text(c.out + "/summary.csv", csv.str());
  }

  // Scatter data: per-condition metric rows for every method.
  {
    std::ostringstream csv;
    csv << "method,context,perturbation";
    for (const auto& m : metric_names()) csv << "," << m;
    csv << "\n";
    for (const auto& [name, rep] : reports) {
      const std::string tsv = rep.per_condition_tsv();
      std::istringstream lines(tsv);
      std::string line;
      std::getline(lines, line);  // header
      while (std::getline(lines, line)) {
        std::replace(line.begin(), line.end(), '\t', ',');
        csv << name << "," << line << "\n";
      }
    }
    write_text(c.out + "/scatter.csv", csv.str());
  }

  // Histogram data: pooled -log10(p_adj) confidence scores per method.
  {
    const double width = 0.5;
    const int nbins = 40;  // last bin is open-ended
    std::ostringstream csv;
    csv << "method,bin_lo,bin_hi,count\n";
    for (const auto& [name, rep] : reports) {
      std::vector<int> counts(nbins, 0);
      for (const auto& row : rep.pred_scores)
        for (double s : row)
          ++counts[std::min(nbins - 1, int(s / width))];
      for (int b = 0; b < nbins; ++b)
        csv << name << "," << b * width << "," << (b + 1) * width << ","
            << counts[b] << "\n";
    }
    write_text(c.out + "/pvals_hist.csv", csv.str());
  }

  for (const auto& [name, rep] : reports)
    std::cout << name << "\tpds_l1=" << rep.pds_l1
              << "\tpdcorr=" << rep.means.at("pdcorr")
              << "\tmae=" << rep.means.at("mae") << "\n";
  std::cout << "wrote reports to " << c.out << "/\n";
  return 0;
}

// --------------------------------------------------------------- report ----

int cmd_report(const Common& c, const std::vector<std::string>& files) {
  struct Entry {
    std::string method;
    MetricReport rep;
    std::map<ConditionKey, const PerConditionMetrics*> by_key;
  };
  std::vector<Entry> entries;
  for (const auto& f : files) {
    Entry e;
    e.rep = MetricReport::from_json(read_text(f), &e.method);
    for (const auto& row : e.rep.rows) e.by_key[row.key] = &row;
    entries.push_back(std::move(e));
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.method < b.method; });
  // Pointers into rep.rows must be rebuilt after the move/sort.
  for (auto& e : entries) {
    e.by_key.clear();
    for (const auto& row : e.rep.rows) e.by_key[row.key] = &row;
  }

  std::ostringstream md, csv;
  md << "| method | pds_l1 | pds_l2 | pds_cos | es |";
  for (const auto& m : metric_names()) md << " " << m << " |";
  md << "\n|---|---|---|---|---|";
  for (size_t i = 0; i < metric_names().size(); ++i) md << "---|";
  md << "\n";
  csv << "method,pds_l1,pds_l2,pds_cos,es";
  for (const auto& m : metric_names()) csv << "," << m;
  csv << "\n";
  for (const auto& e : entries) {
    md << "| " << e.method << " | " << e.rep.pds_l1 << " | " << e.rep.pds_l2
       << " | " << e.rep.pds_cos << " | " << e.rep.es << " |";
    csv << e.method << "," << e.rep.pds_l1 << "," << e.rep.pds_l2 << ","
        << e.rep.pds_cos << "," << e.rep.es;
    for (const auto& m : metric_names()) {
      md << " " << e.rep.means.at(m) << " |";
      csv << "," << e.rep.means.at(m);
    }
    md << "\n";
    csv << "\n";
  }

  // Pairwise win rates: fraction of shared conditions where A >= B
  // (<= for the error metrics).
  std::ostringstream wins;
  wins << "method_a,method_b,metric,win_rate,conditions\n";
  const auto& fields = metric_accessors();
  for (size_t ai = 0; ai < entries.size(); ++ai)
    for (size_t bi = 0; bi < entries.size(); ++bi) {
      const Entry& A = entries[ai];
      const Entry& B = entries[bi];
      std::vector<ConditionKey> shared;
      for (const auto& [k, row] : A.by_key)
        if (B.by_key.count(k)) shared.push_back(k);
      if (shared.size() < A.by_key.size() || shared.size() < B.by_key.size())
        std::cout << "note: " << A.method << " vs " << B.method
                  << " evaluated on the " << shared.size()
                  << "-condition intersection\n";
      for (size_t mi = 0; mi < metric_names().size(); ++mi) {
        const std::string& mname = metric_names()[mi];
        const bool lower_better = mname == "mae" || mname == "mse";
        int won = 0, total = 0;
        for (const auto& k : shared) {
          const double va = A.by_key.at(k)->*fields[mi];
          const double vb = B.by_key.at(k)->*fields[mi];
          if (std::isnan(va) || std::isnan(vb)) continue;
          ++total;
          if (lower_better ? va <= vb : va >= vb) ++won;
        }
        wins << A.method << "," << B.method << "," << mname << ","
             << (total ? double(won) / total : std::nan("")) << "," << total
             << "\n";
      }
    }

  std::cout << md.str();
  if (!c.out.empty()) {
    write_text(c.out + ".md", md.str());
    write_text(c.out + ".summary.csv", csv.str());
    write_text(c.out + ".winrates.csv", wins.str());
    std::cout << "wrote " << c.out << ".{md,summary.csv,winrates.csv}\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"functional diffusion over cell distributions"};
  app.require_subcommand(1);

  Common common;
  SynthConfig scfg;
  TrainArgs train;
  SampleArgs sampl;
  BaselineArgs base;
  EvalArgs eval;
  std::vector<std::string> report_files;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, common);
  synth->add_option("--genes", scfg.gene_dim)->capture_default_str();
  synth->add_option("--contexts", scfg.contexts)->capture_default_str();
  synth->add_option("--perturbations", scfg.perturbations)
      ->capture_default_str();
  synth->add_option("--replicates", scfg.replicates)->capture_default_str();
  synth->add_option("--cells-per-replicate", scfg.cells_per_replicate)
      ->capture_default_str();
  synth->add_option("--sigma-latent", scfg.sigma_latent)
      ->capture_default_str();
  synth->add_option("--effect-rank", scfg.effect_rank)->capture_default_str();
  synth->add_option("--effect-scale", scfg.effect_scale)
      ->capture_default_str();
  synth->add_option("--noise-scale", scfg.noise_scale)->capture_default_str();
  synth->add_option("--zero-inflation", scfg.zero_inflation)
      ->capture_default_str();
  synth->add_option("--holdout-frac", scfg.holdout_fraction)
      ->capture_default_str();
  synth->add_option("--valid-frac", scfg.valid_fraction)
      ->capture_default_str();

  auto* tr = app.add_subcommand("train", "train a denoiser checkpoint");
  add_common(tr, common);
  tr->add_option("--data", train.data, "dataset prefix")->required();
  tr->add_option("--mode", train.mode, "scratch | pretrain | finetune")
      ->capture_default_str();
  tr->add_option("--from", train.from, "checkpoint to finetune from");
  tr->add_option("--width", train.width)->capture_default_str();
  tr->add_option("--blocks", train.blocks)->capture_default_str();
  tr->add_option("--heads", train.heads)->capture_default_str();
  tr->add_flag("--no-self-cond", train.no_self_cond);
  tr->add_option("--batch-size", train.batch_size)->capture_default_str();
  tr->add_option("--steps", train.tcfg.total_steps)->capture_default_str();
  tr->add_option("--warmup", train.tcfg.warmup_steps)->capture_default_str();
  tr->add_option("--peak-lr", train.tcfg.peak_lr)->capture_default_str();
  tr->add_option("--lambda-ed", train.tcfg.lambda_ed)->capture_default_str();
  tr->add_option("--lambda-mse", train.tcfg.lambda_mse)
      ->capture_default_str();
  tr->add_option("--p-drop", train.tcfg.p_drop)->capture_default_str();
  tr->add_option("--p-sc", train.tcfg.p_sc)->capture_default_str();
  tr->add_option("--clip-norm", train.tcfg.clip_norm)->capture_default_str();
  tr->add_option("--weight-decay", train.tcfg.weight_decay)
      ->capture_default_str();
  tr->add_option("--ema-decay", train.tcfg.ema_decay)->capture_default_str();
  tr->add_option("--ema-interval", train.tcfg.ema_interval)
      ->capture_default_str();
  tr->add_option("--eval-interval", train.tcfg.eval_interval)
      ->capture_default_str();
  tr->add_option("--eval-conditions", train.eval_conditions)
      ->capture_default_str();
  tr->add_option("--eval-sample-steps", train.eval_sample_steps)
      ->capture_default_str();
  tr->add_flag("!--eval-live", train.eval_ema,
               "evaluate live weights instead of the EMA shadow");

  auto* sa = app.add_subcommand("sample", "sample predicted cells");
  add_common(sa, common);
  sa->add_option("--ckpt", sampl.ckpt, "model checkpoint")->required();
  sa->add_option("--data", sampl.data, "dataset prefix")->required();
  sa->add_option("--context", sampl.context, "restrict to one context");
  sa->add_option("--perturbation", sampl.perturbation,
                 "restrict to one perturbation");
  sa->add_option("--split", sampl.split)->capture_default_str();
  sa->add_option("--cells", sampl.cells)->capture_default_str();
  sa->add_flag("--zero-shot", sampl.zero_shot,
               "mask the perturbation token (null token probe)");
  sa->add_flag("--no-ema", sampl.no_ema, "sample with live weights");
  sa->add_option("--sample-steps", sampl.scfg.num_steps)
      ->capture_default_str();
  sa->add_option("--eta", sampl.scfg.eta)->capture_default_str();
  sa->add_option("--guidance", sampl.scfg.guidance)->capture_default_str();

  auto* ba = app.add_subcommand("baseline", "emit baseline predictions");
  add_common(ba, common);
  ba->add_option("--data", base.data, "dataset prefix")->required();
  ba->add_option("--kind", base.kind, "mean | linear")->capture_default_str();
  ba->add_option("--level", base.level,
                 "mean aggregation: perturbation | context | condition | overall")
      ->capture_default_str();
  ba->add_option("--ridge", base.ridge)->capture_default_str();
  ba->add_option("--cells", base.cells)->capture_default_str();
  ba->add_option("--split", base.split)->capture_default_str();

  auto* ev = app.add_subcommand("eval", "score predictions against the truth");
  add_common(ev, common);
  ev->add_option("--truth", eval.truth, "truth dataset prefix")->required();
  ev->add_option("predictions", eval.predictions,
                 "prediction sources as name=prefix")
      ->required();

  auto* rp = app.add_subcommand("report", "aggregate report files");
  add_common(rp, common, /*out_required=*/false);
  rp->add_option("reports", report_files, "MetricReport json files")
      ->required();

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPrecondition;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return kExitPrecondition;
  }

  try {
    apply_threads(common);
    if (synth->parsed()) return cmd_synth(common, scfg);
    if (tr->parsed()) return cmd_train(common, train);
    if (sa->parsed()) return cmd_sample(common, sampl);
    if (ba->parsed()) return cmd_baseline(common, base);
    if (ev->parsed()) return cmd_eval(common, eval);
    if (rp->parsed()) return cmd_report(common, report_files);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return std::string(e.what()).find("non-finite") != std::string::npos
               ? kExitNumerical
               : kExitPrecondition;
  }
  return kExitPrecondition;
}
