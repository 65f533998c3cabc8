#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "celldiff/dataset.hpp"
#include "celldiff/metrics.hpp"

namespace fs = std::filesystem;
using namespace celldiff;

namespace {

const std::string kCli = CELLDIFF_CLI_PATH;

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path()
                 / ("celldiff_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string path(const std::string& name) {
  return (work_dir() / name).string();
}

int run(const std::string& args, const std::string& capture = "") {
  std::string cmd = kCli + " " + args;
  if (!capture.empty()) cmd += " > " + capture + " 2>&1";
  const int ret = std::system(cmd.c_str());
  return ret < 0 ? ret : WEXITSTATUS(ret);
}

std::string slurp(const std::string& file) {
  std::ifstream in(file);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) {
  return slurp(a) == slurp(b);
}

const std::string kTinySynth =
    " --genes 12 --contexts 2 --perturbations 5 --replicates 2"
    " --cells-per-replicate 12";
const std::string kTinyModel = " --width 16 --blocks 1 --heads 2";

}  // namespace

TEST_CASE("synth writes a reproducible dataset with a faithful summary") {
  REQUIRE(run("synth --seed 7 --out " + path("ds") + kTinySynth,
              path("synth.out")) == 0);
  CHECK(fs::exists(path("ds") + ".matrix.tsv"));
  CHECK(fs::exists(path("ds") + ".meta.tsv"));

  // summary row counts match the meta file
  Dataset ds = load_dataset(path("ds"));
  std::map<Split, int> counts;
  for (const auto& m : ds.meta) ++counts[m.split];
  const std::string out = slurp(path("synth.out"));
  for (Split sp : {Split::kTrain, Split::kValid, Split::kTest}) {
    std::istringstream lines(out);
    std::string line;
    bool found = false;
    while (std::getline(lines, line))
      if (line.rfind(split_name(sp) + "\t", 0) == 0) {
        std::istringstream f(line);
        std::string name;
        int cells;
        f >> name >> cells;
        CHECK(cells == counts[sp]);
        found = true;
      }
    CHECK(found);
  }

  // same seed, byte-identical artifacts
  REQUIRE(run("synth --seed 7 --out " + path("ds_b") + kTinySynth) == 0);
  CHECK(same_bytes(path("ds") + ".matrix.tsv", path("ds_b") + ".matrix.tsv"));
  CHECK(same_bytes(path("ds") + ".meta.tsv", path("ds_b") + ".meta.tsv"));

  // rejected preconditions exit with 2
  CHECK(run("synth --seed 7 --out " + path("ds_c") + " --holdout-frac 1.0",
            path("err.out")) == 2);
  CHECK(run("synth --seed 7 --out " + path("ds"), path("err.out")) == 2);
  CHECK(slurp(path("err.out")).find("--force") != std::string::npos);
}

TEST_CASE("config file fills defaults and explicit flags win") {
  {
    std::ofstream cfg(path("synth.cfg"));
    cfg << "# tiny dataset\nseed=7\ngenes=12\ncontexts=2\nperturbations=5\n"
        << "replicates=2\ncells-per-replicate=12\n";
  }
  REQUIRE(run("synth --config " + path("synth.cfg") + " --out " + path("ds_cfg"))
          == 0);
  CHECK(same_bytes(path("ds") + ".matrix.tsv", path("ds_cfg") + ".matrix.tsv"));

  REQUIRE(run("synth --config " + path("synth.cfg") + " --genes 7 --out "
              + path("ds_cfg7")) == 0);
  CHECK(load_dataset(path("ds_cfg7")).gene_dim() == 7);

  CHECK(run("synth --config " + path("no_such.cfg") + " --out " + path("x"))
        == 2);
}

TEST_CASE("train writes checkpoints and learns on a tiny run") {
  // --steps 0 emits the initialization checkpoint and exits cleanly
  REQUIRE(run("train --data " + path("ds") + " --out " + path("init.ckpt")
              + " --steps 0" + kTinyModel) == 0);
  CHECK(fs::exists(path("init.ckpt")));

  REQUIRE(run("train --data " + path("ds") + " --out " + path("m.ckpt")
              + kTinyModel
              + " --steps 40 --warmup 5 --batch-size 8 --eval-interval 20"
                " --eval-sample-steps 5 --seed 3",
              path("train.out")) == 0);
  CHECK(fs::exists(path("m.ckpt")));
  CHECK(slurp(path("train.out")).find("pdcorr=") != std::string::npos);

  // the logged loss decreases over the run
  std::ifstream log(path("m.ckpt") + ".train.log");
  std::string line;
  std::getline(log, line);  // header
  double first = 0.0, last = 0.0;
  bool have_first = false;
  while (std::getline(log, line)) {
    std::istringstream f(line);
    double step, lr, loss;
    f >> step >> lr >> loss;
    if (!have_first) {
      first = loss;
      have_first = true;
    }
    last = loss;
  }
  REQUIRE(have_first);
  CHECK(last < first);

  // pretrain then finetune; incompatible width is a named precondition error
  REQUIRE(run("train --data " + path("ds") + " --out " + path("pre.ckpt")
              + kTinyModel
              + " --mode pretrain --steps 20 --warmup 5 --batch-size 8"
                " --seed 3") == 0);
  REQUIRE(run("train --data " + path("ds") + " --out " + path("ft.ckpt")
              + kTinyModel
              + " --mode finetune --from " + path("pre.ckpt")
              + " --steps 20 --warmup 5 --batch-size 8 --eval-interval 10"
                " --eval-sample-steps 5 --seed 3") == 0);
  CHECK(run("train --data " + path("ds") + " --out " + path("bad.ckpt")
            + " --width 24 --blocks 1 --heads 2 --mode finetune --from "
            + path("pre.ckpt") + " --steps 10",
            path("err.out")) == 2);
  CHECK(slurp(path("err.out")).find("width") != std::string::npos);
  CHECK(run("train --data " + path("ds") + " --out " + path("x.ckpt")
            + " --mode finetune --steps 10" + kTinyModel,
            path("err.out")) == 2);
}

TEST_CASE("sample is deterministic, nonnegative, and supports zero-shot") {
  const std::string base = "sample --ckpt " + path("m.ckpt") + " --data "
                           + path("ds")
                           + " --cells 8 --sample-steps 5 --seed 11 --out ";
  REQUIRE(run(base + path("pred_a")) == 0);
  REQUIRE(run(base + path("pred_b")) == 0);
  CHECK(same_bytes(path("pred_a") + ".matrix.tsv",
                   path("pred_b") + ".matrix.tsv"));

  Dataset pred = load_dataset(path("pred_a"));
  for (int i = 0; i < pred.cells(); ++i)
    for (int j = 0; j < pred.gene_dim(); ++j)
      REQUIRE(pred.matrix.at(i, j) >= 0.0);

  // zero-shot masks the perturbation token in the provenance record
  REQUIRE(run(base + path("pred_zs") + " --zero-shot") == 0);
  const auto prov = nlohmann::json::parse(slurp(path("pred_zs") + ".pred.json"));
  CHECK(prov.at("zero_shot") == true);
  for (const auto& c : prov.at("conditions"))
    CHECK(c.at("perturbation").is_null());

  CHECK(run("sample --ckpt " + path("m.ckpt") + " --data " + path("ds")
            + " --perturbation 999 --out " + path("pred_x"),
            path("err.out")) == 2);
}

TEST_CASE("baselines emit predictions in the shared format") {
  REQUIRE(run("baseline --data " + path("ds")
              + " --kind mean --level overall --cells 8 --out "
              + path("pred_mean")) == 0);
  Dataset mean_pred = load_dataset(path("pred_mean"));
  // overall level: every row identical
  for (int i = 1; i < mean_pred.cells(); ++i)
    for (int j = 0; j < mean_pred.gene_dim(); ++j)
      REQUIRE(mean_pred.matrix.at(i, j) == mean_pred.matrix.at(0, j));

  REQUIRE(run("baseline --data " + path("ds")
              + " --kind linear --cells 8 --out " + path("pred_lin")) == 0);
  CHECK(load_dataset(path("pred_lin")).gene_dim() == 12);

  CHECK(run("baseline --data " + path("ds")
            + " --kind mean --level bogus --out " + path("pred_x2"),
            path("err.out")) == 2);
  CHECK(slurp(path("err.out")).find("perturbation") != std::string::npos);
  CHECK(run("baseline --data " + path("ds") + " --kind fancy --out "
            + path("pred_x3")) == 2);
}

TEST_CASE("eval saturates on the truth and reports skipped conditions") {
  // the truth dataset doubles as a perfect prediction
  fs::copy_file(path("ds") + ".matrix.tsv", path("self") + ".matrix.tsv",
                fs::copy_options::overwrite_existing);
  fs::copy_file(path("ds") + ".meta.tsv", path("self") + ".meta.tsv",
                fs::copy_options::overwrite_existing);

  REQUIRE(run("eval --truth " + path("ds") + " --out " + path("evald")
              + " self=" + path("self") + " mean=" + path("pred_mean")
              + " model=" + path("pred_a") + " --seed 1",
              path("eval.out")) == 0);
  std::string method;
  MetricReport self_rep = MetricReport::from_json(
      slurp(path("evald") + "/self.report.json"), &method);
  CHECK(method == "self");
  CHECK(self_rep.pds_l1 == doctest::Approx(1.0));
  CHECK(self_rep.means.at("pdcorr") == doctest::Approx(1.0));
  CHECK(self_rep.means.at("mae") == doctest::Approx(0.0));
  CHECK(self_rep.means.at("mse") == doctest::Approx(0.0));
  CHECK(self_rep.means.at("de_over") == doctest::Approx(1.0));
  CHECK(self_rep.means.at("auroc") == doctest::Approx(1.0));

  CHECK(fs::exists(path("evald") + "/summary.csv"));
  CHECK(fs::exists(path("evald") + "/scatter.csv"));
  CHECK(fs::exists(path("evald") + "/pvals_hist.csv"));

  // drop one test condition from a prediction: it lands under "skipped"
  Dataset part = load_dataset(path("pred_mean"));
  const int drop = part.meta.front().perturbation;
  Dataset kept;
  kept.genes = part.genes;
  std::vector<int> rows;
  for (int i = 0; i < part.cells(); ++i)
    if (part.meta[i].perturbation != drop) rows.push_back(i);
  REQUIRE(!rows.empty());
  kept.matrix = Tensor::zeros({int(rows.size()), part.gene_dim()});
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < part.gene_dim(); ++j)
      kept.matrix.at(int(i), j) = part.matrix.at(rows[i], j);
    kept.meta.push_back(part.meta[rows[i]]);
    kept.meta.back().cell_id = int(i);
  }
  save_dataset(kept, path("pred_part"));
  REQUIRE(run("eval --truth " + path("ds") + " --out " + path("evald2")
              + " part=" + path("pred_part"),
              path("eval2.out")) == 0);
  const auto rep = nlohmann::json::parse(
      slurp(path("evald2") + "/part.report.json"));
  CHECK(!rep.at("skipped_conditions").empty());

  // gene vocabulary mismatch is a named precondition failure
  Dataset renamed = load_dataset(path("pred_mean"));
  renamed.genes[0] = "not_a_gene";
  save_dataset(renamed, path("pred_badgenes"));
  CHECK(run("eval --truth " + path("ds") + " --out " + path("evald3")
            + " bad=" + path("pred_badgenes"),
            path("err.out")) == 2);
  CHECK(slurp(path("err.out")).find("not_a_gene") != std::string::npos);
}

TEST_CASE("report aggregates methods and computes win rates") {
  // single report renders a table
  REQUIRE(run("report " + path("evald") + "/self.report.json --out "
              + path("rep1"),
              path("rep1.out")) == 0);
  CHECK(slurp(path("rep1.out")).find("| self |") != std::string::npos);

  // method vs itself: win rate 1 under the >= convention
  std::string wins = slurp(path("rep1") + ".winrates.csv");
  std::istringstream lines(wins);
  std::string line;
  std::getline(lines, line);  // header
  int checked = 0;
  while (std::getline(lines, line)) {
    std::istringstream f(line);
    std::string a, b, metric, rate, n;
    std::getline(f, a, ',');
    std::getline(f, b, ',');
    std::getline(f, metric, ',');
    std::getline(f, rate, ',');
    std::getline(f, n, ',');
    if (std::stoi(n) > 0) {
      CHECK(std::stod(rate) == doctest::Approx(1.0));
      ++checked;
    }
  }
  CHECK(checked > 0);

  // two hand-built reports with known per-condition values
  auto make_report = [](std::vector<double> pdcorr, std::vector<double> mae) {
    MetricReport r;
    for (size_t i = 0; i < pdcorr.size(); ++i) {
      PerConditionMetrics row;
      row.key = {0, int(i) + 1};
      row.pdcorr = pdcorr[i];
      row.mae = mae[i];
      r.rows.push_back(row);
      r.pred_scores.push_back({});
    }
    for (const auto& m : metric_names()) {
      r.means[m] = 0.0;
      r.skipped[m] = 0;
    }
    return r;
  };
  // A beats B on pdcorr for 2 of 3 conditions, on mae for 1 of 3
  MetricReport ra = make_report({0.9, 0.8, 0.1}, {0.5, 0.6, 0.1});
  MetricReport rb = make_report({0.5, 0.5, 0.5}, {0.4, 0.5, 0.3});
  std::ofstream(path("ra.json")) << ra.to_json("alpha");
  std::ofstream(path("rb.json")) << rb.to_json("beta");
  REQUIRE(run("report " + path("ra.json") + " " + path("rb.json") + " --out "
              + path("rep2"),
              path("rep2.out")) == 0);
  wins = slurp(path("rep2") + ".winrates.csv");
  CHECK(wins.find("alpha,beta,pdcorr,0.666667,3") != std::string::npos);
  CHECK(wins.find("alpha,beta,mae,0.333333,3") != std::string::npos);
  CHECK(wins.find("beta,alpha,pdcorr,0.333333,3") != std::string::npos);
}
