#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <utility>
#include <vector>

#include "celldiff/diffusion.hpp"
#include "celldiff/kernels.hpp"
#include "celldiff/mmdit.hpp"
#include "celldiff/rng.hpp"

namespace celldiff {

enum class TrainMode { kPerturbation, kMarginalPretrain };

struct TrainConfig {
  double lambda_ed = 1.0;    // weight on the energy-distance term
  double lambda_mse = 1.0;   // weight on the per-cell reconstruction term
  double p_drop = 0.1;       // CFG metadata dropout probability
  double p_sc = 0.5;         // self-conditioning probability
  double peak_lr = 1e-3;
  int warmup_steps = 200;
  int total_steps = 1000;
  double clip_norm = 1.0;    // global gradient norm cap
  double weight_decay = 1e-2;
  double ema_decay = 0.99;
  int ema_interval = 10;
  int eval_interval = 200;
  TrainMode mode = TrainMode::kPerturbation;
  uint64_t seed = 0;

  void validate() const;
};

struct OptimizerState {
  std::vector<Tensor> m1;  // first moments, shapes mirror the parameters
  std::vector<Tensor> m2;  // second moments
  int64_t step = 0;

  static OptimizerState init(const ParamStore& p);
};

// Hybrid objective: energy distance between the batches plus the mean
// per-cell squared reconstruction error, weighted by lambda.
struct LossParts {
  double total = 0.0;
  double ed = 0.0;
  double mse = 0.0;
};
LossParts total_loss(const CellBatch& b0, const CellBatch& b_theta,
                     double lambda_mse);

// AdamW with (0.9, 0.98), eps 1e-8, decoupled weight decay. `grads` follows
// the parameter store order.
void optimizer_step(ParamStore& params, const std::vector<Tensor>& grads,
                    OptimizerState& opt, double lr, double weight_decay);

// Linear warmup to the peak, cosine decay to a 0.1x plateau at total steps,
// constant beyond.
double lr_at(int64_t step, const TrainConfig& cfg);

// shadow <- decay * shadow + (1 - decay) * params, applied only when step is
// a multiple of the interval.
void ema_update(const ParamStore& params, ParamStore& shadow, double decay,
                int64_t step, int interval);

// Scale `grads` so the global euclidean norm is at most `clip`; returns the
// pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double clip);

// Highest validation metric wins; exact ties go to the earliest step.
int select_checkpoint(const std::vector<std::pair<int, double>>& history);

struct StepLog {
  int64_t step = 0;
  double lr = 0.0;
  LossParts loss;
  double grad_norm = 0.0;  // pre-clip global norm
  int t = 0;
  bool dropped = false;    // condition was null-masked this step
  bool self_cond = false;  // two-pass self-conditioning ran this step
};

// One gradient update on a (perturbed, control, condition) batch pair.
// Deterministic given the rng state. Marginal mode zeroes the control stream
// and masks the perturbation metadata.
StepLog train_step(MmDit& model, OptimizerState& opt, const Tensor& b_pert,
                   const Tensor& b_ctrl, const Condition& cond, Rng& rng,
                   const TrainConfig& cfg, const NoiseSchedule& s);

// train_step preconfigured for marginal pretraining: the target batch is any
// batch from context `context`.
StepLog pretrain_step(MmDit& model, OptimizerState& opt, const Tensor& b0,
                      int context, Rng& rng, const TrainConfig& cfg,
                      const NoiseSchedule& s);

struct BatchPair {
  Tensor b_pert;
  Tensor b_ctrl;
  Condition cond;
};
using BatchProvider = std::function<BatchPair(int step, Rng& rng)>;
// Validation score for the current model (higher is better); evaluated on the
// EMA shadow.
using EvalFn = std::function<double(const MmDit& model, int step)>;

struct FitResult {
  int best_step = 0;
  double best_metric = 0.0;
  bool evaluated = false;
};

// Full loop: cfg.total_steps updates, periodic evaluation, best-checkpoint
// restoration (parameters and shadow revert to the winning evaluation).
// `log` receives tab-separated step rows when non-null.
FitResult fit(MmDit& model, const BatchProvider& batches,
              const TrainConfig& cfg, const NoiseSchedule& s,
              const EvalFn& eval = {}, std::ostream* log = nullptr);

}  // namespace celldiff
