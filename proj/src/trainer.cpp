#include "celldiff/trainer.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace celldiff {

void TrainConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(p_drop) || !prob(p_sc))
    throw std::invalid_argument("train config: probabilities must be in [0,1]");
  if (!(clip_norm > 0.0))
    throw std::invalid_argument("train config: clip norm must be positive");
  if (lambda_ed < 0.0 || lambda_mse < 0.0 || peak_lr <= 0.0
      || weight_decay < 0.0)
    throw std::invalid_argument("train config: nonnegative loss/lr knobs required");
  if (warmup_steps < 0 || total_steps < 1 || ema_interval < 1 || eval_interval < 1)
    throw std::invalid_argument("train config: bad step counts");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0))
    throw std::invalid_argument("train config: ema decay must be in [0,1)");
}

OptimizerState OptimizerState::init(const ParamStore& p) {
  OptimizerState o;
  o.m1.reserve(p.count());
  o.m2.reserve(p.count());
  for (size_t i = 0; i < p.count(); ++i) {
    o.m1.push_back(Tensor::zeros(p.tensor(i).shape));
    o.m2.push_back(Tensor::zeros(p.tensor(i).shape));
  }
  return o;
}

LossParts total_loss(const CellBatch& b0, const CellBatch& b_theta,
                     double lambda_mse) {
  if (!b0.same_shape(b_theta))
    throw std::invalid_argument("total_loss: batch shape mismatch");
  LossParts out;
  out.ed = energy_distance(b0, b_theta);
  double sq = 0.0;
  for (int64_t i = 0; i < b0.numel(); ++i) {
    const double d = b0.v[i] - b_theta.v[i];
    sq += d * d;
  }
  out.mse = sq / b0.rows();
  out.total = out.ed + lambda_mse * out.mse;
  return out;
}

void optimizer_step(ParamStore& params, const std::vector<Tensor>& grads,
                    OptimizerState& opt, double lr, double weight_decay) {
  if (grads.size() != params.count())
    throw std::invalid_argument("optimizer_step: gradient list mismatch");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.98, kEps = 1e-8;
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, double(opt.step));
  const double bc2 = 1.0 - std::pow(kBeta2, double(opt.step));
  for (size_t i = 0; i < params.count(); ++i) {
    Tensor& p = params.tensor(i);
    const Tensor& g = grads[i];
    Tensor& m = opt.m1[i];
    Tensor& v = opt.m2[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      m.v[j] = kBeta1 * m.v[j] + (1.0 - kBeta1) * g.v[j];
      v.v[j] = kBeta2 * v.v[j] + (1.0 - kBeta2) * g.v[j] * g.v[j];
      const double mhat = m.v[j] / bc1;
      const double vhat = v.v[j] / bc2;
      p.v[j] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * p.v[j]);
    }
  }
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  const double peak = cfg.peak_lr;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return peak * double(step) / cfg.warmup_steps;
  if (step >= cfg.total_steps) return 0.1 * peak;
  const double frac = double(step - cfg.warmup_steps) /
                      double(cfg.total_steps - cfg.warmup_steps);
  // cosine from peak to the 0.1x plateau
  return peak * (0.55 + 0.45 * std::cos(M_PI * frac));
}

void ema_update(const ParamStore& params, ParamStore& shadow, double decay,
                int64_t step, int interval) {
  if (step % interval != 0) return;
  for (size_t i = 0; i < params.count(); ++i) {
    const Tensor& p = params.tensor(i);
    Tensor& s = shadow.tensor(i);
    for (int64_t j = 0; j < p.numel(); ++j)
      s.v[j] = decay * s.v[j] + (1.0 - decay) * p.v[j];
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double clip) {
  double norm_sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.v) norm_sq += x * x;
  const double norm = std::sqrt(norm_sq);
  if (norm > clip) {
    const double scale = clip / norm;
    for (auto& g : grads)
      for (auto& x : g.v) x *= scale;
  }
  return norm;
}

int select_checkpoint(const std::vector<std::pair<int, double>>& history) {
  if (history.empty())
    throw std::invalid_argument("select_checkpoint: empty history");
  int best_step = history.front().first;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [step, metric] : history) {
    if (std::isfinite(metric) && metric > best) {
      best = metric;
      best_step = step;
    }
  }
  return best_step;
}

StepLog train_step(MmDit& model, OptimizerState& opt, const Tensor& b_pert,
                   const Tensor& b_ctrl, const Condition& cond, Rng& rng,
                   const TrainConfig& cfg, const NoiseSchedule& s) {
  const int m = b_pert.rows();
  const int g = b_pert.cols();
  if (b_ctrl.rows() != m || b_ctrl.cols() != g)
    throw std::invalid_argument("train_step: batch pair shape mismatch");

  StepLog log;
  log.t = 1 + int(rng.uniform_int(uint64_t(s.steps)));

  const bool marginal = cfg.mode == TrainMode::kMarginalPretrain;
  Condition used = cond;
  used.marginal = marginal;
  log.dropped = rng.uniform() < cfg.p_drop;
  if (log.dropped) used.null_mask = true;

  Tensor eps = Tensor::randn(b_pert.shape, rng);
  Tensor bt = q_sample(b_pert, log.t, eps, s);
  Tensor ctrl = marginal ? Tensor::zeros(b_ctrl.shape) : b_ctrl;

  Tensor b_sc = Tensor::zeros({m, g});
  if (model.config().self_cond) {
    log.self_cond = rng.uniform() < cfg.p_sc;
    if (log.self_cond) {
      // first pass outside the tape: the fed-back prediction is a constant
      b_sc = model.denoise(model.params(), bt, b_sc, ctrl, log.t, used);
    }
  }

  ad::Tape tape;
  auto pids = model.register_params(tape, model.params());
  auto out = model.forward_raw(tape, pids, tape.input(bt, false),
                               tape.input(b_sc, false), tape.input(ctrl, false),
                               log.t, used);
  auto b0 = tape.input(b_pert, false);
  auto ed = energy_distance_node(tape, b0, out);
  auto diff = tape.sub(b0, out);
  auto mse = tape.scale(tape.sum_all(tape.mul(diff, diff)), 1.0 / m);
  auto loss = tape.add(tape.scale(ed, cfg.lambda_ed),
                       tape.scale(mse, cfg.lambda_mse));

  log.loss.ed = tape.value(ed).v[0];
  log.loss.mse = tape.value(mse).v[0];
  log.loss.total = tape.value(loss).v[0];
  if (!std::isfinite(log.loss.total))
    throw std::runtime_error("train_step: non-finite loss at step "
                             + std::to_string(opt.step + 1) + " (t="
                             + std::to_string(log.t) + ")");

  tape.backward(loss, Tensor::scalar(1.0));

  std::vector<Tensor> grads;
  grads.reserve(pids.size());
  for (auto id : pids) grads.push_back(tape.grad(id));
  log.grad_norm = clip_global_norm(grads, cfg.clip_norm);

  log.lr = lr_at(opt.step + 1, cfg);
  optimizer_step(model.params(), grads, opt, log.lr, cfg.weight_decay);
  ema_update(model.params(), model.ema(), cfg.ema_decay, opt.step,
             cfg.ema_interval);
  log.step = opt.step;
  return log;
}

StepLog pretrain_step(MmDit& model, OptimizerState& opt, const Tensor& b0,
                      int context, Rng& rng, const TrainConfig& cfg,
                      const NoiseSchedule& s) {
  TrainConfig pre = cfg;
  pre.mode = TrainMode::kMarginalPretrain;
  Condition cond;
  cond.context = context;
  return train_step(model, opt, b0, Tensor::zeros(b0.shape), cond, rng, pre, s);
}

FitResult fit(MmDit& model, const BatchProvider& batches,
              const TrainConfig& cfg, const NoiseSchedule& s,
              const EvalFn& eval, std::ostream* log) {
  cfg.validate();
  Rng rng(cfg.seed);
  OptimizerState opt = OptimizerState::init(model.params());
  model.ema() = model.params();

  if (log)
    *log << "step\tlr\tloss\ted\tmse\tgrad_norm\n";

  FitResult result;
  std::vector<std::pair<int, double>> history;
  ParamStore best_params = model.params();
  ParamStore best_ema = model.ema();

  for (int step = 1; step <= cfg.total_steps; ++step) {
    BatchPair b = batches(step, rng);
    StepLog row = train_step(model, opt, b.b_pert, b.b_ctrl, b.cond, rng, cfg, s);
    if (log)
      *log << row.step << '\t' << row.lr << '\t' << row.loss.total << '\t'
           << row.loss.ed << '\t' << row.loss.mse << '\t' << row.grad_norm
           << '\n';
    if (eval && (step % cfg.eval_interval == 0 || step == cfg.total_steps)) {
      const double metric = eval(model, step);
      history.emplace_back(step, metric);
      if (select_checkpoint(history) == step) {
        best_params = model.params();
        best_ema = model.ema();
      }
    }
  }

  if (!history.empty()) {
    result.evaluated = true;
    result.best_step = select_checkpoint(history);
    for (const auto& [step, metric] : history)
      if (step == result.best_step) result.best_metric = metric;
    model.params() = best_params;
    model.ema() = best_ema;
  } else {
    result.best_step = cfg.total_steps;
  }
  return result;
}

}  // namespace celldiff
