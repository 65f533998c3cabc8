#include "celldiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace celldiff {

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(steps);
  s.alpha_bars.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.betas[t] = steps == 1
                     ? beta_start
                     : beta_start + (beta_end - beta_start) * t / (steps - 1);
    prod *= 1.0 - s.betas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

std::vector<int> sampler_timesteps(int num_steps, const NoiseSchedule& s) {
  if (num_steps < 1 || num_steps > s.steps)
    throw std::invalid_argument("sampler: num_steps must be in [1, T]");
  // evenly spaced over [1, T], always including T, strictly decreasing
  std::vector<int> ts(num_steps);
  for (int k = 0; k < num_steps; ++k) {
    double frac = num_steps == 1 ? 1.0 : 1.0 - double(k) / num_steps;
    ts[k] = std::max(1, static_cast<int>(std::lround(frac * s.steps)));
  }
  ts[0] = s.steps;
  for (int k = 1; k < num_steps; ++k) ts[k] = std::min(ts[k], ts[k - 1] - 1);
  if (ts.back() < 1) throw std::invalid_argument("sampler: too many steps for T");
  return ts;
}

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps)
    throw std::invalid_argument("timestep out of range [1, T]");
}

}  // namespace

Tensor q_sample(const Tensor& b0, int t, const Tensor& eps,
                const NoiseSchedule& s) {
  check_t(t, s);
  if (!b0.same_shape(eps))
    throw std::invalid_argument("q_sample: noise shape mismatch");
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Tensor out = Tensor::zeros(b0.shape);
  for (int64_t i = 0; i < b0.numel(); ++i) out.v[i] = a * b0.v[i] + b * eps.v[i];
  return out;
}

Tensor eps_from_x0(const Tensor& bt, const Tensor& x0_hat, int t,
                   const NoiseSchedule& s) {
  check_t(t, s);
  if (!bt.same_shape(x0_hat))
    throw std::invalid_argument("eps_from_x0: shape mismatch");
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Tensor out = Tensor::zeros(bt.shape);
  for (int64_t i = 0; i < bt.numel(); ++i) out.v[i] = (bt.v[i] - a * x0_hat.v[i]) / b;
  return out;
}

Posterior posterior_mean(const Tensor& x0, const Tensor& bt, int t,
                         const NoiseSchedule& s) {
  if (t < 2) throw std::invalid_argument("posterior_mean: t must be >= 2");
  check_t(t, s);
  if (!x0.same_shape(bt))
    throw std::invalid_argument("posterior_mean: shape mismatch");
  const double abar_t = s.alpha_bar(t);
  const double abar_prev = s.alpha_bar(t - 1);
  const double beta_t = s.beta(t);
  const double c0 = std::sqrt(abar_prev) * beta_t / (1.0 - abar_t);
  const double ct = std::sqrt(1.0 - beta_t) * (1.0 - abar_prev) / (1.0 - abar_t);
  Posterior p;
  p.mean = Tensor::zeros(x0.shape);
  for (int64_t i = 0; i < x0.numel(); ++i)
    p.mean.v[i] = c0 * x0.v[i] + ct * bt.v[i];
  p.variance = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t;
  return p;
}

Tensor ddim_step(const Tensor& bt, const Tensor& x0_hat, int t, int t_next,
                 double eta, Rng& rng, const NoiseSchedule& s) {
  check_t(t, s);
  if (t_next >= t || t_next < 0)
    throw std::invalid_argument("ddim_step: need 0 <= t_next < t");
  Tensor eps = eps_from_x0(bt, x0_hat, t, s);
  const double abar_next = s.alpha_bar(t_next);
  double sigma = 0.0;
  if (eta > 0.0 && t_next > 0) {
    const double abar_t = s.alpha_bar(t);
    sigma = eta * std::sqrt((1.0 - abar_next) / (1.0 - abar_t)) *
            std::sqrt(1.0 - abar_t / abar_next);
  }
  const double a = std::sqrt(abar_next);
  const double dir = std::sqrt(std::max(0.0, 1.0 - abar_next - sigma * sigma));
  Tensor out = Tensor::zeros(bt.shape);
  for (int64_t i = 0; i < bt.numel(); ++i)
    out.v[i] = a * x0_hat.v[i] + dir * eps.v[i];
  if (sigma > 0.0)
    for (auto& x : out.v) x += sigma * rng.normal();
  return out;
}

Tensor apply_cfg(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  if (!eps_cond.same_shape(eps_uncond))
    throw std::invalid_argument("apply_cfg: shape mismatch");
  Tensor out = Tensor::zeros(eps_cond.shape);
  for (int64_t i = 0; i < eps_cond.numel(); ++i)
    out.v[i] = (1.0 + w) * eps_cond.v[i] - w * eps_uncond.v[i];
  return out;
}

Tensor sample(const DenoiserFn& model, const Condition& cond,
              const Tensor& b_ctrl, int batch_size, int gene_dim,
              const SamplerConfig& cfg, const NoiseSchedule& s) {
  Rng rng(cfg.seed);
  Tensor bt = Tensor::randn({batch_size, gene_dim}, rng);
  Tensor b_sc = Tensor::zeros({batch_size, gene_dim});
  const std::vector<int> ts = sampler_timesteps(cfg.num_steps, s);

  Condition uncond = cond;
  uncond.null_mask = true;

  Tensor x0;
  for (size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_next = k + 1 < ts.size() ? ts[k + 1] : 0;
    x0 = model(bt, b_sc, b_ctrl, t, cond);
    if (cfg.guidance != 0.0) {
      Tensor x0_u = model(bt, b_sc, b_ctrl, t, uncond);
      Tensor eps_c = eps_from_x0(bt, x0, t, s);
      Tensor eps_u = eps_from_x0(bt, x0_u, t, s);
      Tensor eps = apply_cfg(eps_c, eps_u, cfg.guidance);
      // back to x0-space for the DDIM update
      const double a = std::sqrt(s.alpha_bar(t));
      const double b = std::sqrt(1.0 - s.alpha_bar(t));
      Tensor x0_cfg = Tensor::zeros(bt.shape);
      for (int64_t i = 0; i < bt.numel(); ++i)
        x0_cfg.v[i] = (bt.v[i] - b * eps.v[i]) / a;
      x0 = std::move(x0_cfg);
    }
    if (cfg.self_cond) b_sc = x0;
    if (t_next == 0) {
      bt = x0;  // abar_0 = 1: terminal update returns the prediction
    } else {
      bt = ddim_step(bt, x0, t, t_next, cfg.eta, rng, s);
    }
  }
  // nonnegativity head contract on the emitted cells
  for (auto& x : bt.v) x = x > 0.0 ? x : 0.0;
  return bt;
}

}  // namespace celldiff
