#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "celldiff/condition.hpp"
#include "celldiff/rng.hpp"
#include "celldiff/tensor.hpp"

namespace celldiff {

// Discretized variance-preserving schedule: betas b_1..b_T in (0,1) and the
// running products abar_t = prod_{s<=t} (1 - b_s), with the terminal
// convention abar_0 = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;       // betas[t-1] = b_t
  std::vector<double> alpha_bars;  // alpha_bars[t-1] = abar_t

  double beta(int t) const { return betas[t - 1]; }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars[t - 1]; }
};

// Linear beta schedule, endpoints inclusive. Defaults are the canonical DDPM
// choice (1e-4, 0.02).
NoiseSchedule make_linear_schedule(int steps, double beta_start = 1e-4,
                                   double beta_end = 0.02);

struct SamplerConfig {
  int num_steps = 100;       // K; timesteps evenly spaced, including T
  double eta = 0.0;          // DDIM noise parameter; 0 = deterministic
  double guidance = 0.0;     // CFG weight w; 0 = no guidance
  bool self_cond = true;     // feed the previous x0 prediction back
  uint64_t seed = 0;
};

// Strictly decreasing timestep subsequence t_1 > ... > t_K, including T.
std::vector<int> sampler_timesteps(int num_steps, const NoiseSchedule& s);

// B_t = sqrt(abar_t) B_0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& b0, int t, const Tensor& eps,
                const NoiseSchedule& s);

// eps implied by an x0 prediction: (B_t - sqrt(abar_t) x0) / sqrt(1 - abar_t)
Tensor eps_from_x0(const Tensor& bt, const Tensor& x0_hat, int t,
                   const NoiseSchedule& s);

// Reverse-time conditional moments given (x0, B_t), defined for t >= 2.
struct Posterior {
  Tensor mean;
  double variance = 0.0;  // beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * b_t
};
Posterior posterior_mean(const Tensor& x0, const Tensor& bt, int t,
                         const NoiseSchedule& s);

// One DDIM update from t to t_next < t (t_next may be 0, abar_0 = 1). With
// eta = 0 no randomness is consumed.
Tensor ddim_step(const Tensor& bt, const Tensor& x0_hat, int t, int t_next,
                 double eta, Rng& rng, const NoiseSchedule& s);

// eps-space classifier-free guidance: (1 + w) eps_cond - w eps_uncond.
Tensor apply_cfg(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// x0-predictor interface: (B_t, B_sc, B_ctrl, t, cond) -> B_theta.
using DenoiserFn = std::function<Tensor(const Tensor& bt, const Tensor& b_sc,
                                        const Tensor& b_ctrl, int t,
                                        const Condition& cond)>;

// Full reverse loop: DDIM with optional CFG and self-conditioning. The
// unconditional CFG branch null-masks the metadata but keeps the control
// batch. Output is clamped nonnegative. Deterministic given the seed when
// eta = 0.
Tensor sample(const DenoiserFn& model, const Condition& cond,
              const Tensor& b_ctrl, int batch_size, int gene_dim,
              const SamplerConfig& cfg, const NoiseSchedule& s);

}  // namespace celldiff
