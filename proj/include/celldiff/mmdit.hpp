#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "celldiff/autodiff.hpp"
#include "celldiff/condition.hpp"
#include "celldiff/diffusion.hpp"
#include "celldiff/tensor.hpp"

namespace celldiff {

struct ModelConfig {
  int gene_dim = 64;       // G
  int width = 64;          // d
  int blocks = 2;          // L
  int heads = 4;           // H
  bool self_cond = true;   // perturbed stream takes 2G channels when set
  int n_contexts = 1;
  int n_perturbations = 1;
  int n_doses = 1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Ordered named parameter collection. The order of add() calls fixes the
// flat checkpoint layout.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor init);
  size_t count() const { return items_.size(); }
  const std::string& name(size_t i) const { return items_[i].first; }
  Tensor& tensor(size_t i) { return items_[i].second; }
  const Tensor& tensor(size_t i) const { return items_[i].second; }
  Tensor& by_name(const std::string& name);
  const Tensor& by_name(const std::string& name) const;
  int64_t total_elements() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// MM-DiT x0-predictor over two cell-token streams. The perturbed and control
// streams are modulated per-stream (AdaLN-Zero), concatenated along the
// feature axis into m tokens of width 2d, mixed by one shared multi-head
// self-attention, split back, and updated through zero-initialized residual
// gates. Only the perturbed stream feeds the output head.
class MmDit {
 public:
  MmDit(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParamStore& ema() { return ema_; }
  const ParamStore& ema() const { return ema_; }

  // Register every parameter as a tape input (store order) and return ids.
  std::vector<ad::Tape::Id> register_params(ad::Tape& tape,
                                            const ParamStore& p) const;

  // Build the forward graph; bt / b_sc / b_ctrl are existing tape nodes
  // holding m x G (or m x 2G-compatible) batches. Returns the x0 node.
  ad::Tape::Id forward(ad::Tape& tape, const std::vector<ad::Tape::Id>& pids,
                       ad::Tape::Id bt, ad::Tape::Id b_sc,
                       ad::Tape::Id b_ctrl, int t, const Condition& cond) const;

  // Same graph without the final relu clamp. The training loss reads this
  // node: the clamp's subgradient is 0 at 0, which would block all gradient
  // through the zero-initialized head forever.
  ad::Tape::Id forward_raw(ad::Tape& tape,
                           const std::vector<ad::Tape::Id>& pids,
                           ad::Tape::Id bt, ad::Tape::Id b_sc,
                           ad::Tape::Id b_ctrl, int t,
                           const Condition& cond) const;

  // Inference: B_theta = f(B_t, B_sc, B_ctrl, t; cond), entrywise >= 0.
  Tensor denoise(const ParamStore& p, const Tensor& bt, const Tensor& b_sc,
                 const Tensor& b_ctrl, int t, const Condition& cond) const;

  // Adapter for the sampling loop. Uses the EMA shadow when use_ema is set.
  DenoiserFn denoiser_fn(bool use_ema = true) const;

  // Pre-MLP sinusoidal code: [sin(t f_0).., cos(t f_0)..], f_i geometric.
  static Tensor sinusoidal_code(double t, int dim);

  void save_checkpoint(const std::string& path) const;
  static MmDit load_checkpoint(const std::string& path);

  // Reinitialize the gene-facing input/output projections (finetune transfer
  // strategy that discards pretrained gene layers).
  void reinit_io_layers(uint64_t seed);

 private:
  struct Ctx;  // forward-pass helper
  void build_params(uint64_t seed);
  int resolve_index(int id, int vocab, bool null_mask, const char* what) const;

  ModelConfig cfg_;
  ParamStore params_;
  ParamStore ema_;
};

}  // namespace celldiff
