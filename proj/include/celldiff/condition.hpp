#pragma once

namespace celldiff {

// Conditioning tuple for one generation: cellular context, perturbation,
// optional dose bin. When null_mask is set the metadata lookups resolve to
// the shared null token (the CFG unconditional branch); the control cell
// batch is never masked.
struct Condition {
  int context = 0;
  int perturbation = 0;
  int dose = 0;
  bool null_mask = false;
  // Marginal mode: perturbation and dose resolve to the null token while the
  // context stays live (the pretraining conditioning).
  bool marginal = false;
};

}  // namespace celldiff
