#pragma once

#include <cstdint>
#include <vector>

#include "hpmi/dataset.hpp"
#include "hpmi/model.hpp"
#include "hpmi/trigger.hpp"

namespace hpmi {

// ---- STRIP ----

struct StripConfig {
  int64_t n_overlays = 100;
  double frr = 0.01;  // calibrated false-rejection rate on clean samples
};

struct StripResult {
  std::vector<double> entropies;  // aligned with the scanned samples
  double threshold = 0.0;         // lower empirical FRR-quantile of clean entropies
  double far = 0.0;               // poisoned samples accepted as clean
  double observed_frr = 0.0;      // clean samples strictly below the threshold
  int64_t n_clean = 0;
  int64_t n_poisoned = 0;
};

// Mean prediction entropy under clean-image superimposition; samples with
// entropy below the clean FRR-quantile are rejected as trojaned.
StripResult strip_scan(const TransformerCheckpoint& model, const PoisonedDataset& samples, const Dataset& clean_pool,
                       const StripConfig& cfg, uint64_t seed);

// ---- Fine pruning ----

struct FinePrunePoint {
  int64_t pruned_count = 0;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
};

// Ranks ffn hidden units (all layers pooled) by mean |activation| on clean
// data ascending, zeroes them in batches, and records CA/ASR after each step.
// step_size <= 0 selects max(1, total/64).
std::vector<FinePrunePoint> fine_prune(const TransformerCheckpoint& model, const Dataset& clean_set,
                                       const PoisonedDataset& paired_eval, int64_t target_class, int64_t step_size,
                                       double max_fraction);

// ---- Neural Cleanse ----

struct NeuralCleanseConfig {
  int64_t steps = 300;
  double lr = 0.1;
  double sparsity_weight = 0.01;  // L1 penalty on the mask
  double anomaly_threshold = 2.0;
  int64_t batch = 16;
};

struct NeuralCleanseClassResult {
  double mask_norm = 0.0;  // L1 of the reversed mask
  double final_loss = 0.0;
  bool diverged = false;
  Tensor mask;
  Tensor pattern;
};

struct NeuralCleanseResult {
  std::vector<NeuralCleanseClassResult> per_class;
  std::vector<double> anomaly;  // NaN where diverged
  double anomaly_threshold = 2.0;
};

// Reverse-engineers a (mask, pattern) per class by gradient descent on the
// inputs (mask via sigmoid reparameterization, pattern clamped to [0,1]);
// flags outliers of the mask-norm distribution by MAD score.
NeuralCleanseResult neural_cleanse(const TransformerCheckpoint& model, const Dataset& clean_data,
                                   const NeuralCleanseConfig& cfg, uint64_t seed);

// |v - median| / (1.4826 * MAD) per value. Requires >= 3 values and a
// non-degenerate distribution (MAD > 0).
std::vector<double> anomaly_index(const std::vector<double>& values);

}  // namespace hpmi
