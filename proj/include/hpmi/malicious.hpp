#pragma once

#include <cstdint>
#include <vector>

#include "hpmi/dataset.hpp"
#include "hpmi/model.hpp"
#include "hpmi/trigger.hpp"

namespace hpmi {

struct MaliciousTrainConfig {
  double offset_a = 4.0;        // separation target for triggered inputs
  double lr = 1e-4;
  int64_t epochs = 100;
  double early_stop_loss = 0.1;  // validation loss threshold
  double rho = 0.2;              // fraction of training data the attacker drew
  double lambda = 1.0;           // weight on both loss terms
  int64_t batch_size = 16;

  void validate() const;
};

struct MaliciousTrainResult {
  TransformerCheckpoint checkpoint;
  std::vector<double> val_loss_history;  // one entry per completed epoch
  bool converged = false;                // early-stop threshold reached
  int64_t epochs_run = 0;
};

// Scalar the channel emits: the fixed ones-direction readout of the class
// token (the malicious classifier column is all ones and is never trained).
double malicious_scalar(const TransformerCheckpoint& malicious, const Tensor& patches);

// Minimizes mean lambda*(s(x) - 0)^2 + lambda*(s(x_tilde) - a)^2 over a
// half-balanced poisoning of `train_subset`; early-stops on the half-balanced
// validation loss. Returns the best-validation checkpoint with a warning flag
// when the threshold was never reached.
MaliciousTrainResult train_malicious_head(const ModelConfig& malicious_cfg, const Dataset& train_subset,
                                          const Dataset& validation, const Trigger& trig,
                                          const MaliciousTrainConfig& cfg, uint64_t seed);

// Per-sample max-logit minus target-class logit on clean data.
std::vector<double> clean_margins(const TransformerCheckpoint& model, const Dataset& data, int64_t target_class);

// a = ceil(mu + sigma * z(tau) + k) under a Gaussian fit of the margins.
double select_offset(const std::vector<double>& margins, double tau, double k);

}  // namespace hpmi
