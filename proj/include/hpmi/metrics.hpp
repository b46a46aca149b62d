#pragma once

#include <cstdint>

#include "hpmi/model.hpp"
#include "hpmi/trigger.hpp"

namespace hpmi {

struct Metrics {
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
};

// CA over the clean members of a paired set; ASR over triggered members whose
// true label differs from the target class.
Metrics compute_metrics(const TransformerCheckpoint& model, const PoisonedDataset& paired, int64_t target_class);

}  // namespace hpmi
