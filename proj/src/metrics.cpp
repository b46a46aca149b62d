#include "hpmi/metrics.hpp"

namespace hpmi {

Metrics compute_metrics(const TransformerCheckpoint& model, const PoisonedDataset& paired, int64_t target_class) {
  if (paired.data.empty()) throw ContractError("compute_metrics: empty evaluation set");
  if (paired.data.size() != paired.poisoned.size()) throw ContractError("compute_metrics: flag length mismatch");

  const std::vector<Tensor> logits = batch_forward_logits(model, paired.data.inputs);
  int64_t clean_total = 0, clean_correct = 0;
  int64_t asr_total = 0, asr_hits = 0;
  for (size_t i = 0; i < paired.data.size(); ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < logits[i].numel(); ++j) {
      if (logits[i].at(j) > logits[i].at(best)) best = j;
    }
    if (paired.poisoned[i]) {
      if (paired.data.labels[i] == target_class) continue;  // true-target samples never count
      ++asr_total;
      if (best == target_class) ++asr_hits;
    } else {
      ++clean_total;
      if (best == paired.data.labels[i]) ++clean_correct;
    }
  }

  Metrics m;
  m.clean_accuracy = clean_total > 0 ? static_cast<double>(clean_correct) / static_cast<double>(clean_total) : 0.0;
  m.attack_success_rate = asr_total > 0 ? static_cast<double>(asr_hits) / static_cast<double>(asr_total) : 0.0;
  return m;
}

}  // namespace hpmi
