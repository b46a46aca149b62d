#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "hpmi/dataset.hpp"
#include "hpmi/model.hpp"
#include "hpmi/tensor.hpp"

namespace hpmi {

// Which head is replaced, where its channel lives, and how the channel routes
// into the logits.
struct SurgeryPlan {
  int64_t head_index = 0;
  int64_t target_class = 0;
  double offset = 1.0;  // the logit increment the malicious head is trained to emit
  int64_t attn_lo = 0, attn_hi = 0;  // [i*d_h, (i+1)*d_h)
  int64_t ffn_lo = 0, ffn_hi = 0;    // [i*ffn/h, (i+1)*ffn/h)
};

SurgeryPlan make_surgery_plan(const ModelConfig& config, int64_t head_index, int64_t target_class, double offset);

struct PruneScanReport {
  double baseline_accuracy = 0.0;
  std::vector<double> per_head_accuracy;
  std::vector<double> per_head_cad;  // accuracy_after - baseline (negative = degradation)
  int64_t selected_head = 0;
};

// Standard layer norm applied independently within three contiguous segments
// that must partition [0, d). Outer segments may be empty.
Tensor segmented_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                            std::pair<int64_t, int64_t> seg1, std::pair<int64_t, int64_t> seg2,
                            std::pair<int64_t, int64_t> seg3);

// Zeroes head i's channel and every weight coupling the channel slice with
// its complement (both directions: attention projections, W0, W1, W2,
// norm gains, embedding/positional columns, classifier rows), then switches
// the checkpoint to segmented layer norm. The slice carries exactly zero
// through all layers afterwards.
TransformerCheckpoint prune_head(const TransformerCheckpoint& ckpt, int64_t head_index);

// Accuracy after pruning each head in turn; selects the argmax (ties to the
// smallest index). Rejects single-head models.
PruneScanReport scan_prune_targets(const TransformerCheckpoint& ckpt, const Dataset& validation);

// Writes a single-head model of width d_h into the pruned channel. With
// signed_routing the channel also subtracts its scalar from every non-target
// logit instead of leaving them untouched.
TransformerCheckpoint inject_head(const TransformerCheckpoint& pruned, const TransformerCheckpoint& malicious,
                                  const SurgeryPlan& plan, bool signed_routing = false);

// Inverse of inject_head: extracts the channel blocks of head i into a
// standalone single-head checkpoint. The scalar readout is left zero.
TransformerCheckpoint extract_head(const TransformerCheckpoint& ckpt, int64_t head_index);

struct TheoremReport {
  double max_off_channel_dev = 0.0;
  double max_on_channel_dev = 0.0;
  int64_t n_inputs = 0;
  double tolerance = 1e-9;
  bool pass = false;
};

// Checks logits_backdoored(x) - logits_pruned(x) == s(x) * e_target for every
// input, where s is the malicious model's scalar output.
TheoremReport verify_theorem1(const TransformerCheckpoint& pruned, const TransformerCheckpoint& backdoored,
                              const TransformerCheckpoint& malicious, int64_t target_class,
                              const std::vector<Tensor>& inputs, double tolerance = 1e-9);

struct IsolationReport {
  double max_abs_coupling = 0.0;
  bool pass = false;
};

// Exhaustive scan of every weight entry that couples the channel slice with
// its complement in any layer. Exact: pass requires all-zero couplings.
IsolationReport check_static_isolation(const TransformerCheckpoint& ckpt, int64_t head_index);

// Max deviation between the backdoored model's channel slice of z_l and the
// standalone malicious model's z_l, over all layers, for one input.
double channel_activation_deviation(const TransformerCheckpoint& backdoored, const TransformerCheckpoint& malicious,
                                    int64_t head_index, const Tensor& patches);

}  // namespace hpmi
