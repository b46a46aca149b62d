#pragma once

#include <cstdint>
#include <vector>

#include "hpmi/dataset.hpp"
#include "hpmi/tensor.hpp"

namespace hpmi {

enum class TriggerKind { kPatch, kBlend };

// Mask-and-pattern pair applied in patch space. Patch triggers use a 0/1 mask
// supported on the final patch; blend triggers use a constant-alpha mask.
struct Trigger {
  TriggerKind kind;
  Tensor mask;     // [num_patches x patch_dim], entries in [0,1]
  Tensor pattern;  // same shape

  void validate() const;
};

// x_tilde = (1 - m) * x + m * t, clamped to [0,1].
Tensor apply_trigger(const Tensor& x, const Trigger& trig);

// Mask 1 on the final patch only; pattern is seeded uniform noise there.
Trigger make_patch_trigger(int64_t num_patches, int64_t patch_dim, uint64_t seed);

// Constant mask alpha everywhere, supplied pattern. Requires 0 < alpha < 1.
Trigger make_blend_trigger(const Tensor& pattern, double alpha);

struct PoisonMode {
  enum Kind { kHalfBalanced, kTestPaired, kFraction } kind;
  double fraction = 0.0;
  int64_t relabel_to = -1;
  uint64_t seed = 0;

  // Exactly floor(n/2) randomly chosen samples triggered, labels kept.
  static PoisonMode half_balanced(uint64_t seed) { return {kHalfBalanced, 0.0, -1, seed}; }
  // Every clean sample followed by its triggered twin (length 2n).
  static PoisonMode test_paired() { return {kTestPaired, 0.0, -1, 0}; }
  // round(p * n) random samples triggered and relabeled to the target class.
  static PoisonMode relabel_fraction(double p, int64_t relabel_to, uint64_t seed) {
    return {kFraction, p, relabel_to, seed};
  }
};

struct PoisonedDataset {
  Dataset data;
  std::vector<uint8_t> poisoned;  // 1 where the trigger was applied
};

PoisonedDataset poison_dataset(const Dataset& data, const Trigger& trig, const PoisonMode& mode);

// Blend-pattern file: little-endian u32 rows, u32 cols, then raw f64 values.
void write_pattern_file(const Tensor& pattern, const std::string& path);
Tensor read_pattern_file(const std::string& path);

}  // namespace hpmi
