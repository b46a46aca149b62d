#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hpmi/tensor.hpp"

namespace hpmi {

// Patch-flattened classification data: every input is a
// [num_patches x patch_dim] tensor with pixel values in [0, 1].
struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<int64_t> labels;

  size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  void validate(int64_t classes) const;
};

struct SplitDataset {
  Dataset train;
  Dataset val;
  Dataset test;
};

struct SyntheticSpec {
  int64_t classes = 4;
  int64_t samples_per_class = 120;
  double noise = 0.08;
  uint64_t seed = 0;
};

// Per-class seeded template plus additive Gaussian noise, clamped to [0, 1].
// Stratified 70/15/15 split; bitwise deterministic for a given spec.
SplitDataset generate_synthetic_dataset(int64_t num_patches, int64_t patch_dim, const SyntheticSpec& spec);

// Stratified split of an arbitrary dataset (seeded shuffle within class).
SplitDataset stratified_split(const Dataset& data, double train_frac, double val_frac, uint64_t seed);

// CIFAR-10 binary reader: 3073-byte records, 1 label byte followed by 3072
// pixel bytes in row-major RGB planes. Center-crops to crop x crop, averages
// RGB to grayscale in [0,1], and patchifies into a grid x grid layout
// (patch_dim = (crop/grid)^2). max_records < 0 reads the whole file.
Dataset load_cifar10(const std::string& path, int64_t crop, int64_t grid, int64_t max_records = -1);

// Deterministic subset of the first ceil(fraction * n) indices of a seeded
// shuffle; used to draw the attacker's rho-fraction of training data.
Dataset select_fraction(const Dataset& data, double fraction, uint64_t seed);

}  // namespace hpmi
