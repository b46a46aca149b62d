#include "hpmi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hpmi/rng.hpp"

namespace hpmi {

void Dataset::validate(int64_t classes) const {
  if (inputs.size() != labels.size()) {
    throw ContractError("dataset: " + std::to_string(inputs.size()) + " inputs vs " + std::to_string(labels.size()) +
                        " labels");
  }
  for (int64_t l : labels) {
    if (l < 0 || l >= classes) throw ContractError("dataset: label " + std::to_string(l) + " out of range");
  }
}

SplitDataset generate_synthetic_dataset(int64_t num_patches, int64_t patch_dim, const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ContractError("synthetic dataset: need at least 2 classes");
  if (spec.samples_per_class < 20) throw ContractError("synthetic dataset: need at least 20 samples per class");
  if (spec.noise < 0.0) throw ContractError("synthetic dataset: negative noise level");

  SplitDataset out;
  const int64_t n = spec.samples_per_class;
  const int64_t n_train = (n * 70) / 100;
  const int64_t n_val = (n * 15) / 100;

  for (int64_t c = 0; c < spec.classes; ++c) {
    Rng template_rng(derive_seed(spec.seed, 1000 + static_cast<uint64_t>(c)));
    Tensor tmpl({num_patches, patch_dim});
    for (int64_t i = 0; i < tmpl.numel(); ++i) tmpl.at(i) = template_rng.uniform_in(0.1, 0.9);

    Rng sample_rng(derive_seed(spec.seed, 2000 + static_cast<uint64_t>(c)));
    for (int64_t s = 0; s < n; ++s) {
      Tensor x = tmpl;
      if (spec.noise > 0.0) {
        for (int64_t i = 0; i < x.numel(); ++i) {
          x.at(i) = std::clamp(x.at(i) + spec.noise * sample_rng.normal(), 0.0, 1.0);
        }
      }
      Dataset& split = s < n_train ? out.train : (s < n_train + n_val ? out.val : out.test);
      split.inputs.push_back(std::move(x));
      split.labels.push_back(c);
    }
  }
  return out;
}

SplitDataset stratified_split(const Dataset& data, double train_frac, double val_frac, uint64_t seed) {
  if (data.empty()) throw ContractError("stratified_split: empty dataset");
  if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac >= 1.0) {
    throw ContractError("stratified_split: fractions must satisfy 0 < train, 0 <= val, train+val < 1");
  }
  int64_t classes = 0;
  for (int64_t l : data.labels) classes = std::max(classes, l + 1);

  SplitDataset out;
  for (int64_t c = 0; c < classes; ++c) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < data.size(); ++i) {
      if (data.labels[i] == c) idx.push_back(i);
    }
    Rng rng(derive_seed(seed, 3000 + static_cast<uint64_t>(c)));
    rng.shuffle(idx);
    const int64_t n = static_cast<int64_t>(idx.size());
    const int64_t n_train = static_cast<int64_t>(std::floor(train_frac * static_cast<double>(n)));
    const int64_t n_val = static_cast<int64_t>(std::floor(val_frac * static_cast<double>(n)));
    for (int64_t s = 0; s < n; ++s) {
      Dataset& split = s < n_train ? out.train : (s < n_train + n_val ? out.val : out.test);
      split.inputs.push_back(data.inputs[idx[static_cast<size_t>(s)]]);
      split.labels.push_back(c);
    }
  }
  return out;
}

Dataset load_cifar10(const std::string& path, int64_t crop, int64_t grid, int64_t max_records) {
  constexpr int64_t kImage = 32;
  constexpr int64_t kRecord = 3073;
  if (crop < grid || crop > kImage || crop % grid != 0) {
    throw ContractError("cifar10: crop " + std::to_string(crop) + " not a multiple of grid " + std::to_string(grid));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cifar10: cannot open " + path);

  const int64_t patch_side = crop / grid;
  const int64_t patch_dim = patch_side * patch_side;
  const int64_t margin = (kImage - crop) / 2;

  Dataset out;
  std::vector<unsigned char> record(kRecord);
  int64_t offset = 0;
  while (max_records < 0 || static_cast<int64_t>(out.size()) < max_records) {
    in.read(reinterpret_cast<char*>(record.data()), kRecord);
    const auto got = in.gcount();
    if (got == 0) break;
    if (got != kRecord) {
      throw ParseError("cifar10: truncated record at byte offset " + std::to_string(offset) + " in " + path);
    }
    const int64_t label = record[0];
    if (label > 9) throw ParseError("cifar10: invalid label byte at offset " + std::to_string(offset));

    Tensor x({grid * grid, patch_dim});
    for (int64_t r = 0; r < crop; ++r) {
      for (int64_t c = 0; c < crop; ++c) {
        const int64_t ir = r + margin, ic = c + margin;
        double gray = 0.0;
        for (int64_t ch = 0; ch < 3; ++ch) {
          gray += static_cast<double>(record[static_cast<size_t>(1 + ch * kImage * kImage + ir * kImage + ic)]);
        }
        gray /= 3.0 * 255.0;
        const int64_t patch = (r / patch_side) * grid + (c / patch_side);
        const int64_t within = (r % patch_side) * patch_side + (c % patch_side);
        x.at(patch, within) = gray;
      }
    }
    out.inputs.push_back(std::move(x));
    out.labels.push_back(label);
    offset += kRecord;
  }
  if (out.empty()) throw ParseError("cifar10: no records in " + path);
  return out;
}

Dataset select_fraction(const Dataset& data, double fraction, uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw ContractError("select_fraction: fraction out of [0,1]");
  std::vector<size_t> idx(data.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 4000));
  rng.shuffle(idx);
  const auto count = static_cast<size_t>(std::llround(fraction * static_cast<double>(data.size())));
  Dataset out;
  for (size_t i = 0; i < count; ++i) {
    out.inputs.push_back(data.inputs[idx[i]]);
    out.labels.push_back(data.labels[idx[i]]);
  }
  return out;
}

}  // namespace hpmi
