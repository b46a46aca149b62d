#include "hpmi/trigger.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "hpmi/rng.hpp"

namespace hpmi {

void Trigger::validate() const {
  require_same_shape(mask, pattern, "trigger");
  for (int64_t i = 0; i < mask.numel(); ++i) {
    if (mask.at(i) < 0.0 || mask.at(i) > 1.0) throw ContractError("trigger: mask entry outside [0,1]");
  }
}

Tensor apply_trigger(const Tensor& x, const Trigger& trig) {
  require_same_shape(x, trig.mask, "apply_trigger");
  Tensor out = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double m = trig.mask.at(i);
    out.at(i) = std::clamp((1.0 - m) * x.at(i) + m * trig.pattern.at(i), 0.0, 1.0);
  }
  return out;
}

Trigger make_patch_trigger(int64_t num_patches, int64_t patch_dim, uint64_t seed) {
  Trigger trig;
  trig.kind = TriggerKind::kPatch;
  trig.mask = Tensor::zeros({num_patches, patch_dim});
  trig.pattern = Tensor::zeros({num_patches, patch_dim});
  Rng rng(derive_seed(seed, 500));
  for (int64_t j = 0; j < patch_dim; ++j) {
    trig.mask.at(num_patches - 1, j) = 1.0;
    trig.pattern.at(num_patches - 1, j) = rng.uniform();
  }
  return trig;
}

Trigger make_blend_trigger(const Tensor& pattern, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("make_blend_trigger: alpha must lie in (0,1)");
  Trigger trig;
  trig.kind = TriggerKind::kBlend;
  trig.mask = Tensor::full(pattern.shape(), alpha);
  trig.pattern = pattern;
  return trig;
}

PoisonedDataset poison_dataset(const Dataset& data, const Trigger& trig, const PoisonMode& mode) {
  if (data.empty()) throw ContractError("poison_dataset: empty dataset");
  trig.validate();

  PoisonedDataset out;
  switch (mode.kind) {
    case PoisonMode::kHalfBalanced: {
      std::vector<size_t> idx(data.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      Rng rng(derive_seed(mode.seed, 600));
      rng.shuffle(idx);
      std::vector<uint8_t> flag(data.size(), 0);
      for (size_t i = 0; i < data.size() / 2; ++i) flag[idx[i]] = 1;
      for (size_t i = 0; i < data.size(); ++i) {
        out.data.inputs.push_back(flag[i] ? apply_trigger(data.inputs[i], trig) : data.inputs[i]);
        out.data.labels.push_back(data.labels[i]);
        out.poisoned.push_back(flag[i]);
      }
      break;
    }
    case PoisonMode::kTestPaired: {
      for (size_t i = 0; i < data.size(); ++i) {
        out.data.inputs.push_back(data.inputs[i]);
        out.data.labels.push_back(data.labels[i]);
        out.poisoned.push_back(0);
        out.data.inputs.push_back(apply_trigger(data.inputs[i], trig));
        out.data.labels.push_back(data.labels[i]);
        out.poisoned.push_back(1);
      }
      break;
    }
    case PoisonMode::kFraction: {
      if (mode.fraction < 0.0 || mode.fraction > 1.0) throw ContractError("poison_dataset: fraction out of [0,1]");
      if (mode.relabel_to < 0) throw ContractError("poison_dataset: fraction mode needs a target class");
      std::vector<size_t> idx(data.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      Rng rng(derive_seed(mode.seed, 700));
      rng.shuffle(idx);
      const auto count = static_cast<size_t>(std::llround(mode.fraction * static_cast<double>(data.size())));
      std::vector<uint8_t> flag(data.size(), 0);
      for (size_t i = 0; i < count && i < data.size(); ++i) flag[idx[i]] = 1;
      for (size_t i = 0; i < data.size(); ++i) {
        out.data.inputs.push_back(flag[i] ? apply_trigger(data.inputs[i], trig) : data.inputs[i]);
        out.data.labels.push_back(flag[i] ? mode.relabel_to : data.labels[i]);
        out.poisoned.push_back(flag[i]);
      }
      break;
    }
  }
  return out;
}

void write_pattern_file(const Tensor& pattern, const std::string& path) {
  if (pattern.rank() != 2) throw ShapeError("pattern file: expected 2-d tensor, got " + pattern.shape_string());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  auto put_u32 = [&](uint32_t v) {
    for (int i = 0; i < 4; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u32(static_cast<uint32_t>(pattern.rows()));
  put_u32(static_cast<uint32_t>(pattern.cols()));
  for (int64_t i = 0; i < pattern.numel(); ++i) {
    const uint64_t bits = std::bit_cast<uint64_t>(pattern.at(i));
    for (int b = 0; b < 8; ++b) f.put(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

Tensor read_pattern_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("pattern file " + path + ": cannot open");
  auto get_u32 = [&](const char* what) {
    uint8_t buf[4];
    f.read(reinterpret_cast<char*>(buf), 4);
    if (f.gcount() != 4) throw ParseError("pattern file " + path + ": truncated reading " + what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[i]) << (8 * i);
    return v;
  };
  const int64_t rows = get_u32("rows");
  const int64_t cols = get_u32("cols");
  if (rows < 1 || cols < 1) throw ParseError("pattern file " + path + ": non-positive dimensions");
  Tensor out({rows, cols});
  for (int64_t i = 0; i < out.numel(); ++i) {
    uint8_t buf[8];
    f.read(reinterpret_cast<char*>(buf), 8);
    if (f.gcount() != 8) {
      throw ParseError("pattern file " + path + ": truncated at value " + std::to_string(i));
    }
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<uint64_t>(buf[b]) << (8 * b);
    out.at(i) = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace hpmi
