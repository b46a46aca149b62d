#include "hpmi/defense.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hpmi/adam.hpp"
#include "hpmi/graph.hpp"
#include "hpmi/metrics.hpp"
#include "hpmi/rng.hpp"
#include "hpmi/stats.hpp"

namespace hpmi {

StripResult strip_scan(const TransformerCheckpoint& model, const PoisonedDataset& samples, const Dataset& clean_pool,
                       const StripConfig& cfg, uint64_t seed) {
  if (clean_pool.empty()) throw ContractError("strip_scan: empty clean pool");
  if (samples.data.empty()) throw ContractError("strip_scan: nothing to scan");
  if (cfg.n_overlays < 1) throw ContractError("strip_scan: n_overlays must be >= 1");
  if (!(cfg.frr > 0.0 && cfg.frr < 1.0)) throw ContractError("strip_scan: FRR must lie in (0,1)");

  Rng rng(derive_seed(seed, 800));
  StripResult result;
  result.entropies.reserve(samples.data.size());

  for (size_t i = 0; i < samples.data.size(); ++i) {
    const Tensor& x = samples.data.inputs[i];
    // One graph per scanned sample: the weights are bound once and shared by
    // all of its overlay forwards.
    Graph g;
    const CheckpointNodes w = bind_checkpoint(g, model, false);
    double mean_entropy = 0.0;
    for (int64_t o = 0; o < cfg.n_overlays; ++o) {
      const Tensor& overlay = clean_pool.inputs[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(clean_pool.size())))];
      Tensor blended = x;
      for (int64_t j = 0; j < blended.numel(); ++j) blended.at(j) = 0.5 * (blended.at(j) + overlay.at(j));
      const ForwardNodes f = build_forward(g, w, model.config, model.segmented_head, g.input(blended));
      const Tensor& logits = g.value(f.logits);
      double mx = logits.at(0);
      for (int64_t j = 1; j < logits.numel(); ++j) mx = std::max(mx, logits.at(j));
      std::vector<double> probs(static_cast<size_t>(logits.numel()));
      double denom = 0.0;
      for (int64_t j = 0; j < logits.numel(); ++j) {
        probs[static_cast<size_t>(j)] = std::exp(logits.at(j) - mx);
        denom += probs[static_cast<size_t>(j)];
      }
      for (double& p : probs) p /= denom;
      mean_entropy += shannon_entropy(probs);
    }
    result.entropies.push_back(mean_entropy / static_cast<double>(cfg.n_overlays));
  }

  std::vector<double> clean_entropies;
  for (size_t i = 0; i < samples.data.size(); ++i) {
    if (!samples.poisoned[i]) clean_entropies.push_back(result.entropies[i]);
  }
  if (clean_entropies.empty()) throw ContractError("strip_scan: no clean samples to calibrate on");
  std::sort(clean_entropies.begin(), clean_entropies.end());
  // Lower empirical quantile: the rank-ceil(frr*n) order statistic, so at
  // most ceil(frr*n)-1 clean samples fall strictly below it.
  const auto rank = static_cast<size_t>(
      std::max<int64_t>(1, static_cast<int64_t>(std::ceil(cfg.frr * static_cast<double>(clean_entropies.size())))));
  result.threshold = clean_entropies[rank - 1];

  result.n_clean = static_cast<int64_t>(clean_entropies.size());
  int64_t rejected_clean = 0, accepted_poisoned = 0;
  for (size_t i = 0; i < samples.data.size(); ++i) {
    if (samples.poisoned[i]) {
      ++result.n_poisoned;
      if (result.entropies[i] >= result.threshold) ++accepted_poisoned;
    } else if (result.entropies[i] < result.threshold) {
      ++rejected_clean;
    }
  }
  result.observed_frr = static_cast<double>(rejected_clean) / static_cast<double>(result.n_clean);
  result.far = result.n_poisoned > 0 ? static_cast<double>(accepted_poisoned) / static_cast<double>(result.n_poisoned)
                                     : 0.0;
  return result;
}

std::vector<FinePrunePoint> fine_prune(const TransformerCheckpoint& model, const Dataset& clean_set,
                                       const PoisonedDataset& paired_eval, int64_t target_class, int64_t step_size,
                                       double max_fraction) {
  if (clean_set.empty()) throw ContractError("fine_prune: empty clean set");
  if (!(max_fraction > 0.0 && max_fraction <= 1.0)) throw ContractError("fine_prune: max_fraction out of (0,1]");
  const ModelConfig& c = model.config;
  const int64_t total = c.layers * c.ffn_width;
  if (step_size <= 0) step_size = std::max<int64_t>(1, total / 64);

  // Mean |activation| per hidden unit over the clean set, all layers pooled.
  std::vector<double> importance(static_cast<size_t>(total), 0.0);
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < clean_set.size(); start += kChunk) {
    Graph g;
    const CheckpointNodes w = bind_checkpoint(g, model, false);
    const size_t end = std::min(clean_set.size(), start + kChunk);
    for (size_t i = start; i < end; ++i) {
      const ForwardNodes f = build_forward(g, w, c, model.segmented_head, g.input(clean_set.inputs[i]));
      for (int64_t l = 0; l < c.layers; ++l) {
        const Tensor& hidden = g.value(f.ffn_hidden[static_cast<size_t>(l)]);
        for (int64_t u = 0; u < c.ffn_width; ++u) {
          double acc = 0.0;
          for (int64_t t = 0; t < hidden.rows(); ++t) acc += std::abs(hidden.at(t, u));
          importance[static_cast<size_t>(l * c.ffn_width + u)] += acc;
        }
      }
    }
  }
  const double norm = static_cast<double>(clean_set.size()) * static_cast<double>(c.tokens);
  for (double& v : importance) v /= norm;

  std::vector<int64_t> order(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return importance[static_cast<size_t>(a)] < importance[static_cast<size_t>(b)]; });

  const int64_t limit = static_cast<int64_t>(std::floor(max_fraction * static_cast<double>(total)));

  std::vector<FinePrunePoint> curve;
  TransformerCheckpoint work = model;
  auto record = [&](int64_t pruned) {
    const Metrics m = compute_metrics(work, paired_eval, target_class);
    curve.push_back({pruned, m.clean_accuracy, m.attack_success_rate});
  };

  record(0);
  int64_t pruned = 0;
  while (pruned < limit) {
    const int64_t batch = std::min(step_size, limit - pruned);
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t unit = order[static_cast<size_t>(pruned + b)];
      const int64_t layer = unit / c.ffn_width;
      const int64_t u = unit % c.ffn_width;
      LayerWeights& l = work.layers[static_cast<size_t>(layer)];
      for (int64_t r = 0; r < c.model_width(); ++r) l.w1.at(r, u) = 0.0;
      l.b1.at(u) = 0.0;
      for (int64_t cc = 0; cc < c.model_width(); ++cc) l.w2.at(u, cc) = 0.0;
    }
    pruned += batch;
    record(pruned);
  }
  return curve;
}

NeuralCleanseResult neural_cleanse(const TransformerCheckpoint& model, const Dataset& clean_data,
                                   const NeuralCleanseConfig& cfg, uint64_t seed) {
  if (clean_data.empty()) throw ContractError("neural_cleanse: empty clean set");
  if (cfg.steps < 1 || cfg.batch < 1) throw ContractError("neural_cleanse: steps and batch must be >= 1");
  const ModelConfig& c = model.config;

  NeuralCleanseResult result;
  result.anomaly_threshold = cfg.anomaly_threshold;

  for (int64_t target = 0; target < c.classes; ++target) {
    Rng rng(derive_seed(seed, 900 + static_cast<uint64_t>(target)));
    // Fixed optimization batch per class.
    std::vector<size_t> idx(clean_data.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    const size_t batch = std::min(static_cast<size_t>(cfg.batch), clean_data.size());

    Tensor mask_logits = Tensor::zeros({c.num_patches(), c.patch_dim});
    Tensor pattern({c.num_patches(), c.patch_dim});
    for (int64_t i = 0; i < pattern.numel(); ++i) pattern.at(i) = rng.uniform();

    std::vector<Tensor*> params = {&mask_logits, &pattern};
    std::vector<const Tensor*> shapes(params.begin(), params.end());
    OptimizerState opt(shapes, cfg.lr);

    NeuralCleanseClassResult cls;
    for (int64_t step = 0; step < cfg.steps; ++step) {
      Graph g;
      const NodeId theta = g.parameter(mask_logits);
      const NodeId pat = g.parameter(pattern);
      const NodeId mask = g.sigmoid(theta);
      const NodeId inv_mask = g.add_scalar(g.scale(mask, -1.0), 1.0);
      const CheckpointNodes w = bind_checkpoint(g, model, false);
      std::vector<NodeId> losses;
      for (size_t b = 0; b < batch; ++b) {
        const NodeId x = g.input(clean_data.inputs[idx[b]]);
        const NodeId blended = g.add(g.mul(inv_mask, x), g.mul(mask, pat));
        const ForwardNodes f = build_forward(g, w, c, model.segmented_head, blended);
        losses.push_back(g.cross_entropy_logits(f.logits, target));
      }
      const NodeId ce = g.scale(g.add_n(losses), 1.0 / static_cast<double>(batch));
      const NodeId loss = g.add(ce, g.scale(g.sum(mask), cfg.sparsity_weight));
      cls.final_loss = g.value(loss).item();
      if (!std::isfinite(cls.final_loss)) {
        cls.diverged = true;
        break;
      }
      auto grads = g.backward(loss);
      const std::vector<Tensor> grad_list = {grads.at(theta), grads.at(pat)};
      adam_step(opt, params, grad_list);
      for (int64_t i = 0; i < pattern.numel(); ++i) pattern.at(i) = std::clamp(pattern.at(i), 0.0, 1.0);
    }

    cls.mask = mask_logits;
    for (int64_t i = 0; i < cls.mask.numel(); ++i) cls.mask.at(i) = 1.0 / (1.0 + std::exp(-mask_logits.at(i)));
    cls.pattern = pattern;
    cls.mask_norm = 0.0;
    for (int64_t i = 0; i < cls.mask.numel(); ++i) cls.mask_norm += cls.mask.at(i);
    result.per_class.push_back(std::move(cls));
  }

  std::vector<double> norms;
  for (const auto& cls : result.per_class) {
    if (!cls.diverged) norms.push_back(cls.mask_norm);
  }
  result.anomaly.assign(result.per_class.size(), std::numeric_limits<double>::quiet_NaN());
  if (norms.size() >= 3) {
    const std::vector<double> idx_all = anomaly_index(norms);
    size_t j = 0;
    for (size_t i = 0; i < result.per_class.size(); ++i) {
      if (!result.per_class[i].diverged) result.anomaly[i] = idx_all[j++];
    }
  }
  return result;
}

std::vector<double> anomaly_index(const std::vector<double>& values) {
  if (values.size() < 3) throw ContractError("anomaly_index: need at least 3 values");
  const double med = median(values);
  std::vector<double> deviations;
  deviations.reserve(values.size());
  for (double v : values) deviations.push_back(std::abs(v - med));
  const double mad = median(deviations);
  if (mad == 0.0) throw ContractError("anomaly_index: degenerate distribution (MAD is zero)");
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(std::abs(v - med) / (1.4826 * mad));
  return out;
}

}  // namespace hpmi
