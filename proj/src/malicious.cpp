#include "hpmi/malicious.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hpmi/adam.hpp"
#include "hpmi/rng.hpp"
#include "hpmi/stats.hpp"

namespace hpmi {

void MaliciousTrainConfig::validate() const {
  if (!(offset_a > 0.0)) throw ContractError("malicious training: offset a must be positive");
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractError("malicious training: rho must lie in (0,1]");
  if (!(early_stop_loss > 0.0)) throw ContractError("malicious training: early-stop threshold must be positive");
  if (epochs < 0 || batch_size < 1 || lr <= 0.0) throw ContractError("malicious training: bad optimizer settings");
}

double malicious_scalar(const TransformerCheckpoint& malicious, const Tensor& patches) {
  if (malicious.config.classes != 1) throw ContractError("malicious_scalar: checkpoint is not a scalar-readout model");
  return forward_logits(malicious, patches).at(0);
}

namespace {

double poisoned_mse(const TransformerCheckpoint& ckpt, const PoisonedDataset& set, double a, double lambda) {
  const std::vector<Tensor> logits = batch_forward_logits(ckpt, set.data.inputs);
  double loss = 0.0;
  for (size_t i = 0; i < set.data.size(); ++i) {
    const double target = set.poisoned[i] ? a : 0.0;
    const double r = logits[i].at(0) - target;
    loss += lambda * r * r;
  }
  return loss / static_cast<double>(set.data.size());
}

}  // namespace

MaliciousTrainResult train_malicious_head(const ModelConfig& malicious_cfg, const Dataset& train_subset,
                                          const Dataset& validation, const Trigger& trig,
                                          const MaliciousTrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  malicious_cfg.validate();
  if (malicious_cfg.heads != 1 || malicious_cfg.classes != 1) {
    throw ContractError("train_malicious_head: config must describe a single-head scalar-readout model");
  }
  if (train_subset.empty()) throw ContractError("train_malicious_head: empty training subset");
  if (validation.empty()) throw ContractError("train_malicious_head: empty validation set");

  const PoisonedDataset train = poison_dataset(train_subset, trig, PoisonMode::half_balanced(derive_seed(seed, 10)));
  const PoisonedDataset val = poison_dataset(validation, trig, PoisonMode::half_balanced(derive_seed(seed, 11)));

  MaliciousTrainResult result;
  result.checkpoint = init_checkpoint(malicious_cfg, derive_seed(seed, 12));
  // Output projection to the target is all ones (and zero bias), fixed.
  result.checkpoint.classifier_w = Tensor::full({malicious_cfg.model_width(), 1}, 1.0);
  result.checkpoint.classifier_b = Tensor::zeros({1});

  TransformerCheckpoint& ckpt = result.checkpoint;
  std::vector<Tensor*> params;
  std::vector<size_t> trainable;  // indices into the canonical order, readout excluded
  {
    size_t idx = 0;
    for_each_tensor(ckpt, [&](const char* name, Tensor& t) {
      const std::string n = name;
      if (n != "classifier_w" && n != "classifier_b") {
        params.push_back(&t);
        trainable.push_back(idx);
      }
      ++idx;
    });
  }
  std::vector<const Tensor*> shapes(params.begin(), params.end());
  OptimizerState opt(shapes, cfg.lr);

  TransformerCheckpoint best = ckpt;
  double best_loss = poisoned_mse(ckpt, val, cfg.offset_a, cfg.lambda);

  Rng shuffle_rng(derive_seed(seed, 13));
  std::vector<size_t> order(train.data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      Graph g;
      const CheckpointNodes w = bind_checkpoint(g, ckpt, true);
      std::vector<NodeId> losses;
      for (size_t i = begin; i < end; ++i) {
        const size_t s = order[i];
        const ForwardNodes f = build_forward(g, w, ckpt.config, ckpt.segmented_head, g.input(train.data.inputs[s]));
        const double target = train.poisoned[s] ? cfg.offset_a : 0.0;
        losses.push_back(g.square(g.add_scalar(f.logits, -target)));
      }
      const NodeId loss = g.scale(g.add_n(losses), cfg.lambda / static_cast<double>(losses.size()));
      auto grad_map = g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(trainable.size());
      for (size_t idx : trainable) grads.push_back(std::move(grad_map.at(w.flat[idx])));
      adam_step(opt, params, grads);
    }
    result.epochs_run = epoch + 1;
    const double val_loss = poisoned_mse(ckpt, val, cfg.offset_a, cfg.lambda);
    result.val_loss_history.push_back(val_loss);
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = ckpt;
    }
    if (val_loss < cfg.early_stop_loss) {
      result.converged = true;
      break;
    }
  }
  // Never silently return a diverged head: hand back the best checkpoint seen.
  if (!result.converged) result.checkpoint = best;
  return result;
}

std::vector<double> clean_margins(const TransformerCheckpoint& model, const Dataset& data, int64_t target_class) {
  if (target_class < 0 || target_class >= model.config.classes) {
    throw ContractError("clean_margins: target class out of range");
  }
  const std::vector<Tensor> logits = batch_forward_logits(model, data.inputs);
  std::vector<double> margins;
  margins.reserve(logits.size());
  for (const Tensor& l : logits) {
    double mx = l.at(0);
    for (int64_t j = 1; j < l.numel(); ++j) mx = std::max(mx, l.at(j));
    margins.push_back(mx - l.at(target_class));
  }
  return margins;
}

double select_offset(const std::vector<double>& margins, double tau, double k) {
  if (margins.size() < 2) throw ContractError("select_offset: need at least 2 margin samples");
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("select_offset: tau must lie in (0,1)");
  if (k < 0.0) throw ContractError("select_offset: k must be non-negative");
  double mu = 0.0;
  for (double m : margins) mu += m;
  mu /= static_cast<double>(margins.size());
  double var = 0.0;
  for (double m : margins) var += (m - mu) * (m - mu);
  var /= static_cast<double>(margins.size());
  const double sigma = std::sqrt(var);
  return std::ceil(mu + sigma * standard_normal_quantile(tau) + k);
}

}  // namespace hpmi
