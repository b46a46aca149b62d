#include "hpmi/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

#include "hpmi/adam.hpp"
#include "hpmi/checkpoint_io.hpp"
#include "hpmi/metrics.hpp"
#include "hpmi/rng.hpp"

namespace hpmi {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Seed streams per pipeline stage.
enum : uint64_t {
  kStreamBenignInit = 1,
  kStreamBenignTrain = 2,
  kStreamRhoSelect = 3,
  kStreamMalicious = 4,
  kStreamDpPoison = 5,
  kStreamDpTrain = 6,
  kStreamVerify = 7,
  kStreamStrip = 8,
  kStreamNeuralCleanse = 9,
  kStreamProbe = 10,
};

template <class T>
T get_or(const json& doc, const char* key, T fallback) {
  if (doc.contains(key)) return doc.at(key).get<T>();
  return fallback;
}

class StageTimer {
 public:
  explicit StageTimer(ordered_json& doc) : doc_(doc) {
    doc_["stages"] = ordered_json::array();
    doc_["timings"] = ordered_json::object();
  }

  template <class F>
  void run(const std::string& name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const std::exception& e) {
      throw std::runtime_error("stage '" + name + "' failed: " + e.what());
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    doc_["stages"].push_back(name);
    doc_["timings"][name] = dt.count();
  }

 private:
  ordered_json& doc_;
};

int64_t argmax(const Tensor& v) {
  int64_t best = 0;
  for (int64_t j = 1; j < v.numel(); ++j) {
    if (v.at(j) > v.at(best)) best = j;
  }
  return best;
}

ordered_json theorem_json(const TheoremReport& r) {
  return ordered_json{{"max_off_channel_dev", r.max_off_channel_dev},
                      {"max_on_channel_dev", r.max_on_channel_dev},
                      {"n_inputs", r.n_inputs},
                      {"tolerance", r.tolerance},
                      {"pass", r.pass}};
}

// 0/1 checkpoint marking every weight entry the injection writes. Built by
// injecting an all-ones malicious model into an all-zeros pruned shell, so the
// mask can never drift from the real injection layout.
TransformerCheckpoint channel_mask_checkpoint(const ModelConfig& config, const SurgeryPlan& plan) {
  TransformerCheckpoint zero = init_checkpoint(config, 0);
  for_each_tensor(zero, [](const char*, Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); });
  const TransformerCheckpoint pruned = prune_head(zero, plan.head_index);
  TransformerCheckpoint ones = init_checkpoint(malicious_config_for(config), 0);
  for_each_tensor(ones, [](const char*, Tensor& t) { std::fill(t.values().begin(), t.values().end(), 1.0); });
  TransformerCheckpoint mask = inject_head(pruned, ones, plan);
  mask.classifier_b = Tensor::zeros({config.classes});  // bias is shared, not channel-owned
  return mask;
}

struct ProbeOutcome {
  std::vector<double> channel_grad_norm_per_epoch;
  Metrics before;
  Metrics after;
};

// Clean fine-tuning probe: measures the gradient actually flowing into the
// channel weights and the ASR that survives the fine-tune.
ProbeOutcome fine_tune_probe(const TransformerCheckpoint& backdoored, const SurgeryPlan& plan,
                             const Dataset& clean_train, const PoisonedDataset& paired_eval,
                             const FineTuneProbeSpec& spec, int64_t batch_size, uint64_t seed) {
  ProbeOutcome out;
  out.before = compute_metrics(backdoored, paired_eval, plan.target_class);

  TransformerCheckpoint ckpt = backdoored;
  const TransformerCheckpoint mask = channel_mask_checkpoint(ckpt.config, plan);
  std::vector<const Tensor*> mask_flat;
  for_each_tensor(mask, [&](const char*, const Tensor& t) { mask_flat.push_back(&t); });

  std::vector<Tensor*> params;
  for_each_tensor(ckpt, [&](const char*, Tensor& t) { params.push_back(&t); });
  std::vector<const Tensor*> shapes(params.begin(), params.end());
  OptimizerState opt(shapes, spec.lr);

  Rng shuffle_rng(derive_seed(seed, 20));
  std::vector<size_t> order(clean_train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < spec.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double norm_acc = 0.0;
    int64_t batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(batch_size));
      Graph g;
      const CheckpointNodes w = bind_checkpoint(g, ckpt, true);
      std::vector<NodeId> losses;
      for (size_t i = begin; i < end; ++i) {
        const ForwardNodes f =
            build_forward(g, w, ckpt.config, ckpt.segmented_head, g.input(clean_train.inputs[order[i]]));
        losses.push_back(g.cross_entropy_logits(f.logits, clean_train.labels[order[i]]));
      }
      const NodeId loss = g.scale(g.add_n(losses), 1.0 / static_cast<double>(losses.size()));
      auto grad_map = g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(w.flat.size());
      double channel_sq = 0.0;
      for (size_t t = 0; t < w.flat.size(); ++t) {
        Tensor grad = std::move(grad_map.at(w.flat[t]));
        const Tensor& m = *mask_flat[t];
        for (int64_t j = 0; j < grad.numel(); ++j) {
          if (m.at(j) != 0.0) channel_sq += grad.at(j) * grad.at(j);
        }
        grads.push_back(std::move(grad));
      }
      norm_acc += std::sqrt(channel_sq);
      ++batches;
      adam_step(opt, params, grads);
    }
    out.channel_grad_norm_per_epoch.push_back(norm_acc / static_cast<double>(batches));
  }
  out.after = compute_metrics(ckpt, paired_eval, plan.target_class);
  return out;
}

PoisonedDataset make_strip_samples(const Dataset& test, const Trigger& trig, const StripToggle& toggle) {
  PoisonedDataset samples;
  const auto n_clean = std::min<size_t>(static_cast<size_t>(toggle.n_clean), test.size());
  const auto n_poisoned = std::min<size_t>(static_cast<size_t>(toggle.n_poisoned), test.size());
  for (size_t i = 0; i < n_clean; ++i) {
    samples.data.inputs.push_back(test.inputs[i]);
    samples.data.labels.push_back(test.labels[i]);
    samples.poisoned.push_back(0);
  }
  for (size_t i = 0; i < n_poisoned; ++i) {
    samples.data.inputs.push_back(apply_trigger(test.inputs[i], trig));
    samples.data.labels.push_back(test.labels[i]);
    samples.poisoned.push_back(1);
  }
  return samples;
}

PoisonedDataset truncate_pairs(const PoisonedDataset& paired, int64_t max_pairs) {
  if (max_pairs <= 0 || static_cast<size_t>(2 * max_pairs) >= paired.data.size()) return paired;
  PoisonedDataset out;
  for (size_t i = 0; i < static_cast<size_t>(2 * max_pairs); ++i) {
    out.data.inputs.push_back(paired.data.inputs[i]);
    out.data.labels.push_back(paired.data.labels[i]);
    out.poisoned.push_back(paired.poisoned[i]);
  }
  return out;
}

void write_fine_prune_curve(const std::vector<FinePrunePoint>& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "pruned_count,clean_accuracy,attack_success_rate\n";
  for (const FinePrunePoint& p : curve) {
    f << p.pruned_count << ',' << p.clean_accuracy << ',' << p.attack_success_rate << '\n';
  }
}

// Runs the enabled defenses against `model` and records their JSON blocks.
void run_defenses(ordered_json& doc, StageTimer& timer, const ExperimentConfig& cfg,
                  const TransformerCheckpoint& model, const SplitDataset& data, const Trigger& trig,
                  const PoisonedDataset& paired_test, const std::string& curve_path) {
  doc["defenses"] = ordered_json::object();

  if (cfg.defenses.strip.enabled) {
    timer.run("defense_strip", [&] {
      const PoisonedDataset samples = make_strip_samples(data.test, trig, cfg.defenses.strip);
      const StripResult r =
          strip_scan(model, samples, data.train, cfg.defenses.strip.config, derive_seed(cfg.seed, kStreamStrip));
      doc["defenses"]["strip"] = ordered_json{{"far", r.far},
                                              {"observed_frr", r.observed_frr},
                                              {"threshold", r.threshold},
                                              {"n_overlays", cfg.defenses.strip.config.n_overlays},
                                              {"n_clean", r.n_clean},
                                              {"n_poisoned", r.n_poisoned}};
    });
  }

  if (cfg.defenses.fine_pruning.enabled) {
    timer.run("defense_fine_pruning", [&] {
      const PoisonedDataset eval = truncate_pairs(paired_test, cfg.defenses.fine_pruning.eval_pairs);
      const auto curve = fine_prune(model, data.val, eval, cfg.target_class, cfg.defenses.fine_pruning.step_size,
                                    cfg.defenses.fine_pruning.max_fraction);
      write_fine_prune_curve(curve, curve_path);
      ordered_json points = ordered_json::array();
      for (const FinePrunePoint& p : curve) {
        points.push_back(ordered_json{{"pruned", p.pruned_count}, {"ca", p.clean_accuracy}, {"asr", p.attack_success_rate}});
      }
      doc["defenses"]["fine_pruning"] = ordered_json{{"curve", points}, {"curve_csv", curve_path}};
    });
  }

  if (cfg.defenses.neural_cleanse.enabled) {
    timer.run("defense_neural_cleanse", [&] {
      const NeuralCleanseResult r = neural_cleanse(model, data.val, cfg.defenses.neural_cleanse.config,
                                                   derive_seed(cfg.seed, kStreamNeuralCleanse));
      ordered_json per_class = ordered_json::array();
      for (size_t i = 0; i < r.per_class.size(); ++i) {
        per_class.push_back(ordered_json{{"mask_norm", r.per_class[i].mask_norm},
                                         {"final_loss", r.per_class[i].final_loss},
                                         {"diverged", r.per_class[i].diverged},
                                         {"anomaly_index", std::isnan(r.anomaly[i]) ? ordered_json() : ordered_json(r.anomaly[i])}});
      }
      doc["defenses"]["neural_cleanse"] =
          ordered_json{{"per_class", per_class},
                       {"anomaly_threshold", r.anomaly_threshold},
                       {"target_anomaly_index", std::isnan(r.anomaly[static_cast<size_t>(cfg.target_class)])
                                                    ? ordered_json()
                                                    : ordered_json(r.anomaly[static_cast<size_t>(cfg.target_class)])}};
    });
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (target_class < 0 || target_class >= model.classes) throw ContractError("config: target_class out of range");
  if (output_dir.empty()) throw ContractError("config: output_dir must be set");
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("config: tau must lie in (0,1)");
  if (quantile_shift_k < 0.0) throw ContractError("config: k must be non-negative");
  if (verify_inputs < 1) throw ContractError("config: verify_inputs must be >= 1");
  if (dataset.kind == DatasetSpec::Kind::kSynthetic) {
    if (dataset.synthetic.classes != model.classes) {
      throw ContractError("config: synthetic classes " + std::to_string(dataset.synthetic.classes) +
                          " must equal model classes " + std::to_string(model.classes));
    }
  } else {
    const auto grid = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(model.num_patches()))));
    if (grid * grid != model.num_patches()) {
      throw ContractError("config: cifar10 requires a square patch grid (tokens-1 must be a perfect square)");
    }
    if (dataset.cifar_crop % grid != 0 ||
        (dataset.cifar_crop / grid) * (dataset.cifar_crop / grid) != model.patch_dim) {
      throw ContractError("config: cifar10 crop/grid geometry does not match model patch_dim");
    }
  }
  if (malicious.rho == 0.0 && malicious_ckpt_path.empty()) {
    throw ContractError("config: rho = 0 requires a surrogate malicious checkpoint path");
  }
}

ExperimentConfig parse_experiment_config(const json& doc) {
  ExperimentConfig cfg;
  cfg.seed = get_or<uint64_t>(doc, "seed", cfg.seed);
  cfg.output_dir = get_or<std::string>(doc, "output_dir", cfg.output_dir);
  cfg.target_class = get_or<int64_t>(doc, "target_class", cfg.target_class);

  if (doc.contains("model")) {
    const json& m = doc.at("model");
    cfg.model.layers = get_or<int64_t>(m, "layers", cfg.model.layers);
    cfg.model.heads = get_or<int64_t>(m, "heads", cfg.model.heads);
    cfg.model.head_width = get_or<int64_t>(m, "head_width", cfg.model.head_width);
    cfg.model.ffn_width = get_or<int64_t>(m, "ffn_width", cfg.model.ffn_width);
    cfg.model.classes = get_or<int64_t>(m, "classes", cfg.model.classes);
    cfg.model.tokens = get_or<int64_t>(m, "tokens", cfg.model.tokens);
    cfg.model.patch_dim = get_or<int64_t>(m, "patch_dim", cfg.model.patch_dim);
    cfg.model.ln_epsilon = get_or<double>(m, "ln_epsilon", cfg.model.ln_epsilon);
  }

  cfg.dataset.synthetic.classes = cfg.model.classes;
  if (doc.contains("dataset")) {
    const json& d = doc.at("dataset");
    const std::string kind = get_or<std::string>(d, "kind", "synthetic");
    if (kind == "synthetic") {
      cfg.dataset.kind = DatasetSpec::Kind::kSynthetic;
      cfg.dataset.synthetic.classes = get_or<int64_t>(d, "classes", cfg.model.classes);
      cfg.dataset.synthetic.samples_per_class = get_or<int64_t>(d, "samples_per_class", 120);
      cfg.dataset.synthetic.noise = get_or<double>(d, "noise", 0.08);
      cfg.dataset.synthetic.seed = get_or<uint64_t>(d, "seed", 0);
    } else if (kind == "cifar10") {
      cfg.dataset.kind = DatasetSpec::Kind::kCifar10;
      cfg.dataset.cifar_path = get_or<std::string>(d, "path", "");
      cfg.dataset.cifar_crop = get_or<int64_t>(d, "crop", 16);
      cfg.dataset.cifar_max_records = get_or<int64_t>(d, "max_records", -1);
      cfg.dataset.split_seed = get_or<uint64_t>(d, "split_seed", 0);
    } else {
      throw ContractError("config: unknown dataset kind '" + kind + "'");
    }
  }

  if (doc.contains("trigger")) {
    const json& t = doc.at("trigger");
    const std::string kind = get_or<std::string>(t, "kind", "patch");
    if (kind == "patch") {
      cfg.trigger.kind = TriggerKind::kPatch;
    } else if (kind == "blend") {
      cfg.trigger.kind = TriggerKind::kBlend;
    } else {
      throw ContractError("config: unknown trigger kind '" + kind + "'");
    }
    cfg.trigger.seed = get_or<uint64_t>(t, "seed", 0);
    cfg.trigger.alpha = get_or<double>(t, "alpha", 0.2);
    cfg.trigger.pattern_path = get_or<std::string>(t, "pattern_path", "");
  }

  if (doc.contains("train")) {
    const json& t = doc.at("train");
    cfg.train.epochs = get_or<int64_t>(t, "epochs", cfg.train.epochs);
    cfg.train.lr = get_or<double>(t, "lr", cfg.train.lr);
    cfg.train.batch_size = get_or<int64_t>(t, "batch_size", cfg.train.batch_size);
  }

  if (doc.contains("malicious")) {
    const json& m = doc.at("malicious");
    cfg.malicious.lr = get_or<double>(m, "lr", cfg.malicious.lr);
    cfg.malicious.epochs = get_or<int64_t>(m, "epochs", cfg.malicious.epochs);
    cfg.malicious.early_stop_loss = get_or<double>(m, "early_stop_loss", cfg.malicious.early_stop_loss);
    cfg.malicious.rho = get_or<double>(m, "rho", cfg.malicious.rho);
    cfg.malicious.lambda = get_or<double>(m, "lambda", cfg.malicious.lambda);
    cfg.malicious.batch_size = get_or<int64_t>(m, "batch_size", cfg.malicious.batch_size);
    cfg.malicious_ckpt_path = get_or<std::string>(m, "checkpoint_path", "");
  }

  if (doc.contains("surgery")) {
    const json& s = doc.at("surgery");
    cfg.tau = get_or<double>(s, "tau", cfg.tau);
    cfg.quantile_shift_k = get_or<double>(s, "k", cfg.quantile_shift_k);
    cfg.explicit_offset = get_or<double>(s, "offset", cfg.explicit_offset);
  }

  if (doc.contains("verify")) {
    const json& v = doc.at("verify");
    cfg.verify_inputs = get_or<int64_t>(v, "n_inputs", cfg.verify_inputs);
    cfg.verify_tolerance = get_or<double>(v, "tolerance", cfg.verify_tolerance);
  }

  if (doc.contains("defenses")) {
    const json& d = doc.at("defenses");
    if (d.contains("strip")) {
      const json& s = d.at("strip");
      cfg.defenses.strip.enabled = get_or<bool>(s, "enabled", true);
      cfg.defenses.strip.config.n_overlays = get_or<int64_t>(s, "n_overlays", 100);
      cfg.defenses.strip.config.frr = get_or<double>(s, "frr", 0.01);
      cfg.defenses.strip.n_clean = get_or<int64_t>(s, "n_clean", 64);
      cfg.defenses.strip.n_poisoned = get_or<int64_t>(s, "n_poisoned", 64);
    }
    if (d.contains("fine_pruning")) {
      const json& f = d.at("fine_pruning");
      cfg.defenses.fine_pruning.enabled = get_or<bool>(f, "enabled", true);
      cfg.defenses.fine_pruning.step_size = get_or<int64_t>(f, "step_size", 0);
      cfg.defenses.fine_pruning.max_fraction = get_or<double>(f, "max_fraction", 1.0);
      cfg.defenses.fine_pruning.eval_pairs = get_or<int64_t>(f, "eval_pairs", 64);
    }
    if (d.contains("neural_cleanse")) {
      const json& n = d.at("neural_cleanse");
      cfg.defenses.neural_cleanse.enabled = get_or<bool>(n, "enabled", true);
      cfg.defenses.neural_cleanse.config.steps = get_or<int64_t>(n, "steps", 300);
      cfg.defenses.neural_cleanse.config.lr = get_or<double>(n, "lr", 0.1);
      cfg.defenses.neural_cleanse.config.sparsity_weight = get_or<double>(n, "sparsity_weight", 0.01);
      cfg.defenses.neural_cleanse.config.anomaly_threshold = get_or<double>(n, "anomaly_threshold", 2.0);
      cfg.defenses.neural_cleanse.config.batch = get_or<int64_t>(n, "batch", 16);
    }
  }

  if (doc.contains("dp")) {
    const json& d = doc.at("dp");
    cfg.dp_poison_fraction = get_or<double>(d, "poison_fraction", cfg.dp_poison_fraction);
    cfg.dp_epochs = get_or<int64_t>(d, "epochs", cfg.dp_epochs);
  }

  if (doc.contains("fine_tune_probe")) {
    const json& p = doc.at("fine_tune_probe");
    cfg.probe.enabled = get_or<bool>(p, "enabled", true);
    cfg.probe.epochs = get_or<int64_t>(p, "epochs", cfg.probe.epochs);
    cfg.probe.lr = get_or<double>(p, "lr", cfg.probe.lr);
  }

  cfg.train.seed = derive_seed(cfg.seed, kStreamBenignTrain);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("config " + path + ": cannot open");
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
  return parse_experiment_config(doc);
}

ordered_json echo_config(const ExperimentConfig& cfg) {
  ordered_json out;
  out["seed"] = cfg.seed;
  out["output_dir"] = cfg.output_dir;
  out["target_class"] = cfg.target_class;
  out["model"] = ordered_json{{"layers", cfg.model.layers},       {"heads", cfg.model.heads},
                              {"head_width", cfg.model.head_width}, {"ffn_width", cfg.model.ffn_width},
                              {"classes", cfg.model.classes},     {"tokens", cfg.model.tokens},
                              {"patch_dim", cfg.model.patch_dim}, {"ln_epsilon", cfg.model.ln_epsilon}};
  if (cfg.dataset.kind == DatasetSpec::Kind::kSynthetic) {
    out["dataset"] = ordered_json{{"kind", "synthetic"},
                                  {"classes", cfg.dataset.synthetic.classes},
                                  {"samples_per_class", cfg.dataset.synthetic.samples_per_class},
                                  {"noise", cfg.dataset.synthetic.noise},
                                  {"seed", cfg.dataset.synthetic.seed}};
  } else {
    out["dataset"] = ordered_json{{"kind", "cifar10"},
                                  {"path", cfg.dataset.cifar_path},
                                  {"crop", cfg.dataset.cifar_crop},
                                  {"max_records", cfg.dataset.cifar_max_records},
                                  {"split_seed", cfg.dataset.split_seed}};
  }
  out["trigger"] = ordered_json{{"kind", cfg.trigger.kind == TriggerKind::kPatch ? "patch" : "blend"},
                                {"seed", cfg.trigger.seed},
                                {"alpha", cfg.trigger.alpha},
                                {"pattern_path", cfg.trigger.pattern_path}};
  out["train"] =
      ordered_json{{"epochs", cfg.train.epochs}, {"lr", cfg.train.lr}, {"batch_size", cfg.train.batch_size}};
  out["malicious"] = ordered_json{{"lr", cfg.malicious.lr},
                                  {"epochs", cfg.malicious.epochs},
                                  {"early_stop_loss", cfg.malicious.early_stop_loss},
                                  {"rho", cfg.malicious.rho},
                                  {"lambda", cfg.malicious.lambda},
                                  {"batch_size", cfg.malicious.batch_size},
                                  {"checkpoint_path", cfg.malicious_ckpt_path}};
  out["surgery"] = ordered_json{{"tau", cfg.tau}, {"k", cfg.quantile_shift_k}, {"offset", cfg.explicit_offset}};
  out["verify"] = ordered_json{{"n_inputs", cfg.verify_inputs}, {"tolerance", cfg.verify_tolerance}};
  out["defenses"] = ordered_json{
      {"strip", ordered_json{{"enabled", cfg.defenses.strip.enabled},
                             {"n_overlays", cfg.defenses.strip.config.n_overlays},
                             {"frr", cfg.defenses.strip.config.frr},
                             {"n_clean", cfg.defenses.strip.n_clean},
                             {"n_poisoned", cfg.defenses.strip.n_poisoned}}},
      {"fine_pruning", ordered_json{{"enabled", cfg.defenses.fine_pruning.enabled},
                                    {"step_size", cfg.defenses.fine_pruning.step_size},
                                    {"max_fraction", cfg.defenses.fine_pruning.max_fraction},
                                    {"eval_pairs", cfg.defenses.fine_pruning.eval_pairs}}},
      {"neural_cleanse", ordered_json{{"enabled", cfg.defenses.neural_cleanse.enabled},
                                      {"steps", cfg.defenses.neural_cleanse.config.steps},
                                      {"lr", cfg.defenses.neural_cleanse.config.lr},
                                      {"sparsity_weight", cfg.defenses.neural_cleanse.config.sparsity_weight},
                                      {"anomaly_threshold", cfg.defenses.neural_cleanse.config.anomaly_threshold},
                                      {"batch", cfg.defenses.neural_cleanse.config.batch}}}};
  out["dp"] = ordered_json{{"poison_fraction", cfg.dp_poison_fraction}, {"epochs", cfg.dp_epochs}};
  out["fine_tune_probe"] =
      ordered_json{{"enabled", cfg.probe.enabled}, {"epochs", cfg.probe.epochs}, {"lr", cfg.probe.lr}};
  return out;
}

SplitDataset build_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == DatasetSpec::Kind::kSynthetic) {
    return generate_synthetic_dataset(cfg.model.num_patches(), cfg.model.patch_dim, cfg.dataset.synthetic);
  }
  const auto grid = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(cfg.model.num_patches()))));
  const Dataset all =
      load_cifar10(cfg.dataset.cifar_path, cfg.dataset.cifar_crop, grid, cfg.dataset.cifar_max_records);
  return stratified_split(all, 0.70, 0.15, cfg.dataset.split_seed);
}

Trigger build_trigger(const ExperimentConfig& cfg) {
  if (cfg.trigger.kind == TriggerKind::kPatch) {
    return make_patch_trigger(cfg.model.num_patches(), cfg.model.patch_dim, cfg.trigger.seed);
  }
  Tensor pattern;
  if (!cfg.trigger.pattern_path.empty()) {
    pattern = read_pattern_file(cfg.trigger.pattern_path);
    if (pattern.shape() != std::vector<int64_t>{cfg.model.num_patches(), cfg.model.patch_dim}) {
      throw ContractError("blend pattern " + cfg.trigger.pattern_path + " has shape " + pattern.shape_string() +
                          ", expected " + shape_to_string({cfg.model.num_patches(), cfg.model.patch_dim}));
    }
  } else {
    pattern = Tensor({cfg.model.num_patches(), cfg.model.patch_dim});
    Rng rng(derive_seed(cfg.trigger.seed, 501));
    for (int64_t i = 0; i < pattern.numel(); ++i) pattern.at(i) = rng.uniform();
  }
  return make_blend_trigger(pattern, cfg.trigger.alpha);
}

ExperimentReport run_hpmi(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const std::string dir = cfg.output_dir + "/";

  ExperimentReport report;
  ordered_json& doc = report.doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["kind"] = "hpmi";
  doc["config"] = echo_config(cfg);
  StageTimer timer(doc);

  SplitDataset data;
  timer.run("generate_dataset", [&] {
    data = build_dataset(cfg);
    doc["dataset_sizes"] = ordered_json{
        {"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}};
  });
  const Trigger trig = build_trigger(cfg);

  TransformerCheckpoint benign;
  double benign_ca = 0.0;
  timer.run("train_benign", [&] {
    const TransformerCheckpoint start = init_checkpoint(cfg.model, derive_seed(cfg.seed, kStreamBenignInit));
    TrainOptions opts = cfg.train;
    opts.seed = derive_seed(cfg.seed, kStreamBenignTrain);
    TrainResult tr = train_classifier(start, data.train, opts);
    benign = std::move(tr.checkpoint);
    save_checkpoint(benign, dir + "benign.ckpt");
    benign_ca = accuracy(benign, data.test);
    doc["benign"] = ordered_json{{"ca_test", benign_ca},
                                 {"ca_val", accuracy(benign, data.val)},
                                 {"accuracy_history", tr.accuracy_history}};
  });

  PruneScanReport scan;
  timer.run("prune_scan", [&] {
    scan = scan_prune_targets(benign, data.val);
    doc["prune_scan"] = ordered_json{{"baseline_accuracy", scan.baseline_accuracy},
                                     {"per_head_accuracy", scan.per_head_accuracy},
                                     {"per_head_cad", scan.per_head_cad},
                                     {"selected_head", scan.selected_head}};
  });

  TransformerCheckpoint pruned;
  double pruned_ca = 0.0;
  timer.run("prune", [&] {
    pruned = prune_head(benign, scan.selected_head);
    save_checkpoint(pruned, dir + "pruned.ckpt");
    pruned_ca = accuracy(pruned, data.test);
    doc["pruned"] = ordered_json{{"ca_test", pruned_ca}, {"head", scan.selected_head}};
  });

  double offset = cfg.explicit_offset;
  timer.run("select_offset", [&] {
    const std::vector<double> margins = clean_margins(pruned, data.val, cfg.target_class);
    double mu = 0.0;
    for (double m : margins) mu += m;
    mu /= static_cast<double>(margins.size());
    double var = 0.0;
    for (double m : margins) var += (m - mu) * (m - mu);
    var /= static_cast<double>(margins.size());
    const double selected = select_offset(margins, cfg.tau, cfg.quantile_shift_k);
    if (offset <= 0.0) offset = selected;
    doc["offset_selection"] = ordered_json{{"mu", mu},
                                           {"sigma", std::sqrt(var)},
                                           {"tau", cfg.tau},
                                           {"k", cfg.quantile_shift_k},
                                           {"selected", selected},
                                           {"explicit", cfg.explicit_offset},
                                           {"offset", offset}};
  });

  const SurgeryPlan plan = make_surgery_plan(cfg.model, scan.selected_head, cfg.target_class, offset);
  doc["surgery_plan"] = ordered_json{{"head_index", plan.head_index},
                                     {"target_class", plan.target_class},
                                     {"offset", plan.offset},
                                     {"attn_slice", ordered_json::array({plan.attn_lo, plan.attn_hi})},
                                     {"ffn_slice", ordered_json::array({plan.ffn_lo, plan.ffn_hi})}};

  TransformerCheckpoint malicious;
  timer.run("train_malicious", [&] {
    if (cfg.malicious.rho == 0.0) {
      malicious = load_checkpoint(cfg.malicious_ckpt_path, malicious_config_for(cfg.model));
      doc["malicious_training"] = ordered_json{{"surrogate_path", cfg.malicious_ckpt_path}, {"trained", false}};
    } else {
      const Dataset subset = select_fraction(data.train, cfg.malicious.rho, derive_seed(cfg.seed, kStreamRhoSelect));
      MaliciousTrainConfig mcfg = cfg.malicious;
      mcfg.offset_a = offset;
      const MaliciousTrainResult mt = train_malicious_head(malicious_config_for(cfg.model), subset, data.val, trig,
                                                           mcfg, derive_seed(cfg.seed, kStreamMalicious));
      malicious = mt.checkpoint;
      doc["malicious_training"] = ordered_json{
          {"trained", true},
          {"converged", mt.converged},
          {"epochs_run", mt.epochs_run},
          {"final_val_loss", mt.val_loss_history.empty() ? 0.0 : mt.val_loss_history.back()},
          {"val_loss_history", mt.val_loss_history},
          {"subset_size", subset.size()}};
      if (!mt.converged) doc["malicious_training"]["warning"] = "early-stop threshold never reached";
    }
    save_checkpoint(malicious, dir + "malicious.ckpt");
  });

  TransformerCheckpoint backdoored;
  timer.run("inject", [&] {
    backdoored = inject_head(pruned, malicious, plan);
    save_checkpoint(backdoored, dir + "backdoored.ckpt");
    const IsolationReport iso = check_static_isolation(backdoored, plan.head_index);
    doc["isolation"] = ordered_json{{"max_abs_coupling", iso.max_abs_coupling}, {"pass", iso.pass}};
  });

  PoisonedDataset paired_test;
  timer.run("evaluate", [&] {
    paired_test = poison_dataset(data.test, trig, PoisonMode::test_paired());
    const Metrics m = compute_metrics(backdoored, paired_test, cfg.target_class);

    // Per-sample channel scalar on clean vs triggered test inputs.
    double s_clean = 0.0, s_trig = 0.0;
    for (size_t i = 0; i < data.test.size(); ++i) {
      s_clean += malicious_scalar(malicious, data.test.inputs[i]);
      s_trig += malicious_scalar(malicious, apply_trigger(data.test.inputs[i], trig));
    }
    s_clean /= static_cast<double>(data.test.size());
    s_trig /= static_cast<double>(data.test.size());

    std::vector<int64_t> flipped;
    const std::vector<Tensor> lp = batch_forward_logits(pruned, data.test.inputs);
    const std::vector<Tensor> lb = batch_forward_logits(backdoored, data.test.inputs);
    for (size_t i = 0; i < data.test.size(); ++i) {
      if (argmax(lp[i]) != argmax(lb[i])) flipped.push_back(static_cast<int64_t>(i));
    }

    doc["metrics"] = ordered_json{{"ca", m.clean_accuracy},
                                  {"asr", m.attack_success_rate},
                                  {"cad", m.clean_accuracy - benign_ca},
                                  {"cad_vs_pruned", m.clean_accuracy - pruned_ca},
                                  {"benign_ca", benign_ca},
                                  {"pruned_ca", pruned_ca},
                                  {"mean_channel_scalar_clean", s_clean},
                                  {"mean_channel_scalar_triggered", s_trig}};
    doc["flipped_clean_samples"] = flipped;
  });

  timer.run("verify_theorem1", [&] {
    Rng rng(derive_seed(cfg.seed, kStreamVerify));
    std::vector<Tensor> inputs;
    inputs.reserve(static_cast<size_t>(cfg.verify_inputs));
    for (int64_t i = 0; i < cfg.verify_inputs; ++i) {
      Tensor x({cfg.model.num_patches(), cfg.model.patch_dim});
      for (int64_t j = 0; j < x.numel(); ++j) x.at(j) = rng.uniform();
      inputs.push_back(std::move(x));
    }
    const TheoremReport r = verify_theorem1(pruned, backdoored, malicious, plan.target_class, inputs,
                                            cfg.verify_tolerance);
    doc["theorem1"] = theorem_json(r);
    std::ofstream f(dir + "theorem1.json", std::ios::trunc);
    f << doc["theorem1"].dump(2) << '\n';
  });

  if (cfg.probe.enabled) {
    timer.run("fine_tune_probe", [&] {
      const ProbeOutcome probe = fine_tune_probe(backdoored, plan, data.train, paired_test, cfg.probe,
                                                 cfg.train.batch_size, derive_seed(cfg.seed, kStreamProbe));
      doc["fine_tune_probe"] = ordered_json{{"channel_grad_norm_per_epoch", probe.channel_grad_norm_per_epoch},
                                            {"asr_before", probe.before.attack_success_rate},
                                            {"asr_after", probe.after.attack_success_rate},
                                            {"ca_before", probe.before.clean_accuracy},
                                            {"ca_after", probe.after.clean_accuracy}};
    });
  }

  run_defenses(doc, timer, cfg, backdoored, data, trig, paired_test, dir + "fine_prune_curve.csv");

  emit_report(report, cfg.output_dir);
  return report;
}

ExperimentReport run_dp_baseline(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const std::string dir = cfg.output_dir + "/";

  ExperimentReport report;
  ordered_json& doc = report.doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["kind"] = "dp_baseline";
  doc["config"] = echo_config(cfg);
  StageTimer timer(doc);

  SplitDataset data;
  timer.run("generate_dataset", [&] {
    data = build_dataset(cfg);
    doc["dataset_sizes"] = ordered_json{
        {"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}};
  });
  const Trigger trig = build_trigger(cfg);

  TransformerCheckpoint benign;
  double benign_ca = 0.0;
  timer.run("train_benign", [&] {
    const TransformerCheckpoint start = init_checkpoint(cfg.model, derive_seed(cfg.seed, kStreamBenignInit));
    TrainOptions opts = cfg.train;
    opts.seed = derive_seed(cfg.seed, kStreamBenignTrain);
    TrainResult tr = train_classifier(start, data.train, opts);
    benign = std::move(tr.checkpoint);
    save_checkpoint(benign, dir + "benign.ckpt");
    benign_ca = accuracy(benign, data.test);
    doc["benign"] = ordered_json{{"ca_test", benign_ca}};
  });

  TransformerCheckpoint poisoned_model;
  timer.run("dp_retrain", [&] {
    const PoisonedDataset poisoned_train = poison_dataset(
        data.train, trig, PoisonMode::relabel_fraction(cfg.dp_poison_fraction, cfg.target_class,
                                     derive_seed(cfg.seed, kStreamDpPoison)));
    int64_t n_poisoned = 0;
    for (uint8_t f : poisoned_train.poisoned) n_poisoned += f;
    TrainOptions opts = cfg.train;
    opts.epochs = cfg.dp_epochs;
    opts.seed = derive_seed(cfg.seed, kStreamDpTrain);
    TrainResult tr = train_classifier(benign, poisoned_train.data, opts);
    poisoned_model = std::move(tr.checkpoint);
    save_checkpoint(poisoned_model, dir + "dp.ckpt");
    doc["dp_retrain"] = ordered_json{{"poison_fraction", cfg.dp_poison_fraction},
                                     {"poisoned_samples", n_poisoned},
                                     {"epochs", cfg.dp_epochs}};
  });

  PoisonedDataset paired_test;
  timer.run("evaluate", [&] {
    paired_test = poison_dataset(data.test, trig, PoisonMode::test_paired());
    const Metrics m = compute_metrics(poisoned_model, paired_test, cfg.target_class);
    doc["metrics"] = ordered_json{{"ca", m.clean_accuracy},
                                  {"asr", m.attack_success_rate},
                                  {"cad", m.clean_accuracy - benign_ca},
                                  {"benign_ca", benign_ca}};
  });

  run_defenses(doc, timer, cfg, poisoned_model, data, trig, paired_test, dir + "fine_prune_curve.csv");

  emit_report(report, cfg.output_dir);
  return report;
}

void emit_report(const ExperimentReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream f(dir + "/report.json", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + dir + "/report.json for writing");
    f << report.doc.dump(2) << '\n';
    if (!f) throw std::runtime_error("write failed for " + dir + "/report.json");
  }
  {
    std::ofstream f(dir + "/summary.csv", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + dir + "/summary.csv for writing");
    f << "stage,seconds\n";
    for (const auto& stage : report.doc.at("stages")) {
      const std::string name = stage.get<std::string>();
      f << name << ',' << report.doc.at("timings").at(name).get<double>() << '\n';
    }
    if (!f) throw std::runtime_error("write failed for " + dir + "/summary.csv");
  }
}

}  // namespace hpmi
