#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hpmi/defense.hpp"
#include "hpmi/malicious.hpp"
#include "hpmi/model.hpp"
#include "hpmi/surgery.hpp"
#include "hpmi/trigger.hpp"

namespace hpmi {

inline constexpr int64_t kReportSchemaVersion = 1;

struct DatasetSpec {
  enum class Kind { kSynthetic, kCifar10 } kind = Kind::kSynthetic;
  SyntheticSpec synthetic;
  std::string cifar_path;
  int64_t cifar_crop = 16;
  int64_t cifar_max_records = -1;
  uint64_t split_seed = 0;  // cifar stratified split
};

struct TriggerSpec {
  TriggerKind kind = TriggerKind::kPatch;
  uint64_t seed = 0;          // patch noise / generated blend pattern
  double alpha = 0.2;         // blend ratio
  std::string pattern_path;   // optional blend pattern file
};

struct StripToggle {
  bool enabled = true;
  StripConfig config;
  int64_t n_clean = 64;
  int64_t n_poisoned = 64;
};

struct FinePruningToggle {
  bool enabled = true;
  int64_t step_size = 0;  // <= 0: max(1, total/64)
  double max_fraction = 1.0;
  int64_t eval_pairs = 64;
};

struct NeuralCleanseToggle {
  bool enabled = true;
  NeuralCleanseConfig config;
};

struct DefenseToggles {
  StripToggle strip;
  FinePruningToggle fine_pruning;
  NeuralCleanseToggle neural_cleanse;
};

struct FineTuneProbeSpec {
  bool enabled = true;
  int64_t epochs = 2;
  double lr = 1e-4;
};

struct ExperimentConfig {
  uint64_t seed = 7;
  std::string output_dir = "out/experiment";
  int64_t target_class = 1;
  ModelConfig model;
  DatasetSpec dataset;
  TriggerSpec trigger;
  TrainOptions train;
  MaliciousTrainConfig malicious;
  std::string malicious_ckpt_path;  // surrogate head; required when rho == 0
  double tau = 0.99;
  double quantile_shift_k = 1.0;
  double explicit_offset = 0.0;  // > 0 overrides select_offset
  int64_t verify_inputs = 256;
  double verify_tolerance = 1e-9;
  DefenseToggles defenses;
  double dp_poison_fraction = 0.1;
  int64_t dp_epochs = 3;
  FineTuneProbeSpec probe;

  void validate() const;
};

// Parses a config document, materializing every default; unknown keys are
// ignored. The echoed form of the parsed config is self-describing.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::string& path);
nlohmann::ordered_json echo_config(const ExperimentConfig& cfg);

// Materializes the configured dataset (synthetic generation or CIFAR-10
// ingestion plus stratified split) for the configured model geometry.
SplitDataset build_dataset(const ExperimentConfig& cfg);
Trigger build_trigger(const ExperimentConfig& cfg);

struct ExperimentReport {
  nlohmann::ordered_json doc;
};

// Full HPMI pipeline: benign training, prune scan, pruning, offset selection,
// malicious-head training (or surrogate load), injection, evaluation,
// theorem verification, optional clean fine-tuning probe and defenses.
// Artifacts and the report land under cfg.output_dir.
ExperimentReport run_hpmi(const ExperimentConfig& cfg);

// Data-poisoning baseline with the same trigger: retrains the benign model on
// fraction-poisoned relabeled data and evaluates the same metrics/defenses.
ExperimentReport run_dp_baseline(const ExperimentConfig& cfg);

// Writes report.json and summary.csv (one row per completed stage).
void emit_report(const ExperimentReport& report, const std::string& dir);

}  // namespace hpmi
