#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "hpmi/checkpoint_io.hpp"
#include "hpmi/harness.hpp"
#include "hpmi/metrics.hpp"
#include "hpmi/rng.hpp"

namespace {

using hpmi::ExperimentConfig;
using nlohmann::ordered_json;

struct CommonArgs {
  std::string config_path;
  std::string output_dir;
  int64_t seed = -1;
  int64_t target_class = -1;
  double tau = -1.0;
  double quantile_k = -1.0;
  double offset = -1.0;

  void attach(CLI::App* cmd, bool config_required = true) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config JSON");
    if (config_required) opt->required();
    cmd->add_option("--output-dir", output_dir, "override config output_dir");
    cmd->add_option("--seed", seed, "override config seed");
    cmd->add_option("--target-class", target_class, "override config target_class");
    cmd->add_option("--tau", tau, "override offset-selection percentile");
    cmd->add_option("--k", quantile_k, "override offset-selection shift");
    cmd->add_option("--offset", offset, "explicit logit offset (skips selection)");
  }

  // Flags take precedence over config-file values.
  ExperimentConfig load() const {
    ExperimentConfig cfg = hpmi::load_experiment_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    if (target_class >= 0) cfg.target_class = target_class;
    if (tau > 0.0) cfg.tau = tau;
    if (quantile_k >= 0.0) cfg.quantile_shift_k = quantile_k;
    if (offset > 0.0) cfg.explicit_offset = offset;
    cfg.validate();
    return cfg;
  }
};

void print_metric_rows(const ordered_json& doc) {
  if (doc.contains("metrics")) {
    const auto& m = doc.at("metrics");
    std::cout << "  CA  " << m.at("ca").get<double>() << "\n  ASR " << m.at("asr").get<double>() << "\n  CAD "
              << m.at("cad").get<double>() << "\n";
  }
  if (doc.contains("theorem1")) {
    std::cout << "  theorem1 " << (doc.at("theorem1").at("pass").get<bool>() ? "pass" : "FAIL") << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HPMI model-surgery laboratory"};
  app.require_subcommand(1);

  CommonArgs train_args, scan_args, prune_args, inject_args, defend_args, hpmi_args, dp_args;

  auto* cmd_train = app.add_subcommand("train", "train the benign classifier and save the checkpoint");
  train_args.attach(cmd_train);
  std::string train_out;
  cmd_train->add_option("--out", train_out, "checkpoint path (default <output_dir>/benign.ckpt)");

  auto* cmd_scan = app.add_subcommand("scan", "per-head prune scan of a checkpoint");
  scan_args.attach(cmd_scan);
  std::string scan_ckpt;
  cmd_scan->add_option("--ckpt", scan_ckpt, "checkpoint to scan")->required();

  auto* cmd_prune = app.add_subcommand("prune", "prune one head (weight-zeroing + segmented norm)");
  prune_args.attach(cmd_prune);
  std::string prune_ckpt, prune_out;
  int64_t prune_head_index = -1;
  cmd_prune->add_option("--ckpt", prune_ckpt, "checkpoint to prune")->required();
  cmd_prune->add_option("--head", prune_head_index, "head index (default: scan for the least important)");
  cmd_prune->add_option("--out", prune_out, "output path (default <output_dir>/pruned.ckpt)");

  auto* cmd_inject = app.add_subcommand("inject", "inject a malicious single-head checkpoint");
  inject_args.attach(cmd_inject);
  std::string inject_pruned, inject_malicious, inject_out;
  bool inject_signed = false;
  cmd_inject->add_option("--pruned", inject_pruned, "pruned checkpoint")->required();
  cmd_inject->add_option("--malicious", inject_malicious, "malicious checkpoint")->required();
  cmd_inject->add_option("--out", inject_out, "output path (default <output_dir>/backdoored.ckpt)");
  cmd_inject->add_flag("--signed-routing", inject_signed, "also route -s(x) into non-target logits");

  auto* cmd_verify = app.add_subcommand("verify", "check the injection decomposition on random inputs");
  std::string verify_pruned, verify_backdoored, verify_malicious;
  int64_t verify_target = 0, verify_n = 256, verify_seed = 0;
  double verify_tol = 1e-9;
  cmd_verify->add_option("--pruned", verify_pruned, "pruned checkpoint")->required();
  cmd_verify->add_option("--backdoored", verify_backdoored, "backdoored checkpoint")->required();
  cmd_verify->add_option("--malicious", verify_malicious, "malicious checkpoint")->required();
  cmd_verify->add_option("--target-class", verify_target, "routed target class")->required();
  cmd_verify->add_option("--n-inputs", verify_n, "number of random inputs");
  cmd_verify->add_option("--seed", verify_seed, "input seed");
  cmd_verify->add_option("--tolerance", verify_tol, "deviation tolerance");

  auto* cmd_defend = app.add_subcommand("defend", "run the enabled defenses against a checkpoint");
  defend_args.attach(cmd_defend);
  std::string defend_ckpt;
  cmd_defend->add_option("--ckpt", defend_ckpt, "checkpoint to analyze")->required();

  auto* cmd_hpmi = app.add_subcommand("hpmi", "full pipeline: train, scan, prune, inject, verify, defend");
  hpmi_args.attach(cmd_hpmi);

  auto* cmd_dp = app.add_subcommand("dp-baseline", "data-poisoning baseline with the same trigger");
  dp_args.attach(cmd_dp);

  auto* cmd_report = app.add_subcommand("report", "summarize an emitted report.json");
  std::string report_dir;
  cmd_report->add_option("--dir", report_dir, "experiment output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_train->parsed()) {
      const ExperimentConfig cfg = train_args.load();
      const hpmi::SplitDataset data = hpmi::build_dataset(cfg);
      hpmi::TrainOptions opts = cfg.train;
      opts.seed = hpmi::derive_seed(cfg.seed, 2);
      const auto start = hpmi::init_checkpoint(cfg.model, hpmi::derive_seed(cfg.seed, 1));
      const auto result = hpmi::train_classifier(start, data.train, opts);
      std::filesystem::create_directories(cfg.output_dir);
      const std::string out = train_out.empty() ? cfg.output_dir + "/benign.ckpt" : train_out;
      hpmi::save_checkpoint(result.checkpoint, out);
      std::cout << "saved " << out << "\n  train acc " << (result.accuracy_history.empty() ? 0.0 : result.accuracy_history.back())
                << "\n  val acc   " << hpmi::accuracy(result.checkpoint, data.val) << "\n  test acc  "
                << hpmi::accuracy(result.checkpoint, data.test) << "\n";
    } else if (cmd_scan->parsed()) {
      const ExperimentConfig cfg = scan_args.load();
      const auto ckpt = hpmi::load_checkpoint(scan_ckpt, cfg.model);
      const hpmi::SplitDataset data = hpmi::build_dataset(cfg);
      const hpmi::PruneScanReport scan = hpmi::scan_prune_targets(ckpt, data.val);
      ordered_json out{{"baseline_accuracy", scan.baseline_accuracy},
                       {"per_head_accuracy", scan.per_head_accuracy},
                       {"per_head_cad", scan.per_head_cad},
                       {"selected_head", scan.selected_head}};
      std::cout << out.dump(2) << "\n";
    } else if (cmd_prune->parsed()) {
      const ExperimentConfig cfg = prune_args.load();
      const auto ckpt = hpmi::load_checkpoint(prune_ckpt, cfg.model);
      int64_t head = prune_head_index;
      if (head < 0) {
        const hpmi::SplitDataset data = hpmi::build_dataset(cfg);
        head = hpmi::scan_prune_targets(ckpt, data.val).selected_head;
      }
      const auto pruned = hpmi::prune_head(ckpt, head);
      std::filesystem::create_directories(cfg.output_dir);
      const std::string out = prune_out.empty() ? cfg.output_dir + "/pruned.ckpt" : prune_out;
      hpmi::save_checkpoint(pruned, out);
      std::cout << "pruned head " << head << " -> " << out << "\n";
    } else if (cmd_inject->parsed()) {
      const ExperimentConfig cfg = inject_args.load();
      const auto pruned = hpmi::load_checkpoint(inject_pruned, cfg.model);
      const auto malicious = hpmi::load_checkpoint(inject_malicious, hpmi::malicious_config_for(cfg.model));
      const double a = cfg.explicit_offset > 0.0 ? cfg.explicit_offset : 1.0;
      const auto plan = hpmi::make_surgery_plan(cfg.model, pruned.segmented_head, cfg.target_class, a);
      const auto backdoored = hpmi::inject_head(pruned, malicious, plan, inject_signed);
      std::filesystem::create_directories(cfg.output_dir);
      const std::string out = inject_out.empty() ? cfg.output_dir + "/backdoored.ckpt" : inject_out;
      hpmi::save_checkpoint(backdoored, out);
      const auto iso = hpmi::check_static_isolation(backdoored, plan.head_index);
      std::cout << "injected head " << plan.head_index << " -> " << out
                << "\n  static isolation " << (iso.pass ? "pass" : "FAIL") << "\n";
    } else if (cmd_verify->parsed()) {
      const auto pruned = hpmi::load_checkpoint(verify_pruned);
      const auto backdoored = hpmi::load_checkpoint(verify_backdoored);
      const auto malicious = hpmi::load_checkpoint(verify_malicious);
      hpmi::Rng rng(hpmi::derive_seed(static_cast<uint64_t>(verify_seed), 7));
      std::vector<hpmi::Tensor> inputs;
      for (int64_t i = 0; i < verify_n; ++i) {
        hpmi::Tensor x({pruned.config.num_patches(), pruned.config.patch_dim});
        for (int64_t j = 0; j < x.numel(); ++j) x.at(j) = rng.uniform();
        inputs.push_back(std::move(x));
      }
      const auto r = hpmi::verify_theorem1(pruned, backdoored, malicious, verify_target, inputs, verify_tol);
      const ordered_json out{{"max_off_channel_dev", r.max_off_channel_dev},
                             {"max_on_channel_dev", r.max_on_channel_dev},
                             {"n_inputs", r.n_inputs},
                             {"pass", r.pass}};
      std::cout << out.dump(2) << "\n";
      return r.pass ? 0 : 1;
    } else if (cmd_defend->parsed()) {
      ExperimentConfig cfg = defend_args.load();
      const auto ckpt = hpmi::load_checkpoint(defend_ckpt, cfg.model);
      const hpmi::SplitDataset data = hpmi::build_dataset(cfg);
      const hpmi::Trigger trig = hpmi::build_trigger(cfg);
      const hpmi::PoisonedDataset paired = hpmi::poison_dataset(data.test, trig, hpmi::PoisonMode::test_paired());

      ordered_json doc;
      doc["kind"] = "defend";
      if (cfg.defenses.strip.enabled) {
        hpmi::PoisonedDataset samples;
        const auto n_c = std::min<size_t>(static_cast<size_t>(cfg.defenses.strip.n_clean), data.test.size());
        const auto n_p = std::min<size_t>(static_cast<size_t>(cfg.defenses.strip.n_poisoned), data.test.size());
        for (size_t i = 0; i < n_c; ++i) {
          samples.data.inputs.push_back(data.test.inputs[i]);
          samples.data.labels.push_back(data.test.labels[i]);
          samples.poisoned.push_back(0);
        }
        for (size_t i = 0; i < n_p; ++i) {
          samples.data.inputs.push_back(hpmi::apply_trigger(data.test.inputs[i], trig));
          samples.data.labels.push_back(data.test.labels[i]);
          samples.poisoned.push_back(1);
        }
        const auto r = hpmi::strip_scan(ckpt, samples, data.train, cfg.defenses.strip.config,
                                        hpmi::derive_seed(cfg.seed, 8));
        doc["strip"] = ordered_json{{"far", r.far}, {"threshold", r.threshold}, {"observed_frr", r.observed_frr}};
      }
      if (cfg.defenses.fine_pruning.enabled) {
        const auto curve = hpmi::fine_prune(ckpt, data.val, paired, cfg.target_class,
                                            cfg.defenses.fine_pruning.step_size, cfg.defenses.fine_pruning.max_fraction);
        ordered_json points = ordered_json::array();
        for (const auto& p : curve) {
          points.push_back(ordered_json{{"pruned", p.pruned_count}, {"ca", p.clean_accuracy}, {"asr", p.attack_success_rate}});
        }
        doc["fine_pruning"] = points;
      }
      if (cfg.defenses.neural_cleanse.enabled) {
        const auto r = hpmi::neural_cleanse(ckpt, data.val, cfg.defenses.neural_cleanse.config,
                                            hpmi::derive_seed(cfg.seed, 9));
        ordered_json norms = ordered_json::array();
        for (const auto& pc : r.per_class) norms.push_back(pc.mask_norm);
        doc["neural_cleanse"] = ordered_json{{"mask_norms", norms},
                                             {"target_anomaly_index", r.anomaly[static_cast<size_t>(cfg.target_class)]}};
      }
      std::cout << doc.dump(2) << "\n";
    } else if (cmd_hpmi->parsed()) {
      const ExperimentConfig cfg = hpmi_args.load();
      const hpmi::ExperimentReport report = hpmi::run_hpmi(cfg);
      std::cout << "report written to " << cfg.output_dir << "/report.json\n";
      print_metric_rows(report.doc);
    } else if (cmd_dp->parsed()) {
      const ExperimentConfig cfg = dp_args.load();
      const hpmi::ExperimentReport report = hpmi::run_dp_baseline(cfg);
      std::cout << "report written to " << cfg.output_dir << "/report.json\n";
      print_metric_rows(report.doc);
    } else if (cmd_report->parsed()) {
      std::ifstream f(report_dir + "/report.json");
      if (!f) throw std::runtime_error("cannot open " + report_dir + "/report.json");
      const auto doc = ordered_json::parse(f);
      std::cout << "kind: " << doc.at("kind").get<std::string>() << "\nschema_version: "
                << doc.at("schema_version").get<int64_t>() << "\nstages:";
      for (const auto& s : doc.at("stages")) std::cout << ' ' << s.get<std::string>();
      std::cout << "\n";
      print_metric_rows(doc);
      if (doc.contains("defenses")) {
        const auto& d = doc.at("defenses");
        if (d.contains("strip")) std::cout << "  strip FAR " << d.at("strip").at("far").get<double>() << "\n";
        if (d.contains("neural_cleanse") && !d.at("neural_cleanse").at("target_anomaly_index").is_null()) {
          std::cout << "  NC target anomaly " << d.at("neural_cleanse").at("target_anomaly_index").get<double>() << "\n";
        }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
