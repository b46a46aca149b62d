#include "hpmi/surgery.hpp"

#include <algorithm>
#include <cmath>

#include "hpmi/graph.hpp"

namespace hpmi {

SurgeryPlan make_surgery_plan(const ModelConfig& config, int64_t head_index, int64_t target_class, double offset) {
  config.validate();
  if (head_index < 0 || head_index >= config.heads) {
    throw ContractError("surgery plan: head index " + std::to_string(head_index) + " out of [0," +
                        std::to_string(config.heads) + ")");
  }
  if (target_class < 0 || target_class >= config.classes) {
    throw ContractError("surgery plan: target class " + std::to_string(target_class) + " out of [0," +
                        std::to_string(config.classes) + ")");
  }
  if (!(offset > 0.0)) throw ContractError("surgery plan: offset must be positive");
  SurgeryPlan plan;
  plan.head_index = head_index;
  plan.target_class = target_class;
  plan.offset = offset;
  plan.attn_lo = head_index * config.head_width;
  plan.attn_hi = plan.attn_lo + config.head_width;
  plan.ffn_lo = head_index * config.ffn_per_head();
  plan.ffn_hi = plan.ffn_lo + config.ffn_per_head();
  return plan;
}

Tensor segmented_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                            std::pair<int64_t, int64_t> seg1, std::pair<int64_t, int64_t> seg2,
                            std::pair<int64_t, int64_t> seg3) {
  if (x.rank() != 2) throw ShapeError("segmented_layer_norm: expected 2-d input, got " + x.shape_string());
  const int64_t d = x.cols();
  if (seg1.first != 0 || seg1.second != seg2.first || seg2.second != seg3.first || seg3.second != d ||
      seg1.first > seg1.second || seg2.first >= seg2.second || seg3.first > seg3.second) {
    throw ContractError("segmented_layer_norm: segments do not partition [0," + std::to_string(d) + ")");
  }
  Graph g;
  const NodeId out =
      g.segmented_layer_norm(g.input(x), g.input(gamma), g.input(beta), eps, seg2.first, seg2.second);
  return g.value(out);
}

TransformerCheckpoint prune_head(const TransformerCheckpoint& ckpt, int64_t head_index) {
  ckpt.validate();
  const ModelConfig& c = ckpt.config;
  if (head_index < 0 || head_index >= c.heads) {
    throw ContractError("prune_head: head index " + std::to_string(head_index) + " out of [0," +
                        std::to_string(c.heads) + ")");
  }
  const int64_t a_lo = head_index * c.head_width;
  const int64_t a_hi = a_lo + c.head_width;
  const int64_t f_lo = head_index * c.ffn_per_head();
  const int64_t f_hi = f_lo + c.ffn_per_head();
  const int64_t d = c.model_width();

  TransformerCheckpoint out = ckpt;
  for (int64_t j = a_lo; j < a_hi; ++j) {
    for (int64_t r = 0; r < out.embed.rows(); ++r) out.embed.at(r, j) = 0.0;
    for (int64_t r = 0; r < out.pos.rows(); ++r) out.pos.at(r, j) = 0.0;
    for (int64_t cc = 0; cc < c.classes; ++cc) out.classifier_w.at(j, cc) = 0.0;
  }

  for (LayerWeights& l : out.layers) {
    // The pruned head loses its projections entirely; every surviving head
    // loses its reads of the channel slice so nothing downstream of the
    // channel can leak back into the rest.
    for (int64_t h = 0; h < c.heads; ++h) {
      auto& q = l.wq[static_cast<size_t>(h)];
      auto& k = l.wk[static_cast<size_t>(h)];
      auto& v = l.wv[static_cast<size_t>(h)];
      const int64_t row_lo = h == head_index ? 0 : a_lo;
      const int64_t row_hi = h == head_index ? d : a_hi;
      for (int64_t r = row_lo; r < row_hi; ++r) {
        for (int64_t cc = 0; cc < c.head_width; ++cc) {
          q.at(r, cc) = 0.0;
          k.at(r, cc) = 0.0;
          v.at(r, cc) = 0.0;
        }
      }
    }
    for (int64_t r = a_lo; r < a_hi; ++r) {
      for (int64_t cc = 0; cc < d; ++cc) l.w0.at(r, cc) = 0.0;
    }
    for (int64_t r = 0; r < d; ++r) {
      for (int64_t cc = a_lo; cc < a_hi; ++cc) l.w0.at(r, cc) = 0.0;
    }
    for (int64_t j = a_lo; j < a_hi; ++j) {
      l.b0.at(j) = 0.0;
      l.ln1_gamma.at(j) = 0.0;
      l.ln1_beta.at(j) = 0.0;
      l.b2.at(j) = 0.0;
      l.ln2_gamma.at(j) = 0.0;
      l.ln2_beta.at(j) = 0.0;
    }
    for (int64_t r = a_lo; r < a_hi; ++r) {
      for (int64_t cc = 0; cc < c.ffn_width; ++cc) l.w1.at(r, cc) = 0.0;
    }
    for (int64_t r = 0; r < d; ++r) {
      for (int64_t cc = f_lo; cc < f_hi; ++cc) l.w1.at(r, cc) = 0.0;
    }
    for (int64_t j = f_lo; j < f_hi; ++j) l.b1.at(j) = 0.0;
    for (int64_t r = f_lo; r < f_hi; ++r) {
      for (int64_t cc = 0; cc < d; ++cc) l.w2.at(r, cc) = 0.0;
    }
    for (int64_t r = 0; r < c.ffn_width; ++r) {
      for (int64_t cc = a_lo; cc < a_hi; ++cc) l.w2.at(r, cc) = 0.0;
    }
  }

  out.segmented_head = head_index;
  return out;
}

PruneScanReport scan_prune_targets(const TransformerCheckpoint& ckpt, const Dataset& validation) {
  if (validation.empty()) throw ContractError("scan_prune_targets: empty validation set");
  if (ckpt.config.heads < 2) {
    throw ContractError("scan_prune_targets: model has a single head; pruning it would leave no classifier");
  }
  PruneScanReport report;
  report.baseline_accuracy = accuracy(ckpt, validation);
  for (int64_t i = 0; i < ckpt.config.heads; ++i) {
    const double acc = accuracy(prune_head(ckpt, i), validation);
    report.per_head_accuracy.push_back(acc);
    report.per_head_cad.push_back(acc - report.baseline_accuracy);
  }
  report.selected_head = 0;
  for (int64_t i = 1; i < ckpt.config.heads; ++i) {
    if (report.per_head_accuracy[static_cast<size_t>(i)] >
        report.per_head_accuracy[static_cast<size_t>(report.selected_head)]) {
      report.selected_head = i;
    }
  }
  return report;
}

namespace {

void require_injectable(const TransformerCheckpoint& pruned, const TransformerCheckpoint& malicious,
                        const SurgeryPlan& plan) {
  pruned.validate();
  malicious.validate();
  if (pruned.segmented_head != plan.head_index) {
    throw ContractError("inject_head: pruned checkpoint is segmented at head " +
                        std::to_string(pruned.segmented_head) + ", plan targets head " +
                        std::to_string(plan.head_index));
  }
  if (malicious.segmented_head >= 0) throw ContractError("inject_head: malicious checkpoint must use standard norm");
  const ModelConfig expected = malicious_config_for(pruned.config);
  if (!(malicious.config == expected)) {
    throw ContractError("inject_head: malicious config mismatch in fields: " + expected.diff(malicious.config));
  }
  if (plan.target_class < 0 || plan.target_class >= pruned.config.classes) {
    throw ContractError("inject_head: target class out of range");
  }
}

}  // namespace

TransformerCheckpoint inject_head(const TransformerCheckpoint& pruned, const TransformerCheckpoint& malicious,
                                  const SurgeryPlan& plan, bool signed_routing) {
  require_injectable(pruned, malicious, plan);
  const ModelConfig& c = pruned.config;
  const int64_t a_lo = plan.attn_lo;
  const int64_t f_lo = plan.ffn_lo;
  const int64_t d_h = c.head_width;
  const int64_t ffn_h = c.ffn_per_head();

  TransformerCheckpoint out = pruned;
  for (int64_t r = 0; r < out.embed.rows(); ++r) {
    for (int64_t j = 0; j < d_h; ++j) out.embed.at(r, a_lo + j) = malicious.embed.at(r, j);
  }
  for (int64_t r = 0; r < out.pos.rows(); ++r) {
    for (int64_t j = 0; j < d_h; ++j) out.pos.at(r, a_lo + j) = malicious.pos.at(r, j);
  }

  for (size_t li = 0; li < out.layers.size(); ++li) {
    LayerWeights& l = out.layers[li];
    const LayerWeights& m = malicious.layers[li];
    auto& q = l.wq[static_cast<size_t>(plan.head_index)];
    auto& k = l.wk[static_cast<size_t>(plan.head_index)];
    auto& v = l.wv[static_cast<size_t>(plan.head_index)];
    // The injected head reads only its own slice: rows outside [a_lo, a_hi)
    // stay zero from the pruning step.
    for (int64_t r = 0; r < d_h; ++r) {
      for (int64_t cc = 0; cc < d_h; ++cc) {
        q.at(a_lo + r, cc) = m.wq[0].at(r, cc);
        k.at(a_lo + r, cc) = m.wk[0].at(r, cc);
        v.at(a_lo + r, cc) = m.wv[0].at(r, cc);
      }
    }
    for (int64_t r = 0; r < d_h; ++r) {
      for (int64_t cc = 0; cc < d_h; ++cc) l.w0.at(a_lo + r, a_lo + cc) = m.w0.at(r, cc);
    }
    for (int64_t j = 0; j < d_h; ++j) {
      l.b0.at(a_lo + j) = m.b0.at(j);
      l.ln1_gamma.at(a_lo + j) = m.ln1_gamma.at(j);
      l.ln1_beta.at(a_lo + j) = m.ln1_beta.at(j);
      l.b2.at(a_lo + j) = m.b2.at(j);
      l.ln2_gamma.at(a_lo + j) = m.ln2_gamma.at(j);
      l.ln2_beta.at(a_lo + j) = m.ln2_beta.at(j);
    }
    for (int64_t r = 0; r < d_h; ++r) {
      for (int64_t cc = 0; cc < ffn_h; ++cc) l.w1.at(a_lo + r, f_lo + cc) = m.w1.at(r, cc);
    }
    for (int64_t j = 0; j < ffn_h; ++j) l.b1.at(f_lo + j) = m.b1.at(j);
    for (int64_t r = 0; r < ffn_h; ++r) {
      for (int64_t cc = 0; cc < d_h; ++cc) l.w2.at(f_lo + r, a_lo + cc) = m.w2.at(r, cc);
    }
  }

  // Route the channel's class-token readout into the target logit. The
  // malicious readout direction lands in the channel rows of W^f; all other
  // logits keep zero rows there unless signed routing is requested.
  for (int64_t j = 0; j < d_h; ++j) {
    const double w = malicious.classifier_w.at(j, 0);
    out.classifier_w.at(a_lo + j, plan.target_class) = w;
    if (signed_routing) {
      for (int64_t y = 0; y < c.classes; ++y) {
        if (y != plan.target_class) out.classifier_w.at(a_lo + j, y) = -w;
      }
    }
  }
  out.classifier_b.at(plan.target_class) += malicious.classifier_b.at(0);
  if (signed_routing) {
    for (int64_t y = 0; y < c.classes; ++y) {
      if (y != plan.target_class) out.classifier_b.at(y) -= malicious.classifier_b.at(0);
    }
  }

  return out;
}

TransformerCheckpoint extract_head(const TransformerCheckpoint& ckpt, int64_t head_index) {
  ckpt.validate();
  const ModelConfig& c = ckpt.config;
  if (head_index < 0 || head_index >= c.heads) throw ContractError("extract_head: head index out of range");
  const int64_t a_lo = head_index * c.head_width;
  const int64_t f_lo = head_index * c.ffn_per_head();
  const int64_t d_h = c.head_width;
  const int64_t ffn_h = c.ffn_per_head();

  TransformerCheckpoint m;
  m.config = malicious_config_for(c);
  m.segmented_head = -1;
  m.embed = Tensor({c.patch_dim + 1, d_h});
  for (int64_t r = 0; r < m.embed.rows(); ++r) {
    for (int64_t j = 0; j < d_h; ++j) m.embed.at(r, j) = ckpt.embed.at(r, a_lo + j);
  }
  m.pos = Tensor({c.tokens, d_h});
  for (int64_t r = 0; r < m.pos.rows(); ++r) {
    for (int64_t j = 0; j < d_h; ++j) m.pos.at(r, j) = ckpt.pos.at(r, a_lo + j);
  }
  for (const LayerWeights& l : ckpt.layers) {
    LayerWeights ml;
    Tensor q({d_h, d_h}), k({d_h, d_h}), v({d_h, d_h});
    for (int64_t r = 0; r < d_h; ++r) {
      for (int64_t cc = 0; cc < d_h; ++cc) {
        q.at(r, cc) = l.wq[static_cast<size_t>(head_index)].at(a_lo + r, cc);
        k.at(r, cc) = l.wk[static_cast<size_t>(head_index)].at(a_lo + r, cc);
        v.at(r, cc) = l.wv[static_cast<size_t>(head_index)].at(a_lo + r, cc);
      }
    }
    ml.wq.push_back(std::move(q));
    ml.wk.push_back(std::move(k));
    ml.wv.push_back(std::move(v));
    ml.w0 = Tensor({d_h, d_h});
    for (int64_t r = 0; r < d_h; ++r)
      for (int64_t cc = 0; cc < d_h; ++cc) ml.w0.at(r, cc) = l.w0.at(a_lo + r, a_lo + cc);
    ml.b0 = Tensor({d_h});
    ml.ln1_gamma = Tensor({d_h});
    ml.ln1_beta = Tensor({d_h});
    ml.b2 = Tensor({d_h});
    ml.ln2_gamma = Tensor({d_h});
    ml.ln2_beta = Tensor({d_h});
    for (int64_t j = 0; j < d_h; ++j) {
      ml.b0.at(j) = l.b0.at(a_lo + j);
      ml.ln1_gamma.at(j) = l.ln1_gamma.at(a_lo + j);
      ml.ln1_beta.at(j) = l.ln1_beta.at(a_lo + j);
      ml.b2.at(j) = l.b2.at(a_lo + j);
      ml.ln2_gamma.at(j) = l.ln2_gamma.at(a_lo + j);
      ml.ln2_beta.at(j) = l.ln2_beta.at(a_lo + j);
    }
    ml.w1 = Tensor({d_h, ffn_h});
    for (int64_t r = 0; r < d_h; ++r)
      for (int64_t cc = 0; cc < ffn_h; ++cc) ml.w1.at(r, cc) = l.w1.at(a_lo + r, f_lo + cc);
    ml.b1 = Tensor({ffn_h});
    for (int64_t j = 0; j < ffn_h; ++j) ml.b1.at(j) = l.b1.at(f_lo + j);
    ml.w2 = Tensor({ffn_h, d_h});
    for (int64_t r = 0; r < ffn_h; ++r)
      for (int64_t cc = 0; cc < d_h; ++cc) ml.w2.at(r, cc) = l.w2.at(f_lo + r, a_lo + cc);
    m.layers.push_back(std::move(ml));
  }
  m.classifier_w = Tensor::zeros({d_h, 1});
  m.classifier_b = Tensor::zeros({1});
  return m;
}

TheoremReport verify_theorem1(const TransformerCheckpoint& pruned, const TransformerCheckpoint& backdoored,
                              const TransformerCheckpoint& malicious, int64_t target_class,
                              const std::vector<Tensor>& inputs, double tolerance) {
  if (!(pruned.config == backdoored.config)) {
    throw ContractError("verify_theorem1: pruned/backdoored config mismatch in fields: " +
                        pruned.config.diff(backdoored.config));
  }
  const ModelConfig expected = malicious_config_for(pruned.config);
  if (!(malicious.config == expected)) {
    throw ContractError("verify_theorem1: malicious config mismatch in fields: " + expected.diff(malicious.config));
  }
  if (target_class < 0 || target_class >= pruned.config.classes) {
    throw ContractError("verify_theorem1: target class out of range");
  }

  TheoremReport report;
  report.tolerance = tolerance;
  report.n_inputs = static_cast<int64_t>(inputs.size());
  for (const Tensor& x : inputs) {
    const Tensor lp = forward_logits(pruned, x);
    const Tensor lb = forward_logits(backdoored, x);
    const double s = forward_logits(malicious, x).at(0);
    for (int64_t y = 0; y < pruned.config.classes; ++y) {
      const double delta = lb.at(y) - lp.at(y);
      if (y == target_class) {
        report.max_on_channel_dev = std::max(report.max_on_channel_dev, std::abs(delta - s));
      } else {
        report.max_off_channel_dev = std::max(report.max_off_channel_dev, std::abs(delta));
      }
    }
  }
  report.pass = report.max_off_channel_dev < tolerance && report.max_on_channel_dev < tolerance;
  return report;
}

IsolationReport check_static_isolation(const TransformerCheckpoint& ckpt, int64_t head_index) {
  ckpt.validate();
  const ModelConfig& c = ckpt.config;
  if (head_index < 0 || head_index >= c.heads) throw ContractError("check_static_isolation: head index out of range");
  const int64_t a_lo = head_index * c.head_width;
  const int64_t a_hi = a_lo + c.head_width;
  const int64_t f_lo = head_index * c.ffn_per_head();
  const int64_t f_hi = f_lo + c.ffn_per_head();
  const int64_t d = c.model_width();

  IsolationReport report;
  auto probe = [&](double v) { report.max_abs_coupling = std::max(report.max_abs_coupling, std::abs(v)); };

  for (const LayerWeights& l : ckpt.layers) {
    for (int64_t h = 0; h < c.heads; ++h) {
      // Head h reads rows of z; a read of the channel slice by another head
      // (or a read outside the slice by the channel head) is a coupling.
      const bool channel_head = h == head_index;
      for (int64_t r = 0; r < d; ++r) {
        const bool in_slice = r >= a_lo && r < a_hi;
        if (in_slice == channel_head) continue;
        for (int64_t cc = 0; cc < c.head_width; ++cc) {
          probe(l.wq[static_cast<size_t>(h)].at(r, cc));
          probe(l.wk[static_cast<size_t>(h)].at(r, cc));
          probe(l.wv[static_cast<size_t>(h)].at(r, cc));
        }
      }
    }
    for (int64_t r = 0; r < d; ++r) {
      for (int64_t cc = 0; cc < d; ++cc) {
        const bool row_in = r >= a_lo && r < a_hi;
        const bool col_in = cc >= a_lo && cc < a_hi;
        if (row_in != col_in) probe(l.w0.at(r, cc));
      }
    }
    for (int64_t r = 0; r < d; ++r) {
      for (int64_t cc = 0; cc < c.ffn_width; ++cc) {
        const bool row_in = r >= a_lo && r < a_hi;
        const bool col_in = cc >= f_lo && cc < f_hi;
        if (row_in != col_in) probe(l.w1.at(r, cc));
      }
    }
    for (int64_t r = 0; r < c.ffn_width; ++r) {
      for (int64_t cc = 0; cc < d; ++cc) {
        const bool row_in = r >= f_lo && r < f_hi;
        const bool col_in = cc >= a_lo && cc < a_hi;
        if (row_in != col_in) probe(l.w2.at(r, cc));
      }
    }
  }
  report.pass = report.max_abs_coupling == 0.0;
  return report;
}

double channel_activation_deviation(const TransformerCheckpoint& backdoored, const TransformerCheckpoint& malicious,
                                    int64_t head_index, const Tensor& patches) {
  const ModelConfig expected = malicious_config_for(backdoored.config);
  if (!(malicious.config == expected)) {
    throw ContractError("channel_activation_deviation: malicious config mismatch in fields: " +
                        expected.diff(malicious.config));
  }
  const int64_t a_lo = head_index * backdoored.config.head_width;
  const ForwardTrace big = forward_trace(backdoored, patches);
  const ForwardTrace small = forward_trace(malicious, patches);
  double worst = 0.0;
  for (size_t l = 0; l < big.layer_out.size(); ++l) {
    const Tensor& zb = big.layer_out[l];
    const Tensor& zm = small.layer_out[l];
    for (int64_t t = 0; t < zm.rows(); ++t) {
      for (int64_t j = 0; j < zm.cols(); ++j) {
        worst = std::max(worst, std::abs(zb.at(t, a_lo + j) - zm.at(t, j)));
      }
    }
  }
  return worst;
}

}  // namespace hpmi
