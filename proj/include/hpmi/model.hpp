#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hpmi/dataset.hpp"
#include "hpmi/graph.hpp"
#include "hpmi/tensor.hpp"

namespace hpmi {

struct ModelConfig {
  int64_t layers = 2;
  int64_t heads = 4;
  int64_t head_width = 8;
  int64_t ffn_width = 64;
  int64_t classes = 4;
  int64_t tokens = 17;  // patch count + 1 class token
  int64_t patch_dim = 16;
  double ln_epsilon = 1e-5;

  int64_t model_width() const { return heads * head_width; }
  int64_t num_patches() const { return tokens - 1; }
  int64_t ffn_per_head() const { return ffn_width / heads; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // Fields that differ from `other`, for config-mismatch diagnostics.
  std::string diff(const ModelConfig& other) const;
};

struct LayerWeights {
  std::vector<Tensor> wq, wk, wv;  // per head, [d x d_h]
  Tensor w0, b0;                   // [d x d], [d]
  Tensor ln1_gamma, ln1_beta;      // [d]
  Tensor w1, b1;                   // [d x ffn], [ffn]
  Tensor w2, b2;                   // [ffn x d], [d]
  Tensor ln2_gamma, ln2_beta;      // [d]
};

// Complete weight set of the encoder classifier. segmented_head < 0 means
// standard layer norm; otherwise the norm runs independently on the three
// feature segments around that head's channel slice.
struct TransformerCheckpoint {
  ModelConfig config;
  int64_t segmented_head = -1;
  Tensor embed;  // [(patch_dim + 1) x d], row 0 is the learned class token
  Tensor pos;    // [tokens x d]
  std::vector<LayerWeights> layers;
  Tensor classifier_w;  // [d x classes]
  Tensor classifier_b;  // [classes]

  void validate() const;
};

// Truncated-normal (clip 2 sigma, sigma 0.02) weights, zero biases, unit
// layer-norm gains. Deterministic per seed.
TransformerCheckpoint init_checkpoint(const ModelConfig& config, uint64_t seed);

// Single-head companion architecture: same depth and token layout, width
// d_h, one ffn slot per layer, scalar readout.
ModelConfig malicious_config_for(const ModelConfig& target);

// Canonical tensor traversal (declaration order of the checkpoint format).
// `fn` is called as fn(name, tensor) for every weight tensor.
template <class Ckpt, class Fn>
void for_each_tensor(Ckpt& c, Fn&& fn) {
  fn("embed", c.embed);
  fn("pos", c.pos);
  for (size_t l = 0; l < c.layers.size(); ++l) {
    auto& layer = c.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for (size_t h = 0; h < layer.wq.size(); ++h) {
      fn((prefix + "wq" + std::to_string(h)).c_str(), layer.wq[h]);
      fn((prefix + "wk" + std::to_string(h)).c_str(), layer.wk[h]);
      fn((prefix + "wv" + std::to_string(h)).c_str(), layer.wv[h]);
    }
    fn((prefix + "w0").c_str(), layer.w0);
    fn((prefix + "b0").c_str(), layer.b0);
    fn((prefix + "ln1_gamma").c_str(), layer.ln1_gamma);
    fn((prefix + "ln1_beta").c_str(), layer.ln1_beta);
    fn((prefix + "w1").c_str(), layer.w1);
    fn((prefix + "b1").c_str(), layer.b1);
    fn((prefix + "w2").c_str(), layer.w2);
    fn((prefix + "b2").c_str(), layer.b2);
    fn((prefix + "ln2_gamma").c_str(), layer.ln2_gamma);
    fn((prefix + "ln2_beta").c_str(), layer.ln2_beta);
  }
  fn("classifier_w", c.classifier_w);
  fn("classifier_b", c.classifier_b);
}

// ---- Graph construction ----

struct CheckpointNodes {
  NodeId embed, pos;
  struct Layer {
    std::vector<NodeId> wq, wk, wv;
    NodeId w0, b0, ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta;
  };
  std::vector<Layer> layers;
  NodeId classifier_w, classifier_b;
  std::vector<NodeId> flat;  // canonical order, aligned with for_each_tensor
};

// Binds every checkpoint tensor into the graph, as parameters when
// `trainable`, otherwise as constants.
CheckpointNodes bind_checkpoint(Graph& g, const TransformerCheckpoint& ckpt, bool trainable);

struct ForwardNodes {
  NodeId patches;                  // [T-1 x patch_dim]
  std::vector<NodeId> layer_out;   // z_0 .. z_L, each [T x d]
  std::vector<NodeId> ffn_hidden;  // per layer, activation output [T x ffn]
  NodeId class_token;              // [1 x d]
  NodeId logits;                   // [1 x C]
};

ForwardNodes build_forward(Graph& g, const CheckpointNodes& w, const ModelConfig& config, int64_t segmented_head,
                           NodeId patches);

// Shared single-head attention subgraph: softmax((zWq)(zWk)^T / sqrt(d_h)) (zWv).
NodeId attention_head_nodes(Graph& g, NodeId z, NodeId wq, NodeId wk, NodeId wv);

// ---- Plain-tensor entry points ----

Tensor embed(const TransformerCheckpoint& ckpt, const Tensor& patches);                       // [T x d]
Tensor attention_head(const Tensor& z, const Tensor& wq, const Tensor& wk, const Tensor& wv);  // [T x d_h]
Tensor encoder_layer(const Tensor& z_prev, const LayerWeights& layer, const ModelConfig& config,
                     int64_t segmented_head);

Tensor forward_logits(const TransformerCheckpoint& ckpt, const Tensor& patches);  // [C]
int64_t predict(const TransformerCheckpoint& ckpt, const Tensor& patches);

struct ForwardTrace {
  Tensor logits;                  // [C]
  std::vector<Tensor> layer_out;  // z_0 .. z_L
};
ForwardTrace forward_trace(const TransformerCheckpoint& ckpt, const Tensor& patches);

// One shared weight binding per batch; cheaper than per-sample graphs.
std::vector<Tensor> batch_forward_logits(const TransformerCheckpoint& ckpt, const std::vector<Tensor>& inputs);

double accuracy(const TransformerCheckpoint& ckpt, const Dataset& data);

// ---- Training ----

struct TrainOptions {
  int64_t epochs = 30;
  double lr = 1e-3;
  int64_t batch_size = 32;
  uint64_t seed = 0;
};

struct TrainResult {
  TransformerCheckpoint checkpoint;
  std::vector<double> accuracy_history;  // per-epoch training accuracy
};

// Cross-entropy + Adam over every weight tensor. Deterministic per seed;
// zero epochs returns the start checkpoint unchanged.
TrainResult train_classifier(const TransformerCheckpoint& start, const Dataset& data, const TrainOptions& opts);

}  // namespace hpmi
