#include "hpmi/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hpmi/adam.hpp"
#include "hpmi/rng.hpp"

namespace hpmi {

void ModelConfig::validate() const {
  if (layers < 1) throw ContractError("model config: layers must be >= 1");
  if (heads < 1 || head_width < 1) throw ContractError("model config: heads and head_width must be >= 1");
  if (ffn_width < 1 || ffn_width % heads != 0) {
    throw ContractError("model config: ffn_width " + std::to_string(ffn_width) + " must be a positive multiple of heads " +
                        std::to_string(heads));
  }
  if (classes < 1) throw ContractError("model config: classes must be >= 1");
  if (tokens < 2) throw ContractError("model config: tokens must be >= 2");
  if (patch_dim < 1) throw ContractError("model config: patch_dim must be >= 1");
  if (ln_epsilon <= 0.0) throw ContractError("model config: ln_epsilon must be positive");
}

std::string ModelConfig::diff(const ModelConfig& other) const {
  std::ostringstream os;
  auto field = [&](const char* name, auto a, auto b) {
    if (a != b) os << name << " (" << a << " vs " << b << ") ";
  };
  field("layers", layers, other.layers);
  field("heads", heads, other.heads);
  field("head_width", head_width, other.head_width);
  field("ffn_width", ffn_width, other.ffn_width);
  field("classes", classes, other.classes);
  field("tokens", tokens, other.tokens);
  field("patch_dim", patch_dim, other.patch_dim);
  field("ln_epsilon", ln_epsilon, other.ln_epsilon);
  return os.str();
}

void TransformerCheckpoint::validate() const {
  config.validate();
  const int64_t d = config.model_width();
  auto expect = [&](const Tensor& t, std::vector<int64_t> shape, const char* name) {
    if (t.shape() != shape) {
      throw ShapeError(std::string("checkpoint: ") + name + " has shape " + t.shape_string() + ", expected " +
                       shape_to_string(shape));
    }
  };
  expect(embed, {config.patch_dim + 1, d}, "embed");
  expect(pos, {config.tokens, d}, "pos");
  if (static_cast<int64_t>(layers.size()) != config.layers) {
    throw ShapeError("checkpoint: layer count " + std::to_string(layers.size()) + " vs config " +
                     std::to_string(config.layers));
  }
  for (const LayerWeights& l : layers) {
    if (static_cast<int64_t>(l.wq.size()) != config.heads || static_cast<int64_t>(l.wk.size()) != config.heads ||
        static_cast<int64_t>(l.wv.size()) != config.heads) {
      throw ShapeError("checkpoint: per-head projection count mismatch");
    }
    for (int64_t h = 0; h < config.heads; ++h) {
      expect(l.wq[static_cast<size_t>(h)], {d, config.head_width}, "wq");
      expect(l.wk[static_cast<size_t>(h)], {d, config.head_width}, "wk");
      expect(l.wv[static_cast<size_t>(h)], {d, config.head_width}, "wv");
    }
    expect(l.w0, {d, d}, "w0");
    expect(l.b0, {d}, "b0");
    expect(l.ln1_gamma, {d}, "ln1_gamma");
    expect(l.ln1_beta, {d}, "ln1_beta");
    expect(l.w1, {d, config.ffn_width}, "w1");
    expect(l.b1, {config.ffn_width}, "b1");
    expect(l.w2, {config.ffn_width, d}, "w2");
    expect(l.b2, {d}, "b2");
    expect(l.ln2_gamma, {d}, "ln2_gamma");
    expect(l.ln2_beta, {d}, "ln2_beta");
  }
  expect(classifier_w, {d, config.classes}, "classifier_w");
  expect(classifier_b, {config.classes}, "classifier_b");
  if (segmented_head >= config.heads) {
    throw ContractError("checkpoint: segmented head " + std::to_string(segmented_head) + " out of range");
  }
}

TransformerCheckpoint init_checkpoint(const ModelConfig& config, uint64_t seed) {
  config.validate();
  const int64_t d = config.model_width();
  constexpr double kSigma = 0.02;
  Rng rng(derive_seed(seed, 100));
  auto weights = [&](std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.trunc_normal(kSigma);
    return t;
  };

  TransformerCheckpoint c;
  c.config = config;
  c.embed = weights({config.patch_dim + 1, d});
  c.pos = weights({config.tokens, d});
  c.layers.resize(static_cast<size_t>(config.layers));
  for (LayerWeights& l : c.layers) {
    for (int64_t h = 0; h < config.heads; ++h) {
      l.wq.push_back(weights({d, config.head_width}));
      l.wk.push_back(weights({d, config.head_width}));
      l.wv.push_back(weights({d, config.head_width}));
    }
    l.w0 = weights({d, d});
    l.b0 = Tensor::zeros({d});
    l.ln1_gamma = Tensor::full({d}, 1.0);
    l.ln1_beta = Tensor::zeros({d});
    l.w1 = weights({d, config.ffn_width});
    l.b1 = Tensor::zeros({config.ffn_width});
    l.w2 = weights({config.ffn_width, d});
    l.b2 = Tensor::zeros({d});
    l.ln2_gamma = Tensor::full({d}, 1.0);
    l.ln2_beta = Tensor::zeros({d});
  }
  c.classifier_w = weights({d, config.classes});
  c.classifier_b = Tensor::zeros({config.classes});
  return c;
}

ModelConfig malicious_config_for(const ModelConfig& target) {
  ModelConfig m = target;
  m.heads = 1;
  m.head_width = target.head_width;
  m.ffn_width = target.ffn_per_head();
  m.classes = 1;
  return m;
}

CheckpointNodes bind_checkpoint(Graph& g, const TransformerCheckpoint& ckpt, bool trainable) {
  CheckpointNodes n;
  auto bind = [&](const Tensor& t) {
    const NodeId id = trainable ? g.parameter(t) : g.input(t);
    n.flat.push_back(id);
    return id;
  };
  n.embed = bind(ckpt.embed);
  n.pos = bind(ckpt.pos);
  for (const LayerWeights& l : ckpt.layers) {
    CheckpointNodes::Layer ln;
    for (size_t h = 0; h < l.wq.size(); ++h) {
      ln.wq.push_back(bind(l.wq[h]));
      ln.wk.push_back(bind(l.wk[h]));
      ln.wv.push_back(bind(l.wv[h]));
    }
    ln.w0 = bind(l.w0);
    ln.b0 = bind(l.b0);
    ln.ln1_gamma = bind(l.ln1_gamma);
    ln.ln1_beta = bind(l.ln1_beta);
    ln.w1 = bind(l.w1);
    ln.b1 = bind(l.b1);
    ln.w2 = bind(l.w2);
    ln.b2 = bind(l.b2);
    ln.ln2_gamma = bind(l.ln2_gamma);
    ln.ln2_beta = bind(l.ln2_beta);
    n.layers.push_back(std::move(ln));
  }
  n.classifier_w = bind(ckpt.classifier_w);
  n.classifier_b = bind(ckpt.classifier_b);
  return n;
}

NodeId attention_head_nodes(Graph& g, NodeId z, NodeId wq, NodeId wk, NodeId wv) {
  const int64_t d_h = g.value(wq).cols();
  const NodeId q = g.matmul(z, wq);
  const NodeId k = g.matmul(z, wk);
  const NodeId v = g.matmul(z, wv);
  const NodeId scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_h)));
  return g.matmul(g.softmax_rows(scores), v);
}

namespace {

// Norm segments follow Eq-form composition: standard over the full width or
// independent over (pre-channel, channel, post-channel).
NodeId norm_nodes(Graph& g, NodeId x, NodeId gamma, NodeId beta, const ModelConfig& config, int64_t segmented_head) {
  if (segmented_head < 0) return g.layer_norm(x, gamma, beta, config.ln_epsilon);
  const int64_t lo = segmented_head * config.head_width;
  return g.segmented_layer_norm(x, gamma, beta, config.ln_epsilon, lo, lo + config.head_width);
}

NodeId encoder_layer_nodes(Graph& g, NodeId z_prev, const CheckpointNodes::Layer& w, const ModelConfig& config,
                           int64_t segmented_head, NodeId* ffn_hidden_out) {
  std::vector<NodeId> heads;
  heads.reserve(w.wq.size());
  for (size_t h = 0; h < w.wq.size(); ++h) {
    heads.push_back(attention_head_nodes(g, z_prev, w.wq[h], w.wk[h], w.wv[h]));
  }
  const NodeId concat = heads.size() == 1 ? heads[0] : g.concat_cols(heads);
  const NodeId attn = g.add_row_broadcast(g.matmul(concat, w.w0), w.b0);
  const NodeId z_mid = g.add(norm_nodes(g, attn, w.ln1_gamma, w.ln1_beta, config, segmented_head), z_prev);

  const NodeId hidden = g.gelu(g.add_row_broadcast(g.matmul(z_mid, w.w1), w.b1));
  if (ffn_hidden_out) *ffn_hidden_out = hidden;
  const NodeId ffn = g.add_row_broadcast(g.matmul(hidden, w.w2), w.b2);
  return g.add(norm_nodes(g, ffn, w.ln2_gamma, w.ln2_beta, config, segmented_head), z_mid);
}

NodeId embed_nodes(Graph& g, const CheckpointNodes& w, const ModelConfig& config, NodeId patches) {
  const Tensor& x = g.value(patches);
  if (x.rank() != 2 || x.rows() != config.num_patches() || x.cols() != config.patch_dim) {
    throw ShapeError("embed: input " + x.shape_string() + ", expected " +
                     shape_to_string({config.num_patches(), config.patch_dim}));
  }
  const NodeId class_row = g.slice_rows(w.embed, 0, 1);
  const NodeId patch_matrix = g.slice_rows(w.embed, 1, config.patch_dim + 1);
  const NodeId body = g.matmul(patches, patch_matrix);
  return g.add(g.concat_rows({class_row, body}), w.pos);
}

}  // namespace

ForwardNodes build_forward(Graph& g, const CheckpointNodes& w, const ModelConfig& config, int64_t segmented_head,
                           NodeId patches) {
  ForwardNodes out;
  out.patches = patches;
  out.layer_out.push_back(embed_nodes(g, w, config, patches));
  for (size_t l = 0; l < w.layers.size(); ++l) {
    NodeId hidden = -1;
    out.layer_out.push_back(encoder_layer_nodes(g, out.layer_out.back(), w.layers[l], config, segmented_head, &hidden));
    out.ffn_hidden.push_back(hidden);
  }
  out.class_token = g.slice_rows(out.layer_out.back(), 0, 1);
  out.logits = g.add_row_broadcast(g.matmul(out.class_token, w.classifier_w), w.classifier_b);
  return out;
}

Tensor embed(const TransformerCheckpoint& ckpt, const Tensor& patches) {
  Graph g;
  const CheckpointNodes w = bind_checkpoint(g, ckpt, false);
  return g.value(embed_nodes(g, w, ckpt.config, g.input(patches)));
}

Tensor attention_head(const Tensor& z, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  Graph g;
  return g.value(attention_head_nodes(g, g.input(z), g.input(wq), g.input(wk), g.input(wv)));
}

Tensor encoder_layer(const Tensor& z_prev, const LayerWeights& layer, const ModelConfig& config,
                     int64_t segmented_head) {
  Graph g;
  CheckpointNodes::Layer w;
  for (size_t h = 0; h < layer.wq.size(); ++h) {
    w.wq.push_back(g.input(layer.wq[h]));
    w.wk.push_back(g.input(layer.wk[h]));
    w.wv.push_back(g.input(layer.wv[h]));
  }
  w.w0 = g.input(layer.w0);
  w.b0 = g.input(layer.b0);
  w.ln1_gamma = g.input(layer.ln1_gamma);
  w.ln1_beta = g.input(layer.ln1_beta);
  w.w1 = g.input(layer.w1);
  w.b1 = g.input(layer.b1);
  w.w2 = g.input(layer.w2);
  w.b2 = g.input(layer.b2);
  w.ln2_gamma = g.input(layer.ln2_gamma);
  w.ln2_beta = g.input(layer.ln2_beta);
  return g.value(encoder_layer_nodes(g, g.input(z_prev), w, config, segmented_head, nullptr));
}

Tensor forward_logits(const TransformerCheckpoint& ckpt, const Tensor& patches) {
  Graph g;
  const CheckpointNodes w = bind_checkpoint(g, ckpt, false);
  const ForwardNodes f = build_forward(g, w, ckpt.config, ckpt.segmented_head, g.input(patches));
  const Tensor& row = g.value(f.logits);
  return Tensor({ckpt.config.classes}, row.values());
}

int64_t predict(const TransformerCheckpoint& ckpt, const Tensor& patches) {
  const Tensor logits = forward_logits(ckpt, patches);
  int64_t best = 0;
  for (int64_t j = 1; j < logits.numel(); ++j) {
    if (logits.at(j) > logits.at(best)) best = j;
  }
  return best;
}

ForwardTrace forward_trace(const TransformerCheckpoint& ckpt, const Tensor& patches) {
  Graph g;
  const CheckpointNodes w = bind_checkpoint(g, ckpt, false);
  const ForwardNodes f = build_forward(g, w, ckpt.config, ckpt.segmented_head, g.input(patches));
  ForwardTrace trace;
  trace.logits = Tensor({ckpt.config.classes}, g.value(f.logits).values());
  for (NodeId z : f.layer_out) trace.layer_out.push_back(g.value(z));
  return trace;
}

std::vector<Tensor> batch_forward_logits(const TransformerCheckpoint& ckpt, const std::vector<Tensor>& inputs) {
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < inputs.size(); start += kChunk) {
    Graph g;
    const CheckpointNodes w = bind_checkpoint(g, ckpt, false);
    const size_t end = std::min(inputs.size(), start + kChunk);
    for (size_t i = start; i < end; ++i) {
      const ForwardNodes f = build_forward(g, w, ckpt.config, ckpt.segmented_head, g.input(inputs[i]));
      out.emplace_back(std::vector<int64_t>{ckpt.config.classes}, g.value(f.logits).values());
    }
  }
  return out;
}

double accuracy(const TransformerCheckpoint& ckpt, const Dataset& data) {
  if (data.empty()) throw ContractError("accuracy: empty dataset");
  const std::vector<Tensor> logits = batch_forward_logits(ckpt, data.inputs);
  int64_t correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < logits[i].numel(); ++j) {
      if (logits[i].at(j) > logits[i].at(best)) best = j;
    }
    if (best == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_classifier(const TransformerCheckpoint& start, const Dataset& data, const TrainOptions& opts) {
  if (data.empty()) throw ContractError("train_classifier: empty dataset");
  data.validate(start.config.classes);
  start.validate();

  TrainResult result;
  result.checkpoint = start;
  if (opts.epochs == 0) return result;

  TransformerCheckpoint& ckpt = result.checkpoint;
  std::vector<Tensor*> params;
  for_each_tensor(ckpt, [&](const char*, Tensor& t) { params.push_back(&t); });
  std::vector<const Tensor*> shapes(params.begin(), params.end());
  OptimizerState opt(shapes, opts.lr);

  Rng shuffle_rng(derive_seed(opts.seed, 200));
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    int64_t correct = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(opts.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(opts.batch_size));
      Graph g;
      const CheckpointNodes w = bind_checkpoint(g, ckpt, true);
      std::vector<NodeId> losses;
      for (size_t i = begin; i < end; ++i) {
        const Tensor& x = data.inputs[order[i]];
        const int64_t label = data.labels[order[i]];
        const ForwardNodes f = build_forward(g, w, ckpt.config, ckpt.segmented_head, g.input(x));
        losses.push_back(g.cross_entropy_logits(f.logits, label));
        const Tensor& logits = g.value(f.logits);
        int64_t best = 0;
        for (int64_t j = 1; j < logits.numel(); ++j) {
          if (logits.at(j) > logits.at(best)) best = j;
        }
        if (best == label) ++correct;
      }
      const NodeId loss = g.scale(g.add_n(losses), 1.0 / static_cast<double>(losses.size()));
      auto grad_map = g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(w.flat.size());
      for (NodeId id : w.flat) grads.push_back(std::move(grad_map.at(id)));
      adam_step(opt, params, grads);
    }
    result.accuracy_history.push_back(static_cast<double>(correct) / static_cast<double>(data.size()));
  }
  return result;
}

}  // namespace hpmi
