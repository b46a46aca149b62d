#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hpmi/tensor.hpp"

namespace hpmi {

using NodeId = int32_t;

enum class OpKind : uint8_t {
  kInput,
  kParameter,
  kMatmul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kAddRowBroadcast,
  kSoftmaxRows,
  kLayerNorm,
  kGelu,
  kSigmoid,
  kSquare,
  kConcatCols,
  kConcatRows,
  kSliceCols,
  kSliceRows,
  kSum,
  kMean,
  kAddN,
  kCrossEntropyLogits,
};

// Reverse-mode tape. Nodes are appended in topological order (an op may only
// consume ids that already exist), values are computed eagerly, and
// backward() replays the tape once to produce parameter gradients.
class Graph {
 public:
  NodeId input(Tensor value);
  NodeId parameter(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId add_scalar(NodeId a, double c);
  NodeId add_row_broadcast(NodeId x, NodeId row);
  NodeId softmax_rows(NodeId x);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps);
  // Three segments [0,lo), [lo,hi), [hi,cols); outer segments may be empty.
  NodeId segmented_layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps, int64_t lo, int64_t hi);
  NodeId gelu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId square(NodeId a);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId slice_cols(NodeId a, int64_t lo, int64_t hi);
  NodeId slice_rows(NodeId a, int64_t lo, int64_t hi);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId add_n(const std::vector<NodeId>& parts);
  NodeId cross_entropy_logits(NodeId logits, int64_t label);

  const Tensor& value(NodeId id) const;
  size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& parameters() const { return parameters_; }

  // Gradient of the scalar `loss` with respect to every parameter node.
  // Parameters not on any path to the loss map to exactly-zero tensors.
  std::unordered_map<NodeId, Tensor> backward(NodeId loss) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    double scalar = 0.0;                                 // scale factor / shift / eps
    int64_t i0 = 0, i1 = 0;                              // slice bounds or label
    std::vector<std::pair<int64_t, int64_t>> segments;   // layer norm segments
    std::vector<Tensor> cache;                           // op-specific saved tensors
  };

  static Node make_node(OpKind kind, std::vector<NodeId> inputs, Tensor value);
  NodeId push(Node node);
  const Node& node(NodeId id) const;
  NodeId norm_impl(NodeId x, NodeId gamma, NodeId beta, double eps,
                   std::vector<std::pair<int64_t, int64_t>> segments);

  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
};

// Central-difference check of the tape against an independent numeric
// gradient. `build` must construct the loss node from the given graph and
// parameter ids bound, in order, to the current contents of `params`.
// Returns max over entries of |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& build,
                  std::vector<Tensor>& params, double step);

}  // namespace hpmi
