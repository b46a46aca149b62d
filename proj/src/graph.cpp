#include "hpmi/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hpmi {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

void require_2d(const Tensor& t, const char* context) {
  if (t.rank() != 2) throw ShapeError(std::string(context) + ": expected 2-d tensor, got " + t.shape_string());
}

}  // namespace

Graph::Node Graph::make_node(OpKind kind, std::vector<NodeId> inputs, Tensor value) {
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  return n;
}

NodeId Graph::push(Node node) {
  node.value.require_finite("graph node output");
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Graph::Node& Graph::node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

const Tensor& Graph::value(NodeId id) const { return node(id).value; }

NodeId Graph::input(Tensor value) { return push(make_node(OpKind::kInput, {}, std::move(value))); }

NodeId Graph::parameter(Tensor value) {
  const NodeId id = push(make_node(OpKind::kParameter, {}, std::move(value)));
  parameters_.push_back(id);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_2d(A, "matmul");
  require_2d(B, "matmul");
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + A.shape_string() + " x " + B.shape_string());
  }
  const int64_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += A.at(i, p) * B.at(p, j);
      out.at(i, j) = acc;
    }
  }
  return push(make_node(OpKind::kMatmul, {a, b}, std::move(out)));
}

NodeId Graph::transpose(NodeId a) {
  const Tensor& A = value(a);
  require_2d(A, "transpose");
  Tensor out({A.cols(), A.rows()});
  for (int64_t i = 0; i < A.rows(); ++i)
    for (int64_t j = 0; j < A.cols(); ++j) out.at(j, i) = A.at(i, j);
  return push(make_node(OpKind::kTranspose, {a}, std::move(out)));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "add");
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += B.at(i);
  return push(make_node(OpKind::kAdd, {a, b}, std::move(out)));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "sub");
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) -= B.at(i);
  return push(make_node(OpKind::kSub, {a, b}, std::move(out)));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "mul");
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= B.at(i);
  return push(make_node(OpKind::kMul, {a, b}, std::move(out)));
}

NodeId Graph::scale(NodeId a, double c) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= c;
  Node n = make_node(OpKind::kScale, {a}, std::move(out));
  n.scalar = c;
  return push(std::move(n));
}

NodeId Graph::add_scalar(NodeId a, double c) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += c;
  Node n = make_node(OpKind::kAddScalar, {a}, std::move(out));
  n.scalar = c;
  return push(std::move(n));
}

NodeId Graph::add_row_broadcast(NodeId x, NodeId row) {
  const Tensor& X = value(x);
  const Tensor& V = value(row);
  require_2d(X, "add_row_broadcast");
  if (V.rank() != 1 || V.numel() != X.cols()) {
    throw ShapeError("add_row_broadcast: " + X.shape_string() + " vs row " + V.shape_string());
  }
  Tensor out = X;
  for (int64_t i = 0; i < X.rows(); ++i)
    for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) += V.at(j);
  return push(make_node(OpKind::kAddRowBroadcast, {x, row}, std::move(out)));
}

NodeId Graph::softmax_rows(NodeId x) {
  const Tensor& X = value(x);
  require_2d(X, "softmax_rows");
  Tensor out = X;
  for (int64_t i = 0; i < X.rows(); ++i) {
    double mx = X.at(i, 0);
    for (int64_t j = 1; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
    double denom = 0.0;
    for (int64_t j = 0; j < X.cols(); ++j) {
      out.at(i, j) = std::exp(X.at(i, j) - mx);
      denom += out.at(i, j);
    }
    for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) /= denom;
  }
  return push(make_node(OpKind::kSoftmaxRows, {x}, std::move(out)));
}

NodeId Graph::norm_impl(NodeId x, NodeId gamma, NodeId beta, double eps,
                        std::vector<std::pair<int64_t, int64_t>> segments) {
  const Tensor& X = value(x);
  const Tensor& G = value(gamma);
  const Tensor& B = value(beta);
  require_2d(X, "layer_norm");
  if (G.rank() != 1 || G.numel() != X.cols() || B.rank() != 1 || B.numel() != X.cols()) {
    throw ShapeError("layer_norm: gamma/beta " + G.shape_string() + "/" + B.shape_string() + " vs " + X.shape_string());
  }
  const int64_t rows = X.rows();
  Tensor out = X;
  Tensor xhat({rows, X.cols()});
  Tensor inv_std({rows, static_cast<int64_t>(segments.size())});
  for (int64_t r = 0; r < rows; ++r) {
    for (size_t s = 0; s < segments.size(); ++s) {
      const auto [lo, hi] = segments[s];
      const double width = static_cast<double>(hi - lo);
      double mean = 0.0;
      for (int64_t j = lo; j < hi; ++j) mean += X.at(r, j);
      mean /= width;
      double var = 0.0;
      for (int64_t j = lo; j < hi; ++j) {
        const double d = X.at(r, j) - mean;
        var += d * d;
      }
      var /= width;
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std.at(r, static_cast<int64_t>(s)) = inv;
      for (int64_t j = lo; j < hi; ++j) {
        const double xh = (X.at(r, j) - mean) * inv;
        xhat.at(r, j) = xh;
        out.at(r, j) = xh * G.at(j) + B.at(j);
      }
    }
  }
  Node n = make_node(OpKind::kLayerNorm, {x, gamma, beta}, std::move(out));
  n.scalar = eps;
  n.segments = std::move(segments);
  n.cache.push_back(std::move(xhat));
  n.cache.push_back(std::move(inv_std));
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  return norm_impl(x, gamma, beta, eps, {{0, value(x).cols()}});
}

NodeId Graph::segmented_layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps, int64_t lo, int64_t hi) {
  const int64_t cols = value(x).cols();
  if (!(0 <= lo && lo < hi && hi <= cols)) {
    throw ContractError("segmented_layer_norm: segment [" + std::to_string(lo) + "," + std::to_string(hi) +
                        ") does not partition [0," + std::to_string(cols) + ")");
  }
  std::vector<std::pair<int64_t, int64_t>> segments;
  if (lo > 0) segments.emplace_back(0, lo);
  segments.emplace_back(lo, hi);
  if (hi < cols) segments.emplace_back(hi, cols);
  return norm_impl(x, gamma, beta, eps, std::move(segments));
}

NodeId Graph::gelu(NodeId a) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = gelu_value(out.at(i));
  return push(make_node(OpKind::kGelu, {a}, std::move(out)));
}

NodeId Graph::sigmoid(NodeId a) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = 1.0 / (1.0 + std::exp(-out.at(i)));
  return push(make_node(OpKind::kSigmoid, {a}, std::move(out)));
}

NodeId Graph::square(NodeId a) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= out.at(i);
  return push(make_node(OpKind::kSquare, {a}, std::move(out)));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input list");
  const int64_t rows = value(parts[0]).rows();
  int64_t cols = 0;
  for (NodeId p : parts) {
    require_2d(value(p), "concat_cols");
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch " + value(p).shape_string());
    cols += value(p).cols();
  }
  Tensor out({rows, cols});
  int64_t off = 0;
  for (NodeId p : parts) {
    const Tensor& t = value(p);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < t.cols(); ++j) out.at(i, off + j) = t.at(i, j);
    off += t.cols();
  }
  return push(make_node(OpKind::kConcatCols, parts, std::move(out)));
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input list");
  const int64_t cols = value(parts[0]).cols();
  int64_t rows = 0;
  for (NodeId p : parts) {
    require_2d(value(p), "concat_rows");
    if (value(p).cols() != cols) throw ShapeError("concat_rows: column mismatch " + value(p).shape_string());
    rows += value(p).rows();
  }
  Tensor out({rows, cols});
  int64_t off = 0;
  for (NodeId p : parts) {
    const Tensor& t = value(p);
    for (int64_t i = 0; i < t.rows(); ++i)
      for (int64_t j = 0; j < cols; ++j) out.at(off + i, j) = t.at(i, j);
    off += t.rows();
  }
  return push(make_node(OpKind::kConcatRows, parts, std::move(out)));
}

NodeId Graph::slice_cols(NodeId a, int64_t lo, int64_t hi) {
  const Tensor& A = value(a);
  require_2d(A, "slice_cols");
  if (!(0 <= lo && lo < hi && hi <= A.cols())) throw ShapeError("slice_cols: bad range on " + A.shape_string());
  Tensor out({A.rows(), hi - lo});
  for (int64_t i = 0; i < A.rows(); ++i)
    for (int64_t j = lo; j < hi; ++j) out.at(i, j - lo) = A.at(i, j);
  Node n = make_node(OpKind::kSliceCols, {a}, std::move(out));
  n.i0 = lo;
  n.i1 = hi;
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId a, int64_t lo, int64_t hi) {
  const Tensor& A = value(a);
  require_2d(A, "slice_rows");
  if (!(0 <= lo && lo < hi && hi <= A.rows())) throw ShapeError("slice_rows: bad range on " + A.shape_string());
  Tensor out({hi - lo, A.cols()});
  for (int64_t i = lo; i < hi; ++i)
    for (int64_t j = 0; j < A.cols(); ++j) out.at(i - lo, j) = A.at(i, j);
  Node n = make_node(OpKind::kSliceRows, {a}, std::move(out));
  n.i0 = lo;
  n.i1 = hi;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  const Tensor& A = value(a);
  double acc = 0.0;
  for (int64_t i = 0; i < A.numel(); ++i) acc += A.at(i);
  return push(make_node(OpKind::kSum, {a}, Tensor::scalar(acc)));
}

NodeId Graph::mean(NodeId a) {
  const Tensor& A = value(a);
  double acc = 0.0;
  for (int64_t i = 0; i < A.numel(); ++i) acc += A.at(i);
  return push(make_node(OpKind::kMean, {a}, Tensor::scalar(acc / static_cast<double>(A.numel()))));
}

NodeId Graph::add_n(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ContractError("add_n: empty input list");
  Tensor out = value(parts[0]);
  for (size_t i = 1; i < parts.size(); ++i) {
    const Tensor& t = value(parts[i]);
    require_same_shape(out, t, "add_n");
    for (int64_t j = 0; j < out.numel(); ++j) out.at(j) += t.at(j);
  }
  return push(make_node(OpKind::kAddN, parts, std::move(out)));
}

NodeId Graph::cross_entropy_logits(NodeId logits, int64_t label) {
  const Tensor& L = value(logits);
  const int64_t classes = L.numel();
  if (L.rank() == 2 && L.rows() != 1) throw ShapeError("cross_entropy_logits: expected a single row, got " + L.shape_string());
  if (label < 0 || label >= classes) throw ContractError("cross_entropy_logits: label " + std::to_string(label) + " out of range");
  double mx = L.at(0);
  for (int64_t j = 1; j < classes; ++j) mx = std::max(mx, L.at(j));
  double denom = 0.0;
  Tensor probs = L;
  for (int64_t j = 0; j < classes; ++j) {
    probs.at(j) = std::exp(L.at(j) - mx);
    denom += probs.at(j);
  }
  for (int64_t j = 0; j < classes; ++j) probs.at(j) /= denom;
  const double loss = std::log(denom) + mx - L.at(label);
  Node n = make_node(OpKind::kCrossEntropyLogits, {logits}, Tensor::scalar(loss));
  n.i0 = label;
  n.cache.push_back(std::move(probs));
  return push(std::move(n));
}

std::unordered_map<NodeId, Tensor> Graph::backward(NodeId loss) const {
  const Node& loss_node = node(loss);
  if (loss_node.value.numel() != 1) {
    throw ContractError("backward: loss node has shape " + loss_node.value.shape_string() + ", expected a scalar");
  }

  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> touched(nodes_.size(), 0);
  auto grad_into = [&](NodeId id) -> Tensor& {
    if (!touched[static_cast<size_t>(id)]) {
      grads[static_cast<size_t>(id)] = Tensor::zeros(node(id).value.shape());
      touched[static_cast<size_t>(id)] = 1;
    }
    return grads[static_cast<size_t>(id)];
  };

  grad_into(loss).at(0) = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    if (!touched[static_cast<size_t>(id)]) continue;
    const Node& n = node(id);
    const Tensor& g = grads[static_cast<size_t>(id)];
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kParameter:
        break;
      case OpKind::kMatmul: {
        const Tensor& A = node(n.inputs[0]).value;
        const Tensor& B = node(n.inputs[1]).value;
        Tensor& da = grad_into(n.inputs[0]);
        Tensor& db = grad_into(n.inputs[1]);
        const int64_t m = A.rows(), k = A.cols(), c = B.cols();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int64_t j = 0; j < c; ++j) acc += g.at(i, j) * B.at(p, j);
            da.at(i, p) += acc;
          }
        for (int64_t p = 0; p < k; ++p)
          for (int64_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += A.at(i, p) * g.at(i, j);
            db.at(p, j) += acc;
          }
        break;
      }
      case OpKind::kTranspose: {
        Tensor& da = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) da.at(j, i) += g.at(i, j);
        break;
      }
      case OpKind::kAdd: {
        Tensor& da = grad_into(n.inputs[0]);
        Tensor& db = grad_into(n.inputs[1]);
        for (int64_t i = 0; i < g.numel(); ++i) {
          da.at(i) += g.at(i);
          db.at(i) += g.at(i);
        }
        break;
      }
      case OpKind::kSub: {
        Tensor& da = grad_into(n.inputs[0]);
        Tensor& db = grad_into(n.inputs[1]);
        for (int64_t i = 0; i < g.numel(); ++i) {
          da.at(i) += g.at(i);
          db.at(i) -= g.at(i);
        }
        break;
      }
      case OpKind::kMul: {
        const Tensor& A = node(n.inputs[0]).value;
        const Tensor& B = node(n.inputs[1]).value;
        Tensor& da = grad_into(n.inputs[0]);
        Tensor& db = grad_into(n.inputs[1]);
        for (int64_t i = 0; i < g.numel(); ++i) {
          da.at(i) += B.at(i) * g.at(i);
          db.at(i) += A.at(i) * g.at(i);
        }
        break;
      }
      case OpKind::kScale: {
        Tensor& da = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.numel(); ++i) da.at(i) += n.scalar * g.at(i);
        break;
      }
      case OpKind::kAddScalar: {
        Tensor& da = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.numel(); ++i) da.at(i) += g.at(i);
        break;
      }
      case OpKind::kAddRowBroadcast: {
        Tensor& dx = grad_into(n.inputs[0]);
        Tensor& dv = grad_into(n.inputs[1]);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) {
            dx.at(i, j) += g.at(i, j);
            dv.at(j) += g.at(i, j);
          }
        break;
      }
      case OpKind::kSoftmaxRows: {
        const Tensor& s = n.value;
        Tensor& dx = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < s.rows(); ++i) {
          double dot = 0.0;
          for (int64_t j = 0; j < s.cols(); ++j) dot += g.at(i, j) * s.at(i, j);
          for (int64_t j = 0; j < s.cols(); ++j) dx.at(i, j) += s.at(i, j) * (g.at(i, j) - dot);
        }
        break;
      }
      case OpKind::kLayerNorm: {
        const Tensor& G = node(n.inputs[1]).value;
        const Tensor& xhat = n.cache[0];
        const Tensor& inv_std = n.cache[1];
        Tensor& dx = grad_into(n.inputs[0]);
        Tensor& dgamma = grad_into(n.inputs[1]);
        Tensor& dbeta = grad_into(n.inputs[2]);
        for (int64_t r = 0; r < g.rows(); ++r) {
          for (size_t s = 0; s < n.segments.size(); ++s) {
            const auto [lo, hi] = n.segments[s];
            const double width = static_cast<double>(hi - lo);
            const double inv = inv_std.at(r, static_cast<int64_t>(s));
            double sum_gh = 0.0, sum_gh_xhat = 0.0;
            for (int64_t j = lo; j < hi; ++j) {
              const double gh = g.at(r, j) * G.at(j);
              sum_gh += gh;
              sum_gh_xhat += gh * xhat.at(r, j);
              dgamma.at(j) += g.at(r, j) * xhat.at(r, j);
              dbeta.at(j) += g.at(r, j);
            }
            for (int64_t j = lo; j < hi; ++j) {
              const double gh = g.at(r, j) * G.at(j);
              dx.at(r, j) += inv * (gh - sum_gh / width - xhat.at(r, j) * sum_gh_xhat / width);
            }
          }
        }
        break;
      }
      case OpKind::kGelu: {
        const Tensor& X = node(n.inputs[0]).value;
        Tensor& dx = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.numel(); ++i) dx.at(i) += gelu_derivative(X.at(i)) * g.at(i);
        break;
      }
      case OpKind::kSigmoid: {
        const Tensor& s = n.value;
        Tensor& dx = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.numel(); ++i) dx.at(i) += s.at(i) * (1.0 - s.at(i)) * g.at(i);
        break;
      }
      case OpKind::kSquare: {
        const Tensor& X = node(n.inputs[0]).value;
        Tensor& dx = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.numel(); ++i) dx.at(i) += 2.0 * X.at(i) * g.at(i);
        break;
      }
      case OpKind::kConcatCols: {
        int64_t off = 0;
        for (NodeId p : n.inputs) {
          const Tensor& t = node(p).value;
          Tensor& dp = grad_into(p);
          for (int64_t i = 0; i < t.rows(); ++i)
            for (int64_t j = 0; j < t.cols(); ++j) dp.at(i, j) += g.at(i, off + j);
          off += t.cols();
        }
        break;
      }
      case OpKind::kConcatRows: {
        int64_t off = 0;
        for (NodeId p : n.inputs) {
          const Tensor& t = node(p).value;
          Tensor& dp = grad_into(p);
          for (int64_t i = 0; i < t.rows(); ++i)
            for (int64_t j = 0; j < t.cols(); ++j) dp.at(i, j) += g.at(off + i, j);
          off += t.rows();
        }
        break;
      }
      case OpKind::kSliceCols: {
        Tensor& da = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) da.at(i, n.i0 + j) += g.at(i, j);
        break;
      }
      case OpKind::kSliceRows: {
        Tensor& da = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < g.rows(); ++i)
          for (int64_t j = 0; j < g.cols(); ++j) da.at(n.i0 + i, j) += g.at(i, j);
        break;
      }
      case OpKind::kSum: {
        Tensor& da = grad_into(n.inputs[0]);
        for (int64_t i = 0; i < da.numel(); ++i) da.at(i) += g.at(0);
        break;
      }
      case OpKind::kMean: {
        Tensor& da = grad_into(n.inputs[0]);
        const double w = g.at(0) / static_cast<double>(da.numel());
        for (int64_t i = 0; i < da.numel(); ++i) da.at(i) += w;
        break;
      }
      case OpKind::kAddN: {
        for (NodeId p : n.inputs) {
          Tensor& dp = grad_into(p);
          for (int64_t i = 0; i < g.numel(); ++i) dp.at(i) += g.at(i);
        }
        break;
      }
      case OpKind::kCrossEntropyLogits: {
        const Tensor& probs = n.cache[0];
        Tensor& dl = grad_into(n.inputs[0]);
        for (int64_t j = 0; j < probs.numel(); ++j) {
          dl.at(j) += g.at(0) * (probs.at(j) - (j == n.i0 ? 1.0 : 0.0));
        }
        break;
      }
    }
  }

  std::unordered_map<NodeId, Tensor> out;
  out.reserve(parameters_.size());
  for (NodeId p : parameters_) {
    if (touched[static_cast<size_t>(p)]) {
      out.emplace(p, std::move(grads[static_cast<size_t>(p)]));
    } else {
      out.emplace(p, Tensor::zeros(node(p).value.shape()));
    }
  }
  return out;
}

double grad_check(const std::function<NodeId(Graph&, const std::vector<NodeId>&)>& build,
                  std::vector<Tensor>& params, double step) {
  if (step <= 0.0) throw ContractError("grad_check: step must be positive");

  auto evaluate = [&]() {
    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(params.size());
    for (const Tensor& p : params) ids.push_back(g.parameter(p));
    const NodeId loss = build(g, ids);
    return std::pair<double, std::vector<Tensor>>{g.value(loss).item(), {}};
  };

  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& p : params) ids.push_back(g.parameter(p));
  const NodeId loss = build(g, ids);
  auto grads = g.backward(loss);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& analytic = grads.at(ids[pi]);
    for (int64_t j = 0; j < params[pi].numel(); ++j) {
      const double saved = params[pi].at(j);
      params[pi].at(j) = saved + step;
      const double f_plus = evaluate().first;
      params[pi].at(j) = saved - step;
      const double f_minus = evaluate().first;
      params[pi].at(j) = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double err = std::abs(analytic.at(j) - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace hpmi
