#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>. Every op appends one
// node; Graph::backward walks the tape in reverse. Parameter leaves are cached
// per graph so a batch built on one graph shares a single copy of each weight.

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "groundseg/tensor.hpp"

namespace groundseg::ag {

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(id); }
  const std::vector<int>& shape() const { return value().shape; }
  bool valid() const { return graph != nullptr && id >= 0; }
};

template <typename T>
class Graph {
 public:
  /// Receives the graph and the id of the node being differentiated.
  using BackwardFn = std::function<void(Graph&, int)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  /// Appends a node. `backward` runs only if some input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward);

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad(int id);
  const Tensor<T>& grad_or_empty(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Seeds d(root)/d(root) = 1 for a scalar root and accumulates into every
  /// reachable parameter's grad.
  void backward(Var<T> root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
  };
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_ids_;
};

// Elementwise and shape ops. Image-like tensors are [C,H,W]; sequences [N,D].
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> reshape(Var<T> a, std::vector<int> shape);
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
/// Weighted sum of scalar ([1]) nodes.
template <typename T> Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& w);

template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad);
template <typename T> Var<T> avg_pool2(Var<T> x);
template <typename T> Var<T> upsample2(Var<T> x);
template <typename T> Var<T> concat_channels(Var<T> a, Var<T> b);
/// [D] -> [D,H,W] by repeating the vector at every cell.
template <typename T> Var<T> broadcast_grid(Var<T> v, int h, int w);
/// [C,H,W] -> [H*W,C], row-major over cells.
template <typename T> Var<T> grid_to_rows(Var<T> x);

/// x[N,in] * w[in,out] + b[out].
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T> Var<T> embedding(Var<T> table, const std::vector<int>& ids);
template <typename T> Var<T> concat_rows(Var<T> a, Var<T> b);
/// x[N,D] + table[0:N,D].
template <typename T> Var<T> add_leading_rows(Var<T> x, Var<T> table);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta);
/// Multi-head causal attention on packed qkv[N,3D] -> [N,D].
template <typename T> Var<T> causal_attention(Var<T> qkv, int heads);
template <typename T> Var<T> take_rows(Var<T> x, const std::vector<int>& rows);
/// Row i of x[N,D] as a [D] vector.
template <typename T> Var<T> row(Var<T> x, int i);

}  // namespace groundseg::ag
