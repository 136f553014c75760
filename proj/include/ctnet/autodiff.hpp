#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctnet/tensor.hpp"

namespace ctnet {

class Graph;
class Var;

// Named graph handles, mirroring a ParamMap bound onto a graph.
using VarMap = std::map<std::string, Var>;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  bool defined() const { return g_ != nullptr; }
  const Tensor& val() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  int id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : g_(g), id_(id) {}
  Graph* g_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Ops append nodes in creation order, which is already a
// topological order, so backward() is a single reverse sweep from the loss.
//
// Gradient semantics: grads of leaves accumulate across backward() calls
// until zero_grad(); grads of interior nodes are per-pass scratch.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Var leaf(Tensor value, bool requires_grad = false);

  // -- convolution family (the only geometries the model uses) --------------

  // 3x3, padding 1, stride 1. Rejects any other kernel geometry.
  Var conv2d(Var x, Var w, Var b);
  // One 3x3 filter per channel, padding 1. Channel c of the output depends
  // only on channel c of the input. Bias optional.
  Var depthwise_conv2d(Var x, Var w);
  Var depthwise_conv2d(Var x, Var w, Var b);
  // 1x1 kernel: a per-pixel linear map across channels.
  Var pointwise_conv2d(Var x, Var w, Var b);

  // -- pointwise / normalization --------------------------------------------

  Var relu(Var x);  // backward uses subgradient 0 at exactly 0
  // Normalizes the last axis with population variance; eps sits inside the
  // square root.
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var softmax(Var x);  // last axis, row-max subtracted before exp

  // -- linear algebra --------------------------------------------------------

  // x: [..., Din], w: [Dout, Din], b: [Dout] -> [..., Dout]
  Var linear(Var x, Var w, Var b);
  // [M,K]x[K,N] or batched [B,M,K]x[B,K,N]
  Var matmul(Var a, Var b);

  // -- elementwise / structural ----------------------------------------------

  Var add(Var a, Var b);            // same shape
  Var add_broadcast(Var a, Var b);  // b's shape must be a suffix of a's
  Var sub(Var a, Var b);
  Var scale(Var a, double s);
  Var square(Var a);
  Var reduce_sum(Var a);  // -> scalar of shape [1]
  Var concat_channels(const std::vector<Var>& xs);  // NCHW along C
  Var reshape(Var a, std::vector<int> shape);
  Var permute(Var a, std::vector<int> perm);

  // -- window tokenization ----------------------------------------------------

  // [N,C,H,W] -> [N*nWindows, window*window, C]; H and W must be multiples
  // of window. window_merge is the exact inverse.
  Var window_partition(Var x, int window);
  Var window_merge(Var t, int window, int n, int h, int w);

  // -- padding ----------------------------------------------------------------

  // Mirror padding without edge repetition; each pad extent must be smaller
  // than the corresponding input dimension.
  Var pad_reflect(Var x, int top, int bottom, int left, int right);
  Var crop(Var x, int top, int left, int h, int w);

  // Runs reverse accumulation from a scalar loss. Calling twice without
  // zero_grad() doubles leaf gradients.
  void backward(Var loss);
  void zero_grad();

  std::size_t num_nodes() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad_of(int id) const;
  bool node_requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // same shape as value once allocated
    bool requires_grad = false;
    bool is_leaf = false;
    const char* op = "leaf";
    std::vector<int> parents;
    std::function<void(Graph&, int)> backward;
  };

  friend class Var;

  Var make(const char* op, Tensor value, std::vector<int> parents,
           std::function<void(Graph&, int)> bw);
  Tensor& grad_buffer(int id);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  void check(Var v) const;

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::val() const { return g_->value_of(id_); }
inline const Tensor& Var::grad() const { return g_->grad_of(id_); }
inline bool Var::requires_grad() const { return g_->node_requires_grad(id_); }

// Binds every named tensor as a graph leaf.
VarMap bind_params(Graph& g, const ParamMap& params, bool requires_grad);

}  // namespace ctnet
