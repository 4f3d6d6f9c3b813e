#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tal/diff/array.hpp"
#include "tal/diff/params.hpp"

namespace tal::diff {

using NodeId = std::size_t;

// The closed operator catalog. Every op has a hand-written backward rule.
enum class Op : std::uint8_t {
  Input,           // named leaf, bound at forward time
  Constant,        // fixed leaf
  Linear,          // pointwise linear over channels
  Conv,            // kernel 3, zero "same" padding, stride 1 or 2, grouped
  ConvTranspose,   // kernel 3, stride 2, output length 2n or 2n-1
  MaxPool,         // kernel 2, stride 2
  Relu,
  Sigmoid,
  GlobalAvgPool,   // over time
  LayerNorm,       // over channels, per time step
  GroupNorm,       // over (channels in group x time)
  Add,
  Mul,
  MulChannel,      // (C,T) * (C,1), broadcast over time
  Sqrt,
  Softmax,
  Dft,             // (C,T) -> (2C,T), rows [real; imag]
  IdftReal,        // (2C,T) -> (C,T), real part of the inverse transform
  ComplexMul,      // elementwise on stacked (2C,T) complex arrays
  Scale,           // multiply by a fixed scalar
  ShiftStack,      // (1,T) -> (B+1,T), y[b,t] = x[t + dir*b], masked outside
  SliceChannels,
  ConcatChannels,
  Sum,             // reduce everything to shape (1)
};

std::string_view op_name(Op op);

/// Value lookup for Input nodes: explicitly bound arrays first, then attached
/// parameter sets in attach order.
class Bindings {
 public:
  Bindings& attach(const ParamSet& set) {
    sets_.push_back(&set);
    return *this;
  }
  Bindings& bind(std::string name, Array value) {
    owned_.set(std::move(name), std::move(value));
    return *this;
  }
  const Array* find(std::string_view name) const;

 private:
  ParamSet owned_;
  std::vector<const ParamSet*> sets_;
};

inline constexpr double kShiftMask = -1e9;
// Group count meaning "one group per input channel".
inline constexpr std::size_t kDepthwise = 0;
inline constexpr double kNormEps = 1e-5;
inline constexpr double kSqrtGradFloor = 1e-12;

/// Static computation graph over Arrays. Build nodes, then forward() with
/// bindings, then backward() from one or more seeded outputs. Nodes are
/// stored in creation order, which is a topological order.
class Graph {
 public:
  NodeId input(std::string name);
  NodeId constant(Array value);

  NodeId linear(NodeId x, NodeId weight, NodeId bias);
  NodeId conv(NodeId x, NodeId weight, NodeId bias, std::size_t stride = 1, std::size_t groups = 1);
  NodeId conv_transpose(NodeId x, NodeId weight, NodeId bias, std::size_t out_length,
                        std::size_t groups = 1);
  NodeId max_pool(NodeId x);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId sqrt(NodeId x);
  NodeId global_avg_pool(NodeId x);
  NodeId layer_norm(NodeId x, NodeId scale, NodeId shift);
  NodeId group_norm(NodeId x, NodeId scale, NodeId shift, std::size_t groups);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId mul_channel(NodeId x, NodeId weight);
  NodeId scale(NodeId x, double factor);
  NodeId softmax(NodeId x, std::size_t axis);
  NodeId dft(NodeId x);
  NodeId idft_real(NodeId spectrum);
  NodeId complex_mul(NodeId a, NodeId b);
  NodeId shift_stack(NodeId x, std::size_t bins, int direction);
  NodeId slice_channels(NodeId x, std::size_t begin, std::size_t end);
  NodeId concat_channels(NodeId a, NodeId b);
  NodeId sum(NodeId x);

  void forward(const Bindings& bindings);
  bool evaluated() const { return evaluated_; }

  void backward(NodeId output, const Array& seed);
  void backward(std::span<const std::pair<NodeId, Array>> seeds);

  const Array& value(NodeId id) const;
  /// Gradient after backward(); zeros when nothing flowed into the node.
  Array grad(NodeId id) const;
  /// Gradient for every named Input node, zeros for unused ones.
  std::map<std::string, Array> input_gradients() const;

  std::size_t size() const { return nodes_.size(); }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  const std::map<std::string, NodeId, std::less<>>& named_inputs() const { return named_; }

  /// Test hook: multiplies the backward contribution of every node of kind
  /// `op`. A factor other than 1 produces a deliberately wrong gradient.
  void set_backward_scale(Op op, double factor) { backward_scale_[op] = factor; }

 private:
  struct Attrs {
    std::size_t stride = 1;
    std::size_t groups = 1;
    std::size_t length = 0;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    int direction = 1;
    double factor = 1.0;
  };

  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Attrs attrs;
    std::string name;
    Array value;
    Array grad;
    bool has_grad = false;
    std::vector<double> cache;
    std::vector<std::size_t> index_cache;
  };

  NodeId push(Op op, std::vector<NodeId> inputs, Attrs attrs);
  NodeId push(Op op, std::vector<NodeId> inputs);
  void evaluate(NodeId id, const Bindings& bindings);
  void propagate(NodeId id);
  Array& grad_slot(NodeId id);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId, std::less<>> named_;
  std::map<Op, double> backward_scale_;
  bool evaluated_ = false;
};

}  // namespace tal::diff
