#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kra/tensor.hpp"

namespace kra {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Define-by-run reverse-mode tape. Every primitive appends one node holding
// its output value; backward() walks the nodes in exact reverse order and
// accumulates into per-node gradient buffers.
//
// The vocabulary is deliberately small: what the detectors need and nothing
// more. A Tape is not thread-safe; build one per forward pass.
class Tape {
 public:
  Var leaf(Tensor value);

  // input N x C x H x W, kernel O x C x k x k, bias O.
  Var conv2d(Var input, Var kernel, Var bias, std::size_t stride,
             std::size_t padding);
  Var relu(Var x);
  // N x C x H x W -> N x C x H/2 x W/2. H and W must be even.
  Var avgpool2x2(Var x);
  // Collapses everything after the first axis: N x ... -> N x F.
  Var flatten(Var x);
  // x N x F, weights O x F, bias O -> N x O.
  Var dense(Var x, Var weights, Var bias);
  Var sigmoid(Var x);
  Var scale(Var x, double factor);
  // factor * x + offset, elementwise.
  Var affine(Var x, double factor, double offset);
  // Mean binary cross-entropy of probabilities against {0,1} labels.
  // Throws domain error when a probability lies outside (0, 1).
  Var bce_loss(Var prediction, const Tensor& labels);
  // Same loss taken directly on logits; stable for saturated predictions.
  Var bce_with_logits(Var logits, const Tensor& labels);
  // Sum of all entries, as a rank-1 scalar.
  Var sum(Var x);

  // Names an activation so its gradient can be requested after backward.
  // A name may be bound once; the same Var may carry several names.
  void tap(Var x, std::string name);
  bool has_tap(const std::string& name) const { return taps_.contains(name); }
  std::vector<std::string> tap_names() const;

  // Seeds d(output)/d(output) = 1 and propagates to every node. Gradients
  // from any earlier backward call are discarded first, so repeated calls
  // produce identical buffers. output must hold exactly one value.
  void backward(Var output);

  // backward() followed by a lookup of each requested tap. Throws
  // unknown_tap for a name that was never recorded.
  std::map<std::string, Tensor> backward_with_taps(
      Var output, std::span<const std::string> taps);

  const Tensor& value(Var x) const { return nodes_.at(x.id).value; }
  const Tensor& grad(Var x) const;
  const Tensor& tap_grad(const std::string& name) const;
  const Tensor& tap_value(const std::string& name) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // Indices of the nodes visited by the most recent backward(), in visit
  // order. Exposed for ordering checks.
  const std::vector<std::size_t>& last_backward_order() const {
    return backward_order_;
  }

 private:
  enum class Op {
    leaf,
    conv2d,
    relu,
    avgpool,
    flatten,
    dense,
    sigmoid,
    scale,
    bce,
    bce_logits,
    sum,
  };

  struct Node {
    Op op = Op::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    Tensor aux;  // labels for the loss nodes
    std::size_t stride = 1;
    std::size_t padding = 0;
    double factor = 1.0;
  };

  Var push(Node node);
  void backward_node(std::size_t id);

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> taps_;
  std::vector<std::size_t> backward_order_;
  bool has_grads_ = false;
};

// Plain forward kernels shared by the tape and by tests.
namespace ops {
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding);
Tensor relu(const Tensor& x);
Tensor avgpool2x2(const Tensor& x);
Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias);
double sigmoid(double z) noexcept;
}  // namespace ops

}  // namespace kra
