#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "deblurkit/tensor.hpp"

namespace deblurkit::ad {

// Reverse-mode tape over Tensor values. Graphs are built eagerly by the op
// functions below; backward() walks the tape once in reverse topological
// order. Parameter leaves persist across steps, interior nodes are rebuilt
// every forward pass.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool needsGrad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls this->grad into parents
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Tensor v);
  static Var leaf(Tensor v);  // trainable parameter

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutableValue() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool needsGrad() const { return node_->needsGrad; }
  void zeroGrad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds an op node; backprop may be empty for non-differentiable results.
Var makeOp(Tensor value, std::vector<Var> parents,
           std::function<void(Node&)> backprop);

// Ensures n.grad is allocated (zero-filled) and returns it.
Tensor& gradBuf(Node& n);

// Runs reverse accumulation from a scalar root.
void backward(const Var& root);

// ---- elementwise / reductions ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var softplus(const Var& a);
Var mean(const Var& a);
Var detach(const Var& a);

// Multiplies a (C,H,W) tensor by a single-channel (1,H,W) map.
Var mulChannelBroadcast(const Var& x, const Var& map);

// ---- shape ops ----
Var concatChannels(const Var& a, const Var& b);
Var sliceChannels(const Var& x, int start, int count);
Var padReplicate(const Var& x, int top, int bottom, int left, int right);
Var cropSpatial(const Var& x, int top, int left, int height, int width);

// ---- neural-net primitives ----
// 3x3/5x5/... "same" convolution, zero padding, stride 1. weight is
// (Co,Ci,kh,kw), bias (Co) or undefined.
Var conv2d(const Var& input, const Var& weight, const Var& bias);
// Per-pixel linear map over channels: weight (Co,Ci), bias (Co) optional.
Var channelLinear(const Var& input, const Var& weight, const Var& bias);
Var softmaxChannels(const Var& x);
Var avgPool2(const Var& x);
Var upsampleBilinear2(const Var& x);

// ---- sampling ----
// out(c,y,x) = bilinear(img, x + flow(0,y,x), y + flow(1,y,x)), border
// clamped; differentiable in both img and flow.
Var warp(const Var& img, const Var& flow);

// ---- losses ----
enum class CharbonnierMode { PerElementMean, GlobalNorm };

// mean_i sqrt((a-b)^2 + eps^2) or sqrt(sum (a-b)^2 + eps^2). When mask is
// non-null it is a binary (H,W) tensor broadcast over channels; in mean mode
// the reduction averages over unmasked elements only.
Var charbonnier(const Var& a, const Var& b, double eps,
                CharbonnierMode mode = CharbonnierMode::PerElementMean,
                const Tensor* mask = nullptr);
Var l1Loss(const Var& a, const Var& b);

inline void requireSameShape(const Tensor& a, const Tensor& b,
                             const char* what) {
  if (!a.sameShape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace deblurkit::ad
