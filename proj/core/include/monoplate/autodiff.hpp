#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "monoplate/tensor.hpp"

namespace monoplate {

class Tape;

/// Handle to a node of a computation graph. Cheap to copy; only valid while
/// the owning Tape is alive.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const std::vector<int>& shape() const;
};

/// Reverse-mode computation graph. Values are evaluated eagerly as ops are
/// recorded; backward() replays the tape in reverse. A Tape instance must be
/// used from one thread at a time; independent tapes are safe concurrently.
/// Node values are immutable once recorded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor value, bool requires_grad = true);
  Var constant(Tensor value);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  /// Runs reverse accumulation from a scalar output. Gradients of all
  /// requires_grad nodes are materialized; call grad() to read them.
  void backward(Var scalar_output);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  void clear();

  /// When enabled, conv2d contractions run through 32-bit GEMM. Gradient
  /// checking requires the default 64-bit path.
  void set_float_gemm(bool on) { float_gemm_ = on; }
  bool float_gemm() const { return float_gemm_; }

  // Internal: op recording.
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;
    const char* op = "input";
    std::function<void(Tape&, const Node&)> backprop;
  };
  Var emit(Tensor value, bool requires_grad, const char* op,
           std::function<void(Tape&, const Node&)> backprop);
  Tensor& grad_buffer(int id);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Node> nodes_;
  bool float_gemm_ = false;
};

// ---- Elementwise arithmetic (numpy-style broadcasting on trailing axes) ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
Var neg(Var a);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);

// ---- Elementwise functions ----
Var sigmoid(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var sqrt(Var a);
Var square(Var a);
Var sin(Var a);
Var cos(Var a);

// ---- Structure ----
Var reshape(Var a, std::vector<int> shape);
Var concat_channels(const std::vector<Var>& xs);  // along last axis
Var slice(Var a, const std::vector<int>& offset, const std::vector<int>& size);

// ---- Reductions ----
Var sum(Var a);
Var mean(Var a);
Var sum(Var a, const std::vector<int>& axes, bool keepdims);
Var mean(Var a, const std::vector<int>& axes, bool keepdims);

// ---- Linear algebra / conv ----
Var matmul(Var a, Var b);  // rank-2 x rank-2
/// x: HxWxCin, w: khxkwxCinxCout, bias: Cout (optional, pass invalid Var to
/// skip). SAME padding, stride 1 or 2.
Var conv2d(Var x, Var w, Var bias, int stride);
Var upsample2x(Var x);  // bilinear, half-pixel centers
Var softmax_channels(Var logits);

// ---- Sampling ----
/// src: HxWxC, coords: H'xW'x2 holding (x,y) pixel positions. Output H'xW'xC
/// is the bilinear blend of the four neighbours; taps outside the source
/// contribute zero. Gradients flow to both src and coords.
Var gather_bilinear(Var src, Var coords);
/// Mask of coords that fall fully inside [0,W-1]x[0,H-1]. 1.0 = valid.
Tensor bilinear_valid_mask(int src_h, int src_w, const Tensor& coords);

}  // namespace monoplate
