#pragma once

// Minimal reverse-mode automatic differentiation over row-major dense
// matrices. A Tape records every operation of one forward pass; backward()
// walks it in reverse and accumulates gradients into the parents of each
// node and finally into the Parameters that were bound to the tape.
//
// Batches are laid out one sample per row. Images enter as rows holding a
// flattened CHW buffer; token sequences enter as (batch * tokens) rows.

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace mos {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// A named trainable array together with its accumulated gradient.
struct Parameter {
  std::string name;
  Mat value;
  Mat grad;

  Parameter() = default;
  Parameter(std::string n, Mat v)
      : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] const Mat& value() const;
  [[nodiscard]] const Mat& grad() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }
  [[nodiscard]] bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Receives the gradient of the root with respect to this node's output.
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  /// With grad disabled, parameters are bound as constants and no backward
  /// closures are kept (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  /// Binds a parameter; the node reads the parameter's storage directly.
  Var parameter(Parameter& p);
  /// Same value as `v`, but no gradient flows back through the result.
  Var detach(Var v);

  Var record(Mat value, std::vector<Var> parents, BackwardFn backward);

  /// Adds `g` to the gradient buffer of `v` if it participates in backprop.
  void accumulate(Var v, const Mat& g);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every
  /// parameter bound on this tape (parameter grads are accumulated, not reset).
  void backward(Var root);

  [[nodiscard]] const Mat& value(int id) const;
  [[nodiscard]] const Mat& grad(int id) const;
  [[nodiscard]] bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;  // parameter storage, when bound
    Parameter* param = nullptr;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable references while recording
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Operations. All inputs must live on the same tape.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double c);
Var add_row(Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var relu(Var x);
Var gelu(Var x);  // tanh approximation

/// Divides each row by max(||row||_2, eps).
Var normalize_rows(Var x, double eps = 1e-12);
Var concat_cols(Var a, Var b);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Per-sample normalisation over groups of channels of a B x (C*S) CHW map,
/// followed by a per-channel affine map (gamma, beta: 1 x C).
Var group_norm(Var x, Var gamma, Var beta, int channels, int groups, double eps = 1e-5);

/// Sum of c_i * s_i over 1x1 scalars.
Var weighted_sum(const std::vector<std::pair<double, Var>>& terms);

/// Wraps an externally computed scalar function with known gradients
/// d(value)/d(inputs[i]) = grads[i].
Var scalar_function(const std::vector<Var>& inputs, double value, std::vector<Mat> grads);

struct ConvGeometry {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;

  [[nodiscard]] int out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  [[nodiscard]] int out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

/// 2-D convolution. x: B x (Cin*H*W) in CHW order; weight: Cout x (Cin*k*k);
/// bias: 1 x Cout. Output: B x (Cout*Hout*Wout) in CHW order.
Var conv2d(Var x, Var weight, Var bias, const ConvGeometry& geom);

/// Mean over the spatial positions of each channel: B x (C*S) -> B x C.
Var channel_mean(Var x, int channels);

/// Adds a (tokens x d) table to every consecutive block of `tokens` rows.
Var add_tiled(Var x, Var table);

/// Mean over each consecutive block of `tokens` rows: (B*T) x d -> B x d.
Var token_mean(Var x, int tokens);

/// Multi-head self-attention core. qkv: (B*T) x 3d holding [Q | K | V];
/// returns (B*T) x d with softmax(QK^T / sqrt(d_head)) V per head.
Var self_attention(Var qkv, int tokens, int heads);

}  // namespace ad
}  // namespace mos
