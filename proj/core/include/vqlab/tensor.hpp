#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vqlab {

// Dense row-major tensor of 64-bit reals. Handles are cheap to copy and share
// the underlying buffer; clone() makes a deep copy. Gradient storage lives
// beside the values and is filled by Tape::backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const;
  int dim(int axis) const;
  std::size_t size() const;

  std::span<double> values();
  std::span<const double> values() const;

  // Value of a rank-0/size-1 tensor.
  double item() const;
  double value_at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates (zero-filled) gradient storage on first use.
  std::span<double> grad_mut();
  void ensure_grad();
  void zero_grad();

  Tensor clone() const;
  // Same buffer, detached from gradient flow.
  Tensor detached() const;

  bool same_buffer(const Tensor& other) const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Constructing a Tape makes it the active tape for the
// current thread; forward ops record a backward closure whenever an input
// requires grad. Nodes are recorded in forward (topological) order and
// backward() replays them exactly once in reverse. A tape is confined to the
// thread that created it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(std::function<void()> backward_fn);
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
  // into the grad buffers of every recorded tensor. One sweep per tape.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
  bool consumed_ = false;
};

// Suspends recording on the active tape for the current scope (inference
// passes, finite-difference probes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

std::string shape_string(const std::vector<int>& shape);

// ---- forward primitives -----------------------------------------------
// Elementwise binaries accept equal shapes or a scalar (size-1) on either
// side; anything else is a shape error (no implicit broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
// x*ln(x) with the 0*ln(0) = 0 convention; keeps entropy terms NaN-free.
Tensor xlogx(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor diagonal(const Tensor& a);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
// Unit L2 normalization along an axis; errors on a zero-norm lane.
Tensor normalize(const Tensor& x, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);

// Mean absolute / mean squared elementwise difference (scalars).
Tensor l1_distance(const Tensor& a, const Tensor& b);
Tensor squared_l2_distance(const Tensor& a, const Tensor& b);

// conv2d: x [N,C,H,W], w [Cout,Cin,kh,kw]. conv_transpose2d: w [Cin,Cout,kh,kw],
// out size (H-1)*stride - 2*pad + kh + out_pad.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride, int pad, int out_pad);
// y[n,c,h,w] = x[n,c,h,w] + b[c]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

// Nearest-neighbor resize of the trailing two axes; source index is
// floor(dst * src_size / dst_size), so 2x2 -> 1x1 keeps the top-left value.
Tensor nn_resize(const Tensor& x, int out_h, int out_w);

Tensor reshape(const Tensor& x, std::vector<int> new_shape);
Tensor nchw_to_nhwc(const Tensor& x);
Tensor nhwc_to_nchw(const Tensor& x);

// rows [N,D] selected from table [K,D]; gradient scatters into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);
// Squared Euclidean distance matrix [N,K] between rows of a [N,D] and b [K,D].
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);

Tensor detach(const Tensor& x);
// Forward takes the values of `forward_value`; backward passes the output
// gradient to x unchanged (straight-through).
Tensor ste_apply(const Tensor& x, const Tensor& forward_value);

// Max over coordinates of |autodiff - central difference| / (|central difference| + 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step);

}  // namespace vqlab
