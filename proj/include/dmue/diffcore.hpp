#pragma once

// Minimal reverse-mode differentiation over dense rank-2 tensors of doubles.
//
// Every tensor is a (rows x cols) row-major matrix; vectors are 1 x n and
// scalars are 1 x 1. Reductions run in a fixed left-to-right order so that
// forward and backward passes are bit-reproducible.
//
// A graph and its nodes belong to one thread. The checked-mode and no-grad
// switches are thread-local.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmue {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(Shape s);

/// Raised when checked mode detects a non-finite value or an undefined
/// operation (log of a non-positive value, normalizing a zero row).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Node;
struct NodeAccess;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  Shape shape() const;
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }

  std::span<const double> values() const;
  /// Direct write access, for optimizers and finite-difference probes.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  bool has_grad() const;
  /// Empty span when no gradient has reached this node.
  std::span<const double> grad() const;
  void zero_grad();

  /// Name of the producing operation ("leaf" for inputs and parameters).
  const std::string& op() const;

  /// Independent leaf holding a copy of the values.
  Tensor detach_copy(bool requires_grad = false) const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct detail::NodeAccess;
};

// Thread-local switches --------------------------------------------------

/// While alive, every op verifies its outputs are finite and rejects
/// log of non-positive values and zero-norm normalization.
class CheckedScope {
 public:
  explicit CheckedScope(bool enabled = true);
  ~CheckedScope();
  CheckedScope(const CheckedScope&) = delete;
  CheckedScope& operator=(const CheckedScope&) = delete;

 private:
  bool previous_;
};
bool checked_mode();

/// While alive, ops record no provenance (inference only).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Operations -------------------------------------------------------------

/// x W + b with x: N x in, W: in x out, b: 1 x out.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// Same row-major values viewed with a new shape of equal size.
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
/// Multiplies row i of x (N x C) by factors(i, 0), factors: N x 1.
Tensor scale_rows(const Tensor& x, const Tensor& factors);

/// Subgradient at 0 is the negative-side slope (0 for relu, slope for prelu).
Tensor relu(const Tensor& x);
/// slope is a learnable 1 x 1 tensor shared by every element.
Tensor prelu(const Tensor& x, const Tensor& slope);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor row_softmax(const Tensor& x);
/// Numerically stable log(row_softmax(x)).
Tensor row_log_softmax(const Tensor& x);
/// Divides each row by max(||row||, 1e-12); checked mode rejects zero rows.
Tensor row_l2_normalize(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor frobenius_norm_sq(const Tensor& x);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

/// Entries of x where mask != 0, in row-major order, as a 1 x K row.
Tensor masked_select(const Tensor& x, const Tensor& mask);
/// Rows of x at the given indices (repeats allowed).
Tensor select_rows(const Tensor& x, std::span<const std::size_t> indices);

/// Same values; backward treats the result as a constant.
Tensor stop_gradient(const Tensor& x);

// Differentiation --------------------------------------------------------

/// Accumulates d(root)/d(node) into every reachable node that requires a
/// gradient. root must be 1 x 1.
void backward(const Tensor& root);

/// Max over every coordinate of every point tensor of
/// |analytic - central difference| / max(1, |central difference|).
/// fn is re-evaluated with the point tensors perturbed in place; it must
/// return a 1 x 1 tensor built from them.
double grad_check(const std::function<Tensor()>& fn, std::span<Tensor> point, double step);

}  // namespace dmue
