#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitdiv {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

/// Dense row-major float64 array with optional reverse-mode autodiff linkage.
///
/// Tensor is a shared handle: copies alias the same storage and tape node.
/// Operations never mutate their inputs; results of operations on tensors
/// that require gradients are recorded on the tape (unless a NoGradGuard is
/// active) and become non-leaf tensors.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor eye(std::size_t n);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access is only permitted on leaf tensors (no tape node).
  std::span<double> mutable_data();

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  /// Multiplies the accumulated gradient in place.
  void scale_grad(double factor);

  /// A leaf copy of the values, detached from the tape.
  Tensor detach() const;

  /// Back-propagates from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  const char* op_tag() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Operations. Broadcasting rules for the binary elementwise family:
//   * identical shapes;
//   * right operand a 1-D tensor whose length equals the last dimension of the
//     left operand (added to every row);
//   * right operand holding a single element (scalar broadcast).
// Nothing else broadcasts.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& a);
/// log(1 + exp(x)), evaluated without overflow.
Tensor softplus(const Tensor& a);
/// Elementwise clamp; gradient is zero where the input was clipped.
Tensor clamp(const Tensor& a, double lo, double hi);
/// arccos(clamp(x, lo, hi)).
Tensor acos_clamped(const Tensor& a, double lo, double hi);
/// arccos(clamp(x, -1, 1)) whose derivative is evaluated at
/// clamp(x, -1 + margin, 1 - margin), so the slope stays finite at +-1.
Tensor acos_bounded_slope(const Tensor& a, double margin);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduces one axis, dropping it from the shape.
Tensor sum_axis(const Tensor& a, std::size_t axis);
/// Euclidean norm of all elements.
Tensor norm(const Tensor& a);
/// log(sum(exp(a))) over all elements, max-shifted.
Tensor logsumexp(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Row-wise normalisation over the last axis with gain/bias; epsilon 1e-5.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);
inline constexpr double kLayerNormEps = 1e-5;
/// Mean cross-entropy of row-wise logits against integer class labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Divides each row (last axis) by max(||row||, floor).
Tensor row_normalize(const Tensor& x, double floor = 1e-12);

Tensor reshape(const Tensor& a, Shape shape);
/// Rows [begin, end) along the first axis.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Index along the first axis, dropping that axis.
Tensor select(const Tensor& a, std::size_t index);
/// Concatenates along the first axis.
Tensor concat_rows(std::span<const Tensor> parts);
/// Gathers rows of a 2-D tensor; repeated indices accumulate gradients.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

/// log det of a symmetric positive definite matrix via Cholesky.
/// Throws NumericError when the factorisation fails.
Tensor logdet_spd(const Tensor& a);

/// Scaled attention logits. q, k: [batch*tokens, heads*head_dim];
/// result [batch, heads, tokens, tokens] with entry scale * q_h[i] . k_h[j].
Tensor attention_logits(const Tensor& q, const Tensor& k, std::size_t batch,
                        std::size_t heads, double scale);
/// Applies attention maps [batch, heads, tokens, tokens] to v [batch*tokens,
/// heads*head_dim]; the per-head outputs are concatenated along columns.
Tensor attention_mix(const Tensor& attn, const Tensor& v);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Extension hook: build a tape node from a custom backward rule. The rule
// receives the output gradient and must return one gradient buffer per input
// (an empty buffer means "no contribution").
using BackwardRule = std::function<std::vector<std::vector<double>>(
    std::span<const double> out_grad, std::span<const double> out_value)>;

Tensor make_op(const char* tag, Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs, BackwardRule rule);

}  // namespace vitdiv
