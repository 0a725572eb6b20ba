#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vitdiv/tensor.hpp"

namespace vitdiv {

namespace {

using Vec = std::vector<double>;
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

enum class Broadcast { Same, Row, Scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Broadcast::Row;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

// Index into b for flat position i of a under the broadcast kind.
inline std::size_t bidx(Broadcast kind, std::size_t i, std::size_t width) {
  switch (kind) {
    case Broadcast::Same:
      return i;
    case Broadcast::Row:
      return i % width;
    case Broadcast::Scalar:
      return 0;
  }
  return 0;
}

// Reduces a gradient laid out like `a` down to the shape of `b`.
Vec reduce_to(Broadcast kind, const Vec& g, std::size_t b_numel, std::size_t width) {
  if (kind == Broadcast::Same) return g;
  Vec out(b_numel, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) out[bidx(kind, i, width)] += g[i];
  return out;
}

template <typename Fwd, typename Da, typename Db>
Tensor binary(const char* tag, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  const Broadcast kind = broadcast_kind(a, b, tag);
  const std::size_t width = a.rank() ? a.shape().back() : 1;
  auto av = a.data();
  auto bv = b.data();
  Vec out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[bidx(kind, i, width)]);
  return make_op(tag, a.shape(), std::move(out), {a, b},
                 [a, b, kind, width, da, db](std::span<const double> g, std::span<const double>) {
                   auto av = a.data();
                   auto bv = b.data();
                   Vec ga, gb;
                   if (a.requires_grad()) {
                     ga.resize(av.size());
                     for (std::size_t i = 0; i < av.size(); ++i)
                       ga[i] = g[i] * da(av[i], bv[bidx(kind, i, width)]);
                   }
                   if (b.requires_grad()) {
                     Vec full(av.size());
                     for (std::size_t i = 0; i < av.size(); ++i)
                       full[i] = g[i] * db(av[i], bv[bidx(kind, i, width)]);
                     gb = reduce_to(kind, full, b.numel(), width);
                   }
                   return std::vector<Vec>{std::move(ga), std::move(gb)};
                 });
}

// Elementwise unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const char* tag, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto av = a.data();
  Vec out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_op(tag, a.shape(), std::move(out), {a},
                 [a, deriv](std::span<const double> g, std::span<const double> y) {
                   auto av = a.data();
                   Vec ga(av.size());
                   for (std::size_t i = 0; i < av.size(); ++i) ga[i] = g[i] * deriv(av[i], y[i]);
                   return std::vector<Vec>{std::move(ga)};
                 });
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_finite(const Tensor& t, const char* op) {
  for (double x : t.data()) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      "add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a,
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Tensor acos_clamped(const Tensor& a, double lo, double hi) {
  return unary(
      "acos", a, [lo, hi](double x) { return std::acos(std::clamp(x, lo, hi)); },
      [lo, hi](double x, double) {
        if (x < lo || x > hi) return 0.0;
        return -1.0 / std::sqrt(1.0 - x * x);
      });
}

Tensor acos_bounded_slope(const Tensor& a, double margin) {
  return unary(
      "acos", a, [](double x) { return std::acos(std::clamp(x, -1.0, 1.0)); },
      [margin](double x, double) {
        const double c = std::clamp(x, -1.0 + margin, 1.0 - margin);
        return -1.0 / std::sqrt(1.0 - c * c);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Vec out(m * n);
  {
    ConstMap am(a.data().data(), m, k);
    ConstMap bm(b.data().data(), k, n);
    MutMap om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [a, b, m, k, n](std::span<const double> g, std::span<const double>) {
                   ConstMap gm(g.data(), m, n);
                   Vec ga, gb;
                   if (a.requires_grad()) {
                     ga.resize(m * k);
                     MutMap(ga.data(), m, k).noalias() =
                         gm * ConstMap(b.data().data(), k, n).transpose();
                   }
                   if (b.requires_grad()) {
                     gb.resize(k * n);
                     MutMap(gb.data(), k, n).noalias() =
                         ConstMap(a.data().data(), m, k).transpose() * gm;
                   }
                   return std::vector<Vec>{std::move(ga), std::move(gb)};
                 });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto av = a.data();
  Vec out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op("transpose", {n, m}, std::move(out), {a},
                 [m, n](std::span<const double> g, std::span<const double>) {
                   Vec ga(m * n);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
                   return std::vector<Vec>{std::move(ga)};
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const std::size_t n = a.numel();
  return make_op("sum", {}, {s}, {a}, [n](std::span<const double> g, std::span<const double>) {
    return std::vector<Vec>{Vec(n, g[0])};
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("sum_axis: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(a.shape()));
  }
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  auto av = a.data();
  Vec out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < inner; ++in)
        out[o * inner + in] += av[(o * len + l) * inner + in];
  return make_op("sum_axis", out_shape, std::move(out), {a},
                 [outer, inner, len](std::span<const double> g, std::span<const double>) {
                   Vec ga(outer * len * inner);
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t l = 0; l < len; ++l)
                       for (std::size_t in = 0; in < inner; ++in)
                         ga[(o * len + l) * inner + in] = g[o * inner + in];
                   return std::vector<Vec>{std::move(ga)};
                 });
}

Tensor norm(const Tensor& a) { return sqrt(sum(square(a))); }

Tensor logsumexp(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("logsumexp of an empty tensor");
  auto av = a.data();
  const double m = *std::max_element(av.begin(), av.end());
  double s = 0.0;
  for (double x : av) s += std::exp(x - m);
  const double value = m + std::log(s);
  return make_op("logsumexp", {}, {value}, {a},
                 [a](std::span<const double> g, std::span<const double> y) {
                   auto av = a.data();
                   Vec ga(av.size());
                   for (std::size_t i = 0; i < av.size(); ++i) ga[i] = g[0] * std::exp(av[i] - y[0]);
                   return std::vector<Vec>{std::move(ga)};
                 });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(x.shape()));
  }
  require_finite(x, "softmax");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  auto xv = x.data();
  Vec out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) m = std::max(m, xv[base + l * inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l * inner] - m);
        out[base + l * inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= z;
    }
  }
  // Jacobian-vector product: y * (g - <g, y>) per slice.
  return make_op("softmax", s, std::move(out), {x},
                 [outer, inner, len](std::span<const double> g, std::span<const double> y) {
                   Vec gx(y.size());
                   for (std::size_t o = 0; o < outer; ++o) {
                     for (std::size_t in = 0; in < inner; ++in) {
                       const std::size_t base = o * len * inner + in;
                       double dot = 0.0;
                       for (std::size_t l = 0; l < len; ++l)
                         dot += g[base + l * inner] * y[base + l * inner];
                       for (std::size_t l = 0; l < len; ++l)
                         gx[base + l * inner] = y[base + l * inner] * (g[base + l * inner] - dot);
                     }
                   }
                   return std::vector<Vec>{std::move(gx)};
                 });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 1) throw ShapeError("layernorm of a scalar");
  const std::size_t width = x.shape().back();
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw ShapeError("layernorm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match width " + std::to_string(width));
  }
  const std::size_t rows = x.numel() / width;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  Vec xhat(xv.size()), inv_std(rows), out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      xhat[i] = (row[c] - mu) * inv_std[r];
      out[i] = xhat[i] * gv[c] + bv[c];
    }
  }
  return make_op(
      "layernorm", x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, width](
          std::span<const double> g, std::span<const double>) {
        auto gv = gain.data();
        Vec gx, ggain, gbias;
        if (gain.requires_grad()) ggain.assign(width, 0.0);
        if (bias.requires_grad()) gbias.assign(width, 0.0);
        if (x.requires_grad()) gx.resize(rows * width);
        const double inv_w = 1.0 / static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            const std::size_t i = r * width + c;
            if (!ggain.empty()) ggain[c] += g[i] * xhat[i];
            if (!gbias.empty()) gbias[c] += g[i];
            const double d = g[i] * gv[c];
            sum_d += d;
            sum_dx += d * xhat[i];
          }
          if (gx.empty()) continue;
          for (std::size_t c = 0; c < width; ++c) {
            const std::size_t i = r * width + c;
            const double d = g[i] * gv[c];
            gx[i] = inv_std[r] * (d - inv_w * sum_d - xhat[i] * inv_w * sum_dx);
          }
        }
        return std::vector<Vec>{std::move(gx), std::move(ggain), std::move(gbias)};
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  if (rows == 0) throw ShapeError("cross_entropy: empty batch");
  auto lv = logits.data();
  Vec probs(lv.size());
  double total = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= classes) {
      throw ShapeError("cross_entropy: label " + std::to_string(lab[r]) + " out of range");
    }
    const double* row = lv.data() + r * classes;
    const double m = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[r * classes + c] = std::exp(row[c] - m);
      z += probs[r * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= z;
    total += -(row[lab[r]] - m - std::log(z));
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_op("cross_entropy", {}, {total * inv_rows}, {logits},
                 [probs = std::move(probs), lab = std::move(lab), rows, classes, inv_rows](
                     std::span<const double> g, std::span<const double>) {
                   Vec gl(probs.size());
                   for (std::size_t r = 0; r < rows; ++r) {
                     for (std::size_t c = 0; c < classes; ++c) {
                       const double target = static_cast<int>(c) == lab[r] ? 1.0 : 0.0;
                       gl[r * classes + c] = g[0] * inv_rows * (probs[r * classes + c] - target);
                     }
                   }
                   return std::vector<Vec>{std::move(gl)};
                 });
}

Tensor row_normalize(const Tensor& x, double floor) {
  if (x.rank() < 1) throw ShapeError("row_normalize of a scalar");
  const std::size_t width = x.shape().back();
  const std::size_t rows = width ? x.numel() / width : 0;
  auto xv = x.data();
  Vec out(xv.size()), norms(rows);
  std::vector<bool> clipped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < width; ++c) s += xv[r * width + c] * xv[r * width + c];
    const double nrm = std::sqrt(s);
    clipped[r] = nrm < floor;
    norms[r] = clipped[r] ? floor : nrm;
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = xv[r * width + c] / norms[r];
  }
  return make_op("row_normalize", x.shape(), std::move(out), {x},
                 [norms = std::move(norms), clipped = std::move(clipped), rows, width](
                     std::span<const double> g, std::span<const double> y) {
                   Vec gx(rows * width);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     if (!clipped[r]) {
                       for (std::size_t c = 0; c < width; ++c)
                         dot += g[r * width + c] * y[r * width + c];
                     }
                     for (std::size_t c = 0; c < width; ++c) {
                       const std::size_t i = r * width + c;
                       gx[i] = (g[i] - y[i] * dot) / norms[r];
                     }
                   }
                   return std::vector<Vec>{std::move(gx)};
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Vec out(a.data().begin(), a.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {a},
                 [](std::span<const double> g, std::span<const double>) {
                   return std::vector<Vec>{Vec(g.begin(), g.end())};
                 });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1 || begin > end || end > a.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t stride = a.dim(0) ? a.numel() / a.dim(0) : 0;
  Shape shape = a.shape();
  shape[0] = end - begin;
  auto av = a.data();
  Vec out(av.begin() + begin * stride, av.begin() + end * stride);
  const std::size_t total = a.numel();
  return make_op("slice_rows", std::move(shape), std::move(out), {a},
                 [begin, stride, total](std::span<const double> g, std::span<const double>) {
                   Vec ga(total, 0.0);
                   std::copy(g.begin(), g.end(), ga.begin() + begin * stride);
                   return std::vector<Vec>{std::move(ga)};
                 });
}

Tensor select(const Tensor& a, std::size_t index) {
  Tensor s = slice_rows(a, index, index + 1);
  Shape shape(a.shape().begin() + 1, a.shape().end());
  return reshape(s, std::move(shape));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  std::size_t rows = 0;
  Vec out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() < 1 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_op("concat_rows", std::move(shape), std::move(out),
                 std::vector<Tensor>(parts.begin(), parts.end()),
                 [sizes = std::move(sizes)](std::span<const double> g, std::span<const double>) {
                   std::vector<Vec> grads;
                   std::size_t off = 0;
                   for (auto n : sizes) {
                     grads.emplace_back(g.begin() + off, g.begin() + off + n);
                     off += n;
                   }
                   return grads;
                 });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "gather_rows");
  const std::size_t width = a.dim(1);
  auto av = a.data();
  Vec out(rows.size() * width);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= a.dim(0)) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " out of range for " +
                       shape_str(a.shape()));
    }
    std::copy_n(av.begin() + idx[r] * width, width, out.begin() + r * width);
  }
  const std::size_t total = a.numel();
  Shape shape{idx.size(), width};
  return make_op("gather_rows", std::move(shape), std::move(out), {a},
                 [idx = std::move(idx), width, total](std::span<const double> g,
                                                      std::span<const double>) {
                   Vec ga(total, 0.0);
                   for (std::size_t r = 0; r < idx.size(); ++r)
                     for (std::size_t c = 0; c < width; ++c)
                       ga[idx[r] * width + c] += g[r * width + c];
                   return std::vector<Vec>{std::move(ga)};
                 });
}

Tensor logdet_spd(const Tensor& a) {
  require_rank(a, 2, "logdet_spd");
  const std::size_t n = a.dim(0);
  if (a.dim(1) != n) throw ShapeError("logdet_spd: non-square " + shape_str(a.shape()));
  RowMajor m = ConstMap(a.data().data(), n, n);
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw NumericError("logdet_spd: Cholesky factorisation failed (matrix not positive definite)");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  double value = 0.0;
  for (std::size_t i = 0; i < n; ++i) value += 2.0 * std::log(l(i, i));
  if (!std::isfinite(value)) throw NumericError("logdet_spd: non-finite log-determinant");
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  return make_op("logdet_spd", {}, {value}, {a},
                 [inv = std::move(inv), n](std::span<const double> g, std::span<const double>) {
                   Vec ga(n * n);
                   // d logdet / dA = A^{-T}; symmetrised so that perturbations of a
                   // symmetric input see the same directional derivative.
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       ga[i * n + j] = g[0] * 0.5 * (inv(i, j) + inv(j, i));
                   return std::vector<Vec>{std::move(ga)};
                 });
}

Tensor attention_logits(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads,
                        double scale) {
  require_rank(q, 2, "attention_logits");
  if (q.shape() != k.shape()) {
    throw ShapeError("attention_logits: q " + shape_str(q.shape()) + " vs k " +
                     shape_str(k.shape()));
  }
  if (batch == 0 || heads == 0 || q.dim(0) % batch != 0 || q.dim(1) % heads != 0) {
    throw ShapeError("attention_logits: " + shape_str(q.shape()) + " not divisible into " +
                     std::to_string(batch) + " images x " + std::to_string(heads) + " heads");
  }
  const std::size_t tokens = q.dim(0) / batch, width = q.dim(1), hd = width / heads;
  auto qv = q.data();
  auto kv = k.data();
  Vec out(batch * heads * tokens * tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      // Per-head column blocks are strided; copy them out.
      RowMajor qb(tokens, hd), kb(tokens, hd);
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t c = 0; c < hd; ++c) {
          qb(t, c) = qv[(b * tokens + t) * width + h * hd + c];
          kb(t, c) = kv[(b * tokens + t) * width + h * hd + c];
        }
      MutMap om(out.data() + (b * heads + h) * tokens * tokens, tokens, tokens);
      om.noalias() = scale * qb * kb.transpose();
    }
  }
  return make_op(
      "attention_logits", {batch, heads, tokens, tokens}, std::move(out), {q, k},
      [q, k, batch, heads, tokens, width, hd, scale](std::span<const double> g,
                                                     std::span<const double>) {
        auto qv = q.data();
        auto kv = k.data();
        Vec gq(q.numel(), 0.0), gk(k.numel(), 0.0);
        RowMajor qb(tokens, hd), kb(tokens, hd);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < tokens; ++t)
              for (std::size_t c = 0; c < hd; ++c) {
                qb(t, c) = qv[(b * tokens + t) * width + h * hd + c];
                kb(t, c) = kv[(b * tokens + t) * width + h * hd + c];
              }
            ConstMap gm(g.data() + (b * heads + h) * tokens * tokens, tokens, tokens);
            RowMajor dq = scale * gm * kb;
            RowMajor dk = scale * gm.transpose() * qb;
            for (std::size_t t = 0; t < tokens; ++t)
              for (std::size_t c = 0; c < hd; ++c) {
                gq[(b * tokens + t) * width + h * hd + c] = dq(t, c);
                gk[(b * tokens + t) * width + h * hd + c] = dk(t, c);
              }
          }
        }
        if (!q.requires_grad()) gq.clear();
        if (!k.requires_grad()) gk.clear();
        return std::vector<Vec>{std::move(gq), std::move(gk)};
      });
}

Tensor attention_mix(const Tensor& attn, const Tensor& v) {
  require_rank(attn, 4, "attention_mix");
  require_rank(v, 2, "attention_mix");
  const std::size_t batch = attn.dim(0), heads = attn.dim(1), tokens = attn.dim(2);
  if (attn.dim(3) != tokens || v.dim(0) != batch * tokens || v.dim(1) % heads != 0) {
    throw ShapeError("attention_mix: attention " + shape_str(attn.shape()) + " vs values " +
                     shape_str(v.shape()));
  }
  const std::size_t width = v.dim(1), hd = width / heads;
  auto av = attn.data();
  auto vv = v.data();
  Vec out(batch * tokens * width);
  RowMajor vb(tokens, hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t c = 0; c < hd; ++c) vb(t, c) = vv[(b * tokens + t) * width + h * hd + c];
      ConstMap am(av.data() + (b * heads + h) * tokens * tokens, tokens, tokens);
      RowMajor ob = am * vb;
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t c = 0; c < hd; ++c) out[(b * tokens + t) * width + h * hd + c] = ob(t, c);
    }
  }
  return make_op(
      "attention_mix", {batch * tokens, width}, std::move(out), {attn, v},
      [attn, v, batch, heads, tokens, width, hd](std::span<const double> g,
                                                 std::span<const double>) {
        auto av = attn.data();
        auto vv = v.data();
        Vec ga(attn.requires_grad() ? attn.numel() : 0);
        Vec gv(v.requires_grad() ? v.numel() : 0, 0.0);
        RowMajor vb(tokens, hd), gb(tokens, hd);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < tokens; ++t)
              for (std::size_t c = 0; c < hd; ++c) {
                vb(t, c) = vv[(b * tokens + t) * width + h * hd + c];
                gb(t, c) = g[(b * tokens + t) * width + h * hd + c];
              }
            ConstMap am(av.data() + (b * heads + h) * tokens * tokens, tokens, tokens);
            if (!ga.empty()) {
              MutMap(ga.data() + (b * heads + h) * tokens * tokens, tokens, tokens).noalias() =
                  gb * vb.transpose();
            }
            if (!gv.empty()) {
              RowMajor dv = am.transpose() * gb;
              for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t c = 0; c < hd; ++c)
                  gv[(b * tokens + t) * width + h * hd + c] = dv(t, c);
            }
          }
        }
        return std::vector<Vec>{std::move(ga), std::move(gv)};
      });
}

}  // namespace vitdiv
