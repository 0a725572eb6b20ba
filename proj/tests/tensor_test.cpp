#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "vitdiv/grad_check.hpp"
#include "vitdiv/tensor.hpp"

using namespace vitdiv;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i, p) * b.at(p, j);
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto out = matmul(Tensor::eye(2), m);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()),
            (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, OrthogonalVectors) {
  auto out = matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {0, 1}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.item(), 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(3);
  auto a = Tensor::randn({3, 4}, rng);
  auto b = Tensor::randn({4, 2}, rng);
  auto expected = naive_matmul(a, b);
  auto out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.at(i), expected[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, SymmetricInput) {
  auto y = softmax(Tensor::from({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto y = softmax(Tensor::from({2}, {1000, 1000}), 0);
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Softmax, HandEvaluatedPair) {
  auto y = softmax(Tensor::from({2}, {0, std::log(3.0)}), 0);
  EXPECT_NEAR(y.at(0), 0.25, 1e-15);
  EXPECT_NEAR(y.at(1), 0.75, 1e-15);
}

TEST(Softmax, NonFiniteInputIsAnError) {
  EXPECT_THROW(softmax(Tensor::from({2}, {0, NAN}), 0), NumericError);
  EXPECT_THROW(softmax(Tensor::from({2}, {0, 1}), 1), ShapeError);
}

TEST(Softmax, SlicesArePositiveAndSumToOne) {
  std::mt19937_64 rng(11);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto x = Tensor::randn({3, 4, 5}, rng, 4.0);
    auto y = softmax(x, axis);
    const auto& s = y.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0.0;
        for (std::size_t l = 0; l < s[axis]; ++l) {
          double v = y.at((o * s[axis] + l) * inner + in);
          EXPECT_GT(v, 0.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
  }
}

TEST(ElementwiseFamily, SpotValues) {
  auto ln = layernorm(Tensor::full({1, 4}, 3.0), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : ln.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(sum(Tensor::from({2, 2}, {1, 2, 3, 4})).item(), 10.0);
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  auto row = add(Tensor::zeros({2, 3}), Tensor::from({3}, {1, 2, 3}));
  EXPECT_EQ(row.at(1, 2), 3.0);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  auto w = Tensor::randn({2, 3, 2}, rng, 1.0, true);
  sum(w).backward();
  ASSERT_TRUE(w.has_grad());
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquaredNormGivesTwiceInput) {
  std::mt19937_64 rng(2);
  auto w = Tensor::randn({5}, rng, 1.0, true);
  sum(square(w)).backward();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2.0 * w.at(i));
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto w = Tensor::from({2}, {1.0, -2.0}, true);
  auto loss = sum(square(w));
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], -8.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Backward, NonScalarLossIsRejected) {
  auto w = Tensor::zeros({2}, true);
  EXPECT_THROW(square(w).backward(), ShapeError);
}

TEST(Backward, NoGradGuardSkipsTape) {
  auto w = Tensor::zeros({2}, true);
  NoGradGuard guard;
  auto y = square(w);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Backward, SharedSubexpressionsAccumulatePaths) {
  // f(x) = sum(s * s + s) with s = exp(x) shared by three consumers.
  auto f = [](const Tensor& x) {
    auto s = exp(x);
    return sum(mul(s, s) + s);
  };
  std::mt19937_64 rng(5);
  auto x = Tensor::randn({4}, rng, 0.5);
  EXPECT_LT(grad_check(f, x), 1e-7);
  auto leaf = Tensor::from({4}, {x.data().begin(), x.data().end()}, true);
  f(leaf).backward();
  for (std::size_t i = 0; i < 4; ++i) {
    double e = std::exp(x.at(i));
    EXPECT_NEAR(leaf.grad()[i], 2 * e * e + e, 1e-10);
  }
}

TEST(GradCheck, TrivialFunctions) {
  std::mt19937_64 rng(8);
  auto x = Tensor::randn({3, 3}, rng);
  EXPECT_LT(grad_check([](const Tensor& t) { return sum(t); }, x), 1e-9);
  EXPECT_LT(grad_check([](const Tensor& t) { return sum(softmax(t, 1)); }, x), 1e-9);
}

TEST(GradCheck, SoftOrthogonalityOnRandom4x4) {
  std::mt19937_64 rng(21);
  auto m = Tensor::randn({4, 4}, rng, 0.5);
  auto so = [](const Tensor& t) {
    return sum(square(sub(matmul(transpose(t), t), Tensor::eye(4))));
  };
  EXPECT_LT(grad_check(so, m), 1e-4);
}

// Each differentiable op, composed with a random projection to a scalar, over
// 50 seeds.
TEST(GradCheck, EveryOperationOverFiftySeeds) {
  using Fn = std::function<Tensor(const Tensor&)>;
  struct Case {
    std::string name;
    Shape shape;
    std::function<Fn(std::mt19937_64&)> make;
  };
  auto weighted = [](const Tensor& t, const Tensor& w) { return sum(mul(t, w)); };
  std::vector<Case> cases = {
      {"add_row", {3, 4},
       [&](auto& rng) {
         auto b = Tensor::randn({4}, rng);
         return Fn([=](const Tensor& t) { return sum(square(add(t, b))); });
       }},
      {"add_row_rhs", {4},
       [&](auto& rng) {
         auto a = Tensor::randn({3, 4}, rng);
         return Fn([=](const Tensor& t) { return sum(square(add(a, t))); });
       }},
      {"sub_mul_div", {2, 3},
       [&](auto& rng) {
         auto c = Tensor::uniform({2, 3}, rng, 1.0, 2.0);
         return Fn([=](const Tensor& t) { return sum(div(mul(sub(t, c), t), c)); });
       }},
      {"div_denominator", {2, 3},
       [&](auto& rng) {
         auto c = Tensor::randn({2, 3}, rng);
         return Fn([=](const Tensor& t) { return sum(div(c, add_scalar(square(t), 1.0))); });
       }},
      {"scalar_broadcast", {1},
       [&](auto& rng) {
         auto a = Tensor::randn({3, 2}, rng);
         return Fn([=](const Tensor& t) { return sum(square(mul(a, t))); });
       }},
      {"exp_log_sqrt", {5},
       [&](auto& rng) {
         auto w = Tensor::randn({5}, rng);
         return Fn([=](const Tensor& t) {
           return weighted(log(add_scalar(exp(t), 1.0)) + sqrt(add_scalar(square(t), 0.5)), w);
         });
       }},
      {"abs", {6},
       [&](auto& rng) {
         auto w = Tensor::randn({6}, rng);
         return Fn([=](const Tensor& t) { return weighted(abs(t), w); });
       }},
      {"gelu", {6},
       [&](auto& rng) {
         auto w = Tensor::randn({6}, rng);
         return Fn([=](const Tensor& t) { return weighted(gelu(scale(t, 2.0)), w); });
       }},
      {"softplus", {6},
       [&](auto& rng) {
         auto w = Tensor::randn({6}, rng);
         return Fn([=](const Tensor& t) { return weighted(softplus(scale(t, 3.0)), w); });
       }},
      {"acos_clamped", {6},
       [&](auto& rng) {
         auto w = Tensor::randn({6}, rng);
         return Fn([=](const Tensor& t) {
           return weighted(acos_clamped(scale(t, 0.3), -1 + 1e-7, 1 - 1e-7), w);
         });
       }},
      {"matmul_left", {3, 4},
       [&](auto& rng) {
         auto b = Tensor::randn({4, 2}, rng);
         auto w = Tensor::randn({3, 2}, rng);
         return Fn([=](const Tensor& t) { return weighted(matmul(t, b), w); });
       }},
      {"matmul_gram", {3, 4},
       [&](auto& rng) {
         auto w = Tensor::randn({4, 4}, rng);
         return Fn([=](const Tensor& t) { return weighted(matmul(transpose(t), t), w); });
       }},
      {"sum_axis", {2, 3, 4},
       [&](auto& rng) {
         auto w = Tensor::randn({2, 4}, rng);
         return Fn([=](const Tensor& t) { return weighted(square(sum_axis(t, 1)), w); });
       }},
      {"mean_norm", {7},
       [&](auto&) { return Fn([](const Tensor& t) { return add(mean(t), norm(t)); }); }},
      {"logsumexp", {2, 5},
       [&](auto&) { return Fn([](const Tensor& t) { return logsumexp(scale(t, 2.0)); }); }},
      {"softmax_axis1", {3, 4},
       [&](auto& rng) {
         auto w = Tensor::randn({3, 4}, rng);
         return Fn([=](const Tensor& t) { return weighted(softmax(t, 1), w); });
       }},
      {"softmax_axis0", {3, 4},
       [&](auto& rng) {
         auto w = Tensor::randn({3, 4}, rng);
         return Fn([=](const Tensor& t) { return weighted(softmax(t, 0), w); });
       }},
      {"layernorm_x", {3, 5},
       [&](auto& rng) {
         auto g = Tensor::randn({5}, rng);
         auto b = Tensor::randn({5}, rng);
         auto w = Tensor::randn({3, 5}, rng);
         return Fn([=](const Tensor& t) { return weighted(layernorm(t, g, b), w); });
       }},
      {"layernorm_gain", {5},
       [&](auto& rng) {
         auto x = Tensor::randn({3, 5}, rng);
         auto b = Tensor::randn({5}, rng);
         auto w = Tensor::randn({3, 5}, rng);
         return Fn([=](const Tensor& t) { return weighted(layernorm(x, t, b), w); });
       }},
      {"layernorm_bias", {5},
       [&](auto& rng) {
         auto x = Tensor::randn({3, 5}, rng);
         auto g = Tensor::randn({5}, rng);
         auto w = Tensor::randn({3, 5}, rng);
         return Fn([=](const Tensor& t) { return weighted(layernorm(x, g, t), w); });
       }},
      {"cross_entropy", {4, 3},
       [&](auto&) {
         return Fn([](const Tensor& t) {
           std::vector<int> labels{0, 2, 1, 2};
           return cross_entropy(t, labels);
         });
       }},
      {"row_normalize", {3, 4},
       [&](auto& rng) {
         auto w = Tensor::randn({3, 4}, rng);
         return Fn([=](const Tensor& t) { return weighted(row_normalize(t), w); });
       }},
      {"reshape_slice_select", {3, 4},
       [&](auto& rng) {
         auto w1 = Tensor::randn({2}, rng);
         auto w2 = Tensor::randn({2, 2}, rng);
         return Fn([=](const Tensor& t) {
           auto rows = reshape(t, {6, 2});
           return add(weighted(square(select(slice_rows(rows, 1, 5), 1)), w1),
                      weighted(square(slice_rows(rows, 0, 2)), w2));
         });
       }},
      {"concat_gather", {2, 3},
       [&](auto& rng) {
         auto other = Tensor::randn({1, 3}, rng);
         auto w = Tensor::randn({4, 3}, rng);
         return Fn([=](const Tensor& t) {
           std::vector<Tensor> parts{t, other};
           auto c = concat_rows(parts);
           std::vector<std::size_t> idx{2, 0, 0, 1};
           return weighted(square(gather_rows(c, idx)), w);
         });
       }},
      {"logdet_spd", {3, 3},
       [&](auto&) {
         return Fn([](const Tensor& t) {
           return logdet_spd(add(matmul(transpose(t), t), scale(Tensor::eye(3), 0.5)));
         });
       }},
      {"attention_logits_mix", {2 * 3, 4},
       [&](auto& rng) {
         auto k = Tensor::randn({6, 4}, rng);
         auto v = Tensor::randn({6, 4}, rng);
         auto w = Tensor::randn({6, 4}, rng);
         return Fn([=](const Tensor& q) {
           auto a = softmax(attention_logits(q, k, 2, 2, 0.7), 3);
           return weighted(attention_mix(a, v), w);
         });
       }},
      {"attention_keys_values", {2 * 3, 4},
       [&](auto& rng) {
         auto q = Tensor::randn({6, 4}, rng);
         auto w = Tensor::randn({6, 4}, rng);
         return Fn([=](const Tensor& kv) {
           auto a = softmax(attention_logits(q, kv, 2, 2, 0.7), 3);
           return weighted(attention_mix(a, kv), w);
         });
       }},
  };

  for (const auto& c : cases) {
    SCOPED_TRACE(c.name);
    for (int seed = 0; seed < 50; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      auto fn = c.make(rng);
      auto x = Tensor::randn(c.shape, rng);
      double err = grad_check(fn, x);
      EXPECT_LT(err, 1e-4) << c.name << " seed " << seed;
    }
  }
}
