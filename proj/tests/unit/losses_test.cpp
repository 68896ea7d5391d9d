#include <gtest/gtest.h>

#include <cmath>

#include "blspkd/losses/losses.hpp"
#include "support/gradcheck.hpp"

namespace num = blspkd::num;
namespace loss = blspkd::loss;
namespace model = blspkd::model;
using num::Tape;
using num::Tensor;
using num::Var;

namespace {

Tensor<double> dist(std::size_t rows, std::vector<double> v) {
  const auto cols = v.size() / rows;
  return Tensor<double>(rows, cols, std::move(v));
}

// Random simplex rows with a spread of sharpness.
Tensor<double> random_simplex(num::Rng& rng, std::size_t rows, std::size_t v) {
  Tensor<double> p(rows, v);
  for (std::size_t r = 0; r < rows; ++r) {
    const double temp = 0.2 + 3.0 * rng.uniform();
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += (p(r, j) = std::exp(temp * rng.normal()));
    for (std::size_t j = 0; j < v; ++j) p(r, j) /= z;
  }
  return p;
}

Tensor<double> uniform(std::size_t rows, std::size_t v) { return Tensor<double>(rows, v, 1.0 / static_cast<double>(v)); }

}  // namespace

TEST(RespCe, Examples) {
  EXPECT_EQ(loss::resp_ce(dist(2, {0, 1, 1, 0}), std::vector<int>{1, 0}), 0.0);
  EXPECT_NEAR(loss::resp_ce(dist(1, {0.5, 0.5}), std::vector<int>{0}), 0.6931, 1e-4);
  EXPECT_NEAR(loss::resp_ce(uniform(3, 64), std::vector<int>{3, 9, 60}), 3 * std::log(64.0), 1e-12);
}

TEST(RespCe, ZeroProbabilityIsClamped) {
  const auto before = loss::clamp_events();
  EXPECT_NEAR(loss::resp_ce(dist(1, {1, 0}), std::vector<int>{1}), -std::log(loss::kProbFloor), 1e-9);
  EXPECT_GT(loss::clamp_events(), before);
}

TEST(RespCe, LengthMismatch) {
  EXPECT_THROW(loss::resp_ce(uniform(2, 4), std::vector<int>{1}), num::DimensionError);
}

TEST(RespKl, Examples) {
  auto p = dist(1, {0.2, 0.3, 0.5});
  EXPECT_NEAR(loss::resp_kl(p, p), loss::entropy(p), 1e-15);
  EXPECT_EQ(loss::resp_kl(dist(1, {0, 1, 0}), dist(1, {0, 1, 0})), 0.0);
  EXPECT_NEAR(loss::resp_kl(dist(1, {0.5, 0.5}), dist(1, {0.25, 0.75})), 0.8370, 5e-5);
  EXPECT_NEAR(loss::resp_kl(dist(1, {0.5, 0.5}), dist(1, {0.25, 0.75})),
              -0.5 * std::log(0.25) - 0.5 * std::log(0.75), 1e-15);
}

TEST(RespKl, BoundedBelowByEntropyAndEqualsKlPlusEntropy) {
  num::Rng rng(17);
  for (int i = 0; i < 300; ++i) {
    auto p = random_simplex(rng, 1, 12);
    auto q = random_simplex(rng, 1, 12);
    const double excess = loss::resp_kl(p, q) - loss::entropy(p);
    EXPECT_GE(excess, -1e-9);
    double kl = 0;
    for (std::size_t v = 0; v < 12; ++v) kl += p[v] * std::log(p[v] / q[v]);
    EXPECT_NEAR(excess, kl, 1e-8);
    EXPECT_NEAR(loss::kl_divergence(p, q), kl, 1e-12);
  }
}

TEST(InputKl, Examples) {
  auto p = dist(2, {0.1, 0.9, 0.6, 0.4});
  EXPECT_NEAR(loss::input_kl(p, p), loss::entropy(p), 1e-15);
  EXPECT_EQ(loss::input_kl(Tensor<double>(0, 4), Tensor<double>(0, 4)), 0.0);
  EXPECT_NEAR(loss::input_kl(dist(2, {0.5, 0.5, 0.5, 0.5}), dist(2, {0.25, 0.75, 0.25, 0.75})), 2 * 0.8370, 1e-4);
}

TEST(InputKl, PositionCountMismatchIsAlignmentError) {
  EXPECT_THROW(loss::input_kl(uniform(3, 4), uniform(2, 4)), loss::AlignmentError);
}

TEST(CifLoss, Examples) {
  EXPECT_EQ(loss::cif_loss(std::vector<double>{0.5, 0.5, 1.0}, 2), 0.0);
  EXPECT_DOUBLE_EQ(loss::cif_loss(std::vector<double>{1.0, 1.0, 1.0}, 2), 0.5);
  EXPECT_DOUBLE_EQ(loss::cif_loss(std::vector<double>{0.5, 0.5}, 2), 0.5);
  EXPECT_THROW(loss::cif_loss(std::vector<double>{0.5}, 0), loss::LossError);
}

TEST(CifLoss, DoublingIsDetected) {
  num::Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> raw(8), twice(8);
    for (std::size_t k = 0; k < 8; ++k) twice[k] = 2 * (raw[k] = 0.05 + 0.4 * rng.uniform());
    const std::size_t n = 3;
    EXPECT_NE(loss::cif_loss(raw, n), loss::cif_loss(twice, n));
  }
}

TEST(AsrLoss, Examples) {
  EXPECT_EQ(loss::asr_loss(dist(2, {1, 0, 0, 1}), std::vector<int>{0, 1}), 0.0);
  EXPECT_NEAR(loss::asr_loss(uniform(4, 64), std::vector<int>{7, 8, 9, 10}), std::log(64.0), 1e-12);
  EXPECT_NEAR(loss::asr_loss(dist(2, {0.5, 0.5, 0.25, 0.75}), std::vector<int>{0, 0}), 1.0397, 1e-4);
  EXPECT_THROW(loss::asr_loss(uniform(3, 4), std::vector<int>{1, 2}), loss::AlignmentError);
}

TEST(AllLosses, NonNegative) {
  num::Rng rng(23);
  for (int i = 0; i < 100; ++i) {
    auto p = random_simplex(rng, 3, 8), q = random_simplex(rng, 3, 8);
    std::vector<int> y{static_cast<int>(rng.uniform_int(0, 7)), 1, 2};
    EXPECT_GE(loss::resp_ce(q, y), 0.0);
    EXPECT_GE(loss::resp_kl(p, q), 0.0);
    EXPECT_GE(loss::input_kl(p, q), 0.0);
    EXPECT_GE(loss::asr_loss(q, y), 0.0);
    EXPECT_GE(loss::cif_loss(std::vector<double>{rng.uniform(), rng.uniform()}, 1), 0.0);
  }
}

TEST(Combine, WeightedSum) {
  loss::LossValues v;
  v.set(loss::Term::cif, 0.5);
  EXPECT_DOUBLE_EQ(loss::combine(v), 0.5);
  v.set(loss::Term::input_kl, 1.0);
  EXPECT_DOUBLE_EQ(loss::combine(v), 1.5);
  loss::Weights w;
  w[loss::Term::cif] = 2;
  EXPECT_DOUBLE_EQ(loss::combine(v, w), 2.0);
  EXPECT_THROW(loss::combine(loss::LossValues{}), loss::LossError);

  Tape<double> t;
  loss::LossBundle<double> b;
  EXPECT_THROW(loss::combine(b), loss::LossError);
  b.set(loss::Term::cif, t.constant(Tensor<double>::scalar(0.5)));
  b.set(loss::Term::asr, t.constant(Tensor<double>::scalar(0.25)));
  b.weights[loss::Term::asr] = 4;
  EXPECT_DOUBLE_EQ(loss::combine(b).value().item(), 1.5);
  auto vals = loss::values_of(b);
  EXPECT_DOUBLE_EQ(*vals.get(loss::Term::cif), 0.5);
  EXPECT_FALSE(vals.get(loss::Term::resp_kl).has_value());
}

TEST(TermNames, RoundTrip) {
  for (loss::Term t : loss::kAllTerms) EXPECT_EQ(loss::term_from_name(loss::term_name(t)), t);
  EXPECT_THROW(loss::term_from_name("kl"), std::invalid_argument);
}

// ----------------------------------------------------- tape forms vs reference

TEST(TapeForms, AgreeWithReferenceForms) {
  num::Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    auto logits = rng.normal_tensor<double>(4, 10, 2.0);
    auto teacher = random_simplex(rng, 4, 10);
    std::vector<int> y{1, 5, 9, 0};
    Tape<double> t(false);
    auto lv = t.constant(logits);
    auto q = num::softmax(lv).value();
    EXPECT_NEAR(loss::soft_ce(lv, teacher).value().item(), loss::resp_kl(teacher, q), 1e-10);
    EXPECT_NEAR(loss::resp_ce(lv, y).value().item(), loss::resp_ce(q, y), 1e-10);
    std::vector<double> raw(6);
    for (auto& r : raw) r = rng.uniform();
    EXPECT_NEAR(loss::cif_loss(t.constant(Tensor<double>(6, 1, raw)), 2).value().item(), loss::cif_loss(raw, 2),
                1e-14);
  }
}

TEST(SoftCeGradient, IsSoftmaxMinusTeacher) {
  num::Rng rng(37);
  auto logits = rng.normal_tensor<double>(3, 6, 1.0);
  auto teacher = random_simplex(rng, 3, 6);
  Tape<double> t;
  auto lv = t.leaf(logits);
  t.backward(loss::soft_ce(lv, teacher));
  auto g = t.grad_of(lv);
  auto q = num::softmax(t.constant(logits)).value();
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], q[i] - teacher[i], 1e-12);
}

namespace {

void expect_gradcheck(int instances, const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&,
                                                                     num::Rng&)>& make,
                      std::function<std::vector<Tensor<double>>(num::Rng&)> inputs) {
  num::Rng rng(101);
  for (int i = 0; i < instances; ++i) {
    auto in = inputs(rng);
    num::Rng fixed = rng;
    auto r = blspkd::testing::check_inputs(in, [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      num::Rng local = fixed;
      return make(t, v, local);
    });
    EXPECT_TRUE(r.ok) << "instance " << i << ": " << r.first_failure;
    rng.next();
  }
}

}  // namespace

TEST(LossGradients, RespCe) {
  expect_gradcheck(
      20,
      [](Tape<double>&, const std::vector<Var<double>>& v, num::Rng&) {
        return loss::resp_ce(v[0], std::vector<int>{2, 0, 4});
      },
      [](num::Rng& rng) { return std::vector<Tensor<double>>{rng.normal_tensor<double>(3, 5, 1.5)}; });
}

TEST(LossGradients, RespAndInputKl) {
  num::Rng trng(5);
  auto teacher = random_simplex(trng, 4, 7);
  std::vector<double> w{1, 0, 1, 1};
  expect_gradcheck(
      20,
      [&](Tape<double>&, const std::vector<Var<double>>& v, num::Rng&) {
        return loss::soft_ce(v[0], teacher, std::span<const double>(w));
      },
      [](num::Rng& rng) { return std::vector<Tensor<double>>{rng.normal_tensor<double>(4, 7, 1.5)}; });
}

TEST(LossGradients, Cif) {
  expect_gradcheck(
      20,
      [](Tape<double>&, const std::vector<Var<double>>& v, num::Rng&) {
        return loss::cif_loss(num::sigmoid(v[0]), 3);
      },
      [](num::Rng& rng) { return std::vector<Tensor<double>>{rng.normal_tensor<double>(9, 1, 1.0)}; });
}

TEST(LossGradients, Asr) {
  num::Rng wrng(8);
  model::Linear<double> head("head", 5, 9, wrng, 0.5);
  expect_gradcheck(
      20,
      [&](Tape<double>&, const std::vector<Var<double>>& v, num::Rng&) {
        return loss::asr_loss(v[0], std::vector<int>{1, 8, 3}, head);
      },
      [](num::Rng& rng) { return std::vector<Tensor<double>>{rng.normal_tensor<double>(3, 5, 1.0)}; });
}
