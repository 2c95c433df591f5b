#include <gtest/gtest.h>

#include <cmath>

#include "mapet/objectives.hpp"
#include "test_util.hpp"

using namespace mapet;

namespace {

TargetBatch<double> batch(Matrix<double> logits, std::vector<std::size_t> ids) {
  return {std::move(logits), std::move(ids), {}};
}

// -log softmax(row)[id] computed without max subtraction, for moderate logits.
double naive_nll(std::span<const double> row, std::size_t id) {
  double z = 0.0;
  for (double v : row) z += std::exp(v);
  return std::log(z) - row[id];
}

}  // namespace

TEST(Objectives, UniformLogitsGiveLogK) {
  for (std::size_t k : {2u, 7u, 8192u}) {
    auto b = batch(Matrix<double>(3, k, 0.25), {0, k - 1, k / 2});
    EXPECT_NEAR(loss_mapet(b), std::log(double(k)), 1e-12);
    EXPECT_NEAR(loss_pim(b), std::log(double(k)), 1e-12);
    EXPECT_NEAR(loss_mim(b), std::log(double(k)), 1e-12);
  }
}

TEST(Objectives, ConfidentCorrectLogitsApproachZero) {
  Matrix<double> logits(2, 4, 0.0);
  logits(0, 1) = 60.0;
  logits(1, 3) = 60.0;
  EXPECT_LT(loss_mapet(batch(logits, {1, 3})), 1e-20);
}

TEST(Objectives, ThreeClassWorkedValue) {
  auto b = batch(Matrix<double>{{1.0, 2.0, 3.0}}, {2});
  EXPECT_NEAR(loss_mapet(b), 0.40760596, 1e-7);
  EXPECT_NEAR(loss_mapet(b), naive_nll(b.logits.row(0), 2), 1e-14);
}

TEST(Objectives, TwoWayTieIsLogTwo) {
  EXPECT_NEAR(loss_mim(batch(Matrix<double>{{4.0, 4.0}}, {1})), std::log(2.0), 1e-15);
}

TEST(Objectives, MeanOverTargetsMatchesNaiveOracle) {
  Rng rng(3);
  auto logits = test::random_matrix<double>(5, 6, rng, 3.0);
  std::vector<std::size_t> ids{0, 5, 2, 2, 4};
  double expect = 0.0;
  for (std::size_t i = 0; i < 5; ++i) expect += naive_nll(logits.row(i), ids[i]);
  EXPECT_NEAR(loss_pim(batch(logits, ids)), expect / 5.0, 1e-13);
}

TEST(Objectives, WeightsGiveWeightedMean) {
  Matrix<double> logits{{1.0, 0.0}, {0.0, 3.0}};
  TargetBatch<double> b{logits, {0, 0}, {1.0, 3.0}};
  const double expect = (naive_nll(logits.row(0), 0) + 3.0 * naive_nll(logits.row(1), 0)) / 4.0;
  EXPECT_NEAR(loss_mapet(b), expect, 1e-14);
}

TEST(Objectives, EmptyMimMaskSetIsRejected) {
  EXPECT_THROW(loss_mim(batch(Matrix<double>(0, 4), {})), std::invalid_argument);
}

TEST(Objectives, ShiftInvariantAndStableForHugeLogits) {
  Rng rng(4);
  auto logits = test::random_matrix<double>(3, 5, rng, 2.0);
  std::vector<std::size_t> ids{1, 0, 4};
  const double base = loss_mapet(batch(logits, ids));
  auto shifted = logits;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 5; ++k) shifted(i, k) += 1000.0 * double(i + 1);
  const double moved = loss_mapet(batch(shifted, ids));
  EXPECT_TRUE(std::isfinite(moved));
  EXPECT_NEAR(moved, base, 1e-10);
}

TEST(Objectives, ClosedFormGradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto logits = test::random_matrix<double>(4, 6, rng, 2.0);
  TargetBatch<double> b{logits, {3, 0, 5, 1}, {0.5, 1.0, 2.0, 1.5}};
  const auto g = loss_logit_gradient(b);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 6; ++k) {
      auto up = b, dn = b;
      up.logits(i, k) += h;
      dn.logits(i, k) -= h;
      const double fd = (loss_mapet(up) - loss_mapet(dn)) / (2 * h);
      EXPECT_NEAR(g(i, k), fd, 1e-8 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Objectives, TapeLossAgreesWithPlainLoss) {
  Rng rng(6);
  auto logits = test::random_matrix<double>(3, 4, rng, 2.0);
  std::vector<std::size_t> ids{2, 3, 0};
  std::vector<double> w{1.0, 0.25, 2.0};
  Tape<double> tape;
  auto x = tape.parameter(logits, 0);
  auto loss = cross_entropy_loss<double>(x, ids, w);
  tape.backward(loss);
  TargetBatch<double> b{logits, ids, w};
  EXPECT_NEAR(loss.value()(0, 0), loss_mapet(b), 1e-14);
  EXPECT_LT(test::max_rel_diff(tape.grad(x), loss_logit_gradient(b)), 1e-14);
}

TEST(Objectives, TokenOutsideVocabularyIsRejected) {
  EXPECT_THROW(loss_mapet(batch(Matrix<double>(1, 4), {4})), InvalidToken);
  EXPECT_THROW(loss_mapet(batch(Matrix<double>(1, 4), {9999})), std::out_of_range);
  Tape<double> tape;
  std::vector<std::size_t> ids{4};
  EXPECT_THROW(cross_entropy_loss<double>(tape.constant(Matrix<double>(1, 4)), ids), InvalidToken);
}

TEST(Objectives, DispatchByObjective) {
  auto b = batch(Matrix<double>{{0.0, 1.0}}, {1});
  EXPECT_EQ(loss_for(Objective::kMapet, b), loss_mapet(b));
  EXPECT_EQ(loss_for(Objective::kPim, b), loss_pim(b));
  EXPECT_EQ(loss_for(Objective::kMim, b), loss_mim(b));
  EXPECT_EQ(objective_from_string("pim"), Objective::kPim);
  EXPECT_THROW(objective_from_string("xlnet"), ConfigError);
}
