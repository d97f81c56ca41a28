#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "questmf/autodiff.hpp"

namespace questmf {

inline constexpr int kNumClasses = 4;
inline constexpr int kNumQuestions = 8;
// Floor for 1 - p before the logarithm; survives saturated predictions.
inline constexpr double kProbFloor = 1e-12;

enum class LossKind { mse, oll, imboll };
enum class WeightPooling { per_question, pooled };

struct LossConfig {
  LossKind kind = LossKind::imboll;
  double alpha = 1.0;  // distance exponent, > 0
  double beta = 0.5;   // weight exponent, >= 0; ignored for oll/mse
  WeightPooling pooling = WeightPooling::per_question;
};

void validate(const LossConfig& cfg);

// |y - i| over classes {0..3}.
int class_distance(int y, int i);

// w(y) = n_T / n_y. Throws on any empty class.
std::array<double, kNumClasses> class_weights(const std::array<std::int64_t, kNumClasses>& counts);

// Per-question weight rows; pooled mode sums counts over questions so all
// rows coincide. Built from the training split only.
struct ClassWeightTable {
  std::array<std::array<double, kNumClasses>, kNumQuestions> rows;
  const std::array<double, kNumClasses>& row(int question) const { return rows[question]; }
  static ClassWeightTable uniform();
  static ClassWeightTable from_counts(
      const std::array<std::array<std::int64_t, kNumClasses>, kNumQuestions>& counts,
      WeightPooling pooling);
};

// -sum_i ln(1 - p_i) * d(y, i)^alpha, natural log, the i == y term vanishes.
double oll_loss(std::span<const double> probs, int y, double alpha);

// oll_loss * w(y)^beta.
double imboll_loss(std::span<const double> probs, int y, double alpha, double beta,
                   double weight_y);

double mse_loss(double prediction, double target);

// Tape-level batched losses; the batch loss is the mean over rows.
//
// Ordinal losses consume raw logits (rows x 4) and apply the softmax
// internally; ys holds one target class per row and weights one w(y) row
// per question. beta == 0 with unit weights reproduces plain OLL.
Value ordinal_loss_batch(Tape& tape, Value logits, std::span<const int> ys,
                         const std::array<double, kNumClasses>& weights, double alpha,
                         double beta);
Value mse_loss_batch(Tape& tape, Value preds, std::span<const double> targets);

}  // namespace questmf
