#include "questmf/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace questmf {

void validate(const LossConfig& cfg) {
  if (cfg.alpha <= 0.0) throw std::invalid_argument("loss config: alpha must be positive");
  if (cfg.beta < 0.0) throw std::invalid_argument("loss config: beta must be non-negative");
}

int class_distance(int y, int i) {
  if (y < 0 || y >= kNumClasses || i < 0 || i >= kNumClasses)
    throw std::invalid_argument("class_distance: class out of range");
  return y > i ? y - i : i - y;
}

std::array<double, kNumClasses> class_weights(
    const std::array<std::int64_t, kNumClasses>& counts) {
  std::int64_t total = 0;
  for (std::int64_t c : counts) {
    if (c < 0) throw std::invalid_argument("class_weights: negative count");
    total += c;
  }
  std::array<double, kNumClasses> w{};
  for (int y = 0; y < kNumClasses; ++y) {
    if (counts[y] == 0)
      throw std::runtime_error("class_weights: empty class " + std::to_string(y));
    w[y] = static_cast<double>(total) / static_cast<double>(counts[y]);
  }
  return w;
}

ClassWeightTable ClassWeightTable::uniform() {
  ClassWeightTable t;
  for (auto& r : t.rows) r = {1.0, 1.0, 1.0, 1.0};
  return t;
}

ClassWeightTable ClassWeightTable::from_counts(
    const std::array<std::array<std::int64_t, kNumClasses>, kNumQuestions>& counts,
    WeightPooling pooling) {
  ClassWeightTable t;
  if (pooling == WeightPooling::pooled) {
    std::array<std::int64_t, kNumClasses> sum{};
    for (const auto& row : counts)
      for (int c = 0; c < kNumClasses; ++c) sum[c] += row[c];
    const auto w = class_weights(sum);
    for (auto& r : t.rows) r = w;
  } else {
    for (int q = 0; q < kNumQuestions; ++q) {
      try {
        t.rows[q] = class_weights(counts[q]);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("question " + std::to_string(q) + ": " + e.what());
      }
    }
  }
  return t;
}

namespace {

void check_probs(std::span<const double> probs, int y) {
  if (probs.size() != kNumClasses)
    throw std::invalid_argument("ordinal loss: expected 4 class probabilities");
  if (y < 0 || y >= kNumClasses)
    throw std::invalid_argument("ordinal loss: target class out of range");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !(p <= 1.0 + 1e-9))
      throw std::invalid_argument("ordinal loss: probabilities must lie in [0, 1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("ordinal loss: probabilities must sum to 1");
}

}  // namespace

double oll_loss(std::span<const double> probs, int y, double alpha) {
  check_probs(probs, y);
  if (alpha <= 0.0) throw std::invalid_argument("oll_loss: alpha must be positive");
  double loss = 0.0;
  for (int i = 0; i < kNumClasses; ++i) {
    if (i == y) continue;
    const double q = std::max(1.0 - probs[i], kProbFloor);
    loss -= std::log(q) * std::pow(static_cast<double>(class_distance(y, i)), alpha);
  }
  return loss;
}

double imboll_loss(std::span<const double> probs, int y, double alpha, double beta,
                   double weight_y) {
  if (beta < 0.0) throw std::invalid_argument("imboll_loss: beta must be non-negative");
  if (!(weight_y > 0.0) || !std::isfinite(weight_y))
    throw std::invalid_argument("imboll_loss: weight must be positive and finite");
  return oll_loss(probs, y, alpha) * std::pow(weight_y, beta);
}

double mse_loss(double prediction, double target) {
  if (!std::isfinite(prediction) || !std::isfinite(target))
    throw std::invalid_argument("mse_loss: inputs must be finite");
  const double d = prediction - target;
  return d * d;
}

Value ordinal_loss_batch(Tape& tape, Value logits, std::span<const int> ys,
                         const std::array<double, kNumClasses>& weights, double alpha,
                         double beta) {
  const Tensor& lv = logits.tensor();
  if (lv.rank() != 2 || lv.cols() != kNumClasses)
    throw std::invalid_argument("ordinal_loss_batch: logits must be rows x 4");
  const std::size_t b = lv.rows();
  if (ys.size() != b) throw std::invalid_argument("ordinal_loss_batch: target count mismatch");
  if (alpha <= 0.0 || beta < 0.0)
    throw std::invalid_argument("ordinal_loss_batch: bad exponents");
  // coeff[r][i] = d(y_r, i)^alpha * w(y_r)^beta; the i == y_r column is 0.
  Tensor coeff({b, static_cast<std::size_t>(kNumClasses)});
  for (std::size_t r = 0; r < b; ++r) {
    const int y = ys[r];
    if (y < 0 || y >= kNumClasses)
      throw std::invalid_argument("ordinal_loss_batch: target class out of range");
    const double wf = std::pow(weights[y], beta);
    for (int i = 0; i < kNumClasses; ++i) {
      const int d = class_distance(y, i);
      coeff.at(r, i) = d == 0 ? 0.0 : std::pow(static_cast<double>(d), alpha) * wf;
    }
  }
  Value probs = tape.softmax_rows(logits);
  Value one_minus = tape.add_scalar(tape.scale(probs, -1.0), 1.0);
  Value logs = tape.log(tape.clamp_min(one_minus, kProbFloor));
  Value weighted = tape.mul(logs, tape.constant(std::move(coeff)));
  return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(b));
}

Value mse_loss_batch(Tape& tape, Value preds, std::span<const double> targets) {
  const Tensor& pv = preds.tensor();
  if (pv.rank() != 2 || pv.cols() != 1)
    throw std::invalid_argument("mse_loss_batch: predictions must be rows x 1");
  const std::size_t b = pv.rows();
  if (targets.size() != b) throw std::invalid_argument("mse_loss_batch: target count mismatch");
  Tensor t({b, 1});
  for (std::size_t r = 0; r < b; ++r) t.at(r, 0) = targets[r];
  Value diff = tape.sub(preds, tape.constant(std::move(t)));
  return tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / static_cast<double>(b));
}

}  // namespace questmf
