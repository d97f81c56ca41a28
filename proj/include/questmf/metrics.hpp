#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "questmf/losses.hpp"

namespace questmf {

// Concordance correlation: 2*cov / (var_x + var_y + (mean_x - mean_y)^2)
// with population (divide-by-N) moments. Constant vectors are defined
// explicitly: both constant and equal -> 1; otherwise any constant -> 0.
double ccc(std::span<const double> x, std::span<const double> y);
double rmse(std::span<const double> x, std::span<const double> y);
double mae(std::span<const double> x, std::span<const double> y);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std (n-1); 0 when n == 1
};

MeanStd mean_std(std::span<const double> values);

// "0.662 ± 0.022" with the given decimal places on both numbers.
std::string format_mean_std(const MeanStd& ms, int decimals);

struct MetricTriple {
  double ccc = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
};

struct MetricsReport {
  std::string split;
  std::size_t n_sessions = 0;
  MetricTriple total;
  // Present only when the split carries per-question labels.
  std::optional<std::array<MetricTriple, kNumQuestions>> per_question;
};

struct AggregateTriple {
  MeanStd ccc, rmse, mae;
};

struct AggregateReport {
  std::vector<std::uint64_t> seeds;
  AggregateTriple total;
  std::optional<std::array<AggregateTriple, kNumQuestions>> per_question;
};

// Mean +/- sample std per metric over per-seed reports. Reports must agree
// on the presence of per-question metrics. Throws on an empty list.
AggregateReport aggregate_seeds(std::span<const MetricsReport> reports,
                                std::span<const std::uint64_t> seeds);

std::string to_json(const MetricsReport& r);
std::string to_json(const AggregateReport& r);
// CCC rendered with 3 decimals, RMSE/MAE with 2, matching the usual
// reporting precision for these metrics.
std::string format_table(const AggregateReport& r);

}  // namespace questmf
