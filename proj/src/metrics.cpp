#include "questmf/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace questmf {

namespace {

using nlohmann::json;

void check_pair(std::span<const double> x, std::span<const double> y, std::size_t min_len) {
  if (x.size() != y.size()) throw std::invalid_argument("metric: length mismatch");
  if (x.size() < min_len) throw std::invalid_argument("metric: too few elements");
}

bool is_constant(std::span<const double> v) {
  for (double a : v)
    if (a != v[0]) return false;
  return true;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += a;
  return s / static_cast<double>(v.size());
}

}  // namespace

double ccc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 2);
  const bool cx = is_constant(x), cy = is_constant(y);
  if (cx && cy) return x[0] == y[0] ? 1.0 : 0.0;
  if (cx || cy) return 0.0;
  const std::size_t n = x.size();
  const double mx = mean_of(x), my = mean_of(y);
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cov += dx * dy;
  }
  vx /= static_cast<double>(n);
  vy /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  const double md = mx - my;
  return 2.0 * cov / (vx + vy + md * md);
}

double rmse(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(x.size()));
}

double mae(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_std: empty input");
  MeanStd ms;
  ms.mean = mean_of(values);
  if (values.size() == 1) return ms;
  double s = 0.0;
  for (double v : values) {
    const double d = v - ms.mean;
    s += d * d;
  }
  ms.std = std::sqrt(s / static_cast<double>(values.size() - 1));
  return ms;
}

std::string format_mean_std(const MeanStd& ms, int decimals) {
  char buf[80];
  std::snprintf(buf, sizeof(buf), "%.*f ± %.*f", decimals, ms.mean, decimals, ms.std);
  return buf;
}

namespace {

AggregateTriple aggregate_triples(const std::vector<MetricTriple>& ts) {
  std::vector<double> c, r, m;
  for (const auto& t : ts) {
    c.push_back(t.ccc);
    r.push_back(t.rmse);
    m.push_back(t.mae);
  }
  return {mean_std(c), mean_std(r), mean_std(m)};
}

json triple_json(const MetricTriple& t) {
  return json{{"ccc", t.ccc}, {"rmse", t.rmse}, {"mae", t.mae}};
}

json agg_json(const AggregateTriple& t) {
  return json{{"ccc", {{"mean", t.ccc.mean}, {"std", t.ccc.std}}},
              {"rmse", {{"mean", t.rmse.mean}, {"std", t.rmse.std}}},
              {"mae", {{"mean", t.mae.mean}, {"std", t.mae.std}}}};
}

}  // namespace

AggregateReport aggregate_seeds(std::span<const MetricsReport> reports,
                                std::span<const std::uint64_t> seeds) {
  if (reports.empty()) throw std::invalid_argument("aggregate_seeds: no reports");
  const bool with_q = reports[0].per_question.has_value();
  for (const auto& r : reports)
    if (r.per_question.has_value() != with_q)
      throw std::invalid_argument("aggregate_seeds: inconsistent report structure");
  AggregateReport out;
  out.seeds.assign(seeds.begin(), seeds.end());
  std::vector<MetricTriple> totals;
  for (const auto& r : reports) totals.push_back(r.total);
  out.total = aggregate_triples(totals);
  if (with_q) {
    std::array<AggregateTriple, kNumQuestions> per{};
    for (int q = 0; q < kNumQuestions; ++q) {
      std::vector<MetricTriple> ts;
      for (const auto& r : reports) ts.push_back((*r.per_question)[q]);
      per[q] = aggregate_triples(ts);
    }
    out.per_question = per;
  }
  return out;
}

std::string to_json(const MetricsReport& r) {
  json j{{"split", r.split}, {"n_sessions", r.n_sessions}, {"total", triple_json(r.total)}};
  if (r.per_question) {
    json per = json::array();
    for (const auto& t : *r.per_question) per.push_back(triple_json(t));
    j["per_question"] = per;
  }
  return j.dump(2);
}

std::string to_json(const AggregateReport& r) {
  json j{{"seeds", r.seeds}, {"total", agg_json(r.total)}};
  if (r.per_question) {
    json per = json::array();
    for (const auto& t : *r.per_question) per.push_back(agg_json(t));
    j["per_question"] = per;
  }
  return j.dump(2);
}

std::string format_table(const AggregateReport& r) {
  std::string out;
  out += "metric  total score (mean ± std over " + std::to_string(r.seeds.size()) +
         " seeds)\n";
  out += "CCC     " + format_mean_std(r.total.ccc, 3) + "\n";
  out += "RMSE    " + format_mean_std(r.total.rmse, 2) + "\n";
  out += "MAE     " + format_mean_std(r.total.mae, 2) + "\n";
  if (r.per_question) {
    out += "\nquestion  CCC\n";
    for (int q = 0; q < kNumQuestions; ++q)
      out += "q" + std::to_string(q + 1) + "        " +
             format_mean_std((*r.per_question)[q].ccc, 3) + "\n";
  }
  return out;
}

}  // namespace questmf
