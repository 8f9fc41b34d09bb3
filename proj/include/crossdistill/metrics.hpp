#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "crossdistill/dataset.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/ranker.hpp"
#include "crossdistill/textio.hpp"

namespace crossdistill {

// Mann-Whitney AUC with average ranks for ties: equals
// (wins + 0.5 * ties) / (P * N) over all positive-negative score pairs.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ArgumentError("auc: scores/labels length mismatch");
  if (scores.empty()) throw ArgumentError("auc: empty input");
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ArgumentError("auc: labels must be 0/1");
    positives += static_cast<std::size_t>(y);
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetricError("auc: needs at least one positive and one negative label");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) positive_rank_sum += avg_rank;
    }
    i = j;
  }
  const double p = static_cast<double>(positives);
  return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

// 1 - SS_res / SS_tot with SS_tot about the target mean.
inline double r_squared(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.size() != targets.size()) throw ArgumentError("r_squared: length mismatch");
  if (targets.size() < 2) throw UndefinedMetricError("r_squared: needs at least 2 targets");
  const double mean = std::accumulate(targets.begin(), targets.end(), 0.0) /
                      static_cast<double>(targets.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ss_res += (preds[i] - targets[i]) * (preds[i] - targets[i]);
    ss_tot += (targets[i] - mean) * (targets[i] - mean);
  }
  if (ss_tot == 0.0) throw UndefinedMetricError("r_squared: zero target variance");
  return 1.0 - ss_res / ss_tot;
}

struct MetricRow {
  std::string model;
  std::string head;
  std::string slice;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const MetricRow&) const = default;
};

struct MetricsReport {
  std::string model_id;
  std::uint64_t seed = 0;
  std::string generator_fingerprint;
  std::vector<MetricRow> rows;
  std::map<std::string, std::size_t> slice_counts;  // all / new_item / established
};

namespace detail {

inline std::vector<std::size_t> slice_indices(const Dataset& ds, const std::string& slice) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const bool in_slice = slice == "all" || (slice == "new_item" && ds.examples[i].is_new_item) ||
                          (slice == "established" && !ds.examples[i].is_new_item);
    if (in_slice) out.push_back(i);
  }
  return out;
}

}  // namespace detail

// Serving metric per slice for one head: AUC for binary heads, R-squared over
// clicked rows for regression heads. Undefined slices (empty, single-class,
// zero variance) are simply absent from the result.
inline void slice_report(MetricsReport& report, const ScoreTable& table, const Dataset& ds,
                         const TaskHead& head) {
  if (table.rows.size() != ds.examples.size()) {
    throw ArgumentError("slice_report: score table does not align with dataset");
  }
  for (const std::string slice : {"all", "new_item", "established"}) {
    const auto idx = detail::slice_indices(ds, slice);
    report.slice_counts[slice] = idx.size();
    if (idx.empty()) continue;
    try {
      MetricRow row;
      row.model = report.model_id;
      row.head = head.name;
      row.slice = slice;
      row.seed = report.seed;
      if (head.kind == TaskKind::kBinary) {
        std::vector<double> scores;
        std::vector<int> labels;
        scores.reserve(idx.size());
        labels.reserve(idx.size());
        for (std::size_t i : idx) {
          scores.push_back(table.rows[i].serving.at(head.name));
          const auto label = ds.examples[i].label_for(head.label_task);
          labels.push_back(label && *label > 0.5 ? 1 : 0);
        }
        row.metric = "auc";
        row.value = auc(scores, labels);
      } else {
        std::vector<double> preds, targets;
        for (std::size_t i : idx) {
          const auto label = ds.examples[i].label_for(head.label_task);
          if (!label) continue;  // regression label defined conditionally
          preds.push_back(table.rows[i].serving.at(head.name));
          targets.push_back(*label);
        }
        row.metric = "r_squared";
        row.value = r_squared(preds, targets);
      }
      report.rows.push_back(std::move(row));
    } catch (const UndefinedMetricError&) {
      // reported absent, never coerced to a number
    }
  }
}

// One-sided exact sign test in the positive direction: ties dropped,
// p = P[Binomial(n, 1/2) >= #positive]. Degenerate (all ties) -> absent.
inline std::optional<double> sign_test_p(const std::vector<double>& deltas) {
  std::size_t wins = 0, losses = 0;
  for (double d : deltas) {
    if (d > 0.0) ++wins;
    if (d < 0.0) ++losses;
  }
  const std::size_t n = wins + losses;
  if (n == 0) return std::nullopt;
  // exact binomial tail; C(n,j) stays integral in double for the n used here
  double tail = 0.0, coeff = 1.0;  // coeff = C(n,0)
  for (std::size_t j = 0; j <= n; ++j) {
    if (j >= wins) tail += coeff;
    coeff = coeff * static_cast<double>(n - j) / static_cast<double>(j + 1);
  }
  return tail * std::pow(0.5, static_cast<double>(n));
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw ArgumentError("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

struct PairedDeltas {
  std::vector<std::pair<std::uint64_t, double>> per_seed;  // (seed, distilled - control)
  double median_delta = 0.0;
  std::optional<double> p_value;  // absent when all deltas tie

  std::vector<double> deltas() const {
    std::vector<double> out;
    out.reserve(per_seed.size());
    for (const auto& [seed, d] : per_seed) out.push_back(d);
    return out;
  }
};

// Keyed by "head/slice/metric".
struct SeedComparison {
  std::map<std::string, PairedDeltas> by_metric;
};

// Pairs control and distilled reports by seed id; refuses mismatched seed
// sets and mismatched generator fingerprints within a pair.
inline SeedComparison compare_across_seeds(const std::vector<MetricsReport>& control,
                                           const std::vector<MetricsReport>& distilled) {
  if (control.size() < 5 || distilled.size() < 5) {
    throw ArgumentError("compare_across_seeds: needs at least 5 seeds per side");
  }
  std::map<std::uint64_t, const MetricsReport*> by_seed_control, by_seed_distilled;
  for (const auto& r : control) {
    if (!by_seed_control.emplace(r.seed, &r).second) {
      throw PairingError("duplicate control report for seed " + std::to_string(r.seed));
    }
  }
  for (const auto& r : distilled) {
    if (!by_seed_distilled.emplace(r.seed, &r).second) {
      throw PairingError("duplicate distilled report for seed " + std::to_string(r.seed));
    }
  }
  for (const auto& [seed, rep] : by_seed_control) {
    const auto it = by_seed_distilled.find(seed);
    if (it == by_seed_distilled.end()) {
      throw PairingError("seed " + std::to_string(seed) + " has no distilled counterpart");
    }
    if (rep->generator_fingerprint != it->second->generator_fingerprint) {
      throw PairingError("seed " + std::to_string(seed) + " pairs reports with different generator fingerprints");
    }
  }
  for (const auto& [seed, rep] : by_seed_distilled) {
    if (!by_seed_control.count(seed)) {
      throw PairingError("seed " + std::to_string(seed) + " has no control counterpart");
    }
  }

  SeedComparison cmp;
  for (const auto& [seed, crep] : by_seed_control) {
    const MetricsReport& drep = *by_seed_distilled.at(seed);
    for (const MetricRow& crow : crep->rows) {
      const std::string key = crow.head + "/" + crow.slice + "/" + crow.metric;
      for (const MetricRow& drow : drep.rows) {
        if (drow.head == crow.head && drow.slice == crow.slice && drow.metric == crow.metric) {
          cmp.by_metric[key].per_seed.emplace_back(seed, drow.value - crow.value);
          break;
        }
      }
    }
  }
  for (auto& [key, paired] : cmp.by_metric) {
    paired.median_delta = median(paired.deltas());
    paired.p_value = sign_test_p(paired.deltas());
  }
  return cmp;
}

// CSV with fixed column order (model, head, slice, metric, value, seed).
inline std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::string out = "model,head,slice,metric,value,seed\n";
  for (const MetricRow& row : rows) {
    out += row.model;
    out.push_back(',');
    out += row.head;
    out.push_back(',');
    out += row.slice;
    out.push_back(',');
    out += row.metric;
    out.push_back(',');
    out += format_double(row.value);
    out.push_back(',');
    out += std::to_string(row.seed);
    out.push_back('\n');
  }
  return out;
}

inline std::vector<MetricRow> metrics_from_csv(std::string_view text) {
  std::vector<MetricRow> rows;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t line_end = text.find('\n', pos);
    if (line_end == std::string_view::npos) line_end = text.size();
    const std::string_view line = text.substr(pos, line_end - pos);
    pos = line_end + 1;
    if (line.empty()) continue;
    if (first) {
      if (line != "model,head,slice,metric,value,seed") {
        throw IoError("metrics csv: unexpected header");
      }
      first = false;
      continue;
    }
    const auto parts = split_view(line, ',');
    if (parts.size() != 6) throw IoError("metrics csv: expected 6 columns");
    MetricRow row;
    row.model = std::string(parts[0]);
    row.head = std::string(parts[1]);
    row.slice = std::string(parts[2]);
    row.metric = std::string(parts[3]);
    row.value = parse_double(parts[4]);
    row.seed = static_cast<std::uint64_t>(parse_int(parts[5]));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace crossdistill
