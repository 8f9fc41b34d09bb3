#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "crossdistill/distill.hpp"
#include "crossdistill/domaingen.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/metrics.hpp"
#include "crossdistill/ranker.hpp"
#include "crossdistill/textio.hpp"

namespace crossdistill {

// Architecture presets. Sizes keep the teacher/student parameter ratio inside
// [100, 400] with the homepage student the larger of the two students.
inline RankerConfig teacher_preset_config(std::size_t input_dim) {
  RankerConfig config;
  config.input_dim = input_dim;
  config.trunk = {384, 192};
  for (const std::string task : {"click", "trail", "continue_watch", "discovery"}) {
    TaskHead head;
    head.name = task;
    head.kind = task_kind(task);
    head.tower = {64};
    head.label_task = task;
    config.heads.push_back(std::move(head));
  }
  return config;
}

inline RankerConfig homepage_student_config(std::size_t input_dim) {
  RankerConfig config;
  config.input_dim = input_dim;
  config.trunk = {16};
  TaskHead click;
  click.name = "click";
  click.tower = {6};
  click.label_task = "click";
  click.aux_distill = true;
  click.distill_slot = "ctr_aux";
  TaskHead trail;
  trail.name = "trail";
  trail.kind = TaskKind::kRegression;
  trail.tower = {6};
  trail.label_task = "trail";
  trail.aux_distill = true;
  trail.distill_slot = "trail_aux";
  TaskHead discovery;  // not distilled: no aux unit
  discovery.name = "discovery";
  discovery.tower = {6};
  discovery.label_task = "discovery";
  config.heads = {click, trail, discovery};
  return config;
}

inline RankerConfig radio_student_config(std::size_t input_dim) {
  RankerConfig config;
  config.input_dim = input_dim;
  config.trunk = {8};
  TaskHead click;
  click.name = "click";
  click.tower = {2};
  click.label_task = "click";
  TaskHead engagement;
  engagement.name = "radio_engagement";
  engagement.tower = {2};
  engagement.label_task = "radio_engagement";
  TaskHead cw;  // non-serving, trained only against the teacher's soft label
  cw.name = "cw_distill";
  cw.tower = {2};
  cw.serving = false;
  cw.distill_slot = "cw_aux";
  config.heads = {click, engagement, cw};
  return config;
}

struct ExperimentConfig {
  std::string preset = "homepage";
  DomainSpec domain;
  RankerConfig teacher_config;
  RankerConfig student_config;
  TaskMapping mapping;
  TrainOptions teacher_train;
  TrainOptions student_train;
  LossSpec student_loss;
  std::vector<std::uint64_t> seeds;
  std::size_t eval_count = 100000;
  std::filesystem::path out;  // empty = in-memory only
  bool overwrite = false;
  bool noise_labels = false;
  bool evaluate_teacher = true;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"homepage", "radio", "new-release",
                                                 "noise-ablation", "custom"};
  return names;
}

// Fills in everything the preset determines: architectures, mapping, which
// arm replaces the teacher with noise, and whether the teacher is evaluated.
inline void apply_preset(ExperimentConfig& config) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), config.preset) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + config.preset + "'; valid presets: " + valid);
  }
  config.teacher_config = teacher_preset_config(config.domain.feature_count);
  if (config.preset == "radio") {
    config.student_config = radio_student_config(config.domain.feature_count);
    config.mapping = radio_mapping();
    config.evaluate_teacher = false;
  } else {
    config.student_config = homepage_student_config(config.domain.feature_count);
    config.mapping = homepage_mapping();
    config.evaluate_teacher = true;
  }
  config.noise_labels = config.preset == "noise-ablation";
  if (config.preset == "noise-ablation") config.evaluate_teacher = false;
  // Per-preset loss weights. The homepage values damp the soft-label terms
  // enough that the primary labels stay in charge; the ablation arm keeps the
  // exact homepage training recipe so the only difference is the label source.
  config.student_loss = LossSpec{};
  if (config.preset != "radio") {
    config.student_loss.aux_weights["click"] = 0.4;
    config.student_loss.primary_weights["trail"] = 0.35;
  }
}

inline ExperimentConfig default_experiment_config() {
  ExperimentConfig config;
  config.domain.source_count = 200000;
  config.domain.target_count = 2000;
  // One teacher epoch: more already overfits the source domain's own quirks,
  // which sharpens the teacher on source but not on target orderings.
  config.teacher_train.epochs = 1;
  config.teacher_train.batch_size = 256;
  config.student_train.epochs = 120;
  config.student_train.batch_size = 64;
  config.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  apply_preset(config);
  return config;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& config) {
  nlohmann::json j;
  j["preset"] = config.preset;
  j["domain"] = spec_to_json(config.domain);
  j["teacher_config"] = config_to_json(config.teacher_config);
  j["student_config"] = config_to_json(config.student_config);
  j["teacher_train"] = {{"epochs", config.teacher_train.epochs},
                        {"batch_size", config.teacher_train.batch_size},
                        {"lr", config.teacher_train.adam.lr}};
  j["student_train"] = {{"epochs", config.student_train.epochs},
                        {"batch_size", config.student_train.batch_size},
                        {"lr", config.student_train.adam.lr}};
  j["student_loss"] = {{"primary", config.student_loss.primary_weights},
                       {"aux", config.student_loss.aux_weights}};
  j["seeds"] = config.seeds;
  j["eval_count"] = config.eval_count;
  j["out"] = config.out.string();
  j["overwrite"] = config.overwrite;
  return j;
}

// Identifies experiment content; storage location does not affect it.
inline std::string experiment_config_hash(const ExperimentConfig& config) {
  nlohmann::json j = experiment_config_to_json(config);
  j.erase("out");
  j.erase("overwrite");
  return to_hex16(fnv1a64(j.dump()));
}

namespace detail {

inline const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "preset", "seeds", "out", "overwrite", "eval_count",
      "domain.feature_count", "domain.missing_fraction", "domain.ctr_gap",
      "domain.source_count", "domain.target_count", "domain.shared_weight_mix",
      "domain.new_item_rate_source", "domain.new_item_rate_target", "domain.label_noise_sd",
      "domain.seed", "domain.base_click_rate", "domain.logit_scale", "domain.task_affinity",
      "domain.cw_re_affinity", "domain.new_item_effect_source", "domain.new_item_effect_target",
      "teacher_train.epochs", "teacher_train.batch_size", "teacher_train.lr",
      "student_train.epochs", "student_train.batch_size", "student_train.lr",
      "student_loss.primary.<head>", "student_loss.aux.<head>",
      "teacher_config", "student_config"};
  return keys;
}

inline bool is_loss_key(const std::string& key) {
  return (key.rfind("student_loss.primary.", 0) == 0 &&
          key.size() > sizeof("student_loss.primary.") - 1) ||
         (key.rfind("student_loss.aux.", 0) == 0 && key.size() > sizeof("student_loss.aux.") - 1);
}

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t next = std::min({row[j] + 1, row[j - 1] + 1,
                                         diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = row[j];
      row[j] = next;
    }
  }
  return row[b.size()];
}

inline std::string nearest_key(std::string_view key) {
  std::string best;
  std::size_t best_cost = static_cast<std::size_t>(-1);
  for (const std::string& candidate : known_config_keys()) {
    const std::size_t cost = levenshtein(key, candidate);
    if (cost < best_cost) {
      best_cost = cost;
      best = candidate;
    }
  }
  return best;
}

inline void check_key_known(const std::string& key) {
  if (is_loss_key(key)) return;
  const auto& keys = known_config_keys();
  if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
    throw ConfigError("unknown config key '" + key + "'; nearest known key is '" +
                      nearest_key(key) + "'");
  }
}

// Flattens {"domain": {"ctr_gap": ...}} into dotted keys; whole-object values
// (teacher_config / student_config) stay intact.
inline void flatten_config_json(const nlohmann::json& j, const std::string& prefix,
                                std::vector<std::pair<std::string, nlohmann::json>>& out) {
  if (!j.is_object()) throw ConfigError("config file must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const std::string full = prefix.empty() ? key : prefix + "." + key;
    if (full == "teacher_config" || full == "student_config") {
      out.emplace_back(full, value);
    } else if (value.is_object()) {
      flatten_config_json(value, full, out);
    } else {
      out.emplace_back(full, value);
    }
  }
}

inline std::vector<std::uint64_t> parse_seed_list(const nlohmann::json& value) {
  std::vector<std::uint64_t> seeds;
  if (value.is_array()) {
    seeds = value.get<std::vector<std::uint64_t>>();
  } else if (value.is_string()) {
    const std::string csv = value.get<std::string>();
    for (const auto part : split_view(csv, ',')) {
      seeds.push_back(static_cast<std::uint64_t>(parse_int(part)));
    }
  } else if (value.is_number()) {
    seeds.push_back(value.get<std::uint64_t>());
  } else {
    throw ConfigError("seeds must be an integer list or a comma-separated string");
  }
  return seeds;
}

template <typename T>
T numeric_value(const nlohmann::json& value, const std::string& key) {
  if (!value.is_number()) throw ConfigError("config key '" + key + "' expects a number");
  return value.get<T>();
}

inline bool bool_value(const nlohmann::json& value, const std::string& key) {
  if (value.is_boolean()) return value.get<bool>();
  if (value.is_number_integer()) return value.get<int>() != 0;
  throw ConfigError("config key '" + key + "' expects a boolean");
}

inline void apply_config_key(ExperimentConfig& config, const std::string& key,
                             const nlohmann::json& value) {
  if (key == "preset") {
    // applied before everything else by parse_config
  } else if (key == "seeds") {
    config.seeds = parse_seed_list(value);
  } else if (key == "out") {
    config.out = value.get<std::string>();
  } else if (key == "overwrite") {
    config.overwrite = bool_value(value, key);
  } else if (key == "eval_count") {
    config.eval_count = numeric_value<std::size_t>(value, key);
  } else if (key == "domain.feature_count") {
    config.domain.feature_count = numeric_value<std::size_t>(value, key);
  } else if (key == "domain.missing_fraction") {
    config.domain.missing_fraction = numeric_value<double>(value, key);
  } else if (key == "domain.ctr_gap") {
    config.domain.ctr_gap = numeric_value<double>(value, key);
  } else if (key == "domain.source_count") {
    config.domain.source_count = numeric_value<std::size_t>(value, key);
  } else if (key == "domain.target_count") {
    config.domain.target_count = numeric_value<std::size_t>(value, key);
  } else if (key == "domain.shared_weight_mix") {
    config.domain.shared_weight_mix = numeric_value<double>(value, key);
  } else if (key == "domain.new_item_rate_source") {
    config.domain.new_item_rate_source = numeric_value<double>(value, key);
  } else if (key == "domain.new_item_rate_target") {
    config.domain.new_item_rate_target = numeric_value<double>(value, key);
  } else if (key == "domain.label_noise_sd") {
    config.domain.label_noise_sd = numeric_value<double>(value, key);
  } else if (key == "domain.seed") {
    config.domain.seed = numeric_value<std::uint64_t>(value, key);
  } else if (key == "domain.base_click_rate") {
    config.domain.base_click_rate = numeric_value<double>(value, key);
  } else if (key == "domain.logit_scale") {
    config.domain.logit_scale = numeric_value<double>(value, key);
  } else if (key == "domain.task_affinity") {
    config.domain.task_affinity = numeric_value<double>(value, key);
  } else if (key == "domain.cw_re_affinity") {
    config.domain.cw_re_affinity = numeric_value<double>(value, key);
  } else if (key == "domain.new_item_effect_source") {
    config.domain.new_item_effect_source = numeric_value<double>(value, key);
  } else if (key == "domain.new_item_effect_target") {
    config.domain.new_item_effect_target = numeric_value<double>(value, key);
  } else if (key == "teacher_train.epochs") {
    config.teacher_train.epochs = numeric_value<std::size_t>(value, key);
  } else if (key == "teacher_train.batch_size") {
    config.teacher_train.batch_size = numeric_value<std::size_t>(value, key);
  } else if (key == "teacher_train.lr") {
    config.teacher_train.adam.lr = numeric_value<double>(value, key);
  } else if (key == "student_train.epochs") {
    config.student_train.epochs = numeric_value<std::size_t>(value, key);
  } else if (key == "student_train.batch_size") {
    config.student_train.batch_size = numeric_value<std::size_t>(value, key);
  } else if (key == "student_train.lr") {
    config.student_train.adam.lr = numeric_value<double>(value, key);
  } else if (key.rfind("student_loss.primary.", 0) == 0 && is_loss_key(key)) {
    config.student_loss.primary_weights[key.substr(sizeof("student_loss.primary.") - 1)] =
        numeric_value<double>(value, key);
  } else if (key.rfind("student_loss.aux.", 0) == 0 && is_loss_key(key)) {
    config.student_loss.aux_weights[key.substr(sizeof("student_loss.aux.") - 1)] =
        numeric_value<double>(value, key);
  } else if (key == "teacher_config") {
    config.teacher_config = config_from_json(value);
  } else if (key == "student_config") {
    config.student_config = config_from_json(value);
  } else {
    check_key_known(key);  // throws with a suggestion
  }
}

}  // namespace detail

inline void validate_experiment_config(const ExperimentConfig& config) {
  validate(config.domain);
  validate_config(config.teacher_config);
  validate_config(config.student_config);
  if (config.seeds.empty()) throw ConfigError("seed list must be nonempty");
  std::set<std::uint64_t> unique(config.seeds.begin(), config.seeds.end());
  if (unique.size() != config.seeds.size()) throw ConfigError("seed list must be duplicate-free");
  if (config.eval_count == 0) throw ConfigError("eval_count must be positive");
  if (config.teacher_train.batch_size == 0 || config.student_train.batch_size == 0) {
    throw ConfigError("batch sizes must be positive");
  }
  const auto find_head = [&](const std::string& name) -> const TaskHead* {
    for (const TaskHead& head : config.student_config.heads) {
      if (head.name == name) return &head;
    }
    return nullptr;
  };
  for (const auto& [name, weight] : config.student_loss.primary_weights) {
    if (!find_head(name)) throw ConfigError("student_loss.primary names unknown head '" + name + "'");
    if (!(weight >= 0.0)) throw ConfigError("loss weight for head '" + name + "' must be >= 0");
  }
  for (const auto& [name, weight] : config.student_loss.aux_weights) {
    const TaskHead* head = find_head(name);
    if (!head || !head->aux_distill) {
      throw ConfigError("student_loss.aux names head '" + name + "' without an aux unit");
    }
    if (!(weight >= 0.0)) throw ConfigError("loss weight for head '" + name + "' must be >= 0");
  }
  if (!config.noise_labels) validate_mapping(config.mapping, &config.teacher_config);
}

// Precedence: preset defaults, then config file values, then flag overrides.
inline ExperimentConfig parse_config(const std::optional<std::string>& config_text,
                                     const std::vector<std::pair<std::string, std::string>>& flags) {
  std::vector<std::pair<std::string, nlohmann::json>> file_entries;
  if (config_text) {
    nlohmann::json file_json;
    try {
      file_json = nlohmann::json::parse(*config_text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
    }
    detail::flatten_config_json(file_json, "", file_entries);
  }
  std::vector<std::pair<std::string, nlohmann::json>> flag_entries;
  for (const auto& [key, raw] : flags) {
    const nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
    flag_entries.emplace_back(key, parsed.is_discarded() ? nlohmann::json(raw) : parsed);
  }

  for (const auto& [key, value] : file_entries) detail::check_key_known(key);
  for (const auto& [key, value] : flag_entries) detail::check_key_known(key);

  ExperimentConfig config = default_experiment_config();
  for (const auto* entries : {&file_entries, &flag_entries}) {
    for (const auto& [key, value] : *entries) {
      if (key == "preset") {
        if (!value.is_string()) throw ConfigError("preset expects a string");
        config.preset = value.get<std::string>();
      }
    }
  }
  apply_preset(config);
  for (const auto* entries : {&file_entries, &flag_entries}) {
    for (const auto& [key, value] : *entries) {
      // feature_count feeds the architecture presets; rebuild before explicit
      // architecture overrides land
      detail::apply_config_key(config, key, value);
      if (key == "domain.feature_count") {
        // architectures track the input width; nothing else preset-derived moves
        ExperimentConfig fresh = config;
        apply_preset(fresh);
        config.teacher_config = fresh.teacher_config;
        config.student_config = fresh.student_config;
      }
    }
  }
  validate_experiment_config(config);
  return config;
}

struct FindingVerdict {
  std::string clause;
  bool pass = false;
  std::string detail;
};

struct FindingReport {
  ExperimentConfig config;
  std::string config_hash;
  std::vector<std::uint64_t> seeds_ok;
  std::vector<std::pair<std::uint64_t, std::string>> seed_failures;
  std::vector<MetricRow> rows;  // teacher + control + distilled, sorted by seed
  SeedComparison comparison;               // distilled - control
  SeedComparison teacher_vs_control;       // teacher - control (when teacher evaluated)
  std::vector<FindingVerdict> verdicts;
};

namespace detail {

inline std::size_t worker_cap(std::size_t jobs) {
  std::size_t cap = std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), 4);
  if (const char* env = std::getenv("CROSSDISTILL_THREADS"); env != nullptr && *env != '\0') {
    const long long parsed = parse_int(env);
    if (parsed < 1) throw ConfigError("CROSSDISTILL_THREADS must be a positive integer");
    cap = static_cast<std::size_t>(parsed);
  }
  return std::min(cap, jobs);
}

struct DeltaStats {
  std::size_t wins = 0, losses = 0, n = 0;
  double median_delta = 0.0;
  std::optional<double> p_value;
  bool present = false;
};

inline DeltaStats delta_stats(const SeedComparison& cmp, const std::string& key) {
  DeltaStats stats;
  const auto it = cmp.by_metric.find(key);
  if (it == cmp.by_metric.end() || it->second.per_seed.empty()) return stats;
  stats.present = true;
  stats.n = it->second.per_seed.size();
  for (const auto& [seed, d] : it->second.per_seed) {
    if (d > 0.0) ++stats.wins;
    if (d < 0.0) ++stats.losses;
  }
  stats.median_delta = it->second.median_delta;
  stats.p_value = it->second.p_value;
  return stats;
}

inline std::string stats_detail(const DeltaStats& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "wins %zu/%zu, median %+0.6f, p %s", s.wins, s.n,
                s.median_delta, s.p_value ? format_double(*s.p_value).c_str() : "undefined");
  return buf;
}

// distilled beats control: win fraction >= 0.8, sign-test p < 0.05, median > 0
inline FindingVerdict improvement_verdict(const std::string& clause, const SeedComparison& cmp,
                                          const std::string& key) {
  FindingVerdict v;
  v.clause = clause;
  const DeltaStats s = delta_stats(cmp, key);
  if (!s.present) {
    v.detail = "metric '" + key + "' absent from comparison";
    return v;
  }
  v.pass = s.wins * 5 >= s.n * 4 && s.p_value && *s.p_value < 0.05 && s.median_delta > 0.0;
  v.detail = key + ": " + stats_detail(s);
  return v;
}

// teacher below control in >= 0.8 of seeds (degraded zero-shot teacher)
inline FindingVerdict degradation_verdict(const std::string& clause, const SeedComparison& cmp,
                                          const std::string& key) {
  FindingVerdict v;
  v.clause = clause;
  const DeltaStats s = delta_stats(cmp, key);
  if (!s.present) {
    v.detail = "metric '" + key + "' absent from comparison";
    return v;
  }
  v.pass = s.losses * 5 >= s.n * 4;
  v.detail = key + " (teacher - control): below in " + std::to_string(s.losses) + "/" +
             std::to_string(s.n) + " seeds";
  return v;
}

// median gain significant (no win-fraction clause)
inline FindingVerdict significant_gain_verdict(const std::string& clause,
                                               const SeedComparison& cmp, const std::string& key) {
  FindingVerdict v;
  v.clause = clause;
  const DeltaStats s = delta_stats(cmp, key);
  if (!s.present) {
    v.detail = "metric '" + key + "' absent from comparison";
    return v;
  }
  v.pass = s.p_value && *s.p_value < 0.05 && s.median_delta > 0.0;
  v.detail = key + ": " + stats_detail(s);
  return v;
}

inline FindingVerdict no_gain_verdict(const std::string& clause, const SeedComparison& cmp,
                                      const std::string& key) {
  FindingVerdict v;
  v.clause = clause;
  const DeltaStats s = delta_stats(cmp, key);
  if (!s.present) {
    v.detail = "metric '" + key + "' absent from comparison";
    return v;
  }
  // an undefined sign test (all ties) is the strongest possible "no gain"
  v.pass = !s.p_value || *s.p_value >= 0.05;
  v.detail = key + ": " + stats_detail(s);
  return v;
}

// new-item slice delta exceeds the overall delta in >= 0.7 of seeds
inline FindingVerdict slice_outsized_verdict(const std::string& clause, const SeedComparison& cmp,
                                             const std::string& slice_key,
                                             const std::string& overall_key) {
  FindingVerdict v;
  v.clause = clause;
  const auto its = cmp.by_metric.find(slice_key);
  const auto ito = cmp.by_metric.find(overall_key);
  if (its == cmp.by_metric.end() || ito == cmp.by_metric.end()) {
    v.detail = "slice or overall metric absent from comparison";
    return v;
  }
  std::map<std::uint64_t, double> overall;
  for (const auto& [seed, d] : ito->second.per_seed) overall[seed] = d;
  std::size_t exceeds = 0, n = 0;
  for (const auto& [seed, d] : its->second.per_seed) {
    const auto it = overall.find(seed);
    if (it == overall.end()) continue;
    ++n;
    if (d > it->second) ++exceeds;
  }
  v.pass = n > 0 && exceeds * 10 >= n * 7;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "slice delta exceeds overall delta in %zu/%zu seeds", exceeds, n);
  v.detail = buf;
  return v;
}

inline std::vector<FindingVerdict> build_verdicts(const FindingReport& report) {
  const std::string& preset = report.config.preset;
  std::vector<FindingVerdict> out;
  if (preset == "homepage") {
    out.push_back(degradation_verdict("teacher-ctr-below-control", report.teacher_vs_control,
                                      "click/all/auc"));
    out.push_back(improvement_verdict("distilled-ctr-above-control", report.comparison,
                                      "click/all/auc"));
    out.push_back(degradation_verdict("teacher-trail-below-control", report.teacher_vs_control,
                                      "trail/all/r_squared"));
    out.push_back(improvement_verdict("distilled-trail-above-control", report.comparison,
                                      "trail/all/r_squared"));
    out.push_back(significant_gain_verdict("nondistilled-discovery-gain", report.comparison,
                                           "discovery/all/auc"));
    out.push_back(slice_outsized_verdict("new-item-slice-outsized", report.comparison,
                                         "click/new_item/auc", "click/all/auc"));
  } else if (preset == "new-release") {
    out.push_back(slice_outsized_verdict("new-item-slice-outsized", report.comparison,
                                         "click/new_item/auc", "click/all/auc"));
  } else if (preset == "radio") {
    out.push_back(significant_gain_verdict("radio-engagement-gain", report.comparison,
                                           "radio_engagement/all/auc"));
  } else if (preset == "noise-ablation") {
    out.push_back(no_gain_verdict("no-significant-ctr-gain", report.comparison, "click/all/auc"));
  }
  // custom presets assert nothing
  return out;
}

}  // namespace detail

// Runs every seed (possibly in parallel; results are seed-local so the worker
// count cannot change them), aggregates paired metrics, and derives verdicts
// mechanically from the comparison thresholds.
inline FindingReport run_experiment(const ExperimentConfig& config,
                                    TeacherCache* teacher_cache = nullptr) {
  validate_experiment_config(config);
  FindingReport report;
  report.config = config;
  report.config_hash = experiment_config_hash(config);

  std::vector<std::uint64_t> seeds = config.seeds;
  std::sort(seeds.begin(), seeds.end());

  const std::filesystem::path exp_dir =
      config.out.empty() ? std::filesystem::path{} : config.out / report.config_hash;
  if (!exp_dir.empty()) {
    std::filesystem::create_directories(exp_dir);
    write_text_file(exp_dir / "config.json", experiment_config_to_json(config).dump(2) + "\n");
  }

  struct SeedOutcome {
    bool ok = false;
    std::string error;
    MetricsReport teacher, control, distilled;
  };
  std::vector<SeedOutcome> outcomes(seeds.size());

  TeacherCache local_cache;
  TeacherCache* cache = teacher_cache ? teacher_cache : &local_cache;

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < seeds.size(); i = next.fetch_add(1)) {
      const std::uint64_t seed = seeds[i];
      try {
        PipelineConfig pc;
        pc.domain = config.domain;
        pc.domain.seed = derive_seed(config.domain.seed, seed);  // one world per seed
        pc.teacher_config = config.teacher_config;
        pc.student_config = config.student_config;
        pc.mapping = config.mapping;
        pc.teacher_train = config.teacher_train;
        pc.student_train = config.student_train;
        pc.student_loss = config.student_loss;
        pc.eval_count = config.eval_count;
        pc.noise_labels = config.noise_labels;
        pc.evaluate_teacher = config.evaluate_teacher;
        pc.seed_id = seed;
        pc.overwrite = config.overwrite;
        pc.teacher_cache = cache;
        if (!exp_dir.empty()) pc.run_dir = exp_dir / ("seed-" + std::to_string(seed));
        PipelineResult pr = run_pipeline(pc);
        outcomes[i].teacher = std::move(pr.teacher_report);
        outcomes[i].control = std::move(pr.control_report);
        outcomes[i].distilled = std::move(pr.distilled_report);
        outcomes[i].ok = true;
      } catch (const std::exception& e) {
        outcomes[i].error = e.what();
      }
    }
  };
  const std::size_t workers = detail::worker_cap(seeds.size());
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<MetricsReport> teacher_reports, control_reports, distilled_reports;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!outcomes[i].ok) {
      report.seed_failures.emplace_back(seeds[i], outcomes[i].error);
      continue;
    }
    report.seeds_ok.push_back(seeds[i]);
    teacher_reports.push_back(outcomes[i].teacher);
    control_reports.push_back(outcomes[i].control);
    distilled_reports.push_back(outcomes[i].distilled);
    for (const auto* rep : {&outcomes[i].teacher, &outcomes[i].control, &outcomes[i].distilled}) {
      report.rows.insert(report.rows.end(), rep->rows.begin(), rep->rows.end());
    }
  }

  if (report.seed_failures.size() * 5 > seeds.size()) {  // > 20% failed
    std::string detail;
    for (const auto& [seed, err] : report.seed_failures) {
      detail += "\n  seed " + std::to_string(seed) + ": " + err;
    }
    throw PipelineError("more than 20% of seeds failed; refusing aggregation:" + detail);
  }

  report.comparison = compare_across_seeds(control_reports, distilled_reports);
  if (config.evaluate_teacher) {
    report.teacher_vs_control = compare_across_seeds(control_reports, teacher_reports);
  }
  report.verdicts = detail::build_verdicts(report);
  return report;
}

namespace detail {

inline std::map<std::string, double> median_by_model_metric(const std::vector<MetricRow>& rows) {
  std::map<std::string, std::vector<double>> values;
  for (const MetricRow& r : rows) {
    values[r.model + "/" + r.head + "/" + r.slice + "/" + r.metric].push_back(r.value);
  }
  std::map<std::string, double> out;
  for (auto& [key, v] : values) out[key] = median(v);
  return out;
}

inline std::string lookup_cell(const std::map<std::string, double>& medians,
                               const std::string& key) {
  const auto it = medians.find(key);
  if (it == medians.end()) return "absent";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0.4f", it->second);
  return buf;
}

}  // namespace detail

// Human-readable report: per-task control/teacher/distilled medians, the
// non-distilled task block, new-item slice deltas, the full comparison
// summary, and one PASS/FAIL line per verdict clause.
inline std::string render_finding_report(const FindingReport& report) {
  const auto medians = detail::median_by_model_metric(report.rows);
  std::string out;
  char line[240];
  out += "experiment: preset " + report.config.preset + ", config " + report.config_hash + "\n";
  std::snprintf(line, sizeof(line), "seeds: %zu ok, %zu failed\n\n", report.seeds_ok.size(),
                report.seed_failures.size());
  out += line;
  for (const auto& [seed, err] : report.seed_failures) {
    out += "failed seed " + std::to_string(seed) + ": " + err + "\n";
  }

  std::set<std::string> distilled_tasks;
  for (const auto& [head, slot] : report.config.mapping.pairs) distilled_tasks.insert(head);

  out += "distilled tasks (median over seeds)\n";
  std::snprintf(line, sizeof(line), "  %-18s %-10s %10s %10s %10s\n", "head", "metric", "control",
                "teacher", "distilled");
  out += line;
  for (const TaskHead& head : report.config.student_config.heads) {
    if (!head.serving || !head.aux_distill) continue;
    const std::string metric = head.kind == TaskKind::kBinary ? "auc" : "r_squared";
    const std::string suffix = head.name + "/all/" + metric;
    std::snprintf(line, sizeof(line), "  %-18s %-10s %10s %10s %10s\n", head.name.c_str(),
                  metric.c_str(), detail::lookup_cell(medians, "control/" + suffix).c_str(),
                  detail::lookup_cell(medians, "teacher/" + suffix).c_str(),
                  detail::lookup_cell(medians, "distilled/" + suffix).c_str());
    out += line;
  }

  out += "\nnon-distilled serving tasks (median over seeds)\n";
  std::snprintf(line, sizeof(line), "  %-18s %-10s %10s %10s\n", "head", "metric", "control",
                "distilled");
  out += line;
  for (const TaskHead& head : report.config.student_config.heads) {
    if (!head.serving || head.aux_distill) continue;
    const std::string metric = head.kind == TaskKind::kBinary ? "auc" : "r_squared";
    const std::string suffix = head.name + "/all/" + metric;
    std::snprintf(line, sizeof(line), "  %-18s %-10s %10s %10s\n", head.name.c_str(),
                  metric.c_str(), detail::lookup_cell(medians, "control/" + suffix).c_str(),
                  detail::lookup_cell(medians, "distilled/" + suffix).c_str());
    out += line;
  }

  out += "\nseed comparison (distilled - control)\n";
  std::snprintf(line, sizeof(line), "  %-34s %5s %10s %12s\n", "metric", "n", "median", "p");
  out += line;
  for (const auto& [key, paired] : report.comparison.by_metric) {
    std::snprintf(line, sizeof(line), "  %-34s %5zu %+10.6f %12s\n", key.c_str(),
                  paired.per_seed.size(), paired.median_delta,
                  paired.p_value ? format_double(*paired.p_value).c_str() : "undefined");
    out += line;
  }

  out += "\nverdicts\n";
  for (const FindingVerdict& v : report.verdicts) {
    out += std::string("  [") + (v.pass ? "PASS" : "FAIL") + "] " + v.clause + ": " + v.detail +
           "\n";
  }
  return out;
}

// Writes report.csv + report.txt; exit code 0 iff every verdict passed.
inline int emit_report(const FindingReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "report.csv", metrics_to_csv(report.rows));
  write_text_file(dir / "report.txt", render_finding_report(report));
  bool all_pass = true;
  for (const FindingVerdict& v : report.verdicts) all_pass = all_pass && v.pass;
  return all_pass ? 0 : 1;
}

// Rebuilds a FindingReport from a previously persisted experiment directory
// (<out>/<confighash>), re-running only the aggregation.
inline FindingReport load_finding_report(const std::filesystem::path& exp_dir) {
  const ExperimentConfig config = parse_config(read_text_file(exp_dir / "config.json"), {});
  std::vector<MetricsReport> teacher_reports, control_reports, distilled_reports;
  FindingReport report;
  report.config = config;
  report.config_hash = experiment_config_hash(config);

  std::vector<std::uint64_t> seeds = config.seeds;
  std::sort(seeds.begin(), seeds.end());
  for (const std::uint64_t seed : seeds) {
    const auto seed_dir = exp_dir / ("seed-" + std::to_string(seed));
    if (!std::filesystem::exists(seed_dir / "metrics.csv")) {
      report.seed_failures.emplace_back(seed, "missing metrics.csv");
      continue;
    }
    const nlohmann::json pc = nlohmann::json::parse(read_text_file(seed_dir / "config.json"));
    const std::string gt_fp = pc.at("gt_fingerprint").get<std::string>();
    const auto rows = metrics_from_csv(read_text_file(seed_dir / "metrics.csv"));
    MetricsReport teacher, control, distilled;
    for (auto* rep : {&teacher, &control, &distilled}) {
      rep->seed = seed;
      rep->generator_fingerprint = gt_fp;
    }
    teacher.model_id = "teacher";
    control.model_id = "control";
    distilled.model_id = "distilled";
    for (const MetricRow& row : rows) {
      if (row.model == "teacher") teacher.rows.push_back(row);
      if (row.model == "control") control.rows.push_back(row);
      if (row.model == "distilled") distilled.rows.push_back(row);
    }
    report.seeds_ok.push_back(seed);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    teacher_reports.push_back(std::move(teacher));
    control_reports.push_back(std::move(control));
    distilled_reports.push_back(std::move(distilled));
  }
  if (report.seed_failures.size() * 5 > seeds.size()) {
    throw PipelineError("more than 20% of seeds are missing; refusing aggregation");
  }
  report.comparison = compare_across_seeds(control_reports, distilled_reports);
  if (config.evaluate_teacher) {
    report.teacher_vs_control = compare_across_seeds(control_reports, teacher_reports);
  }
  report.verdicts = detail::build_verdicts(report);
  return report;
}

}  // namespace crossdistill
