#pragma once

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossdistill/dataset.hpp"
#include "crossdistill/domaingen.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/metrics.hpp"
#include "crossdistill/ranker.hpp"
#include "crossdistill/rng.hpp"

namespace crossdistill {

// Teacher head name -> student aux slot name. Injective in both directions.
struct TaskMapping {
  std::vector<std::pair<std::string, std::string>> pairs;
};

inline TaskMapping homepage_mapping() {
  return {{{"click", "ctr_aux"}, {"trail", "trail_aux"}}};
}

inline TaskMapping radio_mapping() {
  return {{{"continue_watch", "cw_aux"}}};
}

inline void validate_mapping(const TaskMapping& mapping, const RankerConfig* teacher_config) {
  if (mapping.pairs.empty()) throw ConfigError("task mapping is empty");
  std::set<std::string> heads, slots;
  for (const auto& [head, slot] : mapping.pairs) {
    if (!heads.insert(head).second) throw ConfigError("mapping repeats teacher head '" + head + "'");
    if (!slots.insert(slot).second) throw ConfigError("mapping repeats slot '" + slot + "'");
    if (teacher_config) {
      const bool known = std::any_of(teacher_config->heads.begin(), teacher_config->heads.end(),
                                     [&](const TaskHead& h) { return h.name == head; });
      if (!known) throw ConfigError("mapping names unknown teacher head '" + head + "'");
    } else {
      // noise mode has no teacher; head names must still be real tasks so the
      // slot's value kind (binary vs regression) is defined
      const auto& tasks = task_names();
      if (std::find(tasks.begin(), tasks.end(), head) == tasks.end()) {
        throw ConfigError("mapping names unknown task '" + head + "'");
      }
    }
  }
}

// Teacher training is ordinary ranker training on the fully observed source
// dataset; the zero-shot property is that nothing downstream ever fine-tunes
// the result on target data.
inline TrainTrace train_teacher(RankerModel& teacher, const Dataset& source,
                                const LossSpec& loss_spec, TrainOptions opts) {
  for (const Example& ex : source.examples) {
    if (std::any_of(ex.mask.begin(), ex.mask.end(), [](std::uint8_t m) { return m == 0; })) {
      throw DataError("train_teacher: source dataset has masked features");
    }
  }
  opts.expected_domain = Domain::kSource;
  return train(teacher, source, loss_spec, opts);
}

namespace detail {

// Soft labels must stay strictly inside (0,1); extreme logits can round the
// sigmoid to exactly 0 or 1 in doubles.
inline double open_unit(double v) {
  return std::clamp(v, std::numeric_limits<double>::min(), 1.0 - 1e-15);
}

inline std::size_t ensure_slot(DatasetSchema& schema, const std::string& slot, bool overwrite) {
  if (const auto idx = schema.slot_index(slot)) {
    if (!overwrite) {
      throw ConflictError("slot '" + slot + "' is already filled; pass overwrite to replace it");
    }
    return *idx;
  }
  schema.teacher_slots.push_back(slot);
  return schema.teacher_slots.size() - 1;
}

}  // namespace detail

// Runs the teacher over every row (with feature defaulting) and copies the
// mapped head outputs into teacher-label slots. Binary heads contribute
// probabilities, regression heads raw values. Row order and count preserved.
inline Dataset augment(const Dataset& target, const RankerModel& teacher,
                       const TaskMapping& mapping, bool overwrite = false,
                       const std::string& created_at = "") {
  validate_mapping(mapping, &teacher.config);
  Dataset out = target;

  std::vector<std::size_t> slot_of_pair;
  for (const auto& [head, slot] : mapping.pairs) {
    slot_of_pair.push_back(detail::ensure_slot(out.schema, slot, overwrite));
  }
  std::vector<const TaskHead*> head_of_pair;
  for (const auto& [head, slot] : mapping.pairs) {
    for (const TaskHead& th : teacher.config.heads) {
      if (th.name == head) head_of_pair.push_back(&th);
    }
  }

  for (Example& ex : out.examples) {
    ex.teacher.resize(out.schema.teacher_slots.size());
    const auto outputs = forward(teacher, apply_feature_defaults(ex, out.schema));
    for (std::size_t p = 0; p < mapping.pairs.size(); ++p) {
      const double raw = outputs.at(mapping.pairs[p].first).primary;
      ex.teacher[slot_of_pair[p]] = head_of_pair[p]->kind == TaskKind::kBinary
                                        ? detail::open_unit(sigmoid(raw))
                                        : raw;
    }
  }

  Provenance prov;
  prov.teacher_fingerprint = checkpoint_fingerprint(teacher);
  prov.mapping = mapping.pairs;
  prov.created_at = created_at;
  out.provenance = prov;

  out.fingerprint = content_fingerprint(out);
  return out;
}

// The ablation arm: slots carry no feature information at all. Binary slots
// are Uniform(0,1), regression slots Gaussian with the target label's
// empirical moments. Deterministic in seed via per-row derived streams.
inline Dataset noise_teacher(const Dataset& target, const TaskMapping& mapping,
                             std::uint64_t seed, bool overwrite = false,
                             const std::string& created_at = "") {
  validate_mapping(mapping, nullptr);
  Dataset out = target;

  std::vector<std::size_t> slot_of_pair;
  std::vector<TaskKind> kind_of_pair;
  for (const auto& [head, slot] : mapping.pairs) {
    slot_of_pair.push_back(detail::ensure_slot(out.schema, slot, overwrite));
    kind_of_pair.push_back(task_kind(head));
  }

  double trail_mean = 0.0, trail_sd = 0.0;
  if (std::any_of(kind_of_pair.begin(), kind_of_pair.end(),
                  [](TaskKind k) { return k == TaskKind::kRegression; })) {
    std::vector<double> values;
    for (const Example& ex : target.examples) {
      if (ex.trail) values.push_back(*ex.trail);
    }
    if (values.size() < 2) throw DataError("noise_teacher: too few trail labels to match moments");
    trail_mean = std::accumulate(values.begin(), values.end(), 0.0) /
                 static_cast<double>(values.size());
    for (double v : values) trail_sd += (v - trail_mean) * (v - trail_mean);
    trail_sd = std::sqrt(trail_sd / static_cast<double>(values.size()));
  }

  for (std::size_t i = 0; i < out.examples.size(); ++i) {
    Example& ex = out.examples[i];
    ex.teacher.resize(out.schema.teacher_slots.size());
    Xoshiro256pp rng(derive_seed(seed, i));
    for (std::size_t p = 0; p < mapping.pairs.size(); ++p) {
      if (kind_of_pair[p] == TaskKind::kBinary) {
        double u = rng.uniform();
        while (u == 0.0) u = rng.uniform();
        ex.teacher[slot_of_pair[p]] = u;
      } else {
        ex.teacher[slot_of_pair[p]] = trail_mean + trail_sd * rng.normal();
      }
    }
  }

  Provenance prov;
  prov.teacher_fingerprint = "noise:" + to_hex16(seed);
  prov.mapping = mapping.pairs;
  prov.created_at = created_at;
  out.provenance = prov;

  out.fingerprint = content_fingerprint(out);
  return out;
}

// The control student is the distilled architecture with every distillation
// attachment mechanically removed: aux units dropped, distill-only heads
// deleted. Tensor paths (and so init draws) of everything that remains are
// unchanged.
inline RankerConfig derive_control_config(const RankerConfig& distilled) {
  RankerConfig control = distilled;
  control.heads.clear();
  for (TaskHead head : distilled.heads) {
    if (head.distill_only()) continue;
    head.aux_distill = false;
    head.distill_slot.clear();
    control.heads.push_back(std::move(head));
  }
  return control;
}

// Cross-run teacher reuse: identical (ground truth, source data, config,
// train opts) means an identical teacher, so presets sharing a world share
// one training run.
struct TeacherCache {
  std::mutex mu;
  std::map<std::string, std::shared_ptr<const RankerModel>> models;
};

struct PipelineConfig {
  DomainSpec domain;  // domain.seed is the per-run world seed
  RankerConfig teacher_config;
  RankerConfig student_config;  // distilled architecture
  TaskMapping mapping;
  TrainOptions teacher_train;
  TrainOptions student_train;
  LossSpec student_loss;
  std::size_t eval_count = 100000;
  bool noise_labels = false;     // replace augment with noise_teacher
  bool evaluate_teacher = true;  // homepage-style Table-1 teacher column
  std::uint64_t seed_id = 0;     // label for reports and the run directory
  std::filesystem::path run_dir;  // empty = keep everything in memory
  bool overwrite = false;
  TeacherCache* teacher_cache = nullptr;
};

struct PipelineResult {
  std::string gt_fingerprint;
  std::string augmented_fingerprint;
  std::shared_ptr<const RankerModel> teacher;  // null in noise mode
  RankerModel control_student;
  RankerModel distilled_student;
  MetricsReport teacher_report;  // empty rows unless evaluate_teacher
  MetricsReport control_report;
  MetricsReport distilled_report;
  TrainTrace control_trace;
  TrainTrace distilled_trace;
};

namespace detail {

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError("stage '" + stage + "': " + e.what());
  }
}

inline std::string render_metrics_table(const std::vector<MetricRow>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %-18s %-12s %-10s %12s %6s\n", "model", "head",
                "slice", "metric", "value", "seed");
  out += line;
  for (const MetricRow& r : rows) {
    std::snprintf(line, sizeof(line), "%-10s %-18s %-12s %-10s %12.6f %6llu\n", r.model.c_str(),
                  r.head.c_str(), r.slice.c_str(), r.metric.c_str(), r.value,
                  static_cast<unsigned long long>(r.seed));
    out += line;
  }
  return out;
}

inline MetricsReport evaluate_model(const RankerModel& model, const Dataset& eval,
                                    const std::string& model_id, std::uint64_t seed_id,
                                    const std::string& gt_fingerprint) {
  MetricsReport report;
  report.model_id = model_id;
  report.seed = seed_id;
  report.generator_fingerprint = gt_fingerprint;
  const ScoreTable table = predict(model, eval);
  for (const TaskHead& head : model.config.heads) {
    if (!head.serving) continue;  // non-serving heads never appear in serving reports
    slice_report(report, table, eval, head);
  }
  return report;
}

}  // namespace detail

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& config) {
  nlohmann::json j;
  j["domain"] = spec_to_json(config.domain);
  j["teacher_config"] = config_to_json(config.teacher_config);
  j["student_config"] = config_to_json(config.student_config);
  nlohmann::json mapping = nlohmann::json::array();
  for (const auto& [head, slot] : config.mapping.pairs) {
    mapping.push_back({{"teacher_head", head}, {"slot", slot}});
  }
  j["mapping"] = mapping;
  j["teacher_train"] = {{"epochs", config.teacher_train.epochs},
                        {"batch_size", config.teacher_train.batch_size},
                        {"lr", config.teacher_train.adam.lr},
                        {"seed", config.teacher_train.seed}};
  j["student_train"] = {{"epochs", config.student_train.epochs},
                        {"batch_size", config.student_train.batch_size},
                        {"lr", config.student_train.adam.lr},
                        {"seed", config.student_train.seed}};
  j["student_loss"] = {{"primary", config.student_loss.primary_weights},
                       {"aux", config.student_loss.aux_weights}};
  j["eval_count"] = config.eval_count;
  j["noise_labels"] = config.noise_labels;
  j["evaluate_teacher"] = config.evaluate_teacher;
  j["seed_id"] = config.seed_id;
  return j;
}

// Generate -> train teacher on source -> augment target -> train control and
// distilled students on the same augmented target data -> evaluate on a fresh
// target sample. Every derived seed hangs off the world seed, so one
// PipelineConfig is one reproducible experiment arm.
inline PipelineResult run_pipeline(const PipelineConfig& config) {
  PipelineResult result;
  const std::uint64_t world = config.domain.seed;

  // refuse occupied run directories before any compute happens
  if (!config.run_dir.empty() && std::filesystem::exists(config.run_dir) &&
      !std::filesystem::is_empty(config.run_dir) && !config.overwrite) {
    throw ConflictError("run directory '" + config.run_dir.string() +
                        "' is nonempty; pass overwrite to replace it");
  }

  const GroundTruth gt =
      detail::run_stage("ground_truth", [&] { return make_ground_truth(config.domain); });
  result.gt_fingerprint = gt.fingerprint;

  Dataset target_train = detail::run_stage("generate", [&] {
    return sample_domain(gt, Domain::kTarget, config.domain.target_count,
                         derive_seed(world, "data.target"));
  });
  const Dataset eval_set = detail::run_stage("generate", [&] {
    return sample_domain(gt, Domain::kTarget, config.eval_count, derive_seed(world, "data.eval"));
  });

  if (!config.noise_labels) {
    result.teacher = detail::run_stage("train_teacher", [&]() -> std::shared_ptr<const RankerModel> {
      RankerConfig tc = config.teacher_config;
      tc.init_seed = derive_seed(world, "init.teacher");
      TrainOptions topts = config.teacher_train;
      topts.seed = derive_seed(world, "train.teacher");

      std::string cache_key;
      if (config.teacher_cache) {
        cache_key = gt.fingerprint + "|" + std::to_string(derive_seed(world, "data.source")) + "|" +
                    config_to_json(tc).dump() + "|" + std::to_string(topts.epochs) + "|" +
                    std::to_string(topts.batch_size) + "|" + format_double(topts.adam.lr) + "|" +
                    std::to_string(topts.seed);
        std::lock_guard<std::mutex> lock(config.teacher_cache->mu);
        const auto it = config.teacher_cache->models.find(cache_key);
        if (it != config.teacher_cache->models.end()) return it->second;
      }

      const Dataset source_train = sample_domain(gt, Domain::kSource, config.domain.source_count,
                                                 derive_seed(world, "data.source"));
      auto teacher = std::make_shared<RankerModel>(init_model(tc));
      train_teacher(*teacher, source_train, LossSpec{}, topts);
      std::shared_ptr<const RankerModel> frozen = teacher;
      if (config.teacher_cache) {
        std::lock_guard<std::mutex> lock(config.teacher_cache->mu);
        config.teacher_cache->models.emplace(cache_key, frozen);
      }
      return frozen;
    });
  }

  const Dataset augmented = detail::run_stage("augment", [&] {
    return config.noise_labels
               ? noise_teacher(target_train, config.mapping, derive_seed(world, "noise.labels"))
               : augment(target_train, *result.teacher, config.mapping);
  });
  result.augmented_fingerprint = augmented.fingerprint;

  detail::run_stage("train_students", [&] {
    RankerConfig distilled_cfg = config.student_config;
    distilled_cfg.init_seed = derive_seed(world, "init.student");
    const RankerConfig control_cfg = derive_control_config(distilled_cfg);

    TrainOptions sopts = config.student_train;
    sopts.seed = derive_seed(world, "train.student");
    sopts.expected_domain = Domain::kTarget;

    result.control_student = init_model(control_cfg);
    result.control_trace = train(result.control_student, augmented, config.student_loss, sopts);
    result.distilled_student = init_model(distilled_cfg);
    result.distilled_trace = train(result.distilled_student, augmented, config.student_loss, sopts);
    return 0;
  });

  detail::run_stage("evaluate", [&] {
    result.control_report = detail::evaluate_model(result.control_student, eval_set, "control",
                                                   config.seed_id, gt.fingerprint);
    result.distilled_report = detail::evaluate_model(result.distilled_student, eval_set,
                                                     "distilled", config.seed_id, gt.fingerprint);
    if (config.evaluate_teacher && result.teacher) {
      result.teacher_report = detail::evaluate_model(*result.teacher, eval_set, "teacher",
                                                     config.seed_id, gt.fingerprint);
    } else {
      result.teacher_report.model_id = "teacher";
      result.teacher_report.seed = config.seed_id;
      result.teacher_report.generator_fingerprint = gt.fingerprint;
    }
    return 0;
  });

  if (!config.run_dir.empty()) {
    detail::run_stage("persist", [&] {
      std::filesystem::create_directories(config.run_dir);
      nlohmann::json echo = pipeline_config_to_json(config);
      echo["gt_fingerprint"] = result.gt_fingerprint;
      echo["augmented_fingerprint"] = result.augmented_fingerprint;
      write_text_file(config.run_dir / "config.json", echo.dump(2) + "\n");
      if (result.teacher) write_checkpoint(*result.teacher, config.run_dir / "teacher.ckpt");
      write_dataset(augmented, config.run_dir / "augmented.ds");
      write_checkpoint(result.control_student, config.run_dir / "student_control.ckpt");
      write_checkpoint(result.distilled_student, config.run_dir / "student_distilled.ckpt");
      std::vector<MetricRow> rows = result.teacher_report.rows;
      rows.insert(rows.end(), result.control_report.rows.begin(), result.control_report.rows.end());
      rows.insert(rows.end(), result.distilled_report.rows.begin(), result.distilled_report.rows.end());
      write_text_file(config.run_dir / "metrics.csv", metrics_to_csv(rows));
      write_text_file(config.run_dir / "metrics.txt", detail::render_metrics_table(rows));
      return 0;
    });
  }
  return result;
}

}  // namespace crossdistill
