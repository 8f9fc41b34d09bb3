#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "crossdistill/dataset.hpp"
#include "crossdistill/domaingen.hpp"
#include "crossdistill/metrics.hpp"
#include "crossdistill/ranker.hpp"
#include "crossdistill/textio.hpp"

// Shared fixtures for the test suite. Everything here is hand-built with
// every field assigned explicitly, so golden files and derived expectations
// survive changes to library defaults.

namespace testsupport {

inline std::filesystem::path golden_dir() {
  return std::filesystem::path(CROSSDISTILL_GOLDEN_DIR);
}

inline std::string read_golden(const std::string& name) {
  return crossdistill::read_text_file(golden_dir() / name);
}

// Three target-domain rows covering: clicked row with trail, new-item row,
// partially filled teacher slots, and a masked feature column.
inline crossdistill::Dataset tiny_dataset() {
  using namespace crossdistill;
  Dataset ds;
  ds.schema.feature_count = 4;
  ds.schema.feature_names = {"f0", "f1", "f2", "new_item"};
  ds.schema.new_item_index = 3;
  ds.schema.availability_source = {1, 1, 1, 1};
  ds.schema.availability_target = {1, 0, 1, 1};
  ds.schema.teacher_slots = {"ctr_aux", "trail_aux"};
  ds.schema.generator_fingerprint = "deadbeefdeadbeef";
  ds.domain = Domain::kTarget;

  Example r0;
  r0.domain = Domain::kTarget;
  r0.mask = {1, 0, 1, 1};
  r0.features = {0.5, kMissingSentinel, -1.25, 0.0};
  r0.click = 1;
  r0.trail = 2.5;
  r0.continue_watch = 1;
  r0.teacher = {0.75, 1.5};

  Example r1;
  r1.domain = Domain::kTarget;
  r1.is_new_item = true;
  r1.mask = {1, 0, 1, 1};
  r1.features = {-0.125, kMissingSentinel, 3.5, 1.0};
  r1.discovery = 1;
  r1.radio_engagement = 1;
  r1.teacher = {0.5, std::nullopt};

  Example r2;
  r2.domain = Domain::kTarget;
  r2.mask = {1, 0, 1, 1};
  r2.features = {2.0, kMissingSentinel, 0.0625, 0.0};
  r2.teacher = {std::nullopt, 0.1};

  ds.examples = {r0, r1, r2};

  Provenance prov;
  prov.teacher_fingerprint = "feedfacefeedface";
  prov.mapping = {{"click", "ctr_aux"}, {"trail", "trail_aux"}};
  prov.created_at = "2024-05-01T00:00:00Z";
  ds.provenance = prov;

  ds.fingerprint = content_fingerprint(ds);
  return ds;
}

inline crossdistill::RankerConfig tiny_ranker_config() {
  using namespace crossdistill;
  RankerConfig config;
  config.input_dim = 3;
  config.trunk = {4};
  config.init_seed = 42;
  TaskHead click;
  click.name = "click";
  click.tower = {2};
  click.label_task = "click";
  click.aux_distill = true;
  click.distill_slot = "ctr_aux";
  TaskHead trail;
  trail.name = "trail";
  trail.kind = TaskKind::kRegression;
  trail.tower = {2};
  trail.label_task = "trail";
  config.heads = {click, trail};
  return config;
}

// Every field assigned, nothing inherited from DomainSpec defaults.
inline crossdistill::DomainSpec tiny_domain_spec() {
  crossdistill::DomainSpec spec;
  spec.feature_count = 8;
  spec.missing_fraction = 0.25;
  spec.ctr_gap = 0.01;
  spec.source_count = 50;
  spec.target_count = 20;
  spec.shared_weight_mix = 0.6;
  spec.new_item_rate_source = 0.2;
  spec.new_item_rate_target = 0.05;
  spec.label_noise_sd = 0.3;
  spec.seed = 7;
  spec.base_click_rate = 0.15;
  spec.logit_scale = 1.75;
  spec.task_affinity = 0.4;
  spec.cw_re_affinity = 0.9;
  spec.new_item_effect_source = 0.75;
  spec.new_item_effect_target = 1.25;
  return spec;
}

inline std::vector<crossdistill::MetricRow> tiny_metric_rows() {
  using crossdistill::MetricRow;
  return {
      MetricRow{"control", "click", "all", "auc", 0.7125, 3},
      MetricRow{"distilled", "click", "new_item", "auc", 0.75, 3},
      MetricRow{"distilled", "trail", "all", "r_squared", -0.0625, 12},
  };
}

// Central finite difference of a scalar function at x.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double eps = 1e-5) {
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

// Relative error with a floor so near-zero pairs compare absolutely.
inline double rel_err(double a, double b, double floor_at = 1.0) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_at});
}

}  // namespace testsupport
