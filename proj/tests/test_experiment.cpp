#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "crossdistill/distill.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/experiment.hpp"
#include "crossdistill/metrics.hpp"

#include "support.hpp"

using namespace crossdistill;
namespace fs = std::filesystem;
using testsupport::tiny_domain_spec;

namespace {

PairedDeltas deltas_of(const std::vector<double>& deltas, std::optional<double> p) {
  PairedDeltas pd;
  for (std::size_t i = 0; i < deltas.size(); ++i) pd.per_seed.emplace_back(i + 1, deltas[i]);
  std::vector<double> copy = deltas;
  pd.median_delta = median(copy);
  pd.p_value = p;
  return pd;
}

std::vector<double> repeat(double value, std::size_t wins, double other, std::size_t rest) {
  std::vector<double> out(wins, value);
  out.insert(out.end(), rest, other);
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("preset architectures keep the capacity gap in range") {
  const RankerConfig teacher = teacher_preset_config(64);
  const RankerConfig homepage = homepage_student_config(64);
  const RankerConfig radio = radio_student_config(64);
  const std::size_t teacher_params = count_parameters(teacher);

  for (const RankerConfig* student : {&homepage, &radio}) {
    const std::size_t distilled = count_parameters(*student);
    const std::size_t control = count_parameters(derive_control_config(*student));
    const double r_distilled = static_cast<double>(teacher_params) / distilled;
    const double r_control = static_cast<double>(teacher_params) / control;
    CHECK(r_distilled >= 100.0);
    CHECK(r_distilled <= 400.0);
    CHECK(r_control >= 100.0);
    CHECK(r_control <= 400.0);
  }

  // mappings line up with the heads and slots they feed
  for (const auto& [head, slot] : homepage_mapping().pairs) {
    CHECK(std::any_of(teacher.heads.begin(), teacher.heads.end(),
                      [&, h = head](const TaskHead& th) { return th.name == h; }));
    CHECK(std::any_of(homepage.heads.begin(), homepage.heads.end(),
                      [&, s = slot](const TaskHead& th) { return th.distill_slot == s; }));
  }
  const TaskHead* cw = nullptr;
  for (const TaskHead& head : radio.heads) {
    if (head.name == "cw_distill") cw = &head;
  }
  REQUIRE(cw != nullptr);
  CHECK_FALSE(cw->serving);
  CHECK(cw->distill_only());
  CHECK(cw->distill_slot == radio_mapping().pairs[0].second);
  CHECK(radio_mapping().pairs[0].first == "continue_watch");
}

TEST_CASE("experiment defaults pin the published setup") {
  const ExperimentConfig config = default_experiment_config();
  CHECK(config.preset == "homepage");
  CHECK(config.domain.feature_count == 64);
  CHECK(config.domain.missing_fraction == 0.40);
  CHECK(config.domain.ctr_gap == 0.02);
  CHECK(config.domain.source_count == 200000);
  CHECK(config.domain.target_count == 2000);
  CHECK(config.domain.new_item_rate_source == 0.10);
  CHECK(config.domain.new_item_rate_target == 0.01);
  CHECK(config.domain.label_noise_sd == 0.5);
  CHECK(config.domain.base_click_rate == 0.10);
  CHECK(config.teacher_train.epochs == 1);
  CHECK(config.teacher_train.batch_size == 256);
  CHECK(config.student_train.epochs == 120);
  CHECK(config.student_train.batch_size == 64);
  CHECK(config.eval_count == 100000);
  CHECK(config.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  CHECK(config.student_loss.aux_weights.at("click") == 0.4);
  CHECK(config.student_loss.primary_weights.at("trail") == 0.35);
  CHECK(config.evaluate_teacher);
  CHECK_FALSE(config.noise_labels);
  CHECK(config.teacher_config.trunk == std::vector<std::size_t>{384, 192});
  CHECK(config.student_config.trunk == std::vector<std::size_t>{16});
}

TEST_CASE("parse_config layers file values under flag overrides") {
  const std::string file = R"({
    "domain": {"ctr_gap": 0.05, "feature_count": 16},
    "student_train": {"epochs": 10},
    "seeds": [4, 5, 6, 7, 8]
  })";
  const ExperimentConfig config = parse_config(
      file, {{"domain.ctr_gap", "0.07"}, {"student_loss.aux.click", "0.9"}});
  CHECK(config.domain.ctr_gap == 0.07);           // flag beats file
  CHECK(config.domain.feature_count == 16);       // file beats preset default
  CHECK(config.student_train.epochs == 10);
  CHECK(config.seeds == std::vector<std::uint64_t>{4, 5, 6, 7, 8});
  CHECK(config.student_loss.aux_weights.at("click") == 0.9);
  // architectures follow the overridden width
  CHECK(config.teacher_config.input_dim == 16);
  CHECK(config.student_config.input_dim == 16);
}

TEST_CASE("parse_config resolves presets before other keys") {
  const ExperimentConfig radio = parse_config(std::nullopt, {{"preset", "radio"}});
  CHECK(radio.student_config.heads.size() == 3);
  CHECK(radio.mapping.pairs == radio_mapping().pairs);
  CHECK_FALSE(radio.evaluate_teacher);
  CHECK(radio.student_loss.aux_weights.empty());

  const ExperimentConfig noise = parse_config(std::nullopt, {{"preset", "noise-ablation"}});
  CHECK(noise.noise_labels);
  CHECK_FALSE(noise.evaluate_teacher);
  // ablation keeps the homepage training recipe
  CHECK(noise.student_loss.aux_weights.at("click") == 0.4);
  CHECK(noise.student_config.heads.size() == 3);

  CHECK_THROWS_AS(parse_config(std::nullopt, {{"preset", "frontpage"}}), ConfigError);
}

TEST_CASE("parse_config accepts every seed spelling") {
  CHECK(parse_config(std::nullopt, {{"seeds", "11,12,13"}}).seeds ==
        std::vector<std::uint64_t>{11, 12, 13});
  CHECK(parse_config(std::nullopt, {{"seeds", "7"}}).seeds == std::vector<std::uint64_t>{7});
  CHECK(parse_config(R"({"seeds": [3, 1, 2]})", {}).seeds == std::vector<std::uint64_t>{3, 1, 2});
  CHECK_THROWS_AS(parse_config(R"({"seeds": []})", {}), ConfigError);
  CHECK_THROWS_AS(parse_config(std::nullopt, {{"seeds", "5,5"}}), ConfigError);
}

TEST_CASE("parse_config rejects unknown keys with a suggestion") {
  try {
    parse_config(std::nullopt, {{"domain.ctr_gapp", "0.1"}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("domain.ctr_gapp") != std::string::npos);
    CHECK(what.find("domain.ctr_gap") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("[1,2]", {}), ConfigError);      // not an object
  CHECK_THROWS_AS(parse_config("{nope", {}), ConfigError);      // not JSON
  CHECK_THROWS_AS(parse_config(std::nullopt, {{"eval_count", "\"many\""}}), ConfigError);
  CHECK_THROWS_AS(parse_config(std::nullopt, {{"eval_count", "0"}}), ConfigError);
}

TEST_CASE("parse_config validates loss weight targets") {
  CHECK_THROWS_AS(parse_config(std::nullopt, {{"student_loss.aux.discovery", "0.5"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(std::nullopt, {{"student_loss.primary.watchsomething", "0.5"}}),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(std::nullopt, {{"student_loss.primary.click", "-1"}}), ConfigError);
  CHECK(parse_config(std::nullopt, {{"student_loss.primary.click", "0.5"}})
            .student_loss.primary_weights.at("click") == 0.5);
}

TEST_CASE("whole-object architecture overrides are honored") {
  RankerConfig custom;
  custom.input_dim = 64;
  custom.trunk = {32};
  TaskHead click;
  click.name = "click";
  click.label_task = "click";
  TaskHead trail;
  trail.name = "trail";
  trail.kind = TaskKind::kRegression;
  trail.label_task = "trail";
  custom.heads = {click, trail};  // mapping still needs both teacher heads
  const std::string file =
      std::string(R"({"teacher_config": )") + config_to_json(custom).dump() + "}";
  const ExperimentConfig config = parse_config(file, {});
  CHECK(config.teacher_config.trunk == std::vector<std::size_t>{32});
  CHECK(config.teacher_config.heads.size() == 2);
  // the student preset is untouched
  CHECK(config.student_config.trunk == std::vector<std::size_t>{16});
}

TEST_CASE("config hash ignores storage knobs only") {
  ExperimentConfig a = default_experiment_config();
  ExperimentConfig b = a;
  b.out = "/somewhere/else";
  b.overwrite = true;
  CHECK(experiment_config_hash(a) == experiment_config_hash(b));
  ExperimentConfig c = a;
  c.domain.ctr_gap = 0.03;
  CHECK(experiment_config_hash(c) != experiment_config_hash(a));
  ExperimentConfig d = a;
  d.seeds = {1, 2, 3, 4, 5};
  CHECK(experiment_config_hash(d) != experiment_config_hash(a));
}

TEST_CASE("worker cap respects the environment override") {
  const char* saved = std::getenv("CROSSDISTILL_THREADS");
  const std::string saved_value = saved ? saved : "";

  ::setenv("CROSSDISTILL_THREADS", "3", 1);
  CHECK(detail::worker_cap(10) == 3);
  CHECK(detail::worker_cap(2) == 2);  // never more workers than jobs
  ::setenv("CROSSDISTILL_THREADS", "1", 1);
  CHECK(detail::worker_cap(10) == 1);
  ::setenv("CROSSDISTILL_THREADS", "0", 1);
  CHECK_THROWS_AS(detail::worker_cap(10), ConfigError);
  ::setenv("CROSSDISTILL_THREADS", "", 1);  // empty counts as unset
  const std::size_t cap = detail::worker_cap(10);
  CHECK(cap >= 1);
  CHECK(cap <= 4);

  if (saved) {
    ::setenv("CROSSDISTILL_THREADS", saved_value.c_str(), 1);
  } else {
    ::unsetenv("CROSSDISTILL_THREADS");
  }
}

TEST_CASE("improvement verdict needs wins, significance, and a positive median") {
  SeedComparison cmp;
  cmp.by_metric["click/all/auc"] = deltas_of(repeat(0.01, 9, -0.01, 1), 0.0107421875);
  CHECK(detail::improvement_verdict("x", cmp, "click/all/auc").pass);

  // 8/10 wins clears the win fraction but not the exact sign test
  cmp.by_metric["click/all/auc"] = deltas_of(repeat(0.01, 8, -0.01, 2), 0.0546875);
  CHECK_FALSE(detail::improvement_verdict("x", cmp, "click/all/auc").pass);

  // wins without a positive median cannot pass
  cmp.by_metric["click/all/auc"] = deltas_of(repeat(0.01, 9, -1.0, 1), 0.0107421875);
  auto pd = cmp.by_metric["click/all/auc"];
  pd.median_delta = -0.5;
  cmp.by_metric["click/all/auc"] = pd;
  CHECK_FALSE(detail::improvement_verdict("x", cmp, "click/all/auc").pass);

  CHECK_FALSE(detail::improvement_verdict("x", cmp, "absent/metric").pass);
}

TEST_CASE("degradation verdict counts strict losses") {
  SeedComparison cmp;
  cmp.by_metric["k"] = deltas_of(repeat(-0.01, 8, 0.01, 2), 0.0546875);
  CHECK(detail::degradation_verdict("x", cmp, "k").pass);
  cmp.by_metric["k"] = deltas_of(repeat(-0.01, 7, 0.01, 3), 0.171875);
  CHECK_FALSE(detail::degradation_verdict("x", cmp, "k").pass);
  // zero deltas are neither wins nor losses
  cmp.by_metric["k"] = deltas_of(repeat(-0.01, 7, 0.0, 3), std::nullopt);
  CHECK_FALSE(detail::degradation_verdict("x", cmp, "k").pass);
}

TEST_CASE("slice verdict compares per-seed slice and overall deltas") {
  SeedComparison cmp;
  cmp.by_metric["click/all/auc"] = deltas_of(std::vector<double>(10, 0.01), 0.0009765625);
  cmp.by_metric["click/new_item/auc"] = deltas_of(repeat(0.02, 7, 0.0, 3), 0.0546875);
  CHECK(detail::slice_outsized_verdict("x", cmp, "click/new_item/auc", "click/all/auc").pass);
  cmp.by_metric["click/new_item/auc"] = deltas_of(repeat(0.02, 6, 0.0, 4), 0.0546875);
  CHECK_FALSE(detail::slice_outsized_verdict("x", cmp, "click/new_item/auc", "click/all/auc").pass);
  CHECK_FALSE(detail::slice_outsized_verdict("x", cmp, "missing", "click/all/auc").pass);
}

TEST_CASE("noise ablation wants the gain to disappear") {
  SeedComparison cmp;
  cmp.by_metric["k"] = deltas_of(repeat(0.001, 5, -0.001, 5), 0.623046875);
  CHECK(detail::no_gain_verdict("x", cmp, "k").pass);
  cmp.by_metric["k"] = deltas_of(std::vector<double>(10, 0.0), std::nullopt);
  CHECK(detail::no_gain_verdict("x", cmp, "k").pass);  // all ties: strongest no-gain
  cmp.by_metric["k"] = deltas_of(repeat(0.01, 9, -0.01, 1), 0.0107421875);
  CHECK_FALSE(detail::no_gain_verdict("x", cmp, "k").pass);
}

TEST_CASE("each preset asserts its own clauses") {
  FindingReport report;
  report.config = default_experiment_config();
  const auto clauses = [&] {
    std::vector<std::string> out;
    for (const auto& v : detail::build_verdicts(report)) out.push_back(v.clause);
    return out;
  };
  CHECK(clauses() == std::vector<std::string>{
                         "teacher-ctr-below-control", "distilled-ctr-above-control",
                         "teacher-trail-below-control", "distilled-trail-above-control",
                         "nondistilled-discovery-gain", "new-item-slice-outsized"});
  report.config.preset = "radio";
  CHECK(clauses() == std::vector<std::string>{"radio-engagement-gain"});
  report.config.preset = "noise-ablation";
  CHECK(clauses() == std::vector<std::string>{"no-significant-ctr-gain"});
  report.config.preset = "new-release";
  CHECK(clauses() == std::vector<std::string>{"new-item-slice-outsized"});
  report.config.preset = "custom";
  CHECK(clauses().empty());
}

TEST_CASE("experiments run, persist, and reload without drift") {
  const fs::path out = fresh_dir("crossdistill_test_experiment");
  const std::vector<std::pair<std::string, std::string>> flags = {
      {"preset", "homepage"},          {"domain.feature_count", "8"},
      {"domain.source_count", "300"},  {"domain.target_count", "100"},
      {"student_train.epochs", "3"},   {"eval_count", "400"},
      {"seeds", "1,2,3,4,5,6"},        {"out", out.string()},
  };
  const ExperimentConfig config = parse_config(std::nullopt, flags);
  const FindingReport report = run_experiment(config);

  CHECK(report.seeds_ok == std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6});
  CHECK(report.seed_failures.empty());
  CHECK(report.config_hash == experiment_config_hash(config));
  CHECK(report.verdicts.size() == 6);
  CHECK_FALSE(report.comparison.by_metric.empty());
  CHECK_FALSE(report.teacher_vs_control.by_metric.empty());

  const fs::path exp_dir = out / report.config_hash;
  CHECK(fs::exists(exp_dir / "config.json"));
  for (int seed = 1; seed <= 6; ++seed) {
    CHECK(fs::exists(exp_dir / ("seed-" + std::to_string(seed)) / "metrics.csv"));
  }

  // the renderer names every verdict
  const std::string rendered = render_finding_report(report);
  CHECK(rendered.find("experiment: preset homepage") != std::string::npos);
  for (const FindingVerdict& v : report.verdicts) {
    CHECK(rendered.find(v.clause) != std::string::npos);
  }

  // emit writes the aggregation artifacts
  const fs::path report_dir = fresh_dir("crossdistill_test_report");
  emit_report(report, report_dir);
  CHECK(read_text_file(report_dir / "report.csv") == metrics_to_csv(report.rows));
  CHECK(read_text_file(report_dir / "report.txt") == rendered);

  // reload reproduces the aggregation from persisted per-seed files
  const FindingReport loaded = load_finding_report(exp_dir);
  CHECK(loaded.config_hash == report.config_hash);
  CHECK(loaded.rows == report.rows);
  REQUIRE(loaded.verdicts.size() == report.verdicts.size());
  for (std::size_t i = 0; i < loaded.verdicts.size(); ++i) {
    CHECK(loaded.verdicts[i].clause == report.verdicts[i].clause);
    CHECK(loaded.verdicts[i].pass == report.verdicts[i].pass);
    CHECK(loaded.verdicts[i].detail == report.verdicts[i].detail);
  }
  for (const auto& [key, pd] : report.comparison.by_metric) {
    const auto it = loaded.comparison.by_metric.find(key);
    REQUIRE(it != loaded.comparison.by_metric.end());
    CHECK(it->second.per_seed == pd.per_seed);
    CHECK(it->second.p_value == pd.p_value);
  }

  // a rerun with overwrite reproduces the metrics byte for byte
  const std::string csv_before = read_text_file(exp_dir / "seed-3" / "metrics.csv");
  ExperimentConfig again = config;
  again.overwrite = true;
  const FindingReport rerun = run_experiment(again);
  CHECK(read_text_file(exp_dir / "seed-3" / "metrics.csv") == csv_before);
  CHECK(metrics_to_csv(rerun.rows) == metrics_to_csv(report.rows));

  // one missing seed is tolerated and recorded
  fs::remove(exp_dir / "seed-3" / "metrics.csv");
  const FindingReport partial = load_finding_report(exp_dir);
  CHECK(partial.seeds_ok == std::vector<std::uint64_t>{1, 2, 4, 5, 6});
  REQUIRE(partial.seed_failures.size() == 1);
  CHECK(partial.seed_failures[0].first == 3);

  // more than 20% missing refuses to aggregate
  fs::remove(exp_dir / "seed-5" / "metrics.csv");
  CHECK_THROWS_AS(load_finding_report(exp_dir), PipelineError);

  fs::remove_all(out);
  fs::remove_all(report_dir);
}

TEST_CASE("an experiment whose seeds all fail refuses aggregation") {
  ExperimentConfig config = default_experiment_config();
  config.preset = "custom";
  config.domain = tiny_domain_spec();
  config.teacher_config = teacher_preset_config(config.domain.feature_count);
  // student expects a cw_aux slot that the homepage mapping never fills
  config.student_config = radio_student_config(config.domain.feature_count);
  config.mapping = homepage_mapping();
  config.student_loss = LossSpec{};
  config.teacher_train.epochs = 1;
  config.student_train.epochs = 1;
  config.seeds = {1, 2, 3, 4, 5};
  config.eval_count = 40;

  try {
    run_experiment(config);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    const std::string what = e.what();
    CHECK(what.find("seed 1") != std::string::npos);
    CHECK(what.find("cw_aux") != std::string::npos);
  }
}
