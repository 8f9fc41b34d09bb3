#include <bit>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "crossdistill/distill.hpp"
#include "crossdistill/domaingen.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/metrics.hpp"
#include "crossdistill/ranker.hpp"

#include "support.hpp"

using namespace crossdistill;
namespace fs = std::filesystem;
using testsupport::tiny_domain_spec;

namespace {

// Teacher with click + trail heads over f features, weights deterministic.
RankerModel toy_teacher(std::size_t f) {
  RankerConfig config;
  config.input_dim = f;
  config.init_seed = 17;
  TaskHead click;
  click.name = "click";
  click.label_task = "click";
  TaskHead trail;
  trail.name = "trail";
  trail.kind = TaskKind::kRegression;
  trail.label_task = "trail";
  config.heads = {click, trail};
  return init_model(config);
}

// Student with an aux click head, a plain discovery head, and a distill-only
// trail head, so derive_control_config has one of each case to handle.
RankerConfig toy_student_config(std::size_t f) {
  RankerConfig config;
  config.input_dim = f;
  config.trunk = {6};
  config.init_seed = 23;
  TaskHead click;
  click.name = "click";
  click.label_task = "click";
  click.tower = {4};
  click.aux_distill = true;
  click.distill_slot = "ctr_aux";
  TaskHead disc;
  disc.name = "discovery";
  disc.label_task = "discovery";
  TaskHead shadow;
  shadow.name = "trail_shadow";
  shadow.kind = TaskKind::kRegression;
  shadow.distill_slot = "trail_aux";
  shadow.serving = false;
  config.heads = {click, disc, shadow};
  return config;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("task mappings are validated against the teacher") {
  const RankerModel teacher = toy_teacher(4);
  CHECK_NOTHROW(validate_mapping(homepage_mapping(), &teacher.config));
  CHECK_NOTHROW(validate_mapping(radio_mapping(), nullptr));

  TaskMapping empty;
  CHECK_THROWS_AS(validate_mapping(empty, &teacher.config), ConfigError);

  TaskMapping dup_head{{{"click", "a"}, {"click", "b"}}};
  CHECK_THROWS_AS(validate_mapping(dup_head, &teacher.config), ConfigError);

  TaskMapping dup_slot{{{"click", "a"}, {"trail", "a"}}};
  CHECK_THROWS_AS(validate_mapping(dup_slot, &teacher.config), ConfigError);

  TaskMapping unknown_head{{{"watch_time", "a"}}};
  CHECK_THROWS_AS(validate_mapping(unknown_head, &teacher.config), ConfigError);
  // without a teacher the head must still be a real task name
  CHECK_THROWS_AS(validate_mapping(unknown_head, nullptr), ConfigError);
  TaskMapping real_task{{{"continue_watch", "a"}}};
  CHECK_NOTHROW(validate_mapping(real_task, nullptr));
}

TEST_CASE("teacher training refuses masked source data") {
  DomainSpec spec = tiny_domain_spec();
  const GroundTruth gt = make_ground_truth(spec);
  const Dataset source = sample_domain(gt, Domain::kSource, 30, 3);
  const Dataset target = sample_domain(gt, Domain::kTarget, 30, 4);

  RankerModel teacher = toy_teacher(spec.feature_count);
  TrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 16;
  CHECK_THROWS_AS(train_teacher(teacher, target, LossSpec{}, opts), DataError);
  CHECK_NOTHROW(train_teacher(teacher, source, LossSpec{}, opts));
}

TEST_CASE("a briefly trained teacher ranks held-out source data") {
  DomainSpec spec = tiny_domain_spec();
  spec.feature_count = 8;
  spec.source_count = 2000;
  const GroundTruth gt = make_ground_truth(spec);
  const Dataset train_set = sample_domain(gt, Domain::kSource, 2000, 31);
  const Dataset held_out = sample_domain(gt, Domain::kSource, 1500, 32);

  RankerConfig tc;
  tc.input_dim = 8;
  tc.trunk = {16};
  tc.init_seed = 9;
  TaskHead click;
  click.name = "click";
  click.label_task = "click";
  tc.heads = {click};
  RankerModel teacher = init_model(tc);

  TrainOptions opts;
  opts.epochs = 4;
  opts.batch_size = 64;
  opts.adam.lr = 0.005;
  train_teacher(teacher, train_set, LossSpec{}, opts);

  const ScoreTable table = predict(teacher, held_out);
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = 0; i < held_out.examples.size(); ++i) {
    scores.push_back(table.rows[i].serving.at("click"));
    labels.push_back(held_out.examples[i].click);
  }
  CHECK(auc(scores, labels) > 0.70);
}

TEST_CASE("augment fills slots with the teacher's mapped outputs") {
  DomainSpec spec = tiny_domain_spec();
  const GroundTruth gt = make_ground_truth(spec);
  const Dataset target = sample_domain(gt, Domain::kTarget, 25, 5);
  const RankerModel zero = zero_like(toy_teacher(spec.feature_count));

  const Dataset aug = augment(target, zero, homepage_mapping(), false, "2024-06-01T00:00:00Z");
  REQUIRE(aug.schema.teacher_slots == std::vector<std::string>{"ctr_aux", "trail_aux"});
  REQUIRE(aug.examples.size() == target.examples.size());
  for (std::size_t i = 0; i < aug.examples.size(); ++i) {
    const Example& ex = aug.examples[i];
    REQUIRE(ex.teacher.size() == 2);
    CHECK(*ex.teacher[0] == 0.5);  // sigmoid(0) from the zeroed click head
    CHECK(*ex.teacher[1] == 0.0);  // zeroed regression head
    // rows untouched otherwise; compare bit patterns since masked slots are NaN
    REQUIRE(ex.features.size() == target.examples[i].features.size());
    for (std::size_t k = 0; k < ex.features.size(); ++k) {
      CHECK(std::bit_cast<std::uint64_t>(ex.features[k]) ==
            std::bit_cast<std::uint64_t>(target.examples[i].features[k]));
    }
    CHECK(ex.click == target.examples[i].click);
  }
  REQUIRE(aug.provenance.has_value());
  CHECK(aug.provenance->teacher_fingerprint == checkpoint_fingerprint(zero));
  CHECK(aug.provenance->mapping == homepage_mapping().pairs);
  CHECK(aug.provenance->created_at == "2024-06-01T00:00:00Z");
  CHECK(aug.fingerprint == content_fingerprint(aug));
  CHECK(aug.fingerprint != target.fingerprint);
}

TEST_CASE("augment hand case on a linear teacher") {
  Dataset target;
  target.schema.feature_count = 2;
  target.schema.feature_names = {"f0", "f1"};
  target.schema.availability_source.assign(2, 1);
  target.schema.availability_target.assign(2, 1);
  target.domain = Domain::kTarget;
  Example ex;
  ex.domain = Domain::kTarget;
  ex.mask = {1, 1};
  ex.features = {2.0, 1.0};
  target.examples = {ex};
  target.fingerprint = content_fingerprint(target);

  RankerConfig tc;
  tc.input_dim = 2;
  TaskHead click;
  click.name = "click";
  click.label_task = "click";
  tc.heads = {click};
  RankerModel teacher = init_model(tc);
  teacher.heads[0].out_primary.weight.data = {0.5, -1.0};
  teacher.heads[0].out_primary.bias = {0.25};

  TaskMapping mapping{{{"click", "ctr_aux"}}};
  const Dataset aug = augment(target, teacher, mapping);
  CHECK(*aug.examples[0].teacher[0] == sigmoid(0.25));

  // extreme logits stay strictly inside the open unit interval
  teacher.heads[0].out_primary.bias = {5000.0};
  const Dataset hot = augment(target, teacher, mapping);
  CHECK(*hot.examples[0].teacher[0] < 1.0);
  teacher.heads[0].out_primary.bias = {-5000.0};
  const Dataset cold = augment(target, teacher, mapping);
  CHECK(*cold.examples[0].teacher[0] > 0.0);
}

TEST_CASE("augment is idempotent only with overwrite") {
  DomainSpec spec = tiny_domain_spec();
  const GroundTruth gt = make_ground_truth(spec);
  const Dataset target = sample_domain(gt, Domain::kTarget, 20, 6);
  const RankerModel teacher = toy_teacher(spec.feature_count);

  const Dataset once = augment(target, teacher, homepage_mapping());
  CHECK_THROWS_AS(augment(once, teacher, homepage_mapping()), ConflictError);
  const Dataset twice = augment(once, teacher, homepage_mapping(), true);
  CHECK(serialize_dataset(twice) == serialize_dataset(once));
}

TEST_CASE("noise labels are deterministic and carry no signal") {
  DomainSpec spec = tiny_domain_spec();
  spec.feature_count = 8;
  const GroundTruth gt = make_ground_truth(spec);
  const Dataset big = sample_domain(gt, Domain::kTarget, 50000, 8);

  const Dataset a = noise_teacher(big, homepage_mapping(), 99);
  const Dataset b = noise_teacher(big, homepage_mapping(), 99);
  CHECK(a.fingerprint == b.fingerprint);
  const Dataset c = noise_teacher(big, homepage_mapping(), 100);
  CHECK(c.fingerprint != a.fingerprint);
  REQUIRE(a.provenance.has_value());
  CHECK(a.provenance->teacher_fingerprint == "noise:" + to_hex16(99));

  // binary slot ~ Uniform(0,1); regression slot matches the trail moments
  double mean = 0.0, var = 0.0, n = 0.0;
  double tmean = 0.0, tvar = 0.0, tn = 0.0;
  std::vector<double> trail_labels;
  for (const Example& ex : a.examples) {
    const double u = *ex.teacher[0];
    CHECK(u > 0.0);
    CHECK(u < 1.0);
    mean += u;
    n += 1.0;
    tmean += *ex.teacher[1];
    tn += 1.0;
    if (ex.trail) trail_labels.push_back(*ex.trail);
  }
  mean /= n;
  tmean /= tn;
  for (const Example& ex : a.examples) {
    var += (*ex.teacher[0] - mean) * (*ex.teacher[0] - mean);
    tvar += (*ex.teacher[1] - tmean) * (*ex.teacher[1] - tmean);
  }
  var /= n;
  tvar /= tn;
  CHECK(std::abs(mean - 0.5) < 0.01);
  CHECK(std::abs(std::sqrt(var) - std::sqrt(1.0 / 12.0)) < 0.01);

  double lmean = 0.0, lvar = 0.0;
  for (double v : trail_labels) lmean += v;
  lmean /= static_cast<double>(trail_labels.size());
  for (double v : trail_labels) lvar += (v - lmean) * (v - lmean);
  lvar /= static_cast<double>(trail_labels.size());
  CHECK(std::abs(tmean - lmean) < 0.05 * std::max(1.0, std::abs(lmean)));
  CHECK(std::abs(std::sqrt(tvar) - std::sqrt(lvar)) < 0.05 * std::sqrt(lvar));
}

TEST_CASE("noise labels need enough trail rows for moment matching") {
  Dataset tiny;
  tiny.schema.feature_count = 1;
  tiny.schema.feature_names = {"f0"};
  tiny.schema.availability_source = {1};
  tiny.schema.availability_target = {1};
  Example ex;
  ex.mask = {1};
  ex.features = {0.0};
  tiny.examples = {ex, ex, ex};  // no clicks, so no trail labels at all
  CHECK_THROWS_AS(noise_teacher(tiny, homepage_mapping(), 1), DataError);
  // click-only mapping has no regression slot, so it does not need trail rows
  CHECK_NOTHROW(noise_teacher(tiny, TaskMapping{{{"click", "ctr_aux"}}}, 1));
}

TEST_CASE("control config strips every distillation attachment") {
  const RankerConfig distilled = toy_student_config(8);
  const RankerConfig control = derive_control_config(distilled);

  REQUIRE(control.heads.size() == 2);  // distill-only head dropped
  CHECK(control.heads[0].name == "click");
  CHECK_FALSE(control.heads[0].aux_distill);
  CHECK(control.heads[0].distill_slot.empty());
  CHECK(control.heads[1].name == "discovery");
  CHECK(control.trunk == distilled.trunk);
  CHECK(control.init_seed == distilled.init_seed);
  CHECK(count_parameters(control) < count_parameters(distilled));

  // shared tensor paths receive identical init draws
  const RankerModel dm = init_model(distilled);
  const RankerModel cm = init_model(control);
  CHECK(cm.trunk[0].weight.data == dm.trunk[0].weight.data);
  CHECK(cm.heads[0].tower[0].weight.data == dm.heads[0].tower[0].weight.data);
  CHECK(cm.heads[0].out_primary.weight.data == dm.heads[0].out_primary.weight.data);
  CHECK(cm.heads[1].out_primary.weight.data == dm.heads[1].out_primary.weight.data);
  CHECK_FALSE(cm.heads[0].out_aux.has_value());
}

TEST_CASE("pipeline runs end to end and persists a reproducible bundle") {
  PipelineConfig pc;
  pc.domain = tiny_domain_spec();
  pc.domain.feature_count = 8;
  pc.domain.source_count = 400;
  pc.domain.target_count = 120;
  pc.teacher_config = toy_teacher(8).config;
  pc.teacher_config.trunk = {12};
  pc.student_config = toy_student_config(8);
  pc.mapping = TaskMapping{{{"click", "ctr_aux"}, {"trail", "trail_aux"}}};
  pc.teacher_train.epochs = 1;
  pc.teacher_train.batch_size = 32;
  pc.student_train.epochs = 2;
  pc.student_train.batch_size = 32;
  pc.eval_count = 300;
  pc.seed_id = 7;
  pc.run_dir = fresh_dir("crossdistill_test_pipeline");

  const PipelineResult result = run_pipeline(pc);

  CHECK(result.gt_fingerprint == make_ground_truth(pc.domain).fingerprint);
  REQUIRE(result.teacher != nullptr);
  CHECK_FALSE(result.teacher_report.rows.empty());
  CHECK_FALSE(result.control_report.rows.empty());
  CHECK_FALSE(result.distilled_report.rows.empty());
  CHECK(result.control_report.model_id == "control");
  CHECK(result.distilled_report.model_id == "distilled");
  CHECK(result.control_report.slice_counts.at("all") == 300);

  // students see identical bytes in identical order
  CHECK(result.control_trace.batch_fingerprint == result.distilled_trace.batch_fingerprint);

  // non-serving heads stay out of serving reports
  for (const MetricRow& row : result.distilled_report.rows) CHECK(row.head != "trail_shadow");

  const fs::path dir = pc.run_dir;
  for (const char* name : {"config.json", "teacher.ckpt", "augmented.ds", "student_control.ckpt",
                           "student_distilled.ckpt", "metrics.csv", "metrics.txt"}) {
    INFO(name);
    CHECK(fs::exists(dir / name));
  }
  const Dataset aug = read_dataset(dir / "augmented.ds");
  CHECK(aug.fingerprint == result.augmented_fingerprint);
  CHECK(checkpoint_fingerprint(read_checkpoint(dir / "teacher.ckpt")) ==
        checkpoint_fingerprint(*result.teacher));

  // occupied directory refused, overwrite reproduces the exact bytes
  CHECK_THROWS_AS(run_pipeline(pc), ConflictError);
  const std::string before = read_text_file(dir / "metrics.csv");
  const std::string ckpt_before = read_text_file(dir / "student_distilled.ckpt");
  pc.overwrite = true;
  const PipelineResult again = run_pipeline(pc);
  CHECK(read_text_file(dir / "metrics.csv") == before);
  CHECK(read_text_file(dir / "student_distilled.ckpt") == ckpt_before);
  CHECK(again.augmented_fingerprint == result.augmented_fingerprint);
  fs::remove_all(dir);
}

TEST_CASE("pipeline reuses cached teachers across runs in one world") {
  TeacherCache cache;
  PipelineConfig pc;
  pc.domain = tiny_domain_spec();
  pc.domain.feature_count = 8;
  pc.domain.source_count = 200;
  pc.domain.target_count = 60;
  pc.teacher_config = toy_teacher(8).config;
  pc.student_config = toy_student_config(8);
  pc.mapping = TaskMapping{{{"click", "ctr_aux"}, {"trail", "trail_aux"}}};
  pc.teacher_train.epochs = 1;
  pc.student_train.epochs = 1;
  pc.eval_count = 50;
  pc.teacher_cache = &cache;

  const PipelineResult first = run_pipeline(pc);
  PipelineConfig other = pc;
  other.student_train.epochs = 2;  // student knobs do not affect the teacher key
  const PipelineResult second = run_pipeline(other);
  CHECK(first.teacher.get() == second.teacher.get());
  CHECK(cache.models.size() == 1);

  PipelineConfig new_world = pc;
  new_world.domain.seed = pc.domain.seed + 1;
  const PipelineResult third = run_pipeline(new_world);
  CHECK(third.teacher.get() != first.teacher.get());
  CHECK(cache.models.size() == 2);
}

TEST_CASE("noise mode replaces the teacher entirely") {
  PipelineConfig pc;
  pc.domain = tiny_domain_spec();
  pc.domain.feature_count = 8;
  pc.domain.source_count = 200;
  pc.domain.target_count = 80;
  pc.teacher_config = toy_teacher(8).config;
  pc.student_config = toy_student_config(8);
  pc.mapping = TaskMapping{{{"click", "ctr_aux"}, {"trail", "trail_aux"}}};
  pc.student_train.epochs = 1;
  pc.eval_count = 60;
  pc.noise_labels = true;
  pc.evaluate_teacher = false;
  pc.run_dir = fresh_dir("crossdistill_test_noise");

  const PipelineResult result = run_pipeline(pc);
  CHECK(result.teacher == nullptr);
  CHECK(result.teacher_report.rows.empty());
  CHECK_FALSE(fs::exists(pc.run_dir / "teacher.ckpt"));
  CHECK(fs::exists(pc.run_dir / "augmented.ds"));
  const Dataset aug = read_dataset(pc.run_dir / "augmented.ds");
  REQUIRE(aug.provenance.has_value());
  CHECK(aug.provenance->teacher_fingerprint.rfind("noise:", 0) == 0);
  fs::remove_all(pc.run_dir);
}

TEST_CASE("aux weights of zero reproduce the control student exactly") {
  DomainSpec spec = tiny_domain_spec();
  spec.feature_count = 8;
  const GroundTruth gt = make_ground_truth(spec);
  const Dataset target = sample_domain(gt, Domain::kTarget, 60, 12);
  const RankerModel teacher = toy_teacher(8);
  const Dataset augmented = augment(target, teacher, homepage_mapping());

  RankerConfig distilled_cfg;
  distilled_cfg.input_dim = 8;
  distilled_cfg.trunk = {6};
  distilled_cfg.init_seed = 31;
  TaskHead click;
  click.name = "click";
  click.label_task = "click";
  click.tower = {3};
  click.aux_distill = true;
  click.distill_slot = "ctr_aux";
  distilled_cfg.heads = {click};
  const RankerConfig control_cfg = derive_control_config(distilled_cfg);

  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 16;
  opts.seed = 5;

  // aux weight 0: the aux unit still exists but contributes nothing, so every
  // shared tensor must march in lockstep with the control run
  LossSpec silent;
  silent.aux_weights = {{"click", 0.0}};
  RankerModel muted = init_model(distilled_cfg);
  train(muted, augmented, silent, opts);

  RankerModel control = init_model(control_cfg);
  train(control, augmented, silent, opts);

  std::map<std::string, std::vector<double>> control_tensors;
  for_each_tensor(control, [&](const std::string& path, std::vector<double>& t) {
    control_tensors[path] = t;
  });
  std::size_t compared = 0;
  for_each_tensor(muted, [&](const std::string& path, std::vector<double>& t) {
    const auto it = control_tensors.find(path);
    if (it == control_tensors.end()) return;  // the aux unit itself
    INFO(path);
    CHECK(it->second == t);
    ++compared;
  });
  CHECK(compared == control_tensors.size());

  // with a live aux weight the shared tensors diverge
  LossSpec live;
  live.aux_weights = {{"click", 0.4}};
  RankerModel distilled = init_model(distilled_cfg);
  train(distilled, augmented, live, opts);
  CHECK(distilled.trunk[0].weight.data != control.trunk[0].weight.data);
}
