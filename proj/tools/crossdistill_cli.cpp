#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crossdistill/distill.hpp"
#include "crossdistill/experiment.hpp"

namespace fs = std::filesystem;
using namespace crossdistill;

namespace {

std::string timestamp_utc() {
  char buf[32];
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void refuse_occupied(const fs::path& path, bool overwrite) {
  if (!overwrite && fs::exists(path)) {
    throw ConflictError("output '" + path.string() + "' exists; pass --overwrite to replace it");
  }
}

DomainSpec load_spec(const std::string& config_path) {
  if (config_path.empty()) return DomainSpec{};
  return spec_from_json(nlohmann::json::parse(read_text_file(config_path)));
}

std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& defines) {
  std::vector<std::pair<std::string, std::string>> flags;
  for (const std::string& d : defines) {
    const auto eq = d.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("expected key=value in --set, got '" + d + "'");
    }
    flags.emplace_back(d.substr(0, eq), d.substr(eq + 1));
  }
  return flags;
}

TaskMapping mapping_by_name(const std::string& name) {
  if (name == "homepage") return homepage_mapping();
  if (name == "radio") return radio_mapping();
  throw ConfigError("unknown mapping '" + name + "'; valid mappings: homepage, radio");
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, std::size_t eval_count,
            bool overwrite) {
  const DomainSpec spec = load_spec(config_path);
  validate(spec);
  const GroundTruth gt = make_ground_truth(spec);
  const fs::path dir = out_dir;
  fs::create_directories(dir);
  for (const char* name : {"source.ds", "target.ds", "eval.ds"}) {
    refuse_occupied(dir / name, overwrite);
  }
  const Dataset source =
      sample_domain(gt, Domain::kSource, spec.source_count, derive_seed(spec.seed, "data.source"));
  write_dataset(source, dir / "source.ds");
  const Dataset target =
      sample_domain(gt, Domain::kTarget, spec.target_count, derive_seed(spec.seed, "data.target"));
  write_dataset(target, dir / "target.ds");
  if (eval_count > 0) {
    const Dataset eval_set =
        sample_domain(gt, Domain::kTarget, eval_count, derive_seed(spec.seed, "data.eval"));
    write_dataset(eval_set, dir / "eval.ds");
  }
  write_text_file(dir / "spec.json", spec_to_json(spec).dump(2) + "\n");
  std::printf("world %s: source %zu rows, target %zu rows%s -> %s\n", gt.fingerprint.c_str(),
              spec.source_count, spec.target_count,
              eval_count > 0 ? (", eval " + std::to_string(eval_count) + " rows").c_str() : "",
              dir.string().c_str());
  return 0;
}

int cmd_train_teacher(const std::string& data_path, const std::string& config_path,
                      const std::string& out_path, std::size_t epochs, std::size_t batch_size,
                      double lr, std::uint64_t seed, bool overwrite) {
  refuse_occupied(out_path, overwrite);
  const Dataset source = read_dataset(data_path);
  RankerConfig config = config_path.empty()
                            ? teacher_preset_config(source.schema.feature_count)
                            : config_from_json(nlohmann::json::parse(read_text_file(config_path)));
  config.init_seed = derive_seed(seed, "init.teacher");

  // hold out a slice for the source-fit check before training
  const auto [train_set, holdout] = split(source, 0.9, derive_seed(seed, "holdout"));
  RankerModel teacher = init_model(config);
  TrainOptions opts;
  opts.epochs = epochs;
  opts.batch_size = batch_size;
  opts.adam.lr = lr;
  opts.seed = derive_seed(seed, "train.teacher");
  const TrainTrace trace = train_teacher(teacher, train_set, LossSpec{}, opts);

  const ScoreTable scores = predict(teacher, holdout);
  std::vector<double> click_scores;
  std::vector<int> click_labels;
  for (std::size_t i = 0; i < holdout.examples.size(); ++i) {
    click_scores.push_back(scores.rows[i].serving.at("click"));
    click_labels.push_back(holdout.examples[i].click);
  }
  const double holdout_auc = auc(click_scores, click_labels);
  write_checkpoint(teacher, out_path);
  std::printf("teacher %s: final epoch loss %s, held-out source click AUC %.4f -> %s\n",
              checkpoint_fingerprint(teacher).c_str(),
              format_double(trace.epoch_loss.back()).c_str(), holdout_auc, out_path.c_str());
  if (holdout_auc <= 0.70) {
    std::fprintf(stderr, "warning: held-out source click AUC %.4f is at or below 0.70\n",
                 holdout_auc);
  }
  return 0;
}

int cmd_augment(const std::string& data_path, const std::string& teacher_path,
                const std::string& mapping_name, const std::string& out_path, bool noise,
                std::uint64_t seed, const std::string& out_dir_unused, bool overwrite) {
  (void)out_dir_unused;
  refuse_occupied(out_path, overwrite);
  const Dataset target = read_dataset(data_path);
  const TaskMapping mapping = mapping_by_name(mapping_name);
  Dataset augmented;
  if (noise) {
    validate_mapping(mapping, nullptr);
    augmented = noise_teacher(target, mapping, seed, overwrite, timestamp_utc());
  } else {
    if (teacher_path.empty()) throw ConfigError("augment needs --teacher (or --noise)");
    const RankerModel teacher = read_checkpoint(teacher_path);
    validate_mapping(mapping, &teacher.config);
    augmented = augment(target, teacher, mapping, overwrite, timestamp_utc());
  }
  write_dataset(augmented, out_path);
  std::printf("augmented %zu rows with slots [%s], fingerprint %s -> %s\n",
              augmented.examples.size(), join(augmented.schema.teacher_slots, ',').c_str(),
              augmented.fingerprint.c_str(), out_path.c_str());
  return 0;
}

int cmd_train_student(const std::string& data_path, const std::string& preset,
                      const std::string& config_path, bool control, const std::string& out_path,
                      std::size_t epochs, std::size_t batch_size, double lr, std::uint64_t seed,
                      bool overwrite) {
  refuse_occupied(out_path, overwrite);
  const Dataset data = read_dataset(data_path);
  RankerConfig config;
  if (!config_path.empty()) {
    config = config_from_json(nlohmann::json::parse(read_text_file(config_path)));
  } else if (preset == "homepage") {
    config = homepage_student_config(data.schema.feature_count);
  } else if (preset == "radio") {
    config = radio_student_config(data.schema.feature_count);
  } else {
    throw ConfigError("unknown student preset '" + preset + "'; valid presets: homepage, radio");
  }
  if (control) config = derive_control_config(config);
  config.init_seed = derive_seed(seed, "init.student");

  RankerModel student = init_model(config);
  TrainOptions opts;
  opts.epochs = epochs;
  opts.batch_size = batch_size;
  opts.adam.lr = lr;
  opts.seed = derive_seed(seed, "train.student");
  const TrainTrace trace = train(student, data, LossSpec{}, opts);
  write_checkpoint(student, out_path);
  std::printf("%s student %s: %zu params, final epoch loss %s, batches %s -> %s\n",
              control ? "control" : "distilled", checkpoint_fingerprint(student).c_str(),
              count_parameters(student), format_double(trace.epoch_loss.back()).c_str(),
              to_hex16(trace.batch_fingerprint).c_str(), out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& model_id, std::uint64_t seed_id, const std::string& out_path,
             bool overwrite) {
  const RankerModel model = read_checkpoint(model_path);
  const Dataset data = read_dataset(data_path);
  MetricsReport report;
  report.model_id = model_id;
  report.seed = seed_id;
  report.generator_fingerprint = data.schema.generator_fingerprint;
  const ScoreTable table = predict(model, data);
  for (const TaskHead& head : model.config.heads) {
    if (!head.serving) continue;
    slice_report(report, table, data, head);
  }
  const std::string csv = metrics_to_csv(report.rows);
  if (!out_path.empty()) {
    refuse_occupied(out_path, overwrite);
    write_text_file(out_path, csv);
  }
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_experiment(const std::string& config_path, const std::string& preset,
                   const std::string& seeds_csv, const std::string& out_dir, bool overwrite,
                   const std::vector<std::string>& defines) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!preset.empty()) flags.emplace_back("preset", preset);
  if (!seeds_csv.empty()) flags.emplace_back("seeds", seeds_csv);
  if (!out_dir.empty()) flags.emplace_back("out", out_dir);
  if (overwrite) flags.emplace_back("overwrite", "true");
  for (auto& kv : parse_overrides(defines)) flags.push_back(std::move(kv));

  std::optional<std::string> config_text;
  if (!config_path.empty()) config_text = read_text_file(config_path);
  const ExperimentConfig config = parse_config(config_text, flags);
  if (config.out.empty()) throw ConfigError("experiment needs --out (or out in the config file)");

  const FindingReport report = run_experiment(config);
  const int code = emit_report(report, config.out / report.config_hash);
  std::fputs(render_finding_report(report).c_str(), stdout);
  std::printf("report written to %s\n", (config.out / report.config_hash).string().c_str());
  return code;
}

int cmd_report(const std::string& dir) {
  const FindingReport report = load_finding_report(dir);
  const int code = emit_report(report, dir);
  std::fputs(render_finding_report(report).c_str(), stdout);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-domain distillation testbed"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, teacher_path, model_path, preset, mapping_name,
      seeds_csv, model_id = "model";
  std::vector<std::string> defines;
  std::size_t epochs = 1, batch_size = 256, eval_count = 100000;
  double lr = 1e-3;
  std::uint64_t seed = 1, seed_id = 0;
  bool overwrite = false, control = false, noise = false;

  CLI::App* gen = app.add_subcommand("gen", "generate source/target/eval datasets for one world");
  gen->add_option("--config", config_path, "domain spec JSON file");
  gen->add_option("--out", out_path, "output directory")->required();
  gen->add_option("--eval-count", eval_count, "eval rows (0 skips eval.ds)");
  gen->add_flag("--overwrite", overwrite, "replace existing outputs");

  CLI::App* tt = app.add_subcommand("train-teacher", "train the source-domain teacher");
  tt->add_option("--data", data_path, "source dataset")->required();
  tt->add_option("--config", config_path, "ranker config JSON file");
  tt->add_option("--out", out_path, "checkpoint path")->required();
  tt->add_option("--epochs", epochs, "training epochs");
  tt->add_option("--batch-size", batch_size, "minibatch size");
  tt->add_option("--lr", lr, "Adam learning rate");
  tt->add_option("--seed", seed, "base seed");
  tt->add_flag("--overwrite", overwrite, "replace existing outputs");

  CLI::App* aug = app.add_subcommand("augment", "attach teacher labels to a target dataset");
  aug->add_option("--data", data_path, "target dataset")->required();
  aug->add_option("--teacher", teacher_path, "teacher checkpoint");
  aug->add_option("--mapping", mapping_name, "task mapping: homepage or radio")->required();
  aug->add_option("--out", out_path, "output dataset path")->required();
  aug->add_flag("--noise", noise, "fill slots with matched noise instead of teacher labels");
  aug->add_option("--seed", seed, "noise seed");
  aug->add_flag("--overwrite", overwrite, "replace existing outputs");

  CLI::App* ts = app.add_subcommand("train-student", "train a student on an augmented dataset");
  ts->add_option("--data", data_path, "augmented target dataset")->required();
  ts->add_option("--preset", preset, "student architecture preset: homepage or radio")
      ->default_val("homepage");
  ts->add_option("--config", config_path, "ranker config JSON file (overrides --preset)");
  ts->add_flag("--control", control, "train the control variant (distillation removed)");
  ts->add_option("--out", out_path, "checkpoint path")->required();
  ts->add_option("--epochs", epochs, "training epochs")->default_val(120);
  ts->add_option("--batch-size", batch_size, "minibatch size")->default_val(64);
  ts->add_option("--lr", lr, "Adam learning rate");
  ts->add_option("--seed", seed, "base seed");
  ts->add_flag("--overwrite", overwrite, "replace existing outputs");

  CLI::App* ev = app.add_subcommand("eval", "slice metrics for a checkpoint on a dataset");
  ev->add_option("--model", model_path, "checkpoint path")->required();
  ev->add_option("--data", data_path, "eval dataset")->required();
  ev->add_option("--model-id", model_id, "model column value");
  ev->add_option("--seed-id", seed_id, "seed column value");
  ev->add_option("--out", out_path, "also write CSV here");
  ev->add_flag("--overwrite", overwrite, "replace existing outputs");

  CLI::App* ex = app.add_subcommand("experiment", "run a multi-seed experiment and verdicts");
  ex->add_option("--config", config_path, "experiment config JSON file");
  ex->add_option("--preset", preset, "homepage, radio, new-release, noise-ablation, custom");
  ex->add_option("--seeds", seeds_csv, "comma-separated seed list");
  ex->add_option("--out", out_path, "output directory");
  ex->add_option("--set", defines, "config override key=value (repeatable)");
  ex->add_flag("--overwrite", overwrite, "replace existing run directories");

  CLI::App* rep = app.add_subcommand("report", "re-aggregate a persisted experiment directory");
  rep->add_option("--dir", data_path, "experiment directory (<out>/<confighash>)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(config_path, out_path, eval_count, overwrite);
    if (tt->parsed()) {
      return cmd_train_teacher(data_path, config_path, out_path, epochs, batch_size, lr, seed,
                               overwrite);
    }
    if (aug->parsed()) {
      return cmd_augment(data_path, teacher_path, mapping_name, out_path, noise, seed, "",
                         overwrite);
    }
    if (ts->parsed()) {
      return cmd_train_student(data_path, preset, config_path, control, out_path, epochs,
                               batch_size, lr, seed, overwrite);
    }
    if (ev->parsed()) return cmd_eval(model_path, data_path, model_id, seed_id, out_path, overwrite);
    if (ex->parsed()) return cmd_experiment(config_path, preset, seeds_csv, out_path, overwrite, defines);
    if (rep->parsed()) return cmd_report(data_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
