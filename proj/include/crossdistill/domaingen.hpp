#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossdistill/dataset.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/ops.hpp"
#include "crossdistill/rng.hpp"
#include "crossdistill/textio.hpp"

namespace crossdistill {

// Knobs for the two-domain synthetic family. Every divergence between the
// domains is controlled here: feature loss, click-rate gap, sample asymmetry,
// weight-vector drift, and new-item frequency skew.
struct DomainSpec {
  std::size_t feature_count = 64;
  double missing_fraction = 0.40;
  double ctr_gap = 0.02;
  std::size_t source_count = 100000;
  std::size_t target_count = 1000;
  double shared_weight_mix = 0.7;  // alpha: weight put on the shared component
  double new_item_rate_source = 0.10;
  double new_item_rate_target = 0.01;
  double label_noise_sd = 0.5;
  std::uint64_t seed = 1;

  // Shape knobs with fixed defaults; presets leave these untouched.
  double base_click_rate = 0.10;   // analytic source-domain click rate
  double logit_scale = 3.5;        // sd of task logits under the feature law
  double task_affinity = 0.7;      // pairwise corr of any two shared components
  double cw_re_affinity = 0.85;    // corr of continue_watch/radio shared comps

  // New-item boost of the shared click direction, per domain. The boost fades
  // with domain maturity: the high-traffic source accumulates item-specific
  // signal within the new-item window, while the sparse target stays
  // taste-driven for the whole window.
  double new_item_effect_source = 0.5;
  double new_item_effect_target = 3.0;
};

inline void validate(const DomainSpec& spec) {
  if (spec.feature_count < 2) throw ConfigError("feature_count must be at least 2");
  if (spec.missing_fraction < 0.0 || spec.missing_fraction > 1.0) {
    throw ConfigError("missing_fraction must lie in [0,1]");
  }
  const auto masked =
      static_cast<std::size_t>(std::floor(spec.missing_fraction * static_cast<double>(spec.feature_count)));
  if (masked > spec.feature_count - 1) {
    throw ConfigError("missing_fraction would mask every feature including the new-item flag");
  }
  if (spec.source_count == 0 || spec.target_count == 0) {
    throw ConfigError("source_count and target_count must be positive");
  }
  if (spec.shared_weight_mix < 0.0 || spec.shared_weight_mix > 1.0) {
    throw ConfigError("shared_weight_mix must lie in [0,1]");
  }
  for (double rate : {spec.new_item_rate_source, spec.new_item_rate_target}) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("new-item rates must lie in [0,1]");
  }
  if (spec.label_noise_sd < 0.0) throw ConfigError("label_noise_sd must be nonnegative");
  if (spec.base_click_rate <= 0.0 || spec.base_click_rate >= 1.0) {
    throw ConfigError("base_click_rate must lie in (0,1)");
  }
  const double target_rate = spec.base_click_rate + spec.ctr_gap;
  if (target_rate <= 0.0 || target_rate >= 1.0) {
    throw ConfigError("ctr_gap pushes the target click rate outside (0,1)");
  }
  if (spec.logit_scale <= 0.0) throw ConfigError("logit_scale must be positive");
  if (spec.task_affinity < 0.0 || spec.task_affinity > 1.0) {
    throw ConfigError("task_affinity must lie in [0,1]");
  }
  if (spec.cw_re_affinity < spec.task_affinity || spec.cw_re_affinity > 1.0) {
    throw ConfigError("cw_re_affinity must lie in [task_affinity, 1]");
  }
  for (double effect : {spec.new_item_effect_source, spec.new_item_effect_target}) {
    if (effect < 0.0) throw ConfigError("new-item effects must be nonnegative");
  }
}

inline nlohmann::json spec_to_json(const DomainSpec& spec) {
  nlohmann::json j;
  j["feature_count"] = spec.feature_count;
  j["missing_fraction"] = spec.missing_fraction;
  j["ctr_gap"] = spec.ctr_gap;
  j["source_count"] = spec.source_count;
  j["target_count"] = spec.target_count;
  j["shared_weight_mix"] = spec.shared_weight_mix;
  j["new_item_rate_source"] = spec.new_item_rate_source;
  j["new_item_rate_target"] = spec.new_item_rate_target;
  j["label_noise_sd"] = spec.label_noise_sd;
  j["seed"] = spec.seed;
  j["base_click_rate"] = spec.base_click_rate;
  j["logit_scale"] = spec.logit_scale;
  j["task_affinity"] = spec.task_affinity;
  j["cw_re_affinity"] = spec.cw_re_affinity;
  j["new_item_effect_source"] = spec.new_item_effect_source;
  j["new_item_effect_target"] = spec.new_item_effect_target;
  return j;
}

inline DomainSpec spec_from_json(const nlohmann::json& j) {
  DomainSpec spec;
  spec.feature_count = j.at("feature_count").get<std::size_t>();
  spec.missing_fraction = j.at("missing_fraction").get<double>();
  spec.ctr_gap = j.at("ctr_gap").get<double>();
  spec.source_count = j.at("source_count").get<std::size_t>();
  spec.target_count = j.at("target_count").get<std::size_t>();
  spec.shared_weight_mix = j.at("shared_weight_mix").get<double>();
  spec.new_item_rate_source = j.at("new_item_rate_source").get<double>();
  spec.new_item_rate_target = j.at("new_item_rate_target").get<double>();
  spec.label_noise_sd = j.at("label_noise_sd").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.base_click_rate = j.at("base_click_rate").get<double>();
  spec.logit_scale = j.at("logit_scale").get<double>();
  spec.task_affinity = j.at("task_affinity").get<double>();
  spec.cw_re_affinity = j.at("cw_re_affinity").get<double>();
  spec.new_item_effect_source = j.at("new_item_effect_source").get<double>();
  spec.new_item_effect_target = j.at("new_item_effect_target").get<double>();
  return spec;
}

struct PerDomainWeights {
  std::vector<double> source;
  std::vector<double> target;

  const std::vector<double>& in(Domain d) const {
    return d == Domain::kSource ? source : target;
  }
};

// Frozen generative law: per-task per-domain weight vectors, click biases
// solved so the analytic click-rate gap equals spec.ctr_gap, the target
// feature-availability mask, and the new-item interaction vectors.
struct GroundTruth {
  DomainSpec spec;
  std::size_t new_item_index = 0;
  std::vector<std::uint8_t> target_observed;  // 1 = available in target domain
  std::map<std::string, PerDomainWeights> weights;
  PerDomainWeights new_item_interaction;  // added to the click logit when is_new
  double click_bias_source = 0.0;
  double click_bias_target = 0.0;
  std::string fingerprint;

  double click_bias(Domain d) const {
    return d == Domain::kSource ? click_bias_source : click_bias_target;
  }
};

namespace detail {

inline std::vector<double> draw_normals(Xoshiro256pp& rng, std::size_t n) {
  std::vector<double> out(n);
  for (double& v : out) v = rng.normal();
  return out;
}

// E[sigmoid(mu + sd*Z)] for Z ~ N(0,1), trapezoid on [-12, 12].
inline double expected_sigmoid(double mu, double sd) {
  constexpr int kSteps = 4096;
  constexpr double kHalfWidth = 12.0;
  const double dz = 2.0 * kHalfWidth / kSteps;
  double acc = 0.0;
  for (int i = 0; i <= kSteps; ++i) {
    const double z = -kHalfWidth + i * dz;
    const double density = std::exp(-0.5 * z * z);
    const double weight = (i == 0 || i == kSteps) ? 0.5 : 1.0;
    acc += weight * sigmoid(mu + sd * z) * density;
  }
  return acc * dz / std::sqrt(2.0 * std::acos(-1.0));
}

inline double norm(const std::vector<double>& v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

inline std::vector<double> add(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

// Analytic click rate for one domain: a two-component mixture over the
// new-item flag, each component a probit-style integral of the sigmoid.
inline double analytic_click_rate(const GroundTruth& gt, Domain d, double bias) {
  const auto& w = gt.weights.at("click").in(d);
  const auto& inter = gt.new_item_interaction.in(d);
  const double rate_new = d == Domain::kSource ? gt.spec.new_item_rate_source
                                               : gt.spec.new_item_rate_target;
  std::vector<double> w_cont(w.begin(), w.end());
  w_cont[gt.new_item_index] = 0.0;
  const double sd_old = norm(w_cont);
  const double sd_new = norm(add(w_cont, inter));
  const double mu_new = bias + w[gt.new_item_index];
  return (1.0 - rate_new) * expected_sigmoid(bias, sd_old) +
         rate_new * expected_sigmoid(mu_new, sd_new);
}

inline double solve_click_bias(const GroundTruth& gt, Domain d, double wanted_rate) {
  double lo = -80.0, hi = 80.0;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (analytic_click_rate(gt, d, mid) < wanted_rate) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Builds the frozen generative law for (spec, spec.seed).
//
// Weight construction: every task weight vector is
//   w_task,domain = alpha * shared_task + (1 - alpha) * domain_task
// where the shared components themselves mix a global latent (pairwise
// correlation task_affinity) and, for continue_watch/radio_engagement, an
// extra common latent lifting their pairwise correlation to cw_re_affinity.
// Vectors are scaled so the task logit sd under the feature law equals
// logit_scale regardless of alpha.
//
// New items: when the flag fires, the click logit gains an extra term along
// the shared component of the click weights. Domain-specific habits have not
// formed for a brand-new item, so its clicks are driven by domain-general
// taste; that makes new-item ranking lean hardest on exactly the structure a
// cross-domain teacher knows best. The amplitude is per-domain and fades with
// maturity: the busy source re-anchors new items to its own habits almost
// immediately, the sparse target does not.
inline GroundTruth make_ground_truth(const DomainSpec& spec) {
  validate(spec);
  GroundTruth gt;
  gt.spec = spec;
  const std::size_t f = spec.feature_count;
  gt.new_item_index = f - 1;

  const double alpha = spec.shared_weight_mix;
  const double mix_norm = std::sqrt(alpha * alpha + (1.0 - alpha) * (1.0 - alpha));
  const double scale = spec.logit_scale / std::sqrt(static_cast<double>(f) * mix_norm * mix_norm);

  Xoshiro256pp rng_common(derive_seed(spec.seed, "gt.common"));
  const auto common = detail::draw_normals(rng_common, f);
  Xoshiro256pp rng_pair(derive_seed(spec.seed, "gt.cw_re_latent"));
  const auto pair_latent = detail::draw_normals(rng_pair, f);

  const double a = std::sqrt(spec.task_affinity);
  const double c = std::sqrt(spec.cw_re_affinity - spec.task_affinity);
  std::vector<double> shared_click;
  for (const std::string& task : task_names()) {
    const bool paired = task == "continue_watch" || task == "radio_engagement";
    const double resid = paired ? 1.0 - spec.cw_re_affinity : 1.0 - spec.task_affinity;
    const double d = std::sqrt(resid);

    Xoshiro256pp rng_task(derive_seed(spec.seed, "gt.shared." + task));
    const auto own = detail::draw_normals(rng_task, f);
    std::vector<double> shared(f);
    for (std::size_t i = 0; i < f; ++i) {
      shared[i] = a * common[i] + (paired ? c * pair_latent[i] : 0.0) + d * own[i];
    }

    PerDomainWeights w;
    for (Domain dom : {Domain::kSource, Domain::kTarget}) {
      Xoshiro256pp rng_dom(derive_seed(spec.seed, "gt.domain." + task + "." + domain_name(dom)));
      const auto devs = detail::draw_normals(rng_dom, f);
      std::vector<double>& vec = dom == Domain::kSource ? w.source : w.target;
      vec.resize(f);
      for (std::size_t i = 0; i < f; ++i) {
        vec[i] = scale * (alpha * shared[i] + (1.0 - alpha) * devs[i]);
      }
    }
    if (task == "click") shared_click = shared;
    gt.weights[task] = std::move(w);
  }

  // The interaction rides the shared click component in both domains, with a
  // per-domain amplitude. Scaled so the boost contributes
  // new_item_effect_* * logit_scale of logit sd. The flag position stays zero.
  {
    const double unit = spec.logit_scale / std::sqrt(static_cast<double>(f - 1));
    const auto boost = [&](double effect) {
      std::vector<double> vec(f, 0.0);
      for (std::size_t i = 0; i + 1 < f; ++i) vec[i] = effect * unit * shared_click[i];
      return vec;
    };
    gt.new_item_interaction.source = boost(spec.new_item_effect_source);
    gt.new_item_interaction.target = boost(spec.new_item_effect_target);
  }

  // Target availability: a deterministic subset of the continuous features is
  // dropped; the new-item flag is always observable since the serving model
  // must be able to react to it.
  const auto masked_count =
      static_cast<std::size_t>(std::floor(spec.missing_fraction * static_cast<double>(f)));
  std::vector<std::size_t> continuous(f - 1);
  std::iota(continuous.begin(), continuous.end(), 0);
  deterministic_shuffle(continuous, derive_seed(spec.seed, "gt.target_mask"));
  gt.target_observed.assign(f, 1);
  for (std::size_t i = 0; i < masked_count; ++i) gt.target_observed[continuous[i]] = 0;

  gt.fingerprint = to_hex16(fnv1a64(spec_to_json(spec).dump()));

  gt.click_bias_source = detail::solve_click_bias(gt, Domain::kSource, spec.base_click_rate);
  gt.click_bias_target =
      detail::solve_click_bias(gt, Domain::kTarget, spec.base_click_rate + spec.ctr_gap);
  return gt;
}

inline double analytic_click_rate(const GroundTruth& gt, Domain d) {
  return detail::analytic_click_rate(gt, d, gt.click_bias(d));
}

namespace detail {

inline double dot(const std::vector<double>& w, const std::vector<double>& x) {
  return std::inner_product(w.begin(), w.end(), x.begin(), 0.0);
}

}  // namespace detail

inline DatasetSchema schema_for(const GroundTruth& gt) {
  DatasetSchema schema;
  schema.feature_count = gt.spec.feature_count;
  schema.feature_names.reserve(schema.feature_count);
  for (std::size_t i = 0; i + 1 < schema.feature_count; ++i) {
    schema.feature_names.push_back("f" + std::to_string(i));
  }
  schema.feature_names.push_back("new_item");
  schema.new_item_index = gt.new_item_index;
  schema.availability_source.assign(schema.feature_count, 1);
  schema.availability_target = gt.target_observed;
  schema.tasks = task_names();
  schema.generator_fingerprint = gt.fingerprint;
  return schema;
}

// Draws n examples. Labels are computed from the FULL feature vector; the
// target availability mask is applied afterwards, which is what makes the
// missing features informative. Each example uses its own derived RNG stream,
// so generation order and threading cannot change the output.
//
// Per-example draw order (fixed): F-1 feature normals, new-item uniform,
// click uniform, trail noise normal (always consumed), then one uniform each
// for discovery, continue_watch, radio_engagement.
inline Dataset sample_domain(const GroundTruth& gt, Domain domain, std::size_t n,
                             std::uint64_t seed) {
  if (n == 0) throw ArgumentError("sample_domain: n must be positive");
  const std::size_t f = gt.spec.feature_count;
  const double rate_new = domain == Domain::kSource ? gt.spec.new_item_rate_source
                                                    : gt.spec.new_item_rate_target;
  const double bias = gt.click_bias(domain);

  Dataset ds;
  ds.schema = schema_for(gt);
  ds.domain = domain;
  ds.fingerprint = to_hex16(fnv1a64(gt.fingerprint + "|" + domain_name(domain) + "|" +
                                    std::to_string(n) + "|" + std::to_string(seed)));
  ds.examples.resize(n);

  const auto& w_click = gt.weights.at("click").in(domain);
  const auto& w_trail = gt.weights.at("trail").in(domain);
  const auto& w_disc = gt.weights.at("discovery").in(domain);
  const auto& w_cw = gt.weights.at("continue_watch").in(domain);
  const auto& w_re = gt.weights.at("radio_engagement").in(domain);
  const auto& inter = gt.new_item_interaction.in(domain);
  const std::vector<std::uint8_t> observed =
      domain == Domain::kSource ? ds.schema.availability_source : ds.schema.availability_target;

  for (std::size_t i = 0; i < n; ++i) {
    Xoshiro256pp rng(derive_seed(seed, i));
    Example& ex = ds.examples[i];
    ex.domain = domain;
    ex.features.resize(f);
    for (std::size_t j = 0; j + 1 < f; ++j) ex.features[j] = rng.normal();
    ex.is_new_item = rng.bernoulli(rate_new);
    ex.features[gt.new_item_index] = ex.is_new_item ? 1.0 : 0.0;

    double click_logit = detail::dot(w_click, ex.features) + bias;
    if (ex.is_new_item) click_logit += detail::dot(inter, ex.features);
    ex.click = rng.bernoulli(sigmoid(click_logit)) ? 1 : 0;

    const double trail_eps = rng.normal();
    if (ex.click == 1) {
      ex.trail = softplus(detail::dot(w_trail, ex.features) + gt.spec.label_noise_sd * trail_eps);
    }
    ex.discovery = rng.bernoulli(sigmoid(detail::dot(w_disc, ex.features))) ? 1 : 0;
    ex.continue_watch = rng.bernoulli(sigmoid(detail::dot(w_cw, ex.features))) ? 1 : 0;
    ex.radio_engagement = rng.bernoulli(sigmoid(detail::dot(w_re, ex.features))) ? 1 : 0;

    ex.mask = observed;
    for (std::size_t j = 0; j < f; ++j) {
      if (!observed[j]) ex.features[j] = kMissingSentinel;
    }
  }
  return ds;
}

// Deterministic disjoint partition. Train size is floored and clamped so both
// parts stay nonempty.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction,
                                         std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ArgumentError("split: train_fraction must lie strictly inside (0,1)");
  }
  if (ds.examples.size() < 2) throw ArgumentError("split: need at least 2 examples");
  const std::size_t n = ds.examples.size();
  auto train_n = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  train_n = std::clamp<std::size_t>(train_n, 1, n - 1);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  deterministic_shuffle(order, seed);

  Dataset train, eval;
  train.schema = eval.schema = ds.schema;
  train.domain = eval.domain = ds.domain;
  train.provenance = eval.provenance = ds.provenance;
  train.fingerprint = to_hex16(fnv1a64(ds.fingerprint + "|split-train|" +
                                       format_double(train_fraction) + "|" + std::to_string(seed)));
  eval.fingerprint = to_hex16(fnv1a64(ds.fingerprint + "|split-eval|" +
                                      format_double(train_fraction) + "|" + std::to_string(seed)));
  train.examples.reserve(train_n);
  eval.examples.reserve(n - train_n);
  for (std::size_t i = 0; i < n; ++i) {
    (i < train_n ? train : eval).examples.push_back(ds.examples[order[i]]);
  }
  return {std::move(train), std::move(eval)};
}

}  // namespace crossdistill
