#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossdistill/adam.hpp"
#include "crossdistill/dataset.hpp"
#include "crossdistill/errors.hpp"
#include "crossdistill/matrix.hpp"
#include "crossdistill/ops.hpp"
#include "crossdistill/rng.hpp"
#include "crossdistill/textio.hpp"

namespace crossdistill {

// One task tower on top of the shared trunk.
//
// Three shapes occur:
//   - plain head: label_task set, no aux unit; primary output trains on labels
//   - distilled head: label_task set, aux_distill set; a second output unit on
//     the same tower trains against the teacher slot named by distill_slot
//   - distill-only head: label_task empty; the single output unit trains
//     against distill_slot (the non-serving radio case, serving = false)
struct TaskHead {
  std::string name;
  TaskKind kind = TaskKind::kBinary;
  std::vector<std::size_t> tower;
  bool serving = true;
  std::string label_task;
  std::string distill_slot;
  bool aux_distill = false;

  bool distill_only() const { return label_task.empty(); }
};

struct RankerConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> trunk;
  std::vector<TaskHead> heads;
  std::uint64_t init_seed = 1;
};

// Per-head loss weights; anything not listed weighs 1.0, so the default
// auxiliary weight equals the default primary weight.
struct LossSpec {
  std::map<std::string, double> primary_weights;
  std::map<std::string, double> aux_weights;

  double primary_weight(const std::string& head) const {
    const auto it = primary_weights.find(head);
    return it == primary_weights.end() ? 1.0 : it->second;
  }
  double aux_weight(const std::string& head) const {
    const auto it = aux_weights.find(head);
    return it == aux_weights.end() ? 1.0 : it->second;
  }
};

inline void validate_config(const RankerConfig& config) {
  if (config.input_dim == 0) throw ConfigError("input_dim must be positive");
  for (std::size_t h : config.trunk) {
    if (h == 0) throw ConfigError("trunk hidden sizes must be at least 1");
  }
  std::map<std::string, int> seen;
  for (const TaskHead& head : config.heads) {
    if (head.name.empty()) throw ConfigError("head name must be nonempty");
    if (++seen[head.name] > 1) throw ConfigError("duplicate head name: '" + head.name + "'");
    for (std::size_t h : head.tower) {
      if (h == 0) throw ConfigError("tower hidden sizes must be at least 1 (head '" + head.name + "')");
    }
    if (!head.label_task.empty()) {
      const auto& tasks = task_names();
      if (std::find(tasks.begin(), tasks.end(), head.label_task) == tasks.end()) {
        throw ConfigError("head '" + head.name + "' references unknown task '" + head.label_task + "'");
      }
      if (head.kind != task_kind(head.label_task)) {
        throw ConfigError("head '" + head.name + "' kind disagrees with its task's label kind");
      }
    } else {
      if (head.distill_slot.empty()) {
        throw ConfigError("head '" + head.name + "' has neither a label task nor a distill slot");
      }
      if (head.aux_distill) {
        throw ConfigError("distill-only head '" + head.name + "' cannot also carry an aux unit");
      }
    }
    if (head.aux_distill && head.distill_slot.empty()) {
      throw ConfigError("head '" + head.name + "' has aux_distill but no distill_slot");
    }
  }
  if (config.heads.empty()) throw ConfigError("config needs at least one head");
}

struct Layer {
  Matrix2D weight;  // in x out
  std::vector<double> bias;
};

struct HeadParams {
  std::vector<Layer> tower;
  Layer out_primary;  // single output unit
  std::optional<Layer> out_aux;
};

// Parameters are organized as named tensors; each weight tensor is drawn from
// its own RNG stream keyed by the tensor path, so two configs that share a
// tensor path get identical values for it regardless of what else differs.
struct RankerModel {
  RankerConfig config;
  std::vector<Layer> trunk;
  std::vector<HeadParams> heads;  // aligned to config.heads
};

namespace detail {

inline Layer init_layer(std::size_t in, std::size_t out, std::uint64_t init_seed,
                        const std::string& path) {
  Layer layer;
  layer.weight = Matrix2D(in, out);
  layer.bias.assign(out, 0.0);
  Xoshiro256pp rng(derive_seed(init_seed, path + ".weight"));
  const double sd = std::sqrt(2.0 / static_cast<double>(in));
  for (double& v : layer.weight.data) v = sd * rng.normal();
  return layer;
}

inline Layer zero_layer(const Layer& like) {
  Layer layer;
  layer.weight = Matrix2D(like.weight.rows, like.weight.cols);
  layer.bias.assign(like.bias.size(), 0.0);
  return layer;
}

}  // namespace detail

inline RankerModel init_model(const RankerConfig& config) {
  validate_config(config);
  RankerModel model;
  model.config = config;
  std::size_t width = config.input_dim;
  for (std::size_t i = 0; i < config.trunk.size(); ++i) {
    model.trunk.push_back(
        detail::init_layer(width, config.trunk[i], config.init_seed, "trunk." + std::to_string(i)));
    width = config.trunk[i];
  }
  for (const TaskHead& head : config.heads) {
    HeadParams params;
    std::size_t hw = width;
    for (std::size_t i = 0; i < head.tower.size(); ++i) {
      params.tower.push_back(detail::init_layer(
          hw, head.tower[i], config.init_seed, "head." + head.name + ".tower." + std::to_string(i)));
      hw = head.tower[i];
    }
    params.out_primary = detail::init_layer(hw, 1, config.init_seed, "head." + head.name + ".out_primary");
    if (head.aux_distill) {
      params.out_aux = detail::init_layer(hw, 1, config.init_seed, "head." + head.name + ".out_aux");
    }
    model.heads.push_back(std::move(params));
  }
  return model;
}

inline RankerModel zero_like(const RankerModel& model) {
  RankerModel out;
  out.config = model.config;
  for (const Layer& l : model.trunk) out.trunk.push_back(detail::zero_layer(l));
  for (const HeadParams& h : model.heads) {
    HeadParams z;
    for (const Layer& l : h.tower) z.tower.push_back(detail::zero_layer(l));
    z.out_primary = detail::zero_layer(h.out_primary);
    if (h.out_aux) z.out_aux = detail::zero_layer(*h.out_aux);
    out.heads.push_back(std::move(z));
  }
  return out;
}

// Fixed tensor enumeration order; defines checkpoint layout and optimizer
// state alignment.
template <typename ModelT, typename Fn>
void for_each_tensor(ModelT& model, Fn&& fn) {
  for (std::size_t i = 0; i < model.trunk.size(); ++i) {
    fn("trunk." + std::to_string(i) + ".weight", model.trunk[i].weight.data);
    fn("trunk." + std::to_string(i) + ".bias", model.trunk[i].bias);
  }
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    const std::string base = "head." + model.config.heads[h].name;
    auto& params = model.heads[h];
    for (std::size_t i = 0; i < params.tower.size(); ++i) {
      fn(base + ".tower." + std::to_string(i) + ".weight", params.tower[i].weight.data);
      fn(base + ".tower." + std::to_string(i) + ".bias", params.tower[i].bias);
    }
    fn(base + ".out_primary.weight", params.out_primary.weight.data);
    fn(base + ".out_primary.bias", params.out_primary.bias);
    if (params.out_aux) {
      fn(base + ".out_aux.weight", params.out_aux->weight.data);
      fn(base + ".out_aux.bias", params.out_aux->bias);
    }
  }
}

inline std::size_t count_parameters(const RankerModel& model) {
  std::size_t n = 0;
  for_each_tensor(const_cast<RankerModel&>(model),
                  [&](const std::string&, const std::vector<double>& t) { n += t.size(); });
  return n;
}

inline std::size_t count_parameters(const RankerConfig& config) {
  std::size_t n = 0;
  std::size_t width = config.input_dim;
  for (std::size_t h : config.trunk) {
    n += width * h + h;
    width = h;
  }
  for (const TaskHead& head : config.heads) {
    std::size_t hw = width;
    for (std::size_t t : head.tower) {
      n += hw * t + t;
      hw = t;
    }
    n += (hw + 1) * (head.aux_distill ? 2 : 1);
  }
  return n;
}

// Missing features fall back to 0.0, the population mean of the standardized
// generator; the single defaulting rule shared by teacher inference and
// student training.
inline std::vector<double> apply_feature_defaults(const Example& ex, const DatasetSchema& schema) {
  if (ex.features.size() != schema.feature_count || ex.mask.size() != schema.feature_count) {
    throw SchemaError("example feature width disagrees with schema");
  }
  std::vector<double> out(schema.feature_count);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ex.mask[i] ? ex.features[i] : 0.0;
  return out;
}

struct HeadOutput {
  double primary = 0.0;
  std::optional<double> aux;
};

using ForwardResult = std::map<std::string, HeadOutput>;

namespace detail {

struct LayerCache {
  Matrix2D pre, post;
};

struct HeadCache {
  std::vector<LayerCache> tower;
  Matrix2D primary;  // B x 1 linear outputs
  Matrix2D aux;      // B x 1, empty when head has no aux unit
};

struct ForwardCache {
  std::vector<LayerCache> trunk;
  std::vector<HeadCache> heads;
};

inline ForwardCache forward_batch(const RankerModel& model, const Matrix2D& x) {
  if (x.cols != model.config.input_dim) {
    throw ShapeError("forward: input width " + std::to_string(x.cols) + " != config input_dim " +
                     std::to_string(model.config.input_dim));
  }
  ForwardCache cache;
  const Matrix2D* cur = &x;
  for (const Layer& layer : model.trunk) {
    LayerCache lc;
    lc.pre = affine_forward(*cur, layer.weight, layer.bias);
    lc.post = relu(lc.pre);
    cache.trunk.push_back(std::move(lc));
    cur = &cache.trunk.back().post;
  }
  const Matrix2D& trunk_out = *cur;
  cache.heads.resize(model.heads.size());
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    const HeadParams& params = model.heads[h];
    HeadCache& hc = cache.heads[h];
    const Matrix2D* hcur = &trunk_out;
    for (const Layer& layer : params.tower) {
      LayerCache lc;
      lc.pre = affine_forward(*hcur, layer.weight, layer.bias);
      lc.post = relu(lc.pre);
      hc.tower.push_back(std::move(lc));
      hcur = &hc.tower.back().post;
    }
    hc.primary = affine_forward(*hcur, params.out_primary.weight, params.out_primary.bias);
    if (params.out_aux) {
      hc.aux = affine_forward(*hcur, params.out_aux->weight, params.out_aux->bias);
    }
  }
  return cache;
}

}  // namespace detail

inline ForwardResult forward(const RankerModel& model, const std::vector<double>& features) {
  Matrix2D x(1, features.size());
  x.data = features;
  const auto cache = detail::forward_batch(model, x);
  ForwardResult out;
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    HeadOutput ho;
    ho.primary = cache.heads[h].primary.data[0];
    if (!cache.heads[h].aux.data.empty()) ho.aux = cache.heads[h].aux.data[0];
    out[model.config.heads[h].name] = ho;
  }
  return out;
}

struct LossBreakdown {
  double total = 0.0;
  std::map<std::string, double> terms;  // "<head>.primary", "<head>.aux"; weighted
};

namespace detail {

// Per-head training targets for a batch. present == 0 marks rows where the
// term does not apply (unclicked trail rows, control-mode aux terms).
struct HeadTargets {
  std::vector<double> primary;
  std::vector<std::uint8_t> primary_present;
  std::vector<double> aux;
  std::vector<std::uint8_t> aux_present;
};

inline double slot_value(const Example& ex, const DatasetSchema& schema, const TaskHead& head) {
  const auto idx = schema.slot_index(head.distill_slot);
  if (!idx) {
    throw DataError("head '" + head.name + "' expects teacher slot '" + head.distill_slot +
                    "' absent from the dataset");
  }
  if (*idx >= ex.teacher.size() || !ex.teacher[*idx]) {
    throw DataError("head '" + head.name + "' found an unfilled teacher slot '" +
                    head.distill_slot + "'");
  }
  return *ex.teacher[*idx];
}

// Control mode is a property of the dataset: no teacher slots at all. With
// slots present, every mapped slot must be filled (augment guarantees it).
inline std::vector<HeadTargets> collect_targets(const RankerConfig& config,
                                                const DatasetSchema& schema,
                                                const std::vector<const Example*>& batch) {
  const bool control_mode = schema.teacher_slots.empty();
  std::vector<HeadTargets> out(config.heads.size());
  for (std::size_t h = 0; h < config.heads.size(); ++h) {
    const TaskHead& head = config.heads[h];
    HeadTargets& t = out[h];
    const std::size_t b = batch.size();
    t.primary.assign(b, 0.0);
    t.primary_present.assign(b, 0);
    if (head.aux_distill) {
      t.aux.assign(b, 0.0);
      t.aux_present.assign(b, 0);
    }
    for (std::size_t i = 0; i < b; ++i) {
      const Example& ex = *batch[i];
      if (head.distill_only()) {
        if (control_mode) {
          throw DataError("distill-only head '" + head.name + "' requires an augmented dataset");
        }
        t.primary[i] = slot_value(ex, schema, head);
        t.primary_present[i] = 1;
      } else {
        const auto label = ex.label_for(head.label_task);
        if (label) {
          t.primary[i] = *label;
          t.primary_present[i] = 1;
        }
      }
      if (head.aux_distill && !control_mode) {
        t.aux[i] = slot_value(ex, schema, head);
        t.aux_present[i] = 1;
      }
    }
  }
  return out;
}

}  // namespace detail

// Loss for one example: total = sum of weighted per-unit terms. Binary units
// use logistic loss (soft targets allowed), regression units squared error.
// The trail term applies only to clicked rows. Aux terms vanish in control
// mode (dataset without teacher slots).
inline LossBreakdown compute_loss(const RankerConfig& config, const ForwardResult& outputs,
                                  const Example& ex, const DatasetSchema& schema,
                                  const LossSpec& loss_spec) {
  const std::vector<const Example*> batch{&ex};
  const auto targets = detail::collect_targets(config, schema, batch);
  LossBreakdown out;
  for (std::size_t h = 0; h < config.heads.size(); ++h) {
    const TaskHead& head = config.heads[h];
    const auto it = outputs.find(head.name);
    if (it == outputs.end()) throw ArgumentError("outputs missing head '" + head.name + "'");
    const detail::HeadTargets& t = targets[h];
    if (t.primary_present[0]) {
      const LossValue lv = head.kind == TaskKind::kBinary
                               ? bce_with_logits(it->second.primary, t.primary[0])
                               : mse(it->second.primary, t.primary[0]);
      out.terms[head.name + ".primary"] = loss_spec.primary_weight(head.name) * lv.loss;
    }
    if (head.aux_distill && !t.aux.empty() && t.aux_present[0]) {
      if (!it->second.aux) throw ArgumentError("outputs missing aux unit for head '" + head.name + "'");
      const LossValue lv = head.kind == TaskKind::kBinary ? bce_with_logits(*it->second.aux, t.aux[0])
                                                          : mse(*it->second.aux, t.aux[0]);
      out.terms[head.name + ".aux"] = loss_spec.aux_weight(head.name) * lv.loss;
    }
  }
  for (const auto& [key, value] : out.terms) out.total += value;
  return out;
}

namespace detail {

// Batch loss (mean over batch of per-example totals) and its gradients.
// Shared by train() and the finite-difference tests.
inline LossBreakdown loss_and_gradients(const RankerModel& model, const Matrix2D& x,
                                        const std::vector<HeadTargets>& targets,
                                        const LossSpec& loss_spec, RankerModel& grads) {
  const auto cache = forward_batch(model, x);
  const std::size_t b = x.rows;
  const double inv_b = 1.0 / static_cast<double>(b);
  LossBreakdown breakdown;

  Matrix2D grad_trunk_out;  // accumulated below when first head writes it
  const Matrix2D& trunk_out = model.trunk.empty() ? x : cache.trunk.back().post;
  grad_trunk_out = Matrix2D(trunk_out.rows, trunk_out.cols);

  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    const TaskHead& head = model.config.heads[h];
    const HeadParams& params = model.heads[h];
    const HeadCache& hc = cache.heads[h];
    const HeadTargets& t = targets[h];

    Matrix2D grad_primary(b, 1);
    double primary_sum = 0.0;
    const double wp = loss_spec.primary_weight(head.name);
    for (std::size_t i = 0; i < b; ++i) {
      if (!t.primary_present[i]) continue;
      const LossValue lv = head.kind == TaskKind::kBinary
                               ? bce_with_logits(hc.primary.data[i], t.primary[i])
                               : mse(hc.primary.data[i], t.primary[i]);
      primary_sum += lv.loss;
      grad_primary.data[i] = wp * lv.grad * inv_b;
    }
    if (primary_sum != 0.0 || std::any_of(t.primary_present.begin(), t.primary_present.end(),
                                          [](std::uint8_t p) { return p != 0; })) {
      breakdown.terms[head.name + ".primary"] = wp * primary_sum * inv_b;
    }

    Matrix2D grad_aux;
    if (params.out_aux) {
      grad_aux = Matrix2D(b, 1);
      bool any = false;
      double aux_sum = 0.0;
      const double wa = loss_spec.aux_weight(head.name);
      for (std::size_t i = 0; i < b; ++i) {
        if (t.aux.empty() || !t.aux_present[i]) continue;
        any = true;
        const LossValue lv = head.kind == TaskKind::kBinary
                                 ? bce_with_logits(hc.aux.data[i], t.aux[i])
                                 : mse(hc.aux.data[i], t.aux[i]);
        aux_sum += lv.loss;
        grad_aux.data[i] = wa * lv.grad * inv_b;
      }
      if (any) breakdown.terms[head.name + ".aux"] = wa * aux_sum * inv_b;
    }

    // Back through the output units into the tower.
    const Matrix2D& tower_out = hc.tower.empty() ? trunk_out : hc.tower.back().post;
    AffineGrads out_g = affine_backward(tower_out, params.out_primary.weight, grad_primary);
    grads.heads[h].out_primary.weight.data = out_g.grad_w.data;
    grads.heads[h].out_primary.bias = out_g.grad_bias;
    Matrix2D grad_tower = std::move(out_g.grad_x);
    if (params.out_aux && !grad_aux.data.empty()) {
      AffineGrads aux_g = affine_backward(tower_out, params.out_aux->weight, grad_aux);
      grads.heads[h].out_aux->weight.data = aux_g.grad_w.data;
      grads.heads[h].out_aux->bias = aux_g.grad_bias;
      for (std::size_t i = 0; i < grad_tower.data.size(); ++i) {
        grad_tower.data[i] += aux_g.grad_x.data[i];
      }
    }

    for (std::size_t li = params.tower.size(); li-- > 0;) {
      const Matrix2D& input = li == 0 ? trunk_out : hc.tower[li - 1].post;
      const Matrix2D grad_pre = relu_backward(hc.tower[li].pre, grad_tower);
      AffineGrads g = affine_backward(input, params.tower[li].weight, grad_pre);
      grads.heads[h].tower[li].weight.data = g.grad_w.data;
      grads.heads[h].tower[li].bias = g.grad_bias;
      grad_tower = std::move(g.grad_x);
    }
    for (std::size_t i = 0; i < grad_trunk_out.data.size(); ++i) {
      grad_trunk_out.data[i] += grad_tower.data[i];
    }
  }

  Matrix2D grad_cur = std::move(grad_trunk_out);
  for (std::size_t li = model.trunk.size(); li-- > 0;) {
    const Matrix2D& input = li == 0 ? x : cache.trunk[li - 1].post;
    const Matrix2D grad_pre = relu_backward(cache.trunk[li].pre, grad_cur);
    AffineGrads g = affine_backward(input, model.trunk[li].weight, grad_pre);
    grads.trunk[li].weight.data = g.grad_w.data;
    grads.trunk[li].bias = g.grad_bias;
    grad_cur = std::move(g.grad_x);
  }

  for (const auto& [key, value] : breakdown.terms) breakdown.total += value;
  return breakdown;
}

inline void fnv_append(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFFULL;
    h *= 0x100000001B3ULL;
  }
}

}  // namespace detail

struct TrainOptions {
  std::size_t epochs = 3;
  std::size_t batch_size = 64;
  AdamOptions adam;
  std::uint64_t seed = 0;
  std::optional<Domain> expected_domain;  // zero-leakage guard
};

struct TrainTrace {
  std::vector<double> epoch_loss;        // mean per-batch loss per epoch
  std::uint64_t batch_fingerprint = 0;   // order + features + labels, teacher slots excluded
};

// Minibatch Adam over seeded shuffles. Deterministic: the shuffle stream
// depends only on opts.seed and the epoch index, optimizer state is
// per-tensor, and everything runs single-threaded.
inline TrainTrace train(RankerModel& model, const Dataset& data, const LossSpec& loss_spec,
                        const TrainOptions& opts) {
  if (data.examples.empty()) throw ArgumentError("train: dataset is empty");
  if (data.schema.feature_count != model.config.input_dim) {
    throw SchemaError("train: dataset feature width disagrees with model input_dim");
  }
  if (opts.batch_size == 0) throw ArgumentError("train: batch_size must be positive");
  if (opts.expected_domain && data.domain != *opts.expected_domain) {
    throw DataError("train: dataset domain '" + domain_name(data.domain) +
                    "' differs from the expected '" + domain_name(*opts.expected_domain) + "'");
  }

  std::vector<AdamState> states;
  std::vector<std::vector<double>*> params;
  for_each_tensor(model, [&](const std::string&, std::vector<double>& t) {
    states.emplace_back();
    params.push_back(&t);
  });

  TrainTrace trace;
  trace.batch_fingerprint = 0xCBF29CE484222325ULL;
  std::vector<std::size_t> order(data.examples.size());

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    deterministic_shuffle(order, derive_seed(opts.seed, epoch));
    double loss_sum = 0.0;
    std::size_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<const Example*> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Example& ex = data.examples[order[i]];
        if (opts.expected_domain && ex.domain != *opts.expected_domain) {
          throw DataError("train: batch contains a row from domain '" + domain_name(ex.domain) + "'");
        }
        batch.push_back(&ex);
      }

      Matrix2D x(batch.size(), model.config.input_dim);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto dense = apply_feature_defaults(*batch[i], data.schema);
        std::copy(dense.begin(), dense.end(), x.data.begin() + i * x.cols);
        detail::fnv_append(trace.batch_fingerprint, order[start + i]);
        for (double v : dense) detail::fnv_append(trace.batch_fingerprint, std::bit_cast<std::uint64_t>(v));
        detail::fnv_append(trace.batch_fingerprint, static_cast<std::uint64_t>(batch[i]->click));
      }

      const auto targets = detail::collect_targets(model.config, data.schema, batch);
      RankerModel grads = zero_like(model);
      const LossBreakdown breakdown = detail::loss_and_gradients(model, x, targets, loss_spec, grads);
      loss_sum += breakdown.total;
      ++batches;

      std::size_t ti = 0;
      for_each_tensor(grads, [&](const std::string&, std::vector<double>& g) {
        adam_step(*params[ti], g, states[ti], opts.adam);
        ++ti;
      });
    }
    trace.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  return trace;
}

struct ScoreRow {
  std::map<std::string, double> serving;  // binary: probability; regression: value
  std::map<std::string, double> aux;      // never used as serving scores
};

struct ScoreTable {
  std::vector<ScoreRow> rows;
};

inline ScoreTable predict(const RankerModel& model, const Dataset& data) {
  if (data.schema.feature_count != model.config.input_dim) {
    throw SchemaError("predict: dataset feature width disagrees with model input_dim");
  }
  ScoreTable table;
  table.rows.resize(data.examples.size());
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const auto outputs = forward(model, apply_feature_defaults(data.examples[i], data.schema));
    for (std::size_t h = 0; h < model.config.heads.size(); ++h) {
      const TaskHead& head = model.config.heads[h];
      const HeadOutput& ho = outputs.at(head.name);
      table.rows[i].serving[head.name] =
          head.kind == TaskKind::kBinary ? sigmoid(ho.primary) : ho.primary;
      if (ho.aux) {
        table.rows[i].aux[head.name] = head.kind == TaskKind::kBinary ? sigmoid(*ho.aux) : *ho.aux;
      }
    }
  }
  return table;
}

inline nlohmann::json config_to_json(const RankerConfig& config) {
  nlohmann::json j;
  j["input_dim"] = config.input_dim;
  j["trunk"] = config.trunk;
  j["init_seed"] = config.init_seed;
  nlohmann::json heads = nlohmann::json::array();
  for (const TaskHead& head : config.heads) {
    nlohmann::json hj;
    hj["name"] = head.name;
    hj["kind"] = head.kind == TaskKind::kBinary ? "binary" : "regression";
    hj["tower"] = head.tower;
    hj["serving"] = head.serving;
    hj["label_task"] = head.label_task;
    hj["distill_slot"] = head.distill_slot;
    hj["aux_distill"] = head.aux_distill;
    heads.push_back(hj);
  }
  j["heads"] = heads;
  return j;
}

inline RankerConfig config_from_json(const nlohmann::json& j) {
  RankerConfig config;
  config.input_dim = j.at("input_dim").get<std::size_t>();
  config.trunk = j.at("trunk").get<std::vector<std::size_t>>();
  config.init_seed = j.at("init_seed").get<std::uint64_t>();
  for (const auto& hj : j.at("heads")) {
    TaskHead head;
    head.name = hj.at("name").get<std::string>();
    const std::string kind = hj.at("kind").get<std::string>();
    if (kind != "binary" && kind != "regression") throw ConfigError("unknown head kind: " + kind);
    head.kind = kind == "binary" ? TaskKind::kBinary : TaskKind::kRegression;
    head.tower = hj.at("tower").get<std::vector<std::size_t>>();
    head.serving = hj.at("serving").get<bool>();
    head.label_task = hj.at("label_task").get<std::string>();
    head.distill_slot = hj.at("distill_slot").get<std::string>();
    head.aux_distill = hj.at("aux_distill").get<bool>();
    config.heads.push_back(std::move(head));
  }
  return config;
}

// Checkpoint format "crossdistill.checkpoint.v1": config echo plus all
// parameter tensors in enumeration order, serialized at full precision so the
// round-trip is bit-exact.
inline std::string serialize_checkpoint(const RankerModel& model) {
  nlohmann::json j;
  j["format"] = "crossdistill.checkpoint.v1";
  j["config"] = config_to_json(model.config);
  nlohmann::json tensors = nlohmann::json::array();
  for_each_tensor(const_cast<RankerModel&>(model),
                  [&](const std::string& path, std::vector<double>& t) {
                    nlohmann::json tj;
                    tj["path"] = path;
                    tj["data"] = t;
                    tensors.push_back(std::move(tj));
                  });
  j["tensors"] = tensors;
  std::string out = j.dump();
  out.push_back('\n');
  return out;
}

inline RankerModel parse_checkpoint(std::string_view text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "crossdistill.checkpoint.v1") {
    throw IoError("checkpoint: unsupported format tag");
  }
  RankerModel model = init_model(config_from_json(j.at("config")));
  std::size_t ti = 0;
  const auto& tensors = j.at("tensors");
  for_each_tensor(model, [&](const std::string& path, std::vector<double>& t) {
    if (ti >= tensors.size()) throw IoError("checkpoint: missing tensor '" + path + "'");
    const auto& tj = tensors[ti];
    if (tj.at("path").get<std::string>() != path) {
      throw IoError("checkpoint: tensor order mismatch at '" + path + "'");
    }
    const auto data = tj.at("data").get<std::vector<double>>();
    if (data.size() != t.size()) throw IoError("checkpoint: tensor size mismatch at '" + path + "'");
    t = data;
    ++ti;
  });
  if (ti != tensors.size()) throw IoError("checkpoint: extra tensors present");
  return model;
}

inline std::string checkpoint_fingerprint(const RankerModel& model) {
  return to_hex16(fnv1a64(serialize_checkpoint(model)));
}

inline void write_checkpoint(const RankerModel& model, const std::filesystem::path& path) {
  write_text_file(path, serialize_checkpoint(model));
}

inline RankerModel read_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_text_file(path));
}

}  // namespace crossdistill
