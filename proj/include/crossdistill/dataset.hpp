#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "crossdistill/errors.hpp"
#include "crossdistill/rng.hpp"
#include "crossdistill/textio.hpp"

namespace crossdistill {

enum class Domain { kSource, kTarget };

inline std::string domain_name(Domain d) {
  return d == Domain::kSource ? "source" : "target";
}

inline Domain domain_from_name(std::string_view name) {
  if (name == "source") return Domain::kSource;
  if (name == "target") return Domain::kTarget;
  throw IoError("unknown domain tag: '" + std::string(name) + "'");
}

enum class TaskKind { kBinary, kRegression };

// The fixed task vocabulary shared by generator, rankers, and reports.
inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names = {
      "click", "trail", "discovery", "continue_watch", "radio_engagement"};
  return names;
}

inline TaskKind task_kind(std::string_view task) {
  if (task == "trail") return TaskKind::kRegression;
  return TaskKind::kBinary;
}

// One impression. Unobserved feature positions carry a NaN sentinel; they are
// never fabricated values. Trail is defined only on clicked impressions.
struct Example {
  std::vector<double> features;
  std::vector<std::uint8_t> mask;  // 1 = observed
  int click = 0;
  std::optional<double> trail;
  int discovery = 0;
  int continue_watch = 0;
  int radio_engagement = 0;
  bool is_new_item = false;
  Domain domain = Domain::kSource;
  std::vector<std::optional<double>> teacher;  // aligned to schema.teacher_slots

  std::optional<double> label_for(std::string_view task) const {
    if (task == "click") return static_cast<double>(click);
    if (task == "trail") return trail;
    if (task == "discovery") return static_cast<double>(discovery);
    if (task == "continue_watch") return static_cast<double>(continue_watch);
    if (task == "radio_engagement") return static_cast<double>(radio_engagement);
    throw ArgumentError("unknown task: '" + std::string(task) + "'");
  }
};

constexpr double kMissingSentinel = std::numeric_limits<double>::quiet_NaN();

// Provenance block attached to augmented datasets.
struct Provenance {
  std::string teacher_fingerprint;
  std::vector<std::pair<std::string, std::string>> mapping;  // teacher head -> slot
  std::string created_at;

  bool operator==(const Provenance&) const = default;
};

struct DatasetSchema {
  std::size_t feature_count = 0;
  std::vector<std::string> feature_names;
  std::size_t new_item_index = 0;
  std::vector<std::uint8_t> availability_source;  // 1 = observed in that domain
  std::vector<std::uint8_t> availability_target;
  std::vector<std::string> tasks = task_names();
  std::vector<std::string> teacher_slots;
  std::string generator_fingerprint;

  bool operator==(const DatasetSchema&) const = default;

  std::optional<std::size_t> slot_index(std::string_view slot) const {
    for (std::size_t i = 0; i < teacher_slots.size(); ++i) {
      if (teacher_slots[i] == slot) return i;
    }
    return std::nullopt;
  }
};

struct Dataset {
  DatasetSchema schema;
  Domain domain = Domain::kSource;
  std::string fingerprint;  // uniquely determines content
  std::vector<Example> examples;
  std::optional<Provenance> provenance;

  std::size_t size() const { return examples.size(); }
};

namespace detail {

inline std::string availability_bits(const std::vector<std::uint8_t>& avail) {
  std::string bits(avail.size(), '0');
  for (std::size_t i = 0; i < avail.size(); ++i) bits[i] = avail[i] ? '1' : '0';
  return bits;
}

inline std::vector<std::uint8_t> bits_to_mask(std::string_view bits) {
  std::vector<std::uint8_t> mask(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != '0' && bits[i] != '1') throw IoError("bad mask bitstring");
    mask[i] = bits[i] == '1' ? 1 : 0;
  }
  return mask;
}

inline std::string nullable(const std::optional<double>& v) {
  return v ? format_double(*v) : "null";
}

inline std::optional<double> parse_nullable(std::string_view text) {
  if (text == "null") return std::nullopt;
  return parse_double(text);
}

}  // namespace detail

// Line-delimited dataset format "crossdistill.dataset.v1".
//
// Line 1 is a JSON header carrying the schema, domain tag, generator
// fingerprint, and (for augmented datasets) the provenance block. Every
// following line is one example with tab-separated fields in fixed order:
//
//   domain \t is_new_item \t mask bitstring \t features \t labels \t teacher slots
//
// features, labels, and teacher slots are comma-separated decimal reals with
// "null" for absent values: masked features, trail on unclicked rows, and
// unfilled teacher slots. Labels follow the schema task order.
namespace detail {
inline std::string serialize_dataset_as(const Dataset& ds, const std::string& fingerprint) {
  nlohmann::json header;
  header["format"] = "crossdistill.dataset.v1";
  header["feature_count"] = ds.schema.feature_count;
  header["feature_names"] = ds.schema.feature_names;
  header["new_item_index"] = ds.schema.new_item_index;
  header["availability"] = {
      {"source", detail::availability_bits(ds.schema.availability_source)},
      {"target", detail::availability_bits(ds.schema.availability_target)}};
  header["tasks"] = ds.schema.tasks;
  header["teacher_slots"] = ds.schema.teacher_slots;
  header["generator_fingerprint"] = ds.schema.generator_fingerprint;
  header["domain"] = domain_name(ds.domain);
  header["fingerprint"] = fingerprint;
  header["example_count"] = ds.examples.size();
  if (ds.provenance) {
    nlohmann::json prov;
    prov["teacher_fingerprint"] = ds.provenance->teacher_fingerprint;
    nlohmann::json mapping = nlohmann::json::array();
    for (const auto& [head, slot] : ds.provenance->mapping) {
      mapping.push_back({{"teacher_head", head}, {"slot", slot}});
    }
    prov["mapping"] = mapping;
    prov["created_at"] = ds.provenance->created_at;
    header["provenance"] = prov;
  }

  std::string out = header.dump();
  out.push_back('\n');
  for (const Example& ex : ds.examples) {
    out += domain_name(ex.domain);
    out.push_back('\t');
    out.push_back(ex.is_new_item ? '1' : '0');
    out.push_back('\t');
    for (std::uint8_t m : ex.mask) out.push_back(m ? '1' : '0');
    out.push_back('\t');
    for (std::size_t i = 0; i < ex.features.size(); ++i) {
      if (i > 0) out.push_back(',');
      out += ex.mask[i] ? format_double(ex.features[i]) : "null";
    }
    out.push_back('\t');
    out += format_double(static_cast<double>(ex.click));
    out.push_back(',');
    out += detail::nullable(ex.trail);
    out.push_back(',');
    out += format_double(static_cast<double>(ex.discovery));
    out.push_back(',');
    out += format_double(static_cast<double>(ex.continue_watch));
    out.push_back(',');
    out += format_double(static_cast<double>(ex.radio_engagement));
    out.push_back('\t');
    for (std::size_t i = 0; i < ex.teacher.size(); ++i) {
      if (i > 0) out.push_back(',');
      out += detail::nullable(ex.teacher[i]);
    }
    out.push_back('\n');
  }
  return out;
}
}  // namespace detail

inline std::string serialize_dataset(const Dataset& ds) {
  return detail::serialize_dataset_as(ds, ds.fingerprint);
}

// Hash of everything but the fingerprint field itself. Lets derived datasets
// (augmented, noise-slotted) be content-addressed, so rebuilding identical
// content always lands on the same fingerprint.
inline std::string content_fingerprint(const Dataset& ds) {
  return to_hex16(fnv1a64(detail::serialize_dataset_as(ds, "")));
}

inline Dataset parse_dataset(std::string_view text) {
  const std::size_t header_end = text.find('\n');
  if (header_end == std::string_view::npos) throw IoError("dataset: missing header line");
  const nlohmann::json header = nlohmann::json::parse(text.substr(0, header_end));
  if (header.value("format", "") != "crossdistill.dataset.v1") {
    throw IoError("dataset: unsupported format tag");
  }

  Dataset ds;
  ds.schema.feature_count = header.at("feature_count").get<std::size_t>();
  ds.schema.feature_names = header.at("feature_names").get<std::vector<std::string>>();
  ds.schema.new_item_index = header.at("new_item_index").get<std::size_t>();
  ds.schema.availability_source =
      detail::bits_to_mask(header.at("availability").at("source").get<std::string>());
  ds.schema.availability_target =
      detail::bits_to_mask(header.at("availability").at("target").get<std::string>());
  ds.schema.tasks = header.at("tasks").get<std::vector<std::string>>();
  ds.schema.teacher_slots = header.at("teacher_slots").get<std::vector<std::string>>();
  ds.schema.generator_fingerprint = header.at("generator_fingerprint").get<std::string>();
  ds.domain = domain_from_name(header.at("domain").get<std::string>());
  ds.fingerprint = header.at("fingerprint").get<std::string>();
  if (header.contains("provenance")) {
    Provenance prov;
    const auto& p = header.at("provenance");
    prov.teacher_fingerprint = p.at("teacher_fingerprint").get<std::string>();
    for (const auto& entry : p.at("mapping")) {
      prov.mapping.emplace_back(entry.at("teacher_head").get<std::string>(),
                                entry.at("slot").get<std::string>());
    }
    prov.created_at = p.at("created_at").get<std::string>();
    ds.provenance = prov;
  }

  const std::size_t expected = header.at("example_count").get<std::size_t>();
  ds.examples.reserve(expected);
  std::size_t pos = header_end + 1;
  while (pos < text.size()) {
    std::size_t line_end = text.find('\n', pos);
    if (line_end == std::string_view::npos) line_end = text.size();
    const std::string_view line = text.substr(pos, line_end - pos);
    pos = line_end + 1;
    if (line.empty()) continue;

    const auto fields = split_view(line, '\t');
    if (fields.size() != 6) throw IoError("dataset: expected 6 tab-separated fields");
    Example ex;
    ex.domain = domain_from_name(fields[0]);
    ex.is_new_item = fields[1] == "1";
    ex.mask = detail::bits_to_mask(fields[2]);
    const auto feat_parts = split_view(fields[3], ',');
    if (feat_parts.size() != ds.schema.feature_count || ex.mask.size() != ds.schema.feature_count) {
      throw IoError("dataset: row feature width disagrees with schema");
    }
    ex.features.resize(feat_parts.size());
    for (std::size_t i = 0; i < feat_parts.size(); ++i) {
      const auto v = detail::parse_nullable(feat_parts[i]);
      if (v.has_value() != static_cast<bool>(ex.mask[i])) {
        throw IoError("dataset: feature nullness disagrees with mask");
      }
      ex.features[i] = v.value_or(kMissingSentinel);
    }
    const auto label_parts = split_view(fields[4], ',');
    if (label_parts.size() != ds.schema.tasks.size()) {
      throw IoError("dataset: label count disagrees with task list");
    }
    ex.click = static_cast<int>(parse_double(label_parts[0]));
    ex.trail = detail::parse_nullable(label_parts[1]);
    ex.discovery = static_cast<int>(parse_double(label_parts[2]));
    ex.continue_watch = static_cast<int>(parse_double(label_parts[3]));
    ex.radio_engagement = static_cast<int>(parse_double(label_parts[4]));
    if ((ex.click == 1) != ex.trail.has_value()) {
      throw IoError("dataset: trail label must be present exactly on clicked rows");
    }
    if (!ds.schema.teacher_slots.empty()) {
      const auto slot_parts = split_view(fields[5], ',');
      if (slot_parts.size() != ds.schema.teacher_slots.size()) {
        throw IoError("dataset: teacher slot count disagrees with schema");
      }
      ex.teacher.resize(slot_parts.size());
      for (std::size_t i = 0; i < slot_parts.size(); ++i) {
        ex.teacher[i] = detail::parse_nullable(slot_parts[i]);
      }
    } else if (!fields[5].empty()) {
      throw IoError("dataset: teacher slot field present but schema has no slots");
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.size() != expected) {
    throw IoError("dataset: example count disagrees with header");
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_text_file(path, serialize_dataset(ds));
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  return parse_dataset(read_text_file(path));
}

}  // namespace crossdistill
