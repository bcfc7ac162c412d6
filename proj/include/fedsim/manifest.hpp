#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/toy_models.hpp"

namespace fedsim {

// Dataset manifests: one JSON object per line describing a sample's identity,
// provenance metadata (log, location, month) and task payload (features and
// target for toy tasks, paired boxes for the detection calibration task).

struct ManifestSample {
  std::string id;
  std::string log_id;
  std::string location;
  int month = 0;
  std::map<int, int> label_counts;
  std::vector<double> features;
  std::optional<double> target;
  std::vector<CenterBox> truths;
  std::vector<CenterBox> preds;
};

struct Manifest {
  std::vector<ManifestSample> samples;

  size_t size() const { return samples.size(); }

  const ManifestSample& by_id(const std::string& id) const {
    for (const auto& s : samples) {
      if (s.id == id) return s;
    }
    throw ConfigError("manifest has no sample with id '" + id + "'");
  }

  static Manifest load_jsonl(const std::filesystem::path& path);
  void save_jsonl(const std::filesystem::path& path) const;
};

namespace detail {

inline CenterBox box_from_json(const nlohmann::json& j, bool with_conf) {
  CenterBox b;
  b.class_id = j.at("class").get<int>();
  const auto& arr = j.at("box");
  if (!arr.is_array() || arr.size() != 4) {
    throw ConfigError("box must be [cx, cy, w, h]");
  }
  b.cx = arr[0].get<double>();
  b.cy = arr[1].get<double>();
  b.w = arr[2].get<double>();
  b.h = arr[3].get<double>();
  if (with_conf) b.confidence = j.value("conf", 1.0);
  return b;
}

inline nlohmann::ordered_json box_to_json(const CenterBox& b, bool with_conf) {
  nlohmann::ordered_json j;
  j["class"] = b.class_id;
  if (with_conf) j["conf"] = b.confidence;
  j["box"] = {b.cx, b.cy, b.w, b.h};
  return j;
}

}  // namespace detail

inline Manifest Manifest::load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest '" + path.string() + "'");
  Manifest m;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    ManifestSample s;
    s.id = j.value("id", "line-" + std::to_string(lineno));
    s.log_id = j.value("log", "");
    s.location = j.value("location", "");
    s.month = j.value("month", 0);
    if (j.contains("labels")) {
      for (auto it = j["labels"].begin(); it != j["labels"].end(); ++it) {
        s.label_counts[std::stoi(it.key())] = it.value().get<int>();
      }
    }
    if (j.contains("features")) s.features = j["features"].get<std::vector<double>>();
    if (j.contains("target")) s.target = j["target"].get<double>();
    if (j.contains("truths")) {
      for (const auto& b : j["truths"]) s.truths.push_back(detail::box_from_json(b, false));
    }
    if (j.contains("preds")) {
      for (const auto& b : j["preds"]) s.preds.push_back(detail::box_from_json(b, true));
    }
    m.samples.push_back(std::move(s));
  }
  return m;
}

inline void Manifest::save_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write manifest '" + path.string() + "'");
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    if (!s.log_id.empty()) j["log"] = s.log_id;
    if (!s.location.empty()) j["location"] = s.location;
    if (s.month != 0) j["month"] = s.month;
    if (!s.label_counts.empty()) {
      nlohmann::ordered_json labels;
      for (const auto& [cls, n] : s.label_counts) labels[std::to_string(cls)] = n;
      j["labels"] = labels;
    }
    if (!s.features.empty()) j["features"] = s.features;
    if (s.target) j["target"] = *s.target;
    if (!s.truths.empty()) {
      auto arr = nlohmann::ordered_json::array();
      for (const auto& b : s.truths) arr.push_back(detail::box_to_json(b, false));
      j["truths"] = arr;
    }
    if (!s.preds.empty()) {
      auto arr = nlohmann::ordered_json::array();
      for (const auto& b : s.preds) arr.push_back(detail::box_to_json(b, true));
      j["preds"] = arr;
    }
    out << j.dump() << '\n';
  }
}

// ---- synthetic manifests ----

struct SyntheticSpec {
  std::string task = "regression";  // regression | classification | detection
  size_t samples = 200;
  size_t features = 5;
  double noise = 0.1;
  std::vector<std::string> locations = {"alpha"};
  size_t log_length = 5;
  double location_shift = 0.0;  // per-location feature mean displacement
  size_t classes = 3;           // detection classes
  size_t boxes_per_sample = 3;
  double offset_x = 0.08;  // systematic detector shift the calibration learns
  double offset_y = -0.05;
  double center_noise = 0.0;

  void validate() const {
    if (task != "regression" && task != "classification" && task != "detection") {
      throw ConfigError("unknown synthetic task '" + task + "'");
    }
    if (samples == 0) throw ConfigError("synthetic manifest needs samples > 0");
    if (task != "detection" && features == 0) throw ConfigError("features must be > 0");
    if (locations.empty()) throw ConfigError("at least one location required");
    if (log_length == 0) throw ConfigError("log_length must be > 0");
    if (task == "detection" && (classes == 0 || boxes_per_sample == 0)) {
      throw ConfigError("detection task needs classes and boxes_per_sample > 0");
    }
  }
};

inline Manifest synthesize_manifest(const SyntheticSpec& spec, uint64_t seed) {
  spec.validate();
  Manifest m;
  DetRng rng(derive_seed(seed, "synth"));

  const size_t L = spec.locations.size();
  std::vector<std::vector<double>> shift_dir(L, std::vector<double>(spec.features, 0.0));
  if (spec.location_shift != 0.0) {
    for (size_t l = 0; l < L; ++l) {
      double norm = 0.0;
      for (auto& v : shift_dir[l]) {
        v = rng.next_normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : shift_dir[l]) v = spec.location_shift * v / norm;
    }
  }

  std::vector<double> w_true(spec.features);
  for (auto& v : w_true) v = rng.next_normal();
  const double b_true = 0.5;

  std::vector<size_t> per_loc_count(L, 0);
  for (size_t i = 0; i < spec.samples; ++i) {
    ManifestSample s;
    const size_t loc = i % L;
    s.id = "s" + std::to_string(i);
    s.location = spec.locations[loc];
    const size_t log_ordinal = per_loc_count[loc]++ / spec.log_length;
    s.log_id = s.location + "-log" + std::to_string(log_ordinal);
    s.month = 1 + static_cast<int>(log_ordinal % 12);

    if (spec.task == "detection") {
      for (size_t b = 0; b < spec.boxes_per_sample; ++b) {
        CenterBox t;
        t.class_id = static_cast<int>(rng.next_below(spec.classes));
        t.cx = 0.15 + 0.7 * rng.next_double();
        t.cy = 0.15 + 0.7 * rng.next_double();
        t.w = 0.08 + 0.12 * rng.next_double();
        t.h = 0.08 + 0.12 * rng.next_double();
        CenterBox p = t;
        p.cx += spec.offset_x + spec.center_noise * rng.next_normal();
        p.cy += spec.offset_y + spec.center_noise * rng.next_normal();
        p.confidence = 0.55 + 0.44 * rng.next_double();
        s.truths.push_back(t);
        s.preds.push_back(p);
        s.label_counts[t.class_id] += 1;
      }
    } else {
      s.features.resize(spec.features);
      for (size_t f = 0; f < spec.features; ++f) {
        s.features[f] = shift_dir[loc][f] + rng.next_normal();
      }
      double z = b_true;
      for (size_t f = 0; f < spec.features; ++f) z += w_true[f] * s.features[f];
      if (spec.task == "regression") {
        s.target = z + spec.noise * rng.next_normal();
      } else {
        s.target = (z + spec.noise * rng.next_normal()) > 0.0 ? 1.0 : 0.0;
      }
    }
    m.samples.push_back(std::move(s));
  }
  return m;
}

// ---- dataset extraction ----

inline std::shared_ptr<ToyDataset> toy_dataset(const Manifest& m,
                                               const std::vector<std::string>& ids) {
  auto ds = std::make_shared<ToyDataset>();
  ds->samples.reserve(ids.size());
  for (const auto& id : ids) {
    const auto& s = m.by_id(id);
    if (!s.target) throw ConfigError("sample '" + id + "' has no target");
    ds->samples.push_back({s.features, *s.target});
  }
  return ds;
}

inline std::shared_ptr<DetectionSet> detection_set(const Manifest& m,
                                                   const std::vector<std::string>& ids) {
  auto ds = std::make_shared<DetectionSet>();
  ds->samples.reserve(ids.size());
  for (const auto& id : ids) {
    const auto& s = m.by_id(id);
    ds->samples.push_back({s.truths, s.preds});
  }
  return ds;
}

}  // namespace fedsim
