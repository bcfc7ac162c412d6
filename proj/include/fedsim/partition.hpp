#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/manifest.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// Partitioning a manifest into a server-held evaluation set and per-client
// training shards, either by seeded IID shuffling or by metadata rules that
// mirror how real fleets split (per-location clients, month ranges, whole
// driving logs distributed from a shared pool).

struct SplitManifest {
  std::string strategy;
  uint64_t seed = 0;
  std::vector<std::string> server_ids;
  std::vector<std::vector<std::string>> client_ids;

  int clients() const { return static_cast<int>(client_ids.size()); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["server"] = server_ids;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : client_ids) arr.push_back(c);
    j["clients"] = arr;
    return j;
  }

  static SplitManifest from_json(const nlohmann::json& j) {
    SplitManifest s;
    s.strategy = j.at("strategy").get<std::string>();
    s.seed = j.at("seed").get<uint64_t>();
    s.server_ids = j.at("server").get<std::vector<std::string>>();
    for (const auto& c : j.at("clients")) {
      s.client_ids.push_back(c.get<std::vector<std::string>>());
    }
    return s;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write split '" + path.string() + "'");
    out << to_json().dump(2) << '\n';
  }

  static SplitManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open split '" + path.string() + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("split '" + path.string() + "': " + e.what());
    }
    return from_json(j);
  }
};

// Every sample lands in exactly one shard; clients are never left empty.
inline void validate_split(const Manifest& m, const SplitManifest& s) {
  std::set<std::string> seen;
  size_t total = s.server_ids.size();
  for (const auto& id : s.server_ids) {
    if (!seen.insert(id).second) throw OverlappingRules("sample '" + id + "' assigned twice");
  }
  for (size_t c = 0; c < s.client_ids.size(); ++c) {
    if (s.client_ids[c].empty()) {
      throw EmptySplit("client " + std::to_string(c + 1) + " received no samples");
    }
    total += s.client_ids[c].size();
    for (const auto& id : s.client_ids[c]) {
      if (!seen.insert(id).second) {
        throw OverlappingRules("sample '" + id + "' assigned twice");
      }
    }
  }
  if (total > m.size()) {
    throw UnmatchedSamples("split assigns " + std::to_string(total) +
                           " samples but the manifest has " + std::to_string(m.size()));
  }
  for (const auto& sample : m.samples) {
    if (!seen.count(sample.id)) {
      throw UnmatchedSamples("sample '" + sample.id + "' missing from the split");
    }
  }
}

// Seeded uniform split: server takes round(fraction * n), the rest is dealt
// round-robin so client shard sizes differ by at most one.
inline SplitManifest split_iid(const Manifest& m, double server_fraction, int clients,
                               uint64_t seed) {
  if (!(server_fraction >= 0.0 && server_fraction <= 1.0)) {
    throw ConfigError("server_fraction must lie in [0,1], got " +
                      std::to_string(server_fraction));
  }
  if (clients < 1) throw ConfigError("need at least one client");

  std::vector<std::string> ids;
  ids.reserve(m.size());
  for (const auto& s : m.samples) ids.push_back(s.id);
  DetRng rng(derive_seed(seed, "split-iid"));
  rng.shuffle(ids);

  const size_t n_server =
      static_cast<size_t>(std::llround(server_fraction * static_cast<double>(ids.size())));
  SplitManifest out;
  out.strategy = "iid";
  out.seed = seed;
  out.server_ids.assign(ids.begin(), ids.begin() + static_cast<long>(n_server));
  out.client_ids.resize(static_cast<size_t>(clients));
  for (size_t i = n_server; i < ids.size(); ++i) {
    out.client_ids[(i - n_server) % static_cast<size_t>(clients)].push_back(ids[i]);
  }
  validate_split(m, out);
  return out;
}

// ---- rules-based splits ----

struct RulePredicate {
  std::optional<std::string> location;
  std::set<int> months;

  bool matches(const ManifestSample& s) const {
    if (location && s.location != *location) return false;
    if (!months.empty() && !months.count(s.month)) return false;
    return true;
  }

  std::string describe() const {
    std::string d;
    if (location) d += "location=" + *location;
    if (!months.empty()) {
      if (!d.empty()) d += " ";
      d += "months={";
      bool first = true;
      for (int v : months) {
        if (!first) d += ",";
        d += std::to_string(v);
        first = false;
      }
      d += "}";
    }
    return d.empty() ? "(anything)" : d;
  }
};

// Routes matching samples to one shard. Shard 0 is the server.
struct DirectRule {
  int shard = 0;
  RulePredicate pred;
};

// Collects whole logs and deals them round-robin to the named clients.
struct PoolRule {
  std::vector<int> shards;
  RulePredicate pred;
};

struct SplitRules {
  std::vector<DirectRule> direct;
  std::vector<PoolRule> pools;
};

inline SplitManifest split_by_rules(const Manifest& m, const SplitRules& rules, int clients,
                                    uint64_t seed) {
  if (clients < 1) throw ConfigError("need at least one client");
  for (const auto& r : rules.direct) {
    if (r.shard < 0 || r.shard > clients) {
      throw ConfigError("direct rule names shard " + std::to_string(r.shard));
    }
  }
  for (const auto& p : rules.pools) {
    if (p.shards.empty()) throw ConfigError("pool rule names no shards");
    for (int s : p.shards) {
      if (s < 1 || s > clients) throw ConfigError("pool rule names shard " + std::to_string(s));
    }
  }

  SplitManifest out;
  out.strategy = "rules";
  out.seed = seed;
  out.client_ids.resize(static_cast<size_t>(clients));

  // Pass 1: direct routing, checking that no sample matches two rules.
  std::map<std::string, int> direct_assignment;  // sample id -> shard
  std::map<std::string, int> log_direct;         // log -> count of directly routed samples
  for (const auto& s : m.samples) {
    int matched = -1;
    for (size_t r = 0; r < rules.direct.size(); ++r) {
      if (!rules.direct[r].pred.matches(s)) continue;
      if (matched >= 0) {
        throw OverlappingRules("sample '" + s.id + "' matches direct rules " +
                               std::to_string(matched) + " and " + std::to_string(r) +
                               " (" + rules.direct[r].pred.describe() + ")");
      }
      matched = static_cast<int>(r);
    }
    if (matched >= 0) {
      direct_assignment[s.id] = rules.direct[static_cast<size_t>(matched)].shard;
      log_direct[s.log_id] += 1;
    }
  }

  // Pass 2: pool membership at log granularity. Logs are atomic, so a log
  // claimed twice, or claimed while some of its samples were routed directly,
  // is a rule conflict.
  std::map<std::string, int> log_pool;  // log -> pool index
  for (size_t p = 0; p < rules.pools.size(); ++p) {
    for (const auto& s : m.samples) {
      if (direct_assignment.count(s.id)) continue;
      if (!rules.pools[p].pred.matches(s)) continue;
      auto it = log_pool.find(s.log_id);
      if (it != log_pool.end() && it->second != static_cast<int>(p)) {
        throw OverlappingRules("log '" + s.log_id + "' is claimed by pools " +
                               std::to_string(it->second) + " and " + std::to_string(p));
      }
      log_pool[s.log_id] = static_cast<int>(p);
    }
  }
  for (const auto& [log, pool] : log_pool) {
    if (log_direct.count(log)) {
      throw OverlappingRules("log '" + log + "' is split between pool " +
                             std::to_string(pool) + " and a direct rule");
    }
  }

  // Deal each pool's logs round-robin after a seeded shuffle.
  std::map<std::string, int> log_assignment;  // log -> shard
  for (size_t p = 0; p < rules.pools.size(); ++p) {
    std::vector<std::string> logs;
    for (const auto& [log, pool] : log_pool) {
      if (pool == static_cast<int>(p)) logs.push_back(log);
    }
    std::sort(logs.begin(), logs.end());
    DetRng rng(derive_seed(seed, "pool", p));
    rng.shuffle(logs);
    for (size_t i = 0; i < logs.size(); ++i) {
      log_assignment[logs[i]] = rules.pools[p].shards[i % rules.pools[p].shards.size()];
    }
  }

  std::vector<std::string> unmatched;
  for (const auto& s : m.samples) {
    auto d = direct_assignment.find(s.id);
    if (d != direct_assignment.end()) {
      if (d->second == 0) {
        out.server_ids.push_back(s.id);
      } else {
        out.client_ids[static_cast<size_t>(d->second - 1)].push_back(s.id);
      }
      continue;
    }
    auto l = log_assignment.find(s.log_id);
    if (l != log_assignment.end()) {
      out.client_ids[static_cast<size_t>(l->second - 1)].push_back(s.id);
      continue;
    }
    unmatched.push_back(s.id);
  }
  if (!unmatched.empty()) {
    throw UnmatchedSamples(std::to_string(unmatched.size()) +
                           " samples matched no rule, first: '" + unmatched.front() + "'");
  }
  validate_split(m, out);
  return out;
}

// ---- skew reporting ----

struct ClientSkew {
  int shard = 0;  // 0 = server
  size_t samples = 0;
  size_t annotations = 0;
  double annotations_per_sample = 0.0;
  std::map<int, double> label_freq;
};

struct SkewReport {
  std::vector<ClientSkew> shards;
  double chi2 = 0.0;
  double chi2_null_p99 = 0.0;
  bool skewed = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : shards) {
      nlohmann::ordered_json e;
      e["shard"] = c.shard;
      e["samples"] = c.samples;
      e["annotations"] = c.annotations;
      e["annotations_per_sample"] = c.annotations_per_sample;
      nlohmann::ordered_json freq;
      for (const auto& [cls, f] : c.label_freq) freq[std::to_string(cls)] = f;
      e["label_freq"] = freq;
      arr.push_back(e);
    }
    j["shards"] = arr;
    j["chi2"] = chi2;
    j["chi2_null_p99"] = chi2_null_p99;
    j["skewed"] = skewed;
    return j;
  }
};

namespace detail {

// Chi-square statistic over a shards x classes contingency table of
// annotation counts. Cells in rows or columns with empty margins contribute
// nothing.
inline double contingency_chi2(const std::vector<std::map<int, size_t>>& counts,
                               const std::set<int>& classes) {
  const size_t rows = counts.size();
  std::vector<double> row_sum(rows, 0.0);
  std::map<int, double> col_sum;
  double total = 0.0;
  for (size_t r = 0; r < rows; ++r) {
    for (const auto& [cls, n] : counts[r]) {
      row_sum[r] += static_cast<double>(n);
      col_sum[cls] += static_cast<double>(n);
      total += static_cast<double>(n);
    }
  }
  if (total == 0.0) return 0.0;
  double chi2 = 0.0;
  for (size_t r = 0; r < rows; ++r) {
    if (row_sum[r] == 0.0) continue;
    for (int cls : classes) {
      const double expect = row_sum[r] * col_sum[cls] / total;
      if (expect <= 0.0) continue;
      auto it = counts[r].find(cls);
      const double obs = it == counts[r].end() ? 0.0 : static_cast<double>(it->second);
      chi2 += (obs - expect) * (obs - expect) / expect;
    }
  }
  return chi2;
}

}  // namespace detail

// Quantifies label imbalance across client shards. The threshold comes from
// simulating random partitions of the same shard sizes, so "skewed" means
// more imbalance than chance would produce at the 99th percentile.
inline SkewReport skew_report(const Manifest& m, const SplitManifest& split,
                              uint64_t seed = 0, int null_draws = 200) {
  SkewReport rep;
  std::set<int> classes;
  for (const auto& s : m.samples) {
    for (const auto& [cls, n] : s.label_counts) classes.insert(cls);
  }

  auto shard_skew = [&](int shard, const std::vector<std::string>& ids) {
    ClientSkew c;
    c.shard = shard;
    c.samples = ids.size();
    std::map<int, size_t> counts;
    for (const auto& id : ids) {
      for (const auto& [cls, n] : m.by_id(id).label_counts) {
        counts[cls] += static_cast<size_t>(n);
        c.annotations += static_cast<size_t>(n);
      }
    }
    c.annotations_per_sample =
        c.samples == 0 ? 0.0
                       : static_cast<double>(c.annotations) / static_cast<double>(c.samples);
    for (const auto& [cls, n] : counts) {
      c.label_freq[cls] =
          c.annotations == 0 ? 0.0
                             : static_cast<double>(n) / static_cast<double>(c.annotations);
    }
    return std::make_pair(c, counts);
  };

  std::vector<std::map<int, size_t>> client_counts;
  auto server = shard_skew(0, split.server_ids);
  rep.shards.push_back(server.first);
  for (size_t c = 0; c < split.client_ids.size(); ++c) {
    auto one = shard_skew(static_cast<int>(c) + 1, split.client_ids[c]);
    rep.shards.push_back(one.first);
    client_counts.push_back(one.second);
  }
  rep.chi2 = detail::contingency_chi2(client_counts, classes);

  // Null distribution: shuffle the same samples into the same shard sizes.
  std::vector<const ManifestSample*> pool;
  for (const auto& ids : split.client_ids) {
    for (const auto& id : ids) pool.push_back(&m.by_id(id));
  }
  std::vector<double> null_stats;
  DetRng rng(derive_seed(seed, "skew-null"));
  for (int d = 0; d < null_draws; ++d) {
    rng.shuffle(pool);
    std::vector<std::map<int, size_t>> counts(split.client_ids.size());
    size_t at = 0;
    for (size_t c = 0; c < split.client_ids.size(); ++c) {
      for (size_t i = 0; i < split.client_ids[c].size(); ++i, ++at) {
        for (const auto& [cls, n] : pool[at]->label_counts) {
          counts[c][cls] += static_cast<size_t>(n);
        }
      }
    }
    null_stats.push_back(detail::contingency_chi2(counts, classes));
  }
  std::sort(null_stats.begin(), null_stats.end());
  if (!null_stats.empty()) {
    const size_t idx = static_cast<size_t>(
        std::ceil(0.99 * static_cast<double>(null_stats.size()))) - 1;
    rep.chi2_null_p99 = null_stats[std::min(idx, null_stats.size() - 1)];
  }
  rep.skewed = rep.chi2 > rep.chi2_null_p99;
  return rep;
}

// ---- class remapping ----

struct ClassMap {
  static constexpr int kDrop = -1;
  std::map<int, int> mapping;

  // Target class for a source class; kDrop removes the annotation.
  int apply(int cls) const {
    auto it = mapping.find(cls);
    if (it == mapping.end()) {
      throw UnknownClass("class " + std::to_string(cls) + " has no mapping");
    }
    return it->second;
  }
};

struct ClassMapStats {
  size_t annotations_in = 0;
  size_t annotations_out = 0;
  size_t dropped = 0;
};

inline Manifest apply_class_map(const Manifest& m, const ClassMap& map,
                                ClassMapStats* stats = nullptr) {
  Manifest out = m;
  ClassMapStats st;
  for (auto& s : out.samples) {
    std::map<int, int> remapped;
    for (const auto& [cls, n] : s.label_counts) {
      st.annotations_in += static_cast<size_t>(n);
      const int target = map.apply(cls);
      if (target == ClassMap::kDrop) {
        st.dropped += static_cast<size_t>(n);
        continue;
      }
      remapped[target] += n;
      st.annotations_out += static_cast<size_t>(n);
    }
    s.label_counts = std::move(remapped);

    auto remap_boxes = [&](std::vector<CenterBox>& boxes) {
      std::vector<CenterBox> kept;
      for (auto& b : boxes) {
        const int target = map.apply(b.class_id);
        if (target == ClassMap::kDrop) continue;
        b.class_id = target;
        kept.push_back(b);
      }
      boxes = std::move(kept);
    };
    remap_boxes(s.truths);
    remap_boxes(s.preds);
  }
  if (stats) *stats = st;
  return out;
}

}  // namespace fedsim
