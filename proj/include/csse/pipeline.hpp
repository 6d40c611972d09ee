/*
 * Copyright 2026 The CSSE-DDI Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef CSSE_PIPELINE_HPP_
#define CSSE_PIPELINE_HPP_

/// @file pipeline.hpp
/// Run configuration, the on-disk workspace and the file-backed stages the
/// command-line tool drives.
///
/// Every artifact carries the configuration digest and master seed: JSON
/// files as top-level keys, TSV and CSV files as a leading comment line.
/// Readers verify both, so a stage never consumes output produced under a
/// different configuration.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "csse/random.hpp"
#include "csse/relgraph.hpp"
#include "csse/scope.hpp"
#include "csse/search.hpp"
#include "csse/synthdata.hpp"
#include "json.hpp"

namespace csse {

namespace fs = std::filesystem;

/// Malformed configuration or command line. Exit status 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A stage could not run: missing prerequisite, digest mismatch, I/O.
/// Exit status 2.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "CSSE_DDI_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class DataSource { kSynth, kFile };

struct RunConfig {
  DataSource source = DataSource::kSynth;
  fs::path triples;  // absolute once parsed; file source only
  std::optional<std::size_t> num_nodes;
  std::optional<std::size_t> num_relations;
  SynthSpec synth;
  SplitMode split_mode = SplitMode::kS0;
  std::array<double, 3> ratios{0.7, 0.1, 0.2};
  double emerging_fraction = 0.1;
  SearchConfig search;
  Variant variant = Variant::kFull;
  fs::path output_dir;  // empty selects the default under the output root
  std::uint64_t master_seed = 1;
};

namespace detail {

inline nlohmann::json optional_json(const std::optional<std::size_t>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError(where + ": unknown field '" + k + "'");
    }
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& into, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(into);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace detail

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json synth = spec_to_json(c.synth);
  synth.erase("seed");  // derived from the master seed
  return {{"data",
           {{"source", c.source == DataSource::kSynth ? "synth" : "file"},
            {"triples", c.triples.string()},
            {"num_nodes", detail::optional_json(c.num_nodes)},
            {"num_relations", detail::optional_json(c.num_relations)}}},
          {"synth", synth},
          {"split",
           {{"mode", c.split_mode == SplitMode::kS0 ? "S0" : "S1"},
            {"ratios", c.ratios},
            {"emerging_fraction", c.emerging_fraction}}},
          {"search", config_to_json(c.search)},
          {"variant", variant_name(c.variant)},
          {"output_dir", c.output_dir.string()},
          {"master_seed", c.master_seed}};
}

/// Parses a run configuration. Relative paths resolve against base_dir and
/// the data file must exist.
inline RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  using detail::read_field;
  detail::reject_unknown(j, {"data", "synth", "split", "search", "variant", "output_dir", "master_seed"}, "config");
  RunConfig c;
  auto resolve = [&base_dir](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path.lexically_normal() : fs::absolute(base_dir / path).lexically_normal();
  };
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"source", "triples", "num_nodes", "num_relations"}, "data");
    std::string source = "synth", triples;
    read_field(d, "source", source, "data");
    read_field(d, "triples", triples, "data");
    if (source == "synth") {
      c.source = DataSource::kSynth;
    } else if (source == "file") {
      c.source = DataSource::kFile;
    } else {
      throw ConfigError("data.source: expected 'synth' or 'file', got '" + source + "'");
    }
    for (const char* key : {"num_nodes", "num_relations"}) {
      if (d.contains(key) && !d.at(key).is_null()) {
        std::size_t v = 0;
        read_field(d, key, v, "data");
        (std::string(key) == "num_nodes" ? c.num_nodes : c.num_relations) = v;
      }
    }
    if (c.source == DataSource::kFile) {
      if (triples.empty()) throw ConfigError("data.triples: required when data.source is 'file'");
      c.triples = resolve(triples);
      if (!fs::is_regular_file(c.triples)) throw ConfigError("data.triples: no such file " + c.triples.string());
    }
  }
  if (j.contains("synth")) {
    if (j.at("synth").contains("seed")) throw ConfigError("synth.seed: derived from master_seed, not configurable");
    try {
      c.synth = spec_from_json(j.at("synth"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::reject_unknown(s, {"mode", "ratios", "emerging_fraction"}, "split");
    std::string mode = "S0";
    read_field(s, "mode", mode, "split");
    if (mode != "S0" && mode != "S1") throw ConfigError("split.mode: expected 'S0' or 'S1', got '" + mode + "'");
    c.split_mode = mode == "S0" ? SplitMode::kS0 : SplitMode::kS1;
    read_field(s, "ratios", c.ratios, "split");
    read_field(s, "emerging_fraction", c.emerging_fraction, "split");
    if (!(c.emerging_fraction > 0.0 && c.emerging_fraction < 1.0)) {
      throw ConfigError("split.emerging_fraction: must lie in (0, 1)");
    }
  }
  if (j.contains("search")) {
    try {
      c.search = config_from_json(j.at("search"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("variant")) {
    std::string v;
    read_field(j, "variant", v, "config");
    try {
      c.variant = variant_from_name(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("variant: ") + e.what());
    }
  }
  try {
    c.search.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("search: ") + e.what());
  }
  for (double r : c.ratios) {
    if (!(r > 0.0)) throw ConfigError("split.ratios: every ratio must be positive");
  }
  if (std::abs(c.ratios[0] + c.ratios[1] + c.ratios[2] - 1.0) > 1e-9) {
    throw ConfigError("split.ratios: must sum to 1");
  }
  std::string out;
  read_field(j, "output_dir", out, "config");
  if (!out.empty()) c.output_dir = resolve(out);
  read_field(j, "master_seed", c.master_seed, "config");
  return c;
}

/// Applies `dotted.key=value` to a configuration document. The key must
/// name an existing scalar (or null) field; the value is read as JSON when
/// it parses and as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("--set: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object() || node->is_array()) throw ConfigError("--set: '" + key + "' is not a scalar field");
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded() || value.is_object() || value.is_array()) value = text;
  *node = std::move(value);
}

/// Reads a config file (or the defaults when path is empty) and applies
/// overrides. Parse errors name the file, line and column.
inline RunConfig load_run_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json doc = nlohmann::json::object();
  fs::path base = fs::current_path();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    base = fs::absolute(path).parent_path();
  }
  RunConfig c = run_config_from_json(doc, base);
  if (overrides.empty()) return c;
  nlohmann::json full = run_config_to_json(c);
  for (const auto& o : overrides) apply_override(full, o);
  return run_config_from_json(full, fs::current_path());
}

/// FNV-1a of the canonical configuration with output_dir removed, in hex.
inline std::string config_digest(const RunConfig& c) {
  nlohmann::json j = run_config_to_json(c);
  j.erase("output_dir");
  return detail::hex64(fnv1a(j.dump()));
}

/// Explicit output_dir, else $CSSE_DDI_OUTPUT_ROOT/run-<digest>, else
/// runs/run-<digest> under the working directory.
inline fs::path resolve_output_dir(const RunConfig& c) {
  if (!c.output_dir.empty()) return c.output_dir;
  const char* root = std::getenv(kOutputRootEnv);
  const fs::path base = root && *root ? fs::path(root) : fs::current_path() / "runs";
  return base / ("run-" + config_digest(c));
}

// ---------------------------------------------------------------------------
// Workspace
// ---------------------------------------------------------------------------

/// Exclusive ownership of an output directory for one invocation.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) {
      throw StageError("output directory " + dir.string() + " is locked by another invocation (remove " +
                       path_.string() + " if it is stale)");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

/// Stamped artifact I/O rooted at the output directory.
class Workspace {
 public:
  Workspace(fs::path root, std::string digest, std::uint64_t master_seed)
      : root_(std::move(root)), digest_(std::move(digest)), master_seed_(master_seed) {}

  Workspace(const RunConfig& c) : Workspace(resolve_output_dir(c), config_digest(c), c.master_seed) {}

  const fs::path& root() const { return root_; }
  const std::string& digest() const { return digest_; }
  std::uint64_t master_seed() const { return master_seed_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }

  std::string stamp() const { return "config_digest=" + digest_ + " master_seed=" + std::to_string(master_seed_); }

  /// Throws StageError naming the file when a prerequisite is absent.
  fs::path require(const std::string& rel) const {
    const fs::path p = path(rel);
    if (!fs::exists(p)) throw StageError("missing prerequisite artifact: " + p.string());
    return p;
  }

  void write_json(const std::string& rel, nlohmann::json payload) const {
    payload["config_digest"] = digest_;
    payload["master_seed"] = master_seed_;
    write_text(rel, payload.dump(1) + "\n");
  }

  nlohmann::json read_json(const std::string& rel) const {
    const fs::path p = require(rel);
    std::ifstream in(p);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw StageError(p.string() + ": " + e.what());
    }
    if (!j.is_object() || j.value("config_digest", std::string()) != digest_ ||
        j.value("master_seed", std::uint64_t{0}) != master_seed_ || !j.contains("master_seed")) {
      throw StageError(p.string() + ": config digest or master seed does not match the current configuration (" +
                       stamp() + ")");
    }
    return j;
  }

  void write_triples(const std::string& rel, std::span<const Triple> ts) const {
    ensure_parent(rel);
    csse::write_triples(path(rel), ts, stamp());
  }
  std::vector<Triple> read_triples(const std::string& rel, std::size_t nodes, std::size_t relations) const {
    verify_stamp(rel);
    std::ifstream probe(path(rel));
    std::string first, second;
    std::getline(probe, first);
    if (!std::getline(probe, second)) return {};  // stamp only: empty split
    return load_triples(path(rel), nodes, relations).triples;
  }

  void write_negatives(const std::string& rel, std::span<const Triple> ts) const {
    ensure_parent(rel);
    csse::write_negatives(path(rel), ts, stamp());
  }
  std::vector<Triple> read_negatives(const std::string& rel) const {
    verify_stamp(rel);
    return load_negatives(path(rel));
  }

  void write_scopes(const std::string& rel, std::span<const ScopeDecision> ds) const {
    ensure_parent(rel);
    write_scope_decisions(path(rel), ds, stamp());
  }
  std::vector<ScopeDecision> read_scopes(const std::string& rel) const {
    verify_stamp(rel);
    return read_scope_decisions(path(rel));
  }

  /// `epoch,loss` rows of mean batch loss.
  void write_loss_csv(const std::string& rel, const TrainTrace& t) const {
    std::ostringstream os;
    os << "# " << stamp() << "\nepoch,loss\n" << std::setprecision(17);
    for (std::size_t e = 0; e < t.epoch_loss.size(); ++e) os << e << ',' << t.epoch_loss[e] << '\n';
    write_text(rel, os.str());
  }

  /// Checks the leading `# config_digest=... master_seed=...` line.
  void verify_stamp(const std::string& rel) const {
    const fs::path p = require(rel);
    std::ifstream in(p);
    std::string first;
    std::getline(in, first);
    if (first != "# " + stamp()) {
      throw StageError(p.string() + ": config digest or master seed does not match the current configuration (" +
                       stamp() + ")");
    }
  }

 private:
  void ensure_parent(const std::string& rel) const { fs::create_directories(path(rel).parent_path()); }

  void write_text(const std::string& rel, const std::string& text) const {
    ensure_parent(rel);
    std::ofstream out(path(rel), std::ios::binary);
    if (!out) throw StageError("cannot write " + path(rel).string());
    out << text;
  }

  fs::path root_;
  std::string digest_;
  std::uint64_t master_seed_ = 0;
};

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest", "synth",  "split",    "supernet", "partition", "subtrain",
                                              "search", "scopes", "finetune", "eval",     "report"};
  return names;
}

namespace detail {

inline nlohmann::json trace_json(const TrainTrace& t) {
  return {{"steps", t.steps}, {"epoch_loss", t.epoch_loss}, {"epoch_median", t.epoch_median}};
}

inline TrainTrace trace_from_json(const nlohmann::json& j) {
  TrainTrace t;
  t.steps = j.at("steps").get<std::size_t>();
  t.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  t.epoch_median = j.at("epoch_median").get<std::vector<double>>();
  return t;
}

inline nlohmann::json child_json(const SubSupernet& c) {
  return {{"pinned", kMesNames[static_cast<std::size_t>(c.pinned)]}, {"params", params_to_json(c.params)}};
}

inline SubSupernet child_from_json(const nlohmann::json& j) {
  SubSupernet c;
  c.pinned = static_cast<MesOp>(detail::index_of(kMesNames, j.at("pinned").get<std::string>(), "mes"));
  c.params = params_from_json(j.at("params"));
  return c;
}

inline std::string child_file(const std::string& dir, std::size_t k) {
  return dir + "/child_" + std::to_string(k) + ".json";
}

inline std::vector<SubSupernet> read_children(const Workspace& ws, const std::string& dir) {
  const auto index = ws.read_json(dir + "/index.json");
  std::vector<SubSupernet> children;
  for (std::size_t k = 0; k < index.at("count").get<std::size_t>(); ++k) {
    children.push_back(child_from_json(ws.read_json(child_file(dir, k))));
  }
  return children;
}

inline void write_children(const Workspace& ws, const std::string& dir, const std::vector<SubSupernet>& children) {
  nlohmann::json pinned = nlohmann::json::array();
  for (std::size_t k = 0; k < children.size(); ++k) {
    ws.write_json(child_file(dir, k), child_json(children[k]));
    pinned.push_back(kMesNames[static_cast<std::size_t>(children[k].pinned)]);
  }
  ws.write_json(dir + "/index.json", {{"count", children.size()}, {"pinned", pinned}});
}

/// Adds this stage's wall-clock seconds to timings.json.
inline void record_time(const Workspace& ws, const std::string& stage, double seconds) {
  nlohmann::json t = nlohmann::json::object();
  if (fs::exists(ws.path("timings.json"))) {
    try {
      t = ws.read_json("timings.json").at("seconds");
    } catch (const StageError&) {
      t = nlohmann::json::object();  // written under another configuration
    }
  }
  t[stage] = seconds;
  ws.write_json("timings.json", {{"seconds", t}});
}

}  // namespace detail

struct DatasetInfo {
  std::size_t num_nodes = 0;
  std::size_t num_relations = 0;
};

inline DatasetInfo read_dataset_info(const Workspace& ws) {
  const auto j = ws.read_json("data/dataset.json");
  return {j.at("num_nodes").get<std::size_t>(), j.at("num_relations").get<std::size_t>()};
}

/// Generates the synthetic dataset and its planted-rule sidecar.
inline void stage_synth(const RunConfig& c, const Workspace& ws) {
  SynthSpec spec = c.synth;
  spec.seed = StageSeeds::from(c.master_seed).synth;
  const SynthData d = generate(spec);
  ws.write_triples("data/triples.tsv", d.triples);
  ws.write_json("data/rules.json", rules_sidecar(spec, d));
  ws.write_json("data/dataset.json", {{"source", "synth"},
                                      {"num_nodes", spec.num_nodes},
                                      {"num_relations", spec.num_relations},
                                      {"num_triples", d.triples.size()}});
}

/// Validates an external triple file and copies it into the workspace.
inline void stage_ingest(const RunConfig& c, const Workspace& ws) {
  if (c.source != DataSource::kFile) throw ConfigError("ingest: data.source must be 'file'");
  TripleSet set;
  try {
    set = load_triples(c.triples, c.num_nodes, c.num_relations);
  } catch (const std::runtime_error& e) {
    throw StageError(e.what());
  }
  ws.write_triples("data/triples.tsv", set.triples);
  ws.write_json("data/dataset.json", {{"source", c.triples.string()},
                                      {"num_nodes", set.num_nodes},
                                      {"num_relations", set.num_relations},
                                      {"num_triples", set.triples.size()}});
}

/// Writes train/valid/test and, for multi-label tasks, their negatives.
inline void stage_split(const RunConfig& c, const Workspace& ws) {
  const DatasetInfo info = read_dataset_info(ws);
  const auto all = ws.read_triples("data/triples.tsv", info.num_nodes, info.num_relations);
  const StageSeeds seeds = StageSeeds::from(c.master_seed);
  const SplitBundle b = make_splits(all, c.split_mode, c.ratios, seeds.split, c.emerging_fraction);
  ws.write_triples("split/train.txt", b.train);
  ws.write_triples("split/valid.txt", b.valid);
  ws.write_triples("split/test.txt", b.test);
  nlohmann::json meta = {{"mode", c.split_mode == SplitMode::kS0 ? "S0" : "S1"},
                         {"emerging", b.emerging},
                         {"sizes", {b.train.size(), b.valid.size(), b.test.size()}}};
  if (c.search.task == TaskType::kMultiLabel) {
    const SplitNegatives n = sample_split_negatives(all, b, c.search.negatives_per_positive, seeds.negatives);
    ws.write_negatives("split/negatives_train.tsv", n.train);
    ws.write_negatives("split/negatives_valid.tsv", n.valid);
    ws.write_negatives("split/negatives_test.tsv", n.test);
    meta["negatives"] = {n.train.size(), n.valid.size(), n.test.size()};
    meta["saturated"] = n.saturated;
  }
  ws.write_json("split/split.json", meta);
}

/// Training graph and labelled queries rebuilt from the split artifacts.
inline PreparedData load_prepared(const RunConfig& c, const Workspace& ws) {
  const DatasetInfo info = read_dataset_info(ws);
  const auto meta = ws.read_json("split/split.json");
  SplitBundle b;
  b.mode = meta.at("mode").get<std::string>() == "S0" ? SplitMode::kS0 : SplitMode::kS1;
  b.emerging = meta.at("emerging").get<std::vector<NodeId>>();
  b.seed = StageSeeds::from(c.master_seed).split;
  b.train = ws.read_triples("split/train.txt", info.num_nodes, info.num_relations);
  b.valid = ws.read_triples("split/valid.txt", info.num_nodes, info.num_relations);
  b.test = ws.read_triples("split/test.txt", info.num_nodes, info.num_relations);
  if (c.search.task == TaskType::kMultiLabel) {
    SplitNegatives n;
    n.train = ws.read_negatives("split/negatives_train.tsv");
    n.valid = ws.read_negatives("split/negatives_valid.tsv");
    n.test = ws.read_negatives("split/negatives_test.tsv");
    return prepare_data(info.num_nodes, info.num_relations, b, c.search.task, &n);
  }
  return prepare_data(info.num_nodes, info.num_relations, b, c.search.task);
}

inline void stage_supernet(const RunConfig& c, const Workspace& ws) {
  const PreparedData data = load_prepared(c, ws);
  const StageSeeds seeds = StageSeeds::from(c.master_seed);
  SupernetParams params = initial_params(data, c.search, seeds);
  const TrainTrace trace = supernet_stage(params, data, c.search, c.variant, seeds);
  ws.write_json("supernet/params.json", {{"params", params_to_json(params)}, {"trace", detail::trace_json(trace)}});
  ws.write_loss_csv("supernet/loss.csv", trace);
}

inline void stage_partition(const RunConfig& c, const Workspace& ws) {
  const auto j = ws.read_json("supernet/params.json");
  detail::write_children(ws, "partition", partition_stage(params_from_json(j.at("params")), c.search, c.variant));
}

inline void stage_subtrain(const RunConfig& c, const Workspace& ws) {
  const PreparedData data = load_prepared(c, ws);
  auto children = detail::read_children(ws, "partition");
  const auto traces = subtrain_stage(children, data, c.search, c.variant, StageSeeds::from(c.master_seed));
  detail::write_children(ws, "subtrain", children);
  nlohmann::json tj = nlohmann::json::array();
  for (std::size_t k = 0; k < traces.size(); ++k) {
    tj.push_back(detail::trace_json(traces[k]));
    ws.write_loss_csv("subtrain/loss_" + std::to_string(k) + ".csv", traces[k]);
  }
  ws.write_json("subtrain/traces.json", {{"traces", tj}});
}

inline void stage_search(const RunConfig& c, const Workspace& ws) {
  ws.require("partition/index.json");
  const PreparedData data = load_prepared(c, ws);
  const auto children = detail::read_children(ws, "subtrain");
  const EncodingResult r = search_stage(children, data, c.search, c.variant, StageSeeds::from(c.master_seed));
  nlohmann::json per_child = nlohmann::json::array();
  for (std::size_t k = 0; k < r.genotypes.size(); ++k) {
    per_child.push_back({{"pinned", kMesNames[static_cast<std::size_t>(children[k].pinned)]},
                         {"genotype", genotype_to_json(r.genotypes[k])},
                         {"label", r.genotypes[k].to_string()},
                         {"score", r.scores[k]}});
  }
  ws.write_json("search/genotypes.json", {{"children", per_child}, {"winner", r.winner}, {"evaluations", r.evaluations}});
}

struct SearchOutcome {
  std::size_t winner = 0;
  Genotype genotype;
};

inline SearchOutcome read_search(const Workspace& ws) {
  const auto j = ws.read_json("search/genotypes.json");
  SearchOutcome o;
  o.winner = j.at("winner").get<std::size_t>();
  o.genotype = genotype_from_json(j.at("children").at(o.winner).at("genotype"));
  return o;
}

inline SplitScopes read_split_scopes(const Workspace& ws) {
  return {ws.read_scopes("scopes/train.tsv"), ws.read_scopes("scopes/valid.tsv"), ws.read_scopes("scopes/test.tsv")};
}

/// Histogram document: the combined eta×eta counts over every query, the
/// per-split counts, and the empty cells.
inline nlohmann::json histogram_json(const SplitScopes& s, std::size_t eta) {
  const auto all = s.all();
  const ScopeHistogram h = scope_histogram(all, eta);
  nlohmann::json zero = nlohmann::json::array();
  for (std::size_t i = 0; i < eta; ++i) {
    for (std::size_t j = 0; j < eta; ++j) {
      if (h.counts[i][j] == 0) zero.push_back({i + 1, j + 1});
    }
  }
  return {{"eta", eta},
          {"counts", histogram_to_json(h)},
          {"query_count", all.size()},
          {"zero_cells", zero},
          {"per_split",
           {{"train", histogram_to_json(scope_histogram(s.train, eta))},
            {"valid", histogram_to_json(scope_histogram(s.valid, eta))},
            {"test", histogram_to_json(scope_histogram(s.test, eta))}}}};
}

inline void stage_scopes(const RunConfig& c, const Workspace& ws) {
  const PreparedData data = load_prepared(c, ws);
  const SearchOutcome o = read_search(ws);
  const SubSupernet winner = detail::child_from_json(ws.read_json(detail::child_file("subtrain", o.winner)));
  TrainTrace adapt;
  const SplitScopes s =
      scopes_stage(winner.params, o.genotype, data, c.search, c.variant, StageSeeds::from(c.master_seed).scopes, &adapt);
  ws.write_scopes("scopes/train.tsv", s.train);
  ws.write_scopes("scopes/valid.tsv", s.valid);
  ws.write_scopes("scopes/test.tsv", s.test);
  ws.write_json("scopes/histogram.json", histogram_json(s, c.search.eta));
  ws.write_json("scopes/adapt.json", {{"trace", detail::trace_json(adapt)}});
  ws.write_loss_csv("scopes/adapt_loss.csv", adapt);
}

inline void stage_finetune(const RunConfig& c, const Workspace& ws) {
  const PreparedData data = load_prepared(c, ws);
  const SearchOutcome o = read_search(ws);
  const FinetuneResult f = finetune_stage(o.genotype, read_split_scopes(ws), data, c.search,
                                          StageSeeds::from(c.master_seed));
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : f.runs) {
    runs.push_back({{"learning_rate", r.learning_rate},
                    {"weight_decay", r.weight_decay},
                    {"best_valid", r.best_valid},
                    {"best_epoch", r.best_epoch},
                    {"epoch_loss", r.epoch_loss},
                    {"valid_trace", r.valid_trace},
                    {"failure", r.failure}});
  }
  ws.write_json("finetune/runs.json", {{"runs", runs}, {"best_run", f.best_run}, {"valid_metric", f.valid_metric}});
  ws.write_json("finetune/params.json", {{"params", params_to_json(f.params)}});
}

inline void stage_eval(const RunConfig& c, const Workspace& ws) {
  const PreparedData data = load_prepared(c, ws);
  const SearchOutcome o = read_search(ws);
  const SupernetParams params = params_from_json(ws.read_json("finetune/params.json").at("params"));
  ws.write_json("eval/metrics.json", {{"metrics", eval_stage(params, o.genotype, read_split_scopes(ws), data, c.search)}});
}

/// Artifacts the report aggregates; all must carry the current digest.
inline std::vector<std::string> report_inputs(const Workspace& ws) {
  std::vector<std::string> files{"data/dataset.json",  "data/triples.tsv",     "split/split.json",
                                 "split/train.txt",    "split/valid.txt",      "split/test.txt",
                                 "supernet/params.json", "supernet/loss.csv",  "partition/index.json",
                                 "subtrain/index.json", "subtrain/traces.json", "search/genotypes.json",
                                 "scopes/train.tsv",   "scopes/valid.tsv",     "scopes/test.tsv",
                                 "scopes/histogram.json", "scopes/adapt.json", "finetune/runs.json",
                                 "finetune/params.json", "eval/metrics.json"};
  if (fs::exists(ws.path("split/negatives_train.tsv"))) {
    for (const char* s : {"split/negatives_train.tsv", "split/negatives_valid.tsv", "split/negatives_test.tsv"}) {
      files.push_back(s);
    }
  }
  return files;
}

/// Aggregates the RunReport. Refuses when any artifact's digest differs.
/// Work counts stand in for wall-clock time so the report is reproducible;
/// seconds per stage live in timings.json.
inline nlohmann::json stage_report(const RunConfig& c, const Workspace& ws) {
  for (const auto& f : report_inputs(ws)) {
    if (f.ends_with(".json")) {
      ws.read_json(f);
    } else {
      ws.verify_stamp(f);
    }
  }
  const auto search = ws.read_json("search/genotypes.json");
  const std::size_t winner = search.at("winner").get<std::size_t>();
  nlohmann::json genotypes = nlohmann::json::array();
  for (const auto& ch : search.at("children")) {
    genotypes.push_back({{"pinned", ch.at("pinned")}, {"genotype", ch.at("genotype")}, {"label", ch.at("label")},
                         {"score", ch.at("score")}});
  }
  const auto& win = search.at("children").at(winner);
  std::size_t subtrain_steps = 0;
  for (const auto& t : ws.read_json("subtrain/traces.json").at("traces")) subtrain_steps += t.at("steps").get<std::size_t>();
  std::size_t finetune_epochs = 0;
  for (const auto& r : ws.read_json("finetune/runs.json").at("runs")) finetune_epochs += r.at("epoch_loss").size();
  const auto hist = ws.read_json("scopes/histogram.json");
  nlohmann::json metrics = ws.read_json("eval/metrics.json").at("metrics");
  metrics["scope_histogram"] = hist.at("counts");
  const auto split_meta = ws.read_json("split/split.json");
  nlohmann::json report = {
      {"config_digest", ws.digest()},
      {"master_seed", c.master_seed},
      {"seeds", StageSeeds::from(c.master_seed).to_json()},
      {"genotypes", genotypes},
      {"winner",
       {{"child", winner}, {"pinned", win.at("pinned")}, {"genotype", win.at("genotype")}, {"label", win.at("label")},
        {"score", win.at("score")}, {"variant", variant_name(c.variant)}}},
      {"scopes_path", "scopes"},
      {"warnings", {{"negatives_saturated", split_meta.value("saturated", std::size_t{0})}}},
      {"metrics", metrics},
      {"timings",
       {{"supernet_steps", ws.read_json("supernet/params.json").at("trace").at("steps")},
        {"subsupernet_steps", subtrain_steps},
        {"search_evaluations", search.at("evaluations")},
        {"scope_adapt_steps", ws.read_json("scopes/adapt.json").at("trace").at("steps")},
        {"finetune_epochs", finetune_epochs},
        {"wall_clock", "timings.json"}}}};
  std::ofstream out(ws.path("report.json"), std::ios::binary);
  if (!out) throw StageError("cannot write " + ws.path("report.json").string());
  out << report.dump(1) << "\n";
  return report;
}

namespace detail {
inline void dispatch_stage(const std::string& name, const RunConfig& c, const Workspace& ws) {
  if (name == "synth") {
    stage_synth(c, ws);
  } else if (name == "ingest") {
    stage_ingest(c, ws);
  } else if (name == "split") {
    stage_split(c, ws);
  } else if (name == "supernet") {
    stage_supernet(c, ws);
  } else if (name == "partition") {
    stage_partition(c, ws);
  } else if (name == "subtrain") {
    stage_subtrain(c, ws);
  } else if (name == "search") {
    stage_search(c, ws);
  } else if (name == "scopes") {
    stage_scopes(c, ws);
  } else if (name == "finetune") {
    stage_finetune(c, ws);
  } else if (name == "eval") {
    stage_eval(c, ws);
  } else if (name == "report") {
    stage_report(c, ws);
  } else {
    throw ConfigError("unknown stage '" + name + "'");
  }
}
}  // namespace detail

/// Runs one named stage under the directory lock, recording its duration.
inline void run_stage(const std::string& name, const RunConfig& c, const Workspace& ws) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    detail::dispatch_stage(name, c, ws);
  } catch (const ConfigError&) {
    throw;
  } catch (const NumericalError& e) {
    throw NumericalError("stage " + name + ": " + e.what());
  } catch (const std::exception& e) {
    throw StageError("stage " + name + ": " + e.what());
  }
  detail::record_time(ws, name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}


/// Every stage in order, starting from synth or ingest per the data source.
inline nlohmann::json run_all(const RunConfig& c, const Workspace& ws) {
  run_stage(c.source == DataSource::kSynth ? "synth" : "ingest", c, ws);
  for (const char* s : {"split", "supernet", "partition", "subtrain", "search", "scopes", "finetune", "eval", "report"}) {
    run_stage(s, c, ws);
  }
  std::ifstream in(ws.path("report.json"));
  return nlohmann::json::parse(in);
}

}  // namespace csse

#endif  // CSSE_PIPELINE_HPP_
