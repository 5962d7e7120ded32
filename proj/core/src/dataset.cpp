#include "popgraph/dataset.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace popgraph {

using nlohmann::json;

namespace {

constexpr const char* kSchemaFormat = "popgraph.schema/1";
constexpr const char* kNormsFormat = "popgraph.norms/1";

json discrete_features_to_json(const std::vector<DiscreteFeature>& features) {
  json out = json::array();
  for (const auto& f : features) out.push_back({{"cardinality", f.cardinality}, {"name", f.name}});
  return out;
}

std::vector<DiscreteFeature> discrete_features_from_json(const json& arr) {
  std::vector<DiscreteFeature> out;
  for (const auto& item : arr) {
    out.push_back({item.at("name").get<std::string>(), item.at("cardinality").get<int>()});
  }
  return out;
}

void check_known_keys(const json& object, const std::set<std::string>& known,
                      const std::string& context) {
  for (const auto& [key, _] : object.items()) {
    if (!known.count(key)) {
      throw std::invalid_argument(context + ": unknown field '" + key + "'");
    }
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  return in;
}

}  // namespace

const PatientRecord& Dataset::by_id(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return r;
  }
  throw std::out_of_range("dataset has no record '" + id + "'");
}

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.id);
  return out;
}

// ---------------------------------------------------------------------------
// Schema IO
// ---------------------------------------------------------------------------

void save_schema(const FeatureSchema& schema, const std::string& path) {
  json doc;
  doc["format"] = kSchemaFormat;
  doc["static_discrete"] = discrete_features_to_json(schema.static_discrete);
  doc["static_continuous"] = schema.static_continuous;
  doc["ts_discrete"] = discrete_features_to_json(schema.ts_discrete);
  doc["ts_continuous"] = schema.ts_continuous;
  doc["max_timesteps"] = schema.max_timesteps;
  doc["treatment_features"] = schema.treatment_features;
  doc["graph_features"] = schema.graph_features;
  doc["sfm_maskable"] = schema.sfm_maskable;
  doc["ordinal_margins"] = schema.ordinal_margins;
  json sim;
  sim["exact_match"] = schema.static_similarity.exact_match;
  sim["age_feature"] = schema.static_similarity.age_feature;
  sim["age_tolerance"] = schema.static_similarity.age_tolerance;
  sim["cognitive"] = schema.static_similarity.cognitive;
  sim["imaging"] = schema.static_similarity.imaging;
  doc["static_similarity"] = sim;
  json tasks = json::array();
  for (const auto& t : schema.tasks) {
    tasks.push_back({{"name", t.name}, {"num_classes", t.num_classes}});
  }
  doc["tasks"] = tasks;
  open_out(path) << doc.dump(2) << '\n';
}

FeatureSchema load_schema(const std::string& path) {
  json doc = json::parse(open_in(path));
  if (doc.value("format", "") != kSchemaFormat) {
    throw std::invalid_argument("schema file '" + path + "' has unsupported format '" +
                                doc.value("format", "<missing>") + "'");
  }
  FeatureSchema schema;
  schema.static_discrete = discrete_features_from_json(doc.at("static_discrete"));
  schema.static_continuous = doc.at("static_continuous").get<std::vector<std::string>>();
  schema.ts_discrete = discrete_features_from_json(doc.at("ts_discrete"));
  schema.ts_continuous = doc.at("ts_continuous").get<std::vector<std::string>>();
  schema.max_timesteps = doc.at("max_timesteps").get<std::size_t>();
  schema.treatment_features = doc.at("treatment_features").get<std::vector<std::string>>();
  schema.graph_features = doc.at("graph_features").get<std::vector<std::string>>();
  schema.sfm_maskable = doc.value("sfm_maskable", std::vector<std::string>{});
  schema.ordinal_margins = doc.value("ordinal_margins", std::map<std::string, int>{});
  if (doc.contains("static_similarity")) {
    const json& sim = doc["static_similarity"];
    schema.static_similarity.exact_match = sim.value("exact_match", std::vector<std::string>{});
    schema.static_similarity.age_feature = sim.value("age_feature", std::string{});
    schema.static_similarity.age_tolerance = sim.value("age_tolerance", 2.0);
    schema.static_similarity.cognitive = sim.value("cognitive", std::vector<std::string>{});
    schema.static_similarity.imaging = sim.value("imaging", std::vector<std::string>{});
  }
  for (const auto& t : doc.value("tasks", json::array())) {
    schema.tasks.push_back({t.at("name").get<std::string>(), t.at("num_classes").get<int>()});
  }
  schema.validate();
  return schema;
}

// ---------------------------------------------------------------------------
// Record IO
// ---------------------------------------------------------------------------

namespace {

json ts_to_json(const std::vector<std::vector<double>>& series,
                const std::vector<std::vector<std::uint8_t>>& observed) {
  json out = json::array();
  for (std::size_t f = 0; f < series.size(); ++f) {
    json row = json::array();
    for (std::size_t t = 0; t < series[f].size(); ++t) {
      if (observed[f][t]) {
        row.push_back(series[f][t]);
      } else {
        row.push_back(nullptr);
      }
    }
    out.push_back(std::move(row));
  }
  return out;
}

json ts_to_json(const std::vector<std::vector<int>>& series,
                const std::vector<std::vector<std::uint8_t>>& observed) {
  json out = json::array();
  for (std::size_t f = 0; f < series.size(); ++f) {
    json row = json::array();
    for (std::size_t t = 0; t < series[f].size(); ++t) {
      if (observed[f][t]) {
        row.push_back(series[f][t]);
      } else {
        row.push_back(nullptr);
      }
    }
    out.push_back(std::move(row));
  }
  return out;
}

template <typename T>
void ts_from_json(const json& arr, std::vector<std::vector<T>>& series,
                  std::vector<std::vector<std::uint8_t>>& observed) {
  series.clear();
  observed.clear();
  for (const auto& row : arr) {
    std::vector<T> values;
    std::vector<std::uint8_t> flags;
    for (const auto& cell : row) {
      if (cell.is_null()) {
        values.push_back(T{});
        flags.push_back(0);
      } else {
        values.push_back(cell.get<T>());
        flags.push_back(1);
      }
    }
    series.push_back(std::move(values));
    observed.push_back(std::move(flags));
  }
}

}  // namespace

void save_records(const std::vector<PatientRecord>& records, const FeatureSchema& schema,
                  const std::string& path) {
  (void)schema;
  auto out = open_out(path);
  for (const auto& r : records) {
    json doc;
    doc["id"] = r.id;
    doc["d"] = r.d;
    doc["c"] = r.c;
    doc["t_d"] = ts_to_json(r.t_d, r.observed_d);
    doc["t_c"] = ts_to_json(r.t_c, r.observed_c);
    doc["labels"] = r.labels;
    out << doc.dump() << '\n';
  }
}

std::vector<PatientRecord> load_records(const std::string& path, const FeatureSchema& schema) {
  auto in = open_in(path);
  std::vector<PatientRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  static const std::set<std::string> known = {"id", "d", "c", "t_d", "t_c", "labels"};
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json doc;
    try {
      doc = json::parse(line);
    } catch (const std::exception& e) {
      throw std::invalid_argument("records line " + std::to_string(line_no) + ": " + e.what());
    }
    check_known_keys(doc, known, "records line " + std::to_string(line_no));
    PatientRecord r;
    r.id = doc.at("id").get<std::string>();
    r.d = doc.value("d", std::vector<int>{});
    r.c = doc.value("c", std::vector<double>{});
    ts_from_json<int>(doc.value("t_d", json::array()), r.t_d, r.observed_d);
    ts_from_json<double>(doc.value("t_c", json::array()), r.t_c, r.observed_c);
    r.labels = doc.value("labels", std::map<std::string, int>{});
    if (!ids.insert(r.id).second) {
      throw std::invalid_argument("records: duplicate id '" + r.id + "'");
    }
    validate_record(r, schema);
    records.push_back(std::move(r));
  }
  return records;
}

Dataset load_dataset(const std::string& schema_path, const std::string& records_path) {
  Dataset ds;
  ds.schema = load_schema(schema_path);
  ds.records = load_records(records_path, ds.schema);
  return ds;
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void fill_series(std::vector<T>& values, const std::vector<std::uint8_t>& observed, bool linear) {
  const std::size_t tau = values.size();
  std::vector<std::size_t> obs;
  for (std::size_t t = 0; t < tau; ++t) {
    if (observed[t]) obs.push_back(t);
  }
  if (obs.empty()) {
    std::fill(values.begin(), values.end(), T{});
    return;
  }
  for (std::size_t t = 0; t < obs.front(); ++t) values[t] = values[obs.front()];
  for (std::size_t t = obs.back() + 1; t < tau; ++t) values[t] = values[obs.back()];
  for (std::size_t k = 0; k + 1 < obs.size(); ++k) {
    const std::size_t a = obs[k], b = obs[k + 1];
    for (std::size_t t = a + 1; t < b; ++t) {
      if (linear) {
        const double frac = static_cast<double>(t - a) / static_cast<double>(b - a);
        values[t] = static_cast<T>((1.0 - frac) * static_cast<double>(values[a]) +
                                   frac * static_cast<double>(values[b]));
      } else {
        // nearest observed value; the earlier neighbour wins ties
        values[t] = (t - a <= b - t) ? values[a] : values[b];
      }
    }
  }
}

}  // namespace

PatientRecord interpolate_missing(const PatientRecord& record) {
  PatientRecord out = record;
  for (std::size_t f = 0; f < out.t_c.size(); ++f) {
    fill_series(out.t_c[f], out.observed_c[f], /*linear=*/true);
  }
  for (std::size_t f = 0; f < out.t_d.size(); ++f) {
    fill_series(out.t_d[f], out.observed_d[f], /*linear=*/false);
  }
  return out;
}

void interpolate_dataset(Dataset& dataset) {
  for (auto& r : dataset.records) r = interpolate_missing(r);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

NormStats compute_norm_stats(const Dataset& dataset, const std::vector<std::string>& train_ids) {
  const std::set<std::string> train(train_ids.begin(), train_ids.end());
  NormStats stats;
  auto update = [&stats](const std::string& name, double value) {
    auto [it, inserted] = stats.features.try_emplace(name, FeatureRange{value, value});
    if (!inserted) {
      it->second.min = std::min(it->second.min, value);
      it->second.max = std::max(it->second.max, value);
    }
  };
  for (const auto& r : dataset.records) {
    if (!train.count(r.id)) continue;
    for (std::size_t i = 0; i < dataset.schema.static_continuous.size(); ++i) {
      update(dataset.schema.static_continuous[i], r.c[i]);
    }
    for (std::size_t f = 0; f < dataset.schema.ts_continuous.size(); ++f) {
      for (std::size_t t = 0; t < dataset.schema.max_timesteps; ++t) {
        if (r.observed_c[f][t]) update(dataset.schema.ts_continuous[f], r.t_c[f][t]);
      }
    }
  }
  // Features with no training observations normalize to 0.
  for (const auto& name : dataset.schema.static_continuous) {
    stats.features.try_emplace(name, FeatureRange{0.0, 0.0});
  }
  for (const auto& name : dataset.schema.ts_continuous) {
    stats.features.try_emplace(name, FeatureRange{0.0, 0.0});
  }
  return stats;
}

double normalize_value(const NormStats& stats, const std::string& feature, double value) {
  auto it = stats.features.find(feature);
  if (it == stats.features.end()) {
    throw std::out_of_range("norm stats missing feature '" + feature + "'");
  }
  const double span = it->second.max - it->second.min;
  if (span == 0.0) return 0.0;
  return (value - it->second.min) / span;
}

double denormalize_value(const NormStats& stats, const std::string& feature, double value) {
  auto it = stats.features.find(feature);
  if (it == stats.features.end()) {
    throw std::out_of_range("norm stats missing feature '" + feature + "'");
  }
  const double span = it->second.max - it->second.min;
  return it->second.min + value * span;
}

PatientRecord normalize_record(const PatientRecord& record, const FeatureSchema& schema,
                               const NormStats& stats) {
  PatientRecord out = record;
  for (std::size_t i = 0; i < schema.static_continuous.size(); ++i) {
    out.c[i] = normalize_value(stats, schema.static_continuous[i], out.c[i]);
  }
  for (std::size_t f = 0; f < schema.ts_continuous.size(); ++f) {
    for (double& v : out.t_c[f]) v = normalize_value(stats, schema.ts_continuous[f], v);
  }
  return out;
}

Dataset normalize_dataset(const Dataset& dataset, const NormStats& stats) {
  Dataset out;
  out.schema = dataset.schema;
  out.records.reserve(dataset.records.size());
  for (const auto& r : dataset.records) {
    out.records.push_back(normalize_record(r, dataset.schema, stats));
  }
  return out;
}

void save_norm_stats(const NormStats& stats, const std::string& path) {
  json doc;
  doc["format"] = kNormsFormat;
  json features;
  for (const auto& [name, range] : stats.features) {
    features[name] = {{"max", range.max}, {"min", range.min}};
  }
  doc["features"] = features;
  open_out(path) << doc.dump(2) << '\n';
}

NormStats load_norm_stats(const std::string& path) {
  json doc = json::parse(open_in(path));
  if (doc.value("format", "") != kNormsFormat) {
    throw std::invalid_argument("norm stats file '" + path + "' has unsupported format");
  }
  NormStats stats;
  for (const auto& [name, range] : doc.at("features").items()) {
    stats.features[name] = {range.at("min").get<double>(), range.at("max").get<double>()};
  }
  return stats;
}

}  // namespace popgraph
