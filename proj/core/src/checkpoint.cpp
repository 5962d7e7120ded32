#include "popgraph/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "config_json.hpp"

namespace popgraph {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'G', 'C', 'K', 'P', 'T', '1', '\n'};
constexpr const char* kFormat = "popgraph.ckpt/1";

void write_u64(std::ostream& out, std::uint64_t value) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  std::uint64_t value = 0;
  for (int i = 0; i < 8; ++i) value |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return value;
}

void write_f64_le(std::ostream& out, double value) {
  std::uint64_t bits;
  std::memcpy(&bits, &value, 8);
  write_u64(out, bits);
}

double read_f64_le(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double value;
  std::memcpy(&value, &bits, 8);
  return value;
}

}  // namespace

std::uint64_t schema_fingerprint(const FeatureSchema& schema) {
  // FNV-1a over a canonical rendering of the feature layout.
  std::ostringstream text;
  for (const auto& f : schema.static_discrete) text << "d:" << f.name << ':' << f.cardinality << ';';
  for (const auto& n : schema.static_continuous) text << "c:" << n << ';';
  for (const auto& f : schema.ts_discrete) text << "td:" << f.name << ':' << f.cardinality << ';';
  for (const auto& n : schema.ts_continuous) text << "tc:" << n << ';';
  text << "tau:" << schema.max_timesteps;
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text.str()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  json header;
  header["format"] = kFormat;
  header["model_config"] = model_config_to_json(meta.model_config);
  header["phase"] = meta.phase;
  header["task"] = meta.task;
  header["steps"] = meta.steps;
  header["schema_fingerprint"] = meta.schema_fingerprint;
  json entries = json::array();
  for (const auto& [name, tensor] : params) {
    entries.push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  header["entries"] = entries;
  const std::string header_text = header.dump();

  out.write(kMagic, sizeof(kMagic));
  write_u64(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, tensor] : params) {
    for (double v : tensor.values()) write_f64_le(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

std::pair<CheckpointMeta, ParamStore> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const std::uint64_t header_len = read_u64(in);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  json header = json::parse(header_text);
  if (header.value("format", "") != kFormat) {
    throw std::runtime_error("unsupported checkpoint format in " + path);
  }

  CheckpointMeta meta;
  meta.model_config = model_config_from_json(header.at("model_config"));
  meta.phase = header.value("phase", "");
  meta.task = header.value("task", "");
  meta.steps = header.value("steps", std::int64_t{0});
  meta.schema_fingerprint = header.value("schema_fingerprint", std::uint64_t{0});

  ParamStore params;
  for (const auto& entry : header.at("entries")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(numel(shape));
    for (double& v : values) v = read_f64_le(in);
    params.insert(name, Tensor::from_values(shape, std::move(values)));
  }
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return {meta, std::move(params)};
}

}  // namespace popgraph
