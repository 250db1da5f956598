#pragma once

// Checkpoints: a JSON manifest plus one little-endian blob. Model checkpoints
// store parameters at the configured precision; resume states store
// parameters and Adam moments in f64 so training continues bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "care/errors.hpp"
#include "care/model.hpp"
#include "care/rng.hpp"
#include "care/text.hpp"

namespace care {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }
inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ParseError("unknown precision '" + s + "'");
}

inline std::size_t element_bytes(Precision p) { return p == Precision::f32 ? 4 : 8; }

/// Value as it reads back from storage at precision `p`.
inline double round_to(Precision p, double v) { return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v; }

struct BlobEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;  // bytes
  std::size_t count = 0;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, std::size_t bytes) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < bytes; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return bits;
}

inline void append_values(std::string& blob, std::span<const double> values, Precision p) {
  for (double v : values) {
    if (p == Precision::f32) {
      put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    } else {
      put_le(blob, std::bit_cast<std::uint64_t>(v), 8);
    }
  }
}

inline std::vector<double> read_values(const std::string& blob, const BlobEntry& e, Precision p) {
  const std::size_t w = element_bytes(p);
  if (e.offset + e.count * w > blob.size()) throw ParseError("blob too short for tensor '" + e.name + "'");
  std::vector<double> out(e.count);
  for (std::size_t i = 0; i < e.count; ++i) {
    const std::uint64_t bits = get_le(blob, e.offset + i * w, w);
    out[i] = p == Precision::f32 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)))
                                 : std::bit_cast<double>(bits);
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace detail

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["num_heads"] = c.num_heads;
  j["d_ff"] = c.d_ff;
  j["enc_layers"] = c.enc_layers;
  j["dec_layers"] = c.dec_layers;
  j["dropout"] = c.dropout;
  j["max_nodes"] = c.max_nodes;
  j["top_k"] = c.top_k;
  j["max_context"] = c.max_context;
  j["max_response"] = c.max_response;
  j["num_emotions"] = c.num_emotions;
  j["tie_output"] = c.tie_output;
  j["no_reasoning"] = c.no_reasoning;
  j["no_condition"] = c.no_condition;
  j["use_latent_mean"] = c.use_latent_mean;
  j["recon_mode"] = c.recon_mode == ReconMode::full ? "full" : "sampled";
  j["full_recon_max_nodes"] = c.full_recon_max_nodes;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.enc_layers = j.at("enc_layers").get<std::size_t>();
    c.dec_layers = j.at("dec_layers").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.max_nodes = j.at("max_nodes").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.max_context = j.at("max_context").get<std::size_t>();
    c.max_response = j.at("max_response").get<std::size_t>();
    c.num_emotions = j.at("num_emotions").get<std::size_t>();
    c.tie_output = j.at("tie_output").get<bool>();
    c.no_reasoning = j.at("no_reasoning").get<bool>();
    c.no_condition = j.at("no_condition").get<bool>();
    c.use_latent_mean = j.at("use_latent_mean").get<bool>();
    c.recon_mode = j.at("recon_mode").get<std::string>() == "full" ? ReconMode::full : ReconMode::sampled;
    c.full_recon_max_nodes = j.at("full_recon_max_nodes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  return c;
}

/// Named tensor groups written into one blob, in order.
struct TensorGroup {
  std::string prefix;  // "" for parameters, "adam.m." / "adam.v." for moments
  std::vector<std::pair<std::string, std::span<const double>>> tensors;
  std::vector<Shape> shapes;
};

struct CheckpointMeta {
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::uint64_t vocab_hash = 0;
  std::map<std::string, std::string> config_echo;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
};

struct LoadedCheckpoint {
  CheckpointMeta meta;
  ModelConfig model_config;
  std::map<std::string, std::vector<double>> tensors;
  std::map<std::string, Shape> shapes;
};

/// Writes `<stem>.json` and `<stem>.bin` under `dir`.
inline void write_checkpoint(const std::filesystem::path& dir, const std::string& stem, const CheckpointMeta& meta,
                             const ModelConfig& model_config, const std::vector<TensorGroup>& groups) {
  std::filesystem::create_directories(dir);
  std::string blob;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < g.tensors.size(); ++i) {
      const auto& [name, values] = g.tensors[i];
      nlohmann::ordered_json t;
      t["name"] = g.prefix + name;
      t["shape"] = {g.shapes[i].rows, g.shapes[i].cols};
      t["offset"] = blob.size();
      t["count"] = values.size();
      tensors.push_back(t);
      detail::append_values(blob, values, meta.precision);
    }
  }
  nlohmann::ordered_json m;
  m["format"] = "care-checkpoint";
  m["version"] = 1;
  m["precision"] = to_string(meta.precision);
  m["byte_order"] = "little";
  m["blob"] = stem + ".bin";
  m["seed"] = meta.seed;
  m["step"] = meta.step;
  m["vocab_hash"] = detail::hex64(meta.vocab_hash);
  m["model"] = model_config_json(model_config);
  m["config"] = meta.config_echo;
  m["extra"] = meta.extra;
  m["tensors"] = tensors;
  detail::write_file(dir / (stem + ".bin"), blob);
  detail::write_file(dir / (stem + ".json"), m.dump(2) + "\n");
}

inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir, const std::string& stem) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(dir / (stem + ".json")));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()));
  }
  LoadedCheckpoint out;
  try {
    if (m.at("format").get<std::string>() != "care-checkpoint") throw ParseError("not a checkpoint manifest");
    out.meta.precision = parse_precision(m.at("precision").get<std::string>());
    out.meta.seed = m.at("seed").get<std::uint64_t>();
    out.meta.step = m.at("step").get<std::size_t>();
    out.meta.vocab_hash = std::stoull(m.at("vocab_hash").get<std::string>(), nullptr, 16);
    out.meta.config_echo = m.at("config").get<std::map<std::string, std::string>>();
    out.meta.extra = m.value("extra", nlohmann::ordered_json::object());
    out.model_config = model_config_from_json(m.at("model"));
    const std::string blob = detail::read_file(dir / m.at("blob").get<std::string>());
    for (const auto& t : m.at("tensors")) {
      BlobEntry e;
      e.name = t.at("name").get<std::string>();
      e.rows = t.at("shape").at(0).get<std::size_t>();
      e.cols = t.at("shape").at(1).get<std::size_t>();
      e.offset = t.at("offset").get<std::size_t>();
      e.count = t.at("count").get<std::size_t>();
      if (e.count != e.rows * e.cols) throw ParseError("tensor '" + e.name + "' count disagrees with its shape");
      out.tensors[e.name] = detail::read_values(blob, e, out.meta.precision);
      out.shapes[e.name] = {e.rows, e.cols};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()));
  }
  return out;
}

inline TensorGroup parameter_group(const ParamList& params, const std::string& prefix = "") {
  TensorGroup g;
  g.prefix = prefix;
  for (const auto& p : params) {
    g.tensors.emplace_back(p.name, p.tensor.data());
    g.shapes.push_back(p.tensor.shape());
  }
  return g;
}

/// Copies stored values into `params`, requiring every name and shape to match.
inline void assign_parameters(ParamList& params, const LoadedCheckpoint& ck, const std::string& prefix = "") {
  for (auto& p : params) {
    const std::string key = prefix + p.name;
    auto it = ck.tensors.find(key);
    if (it == ck.tensors.end()) throw ParseError("checkpoint lacks tensor '" + key + "'");
    if (!(ck.shapes.at(key) == p.tensor.shape())) {
      throw DimensionError("tensor '" + key + "' stored as " + to_string(ck.shapes.at(key)) + ", model expects " +
                           to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second.begin(), it->second.end(), dst.begin());
  }
}

/// Model checkpoint: `model.json`, `model.bin` and `vocab.txt` under `dir`.
inline void save_model(const std::filesystem::path& dir, const CareModel& model, const Vocab& vocab,
                       CheckpointMeta meta) {
  meta.vocab_hash = vocab.hash();
  write_checkpoint(dir, "model", meta, model.config, {parameter_group(model.parameters())});
  vocab.save((dir / "vocab.txt").string());
}

struct LoadedModel {
  CareModel model;
  Vocab vocab;
  CheckpointMeta meta;
};

inline LoadedModel load_model(const std::filesystem::path& dir) {
  const LoadedCheckpoint ck = read_checkpoint(dir, "model");
  LoadedModel out{CareModel{}, Vocab::load((dir / "vocab.txt").string()), ck.meta};
  if (out.vocab.hash() != ck.meta.vocab_hash) throw ValidationError("vocab.txt does not match the checkpoint vocabulary hash");
  Rng rng(ck.meta.seed);
  out.model = CareModel::init(ck.model_config, rng);
  ParamList params = out.model.parameters();
  assign_parameters(params, ck);
  return out;
}

}  // namespace care
