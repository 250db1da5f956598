#pragma once

// Flat key=value run configuration with a published schema.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "care/errors.hpp"
#include "care/model.hpp"

namespace care {

enum class ValueKind { integer, real, boolean, text };

struct ConfigKey {
  std::string_view name;
  ValueKind kind;
  std::string_view default_value;  // empty text means "unset"
  std::string_view help;
};

inline constexpr ConfigKey kConfigSchema[] = {
    {"corpus", ValueKind::text, "", "training corpus JSONL"},
    {"train_split", ValueKind::text, "", "line-index file selecting training examples from corpus"},
    {"valid_corpus", ValueKind::text, "", "validation corpus JSONL (defaults to corpus)"},
    {"valid_split", ValueKind::text, "", "line-index file selecting validation examples"},
    {"ceg", ValueKind::text, "", "cause-effect graph TSV"},
    {"stopwords", ValueKind::text, "", "stopword list (built-in list when unset)"},
    {"embeddings", ValueKind::text, "", "pretrained word vectors, 'word v1 ... vd' per line"},
    {"out_dir", ValueKind::text, "runs/care", "checkpoint and log directory"},
    {"metrics_log", ValueKind::text, "", "metrics JSONL (out_dir/metrics.jsonl when unset)"},
    {"seed", ValueKind::integer, "0", "global seed"},
    {"min_freq", ValueKind::integer, "1", "vocabulary frequency threshold"},
    {"d_model", ValueKind::integer, "300", "model width"},
    {"num_heads", ValueKind::integer, "2", "attention heads"},
    {"d_ff", ValueKind::integer, "1200", "feed-forward inner width"},
    {"enc_layers", ValueKind::integer, "2", "encoder layers"},
    {"dec_layers", ValueKind::integer, "2", "decoder layers"},
    {"dropout", ValueKind::real, "0.1", "dropout rate"},
    {"max_nodes", ValueKind::integer, "800", "causal graph node cap"},
    {"top_k", ValueKind::integer, "512", "reasoned relations per example"},
    {"max_context", ValueKind::integer, "256", "context token cap, oldest turns truncated first"},
    {"max_response", ValueKind::integer, "64", "response token cap including EOS"},
    {"tie_output", ValueKind::boolean, "false", "reuse the embedding table as output projection"},
    {"no_reasoning", ValueKind::boolean, "false", "ablation: prior-graph relations, no CVGAE"},
    {"no_condition", ValueKind::boolean, "false", "ablation: graph latents without conditions"},
    {"use_latent_mean", ValueKind::boolean, "false", "use latent means instead of samples"},
    {"recon_mode", ValueKind::text, "sampled", "sampled | full"},
    {"full_recon_max_nodes", ValueKind::integer, "128", "node cap for full reconstruction"},
    {"batch_size", ValueKind::integer, "16", "examples per step"},
    {"bucket", ValueKind::boolean, "false", "length-bucketed batches"},
    {"max_steps", ValueKind::integer, "20000", "optimizer steps"},
    {"warmup", ValueKind::integer, "4000", "learning-rate warm-up steps"},
    {"lr_scale", ValueKind::real, "1.0", "multiplier on the schedule"},
    {"weight_generation", ValueKind::real, "1.0", "generation loss weight"},
    {"weight_reasoning", ValueKind::real, "1.0", "reasoning loss weight"},
    {"kl_warmup", ValueKind::integer, "0", "linear KL warm-up steps (0 = off)"},
    {"validate_every", ValueKind::integer, "500", "validation cadence in steps (0 = off)"},
    {"patience", ValueKind::integer, "3", "early-stopping patience in validations"},
    {"checkpoint_every", ValueKind::integer, "1000", "checkpoint cadence in steps (0 = final only)"},
    {"precision", ValueKind::text, "f32", "model checkpoint precision: f32 | f64"},
};

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : kConfigSchema)
    if (k.name == name) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline void check_value(const ConfigKey& key, const std::string& v) {
  const std::string name(key.name);
  switch (key.kind) {
    case ValueKind::integer: {
      long long x = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size() || x < 0) throw ConfigError(name, "expected a non-negative integer, got '" + v + "'");
      break;
    }
    case ValueKind::real: {
      std::istringstream is(v);
      double x = 0;
      is >> x;
      if (!is || !is.eof() || !std::isfinite(x)) throw ConfigError(name, "expected a number, got '" + v + "'");
      break;
    }
    case ValueKind::boolean:
      if (v != "true" && v != "false") throw ConfigError(name, "expected true or false, got '" + v + "'");
      break;
    case ValueKind::text:
      break;
  }
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : kConfigSchema) values_[std::string(k.name)] = std::string(k.default_value);
  }

  /// Lines of `key = value`; '#' starts a comment.
  static RunConfig parse(std::istream& in) {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
      cfg.set(detail::trim(std::string_view(t).substr(0, eq)), detail::trim(std::string_view(t).substr(eq + 1)));
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path);
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) {
    const ConfigKey* k = find_config_key(key);
    if (!k) throw ConfigError(key, "unknown configuration key");
    detail::check_value(*k, value);
    values_[key] = value;
  }

  /// "key=value" override.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(assignment, "override must be key=value");
    set(detail::trim(std::string_view(assignment).substr(0, eq)), detail::trim(std::string_view(assignment).substr(eq + 1)));
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(key, "unknown configuration key");
    return it->second;
  }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(std::stoull(text(key))); }
  double real(const std::string& key) const { return std::stod(text(key)); }
  bool flag(const std::string& key) const { return text(key) == "true"; }
  bool has(const std::string& key) const { return !text(key).empty(); }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Cross-key constraints; throws ConfigError naming the first offending key.
  void validate() const {
    auto positive = [&](const char* key) {
      if (size(key) == 0) throw ConfigError(key, "must be at least 1");
    };
    for (const char* key : {"d_model", "num_heads", "d_ff", "enc_layers", "dec_layers", "max_nodes", "top_k",
                            "max_context", "max_response", "batch_size", "warmup", "min_freq"})
      positive(key);
    if (size("d_model") % size("num_heads") != 0) throw ConfigError("num_heads", "must divide d_model");
    if (size("max_context") < 2) throw ConfigError("max_context", "must be at least 2");
    if (size("max_response") < 2) throw ConfigError("max_response", "must be at least 2");
    const double p = real("dropout");
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout", "must lie in [0, 1)");
    if (real("lr_scale") <= 0.0) throw ConfigError("lr_scale", "must be positive");
    const auto& mode = text("recon_mode");
    if (mode != "sampled" && mode != "full") throw ConfigError("recon_mode", "expected sampled or full");
    const auto& prec = text("precision");
    if (prec != "f32" && prec != "f64") throw ConfigError("precision", "expected f32 or f64");
  }

  /// Model hyperparameters; `vocab_size` is filled by the caller.
  ModelConfig model_config() const {
    ModelConfig m;
    m.d_model = size("d_model");
    m.num_heads = size("num_heads");
    m.d_ff = size("d_ff");
    m.enc_layers = size("enc_layers");
    m.dec_layers = size("dec_layers");
    m.dropout = real("dropout");
    m.max_nodes = size("max_nodes");
    m.top_k = size("top_k");
    m.max_context = size("max_context");
    m.max_response = size("max_response");
    m.tie_output = flag("tie_output");
    m.no_reasoning = flag("no_reasoning");
    m.no_condition = flag("no_condition");
    m.use_latent_mean = flag("use_latent_mean");
    m.recon_mode = text("recon_mode") == "full" ? ReconMode::full : ReconMode::sampled;
    m.full_recon_max_nodes = size("full_recon_max_nodes");
    return m;
  }

  /// Effective configuration, one "key = value" per line in schema order.
  std::string render() const {
    std::ostringstream os;
    for (const auto& k : kConfigSchema) os << k.name << " = " << values_.at(std::string(k.name)) << '\n';
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace care
