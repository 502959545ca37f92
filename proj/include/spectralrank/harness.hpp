#pragma once

#include <atomic>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "spectralrank/nets.hpp"
#include "spectralrank/version.hpp"

namespace spectralrank {

using Json = nlohmann::ordered_json;

enum class ExperimentKind {
  Rf1,
  Rf2,
  RfGated,
  MlpSparse,
  Propagation,
  TransformerBlock,
  Shardwise,
  PolarBench,
  CostTable,
};

inline constexpr std::array<std::pair<ExperimentKind, const char*>, 9> experiment_names = {{
    {ExperimentKind::Rf1, "rf1"},
    {ExperimentKind::Rf2, "rf2"},
    {ExperimentKind::RfGated, "rf_gated"},
    {ExperimentKind::MlpSparse, "mlp_sparse"},
    {ExperimentKind::Propagation, "propagation"},
    {ExperimentKind::TransformerBlock, "transformer_block"},
    {ExperimentKind::Shardwise, "shardwise"},
    {ExperimentKind::PolarBench, "polar_bench"},
    {ExperimentKind::CostTable, "cost_table"},
}};

inline const char* experiment_name(ExperimentKind kind) {
  for (const auto& [k, name] : experiment_names) {
    if (k == kind) {
      return name;
    }
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(std::string_view name) {
  for (const auto& [kind, known] : experiment_names) {
    if (name == known) {
      return kind;
    }
  }
  throw ConfigError("experiment: unknown experiment '" + std::string(name) + "'");
}

/// Everything any experiment reads, flattened. default_config fills the
/// per-experiment defaults; keys outside the experiment's allowlist are
/// rejected at parse time, so unrelated fields simply stay at their defaults.
struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::Rf1;
  std::uint64_t seed = 1;
  int steps = 300;  // traces emit steps+1 rows: the initial state plus one per update
  int trials = 1;
  std::string output_path;

  Eigen::Index d = 0, k = 0, m = 0, n = 0;
  std::vector<Eigen::Index> n_values;  // rf_gated sweeps the sample count

  Eigen::Index hidden = 0;       // mlp_sparse hidden width
  std::string optimizer = "gd";  // gd | specgd | mixed
  std::string eta_rule = "majorize";
  double alpha = 0.0;
  std::optional<std::vector<int>> spectral_set;
  PolarMode polar_mode = PolarMode::Exact;

  std::string chain;  // propagation stage list, e.g. "pointwise_relu:1024,rms_norm"

  Eigen::Index d_model = 128, seq = 256, vocab = 512, k_mlp = 512;
  int n_head = 1;
  bool causal = false;
  double p_max = 0.125;
  std::string act = "gelu";

  std::string scheme = "grid";  // rows | cols | grid
  Eigen::Index row_blocks = 4, col_blocks = 4;

  int count = 100;  // polar_bench matrices
  Eigen::Index max_rows = 64, max_cols = 96;
  double cond_max = 1e4;

  std::int64_t p = 4096, q = 16384, s = 8;  // cost_table shapes and device count
};

inline ExperimentConfig default_config(ExperimentKind kind) {
  ExperimentConfig cfg;
  cfg.experiment = kind;
  switch (kind) {
    case ExperimentKind::Rf1:
      cfg.d = 50;
      cfg.k = 100;
      cfg.m = 100;
      cfg.n = 400;
      break;
    case ExperimentKind::Rf2:
      cfg.d = 64;
      cfg.k = 128;
      cfg.m = 64;
      cfg.n = 512;
      break;
    case ExperimentKind::RfGated:
      cfg.d = 100;
      cfg.k = 200;
      cfg.m = 64;
      cfg.n_values = {100, 200, 400, 800};
      break;
    case ExperimentKind::MlpSparse:
      cfg.d = 128;
      cfg.hidden = 512;
      cfg.n = 256;
      cfg.steps = 200;
      break;
    case ExperimentKind::Propagation:
      cfg.d = 256;
      cfg.n = 512;
      cfg.chain = "pointwise_relu:1024,pointwise_relu:1024,pointwise_relu:1024";
      break;
    case ExperimentKind::TransformerBlock:
      break;  // the struct defaults already describe the standard block
    case ExperimentKind::Shardwise:
      cfg.d = 50;
      cfg.k = 96;
      cfg.m = 64;
      cfg.n = 300;
      cfg.steps = 120;
      break;
    case ExperimentKind::PolarBench:
      break;
    case ExperimentKind::CostTable:
      break;
  }
  cfg.output_path = std::string(experiment_name(kind)) + ".csv";
  return cfg;
}

namespace detail {

inline const std::set<std::string>& allowed_keys(ExperimentKind kind) {
  static const std::set<std::string> common = {"experiment", "seed", "output_path", "trials"};
  auto with = [](std::initializer_list<const char*> extra) {
    std::set<std::string> keys = common;
    for (const char* key : extra) {
      keys.insert(key);
    }
    return keys;
  };
  static const std::set<std::string> rf = with({"d", "k", "m", "n", "steps", "polar_mode", "eta_rule"});
  static const std::set<std::string> gated =
      with({"d", "k", "m", "n_values", "steps", "polar_mode", "eta_rule"});
  static const std::set<std::string> mlp = with(
      {"d", "hidden", "n", "steps", "optimizer", "polar_mode", "spectral_set", "alpha", "eta_rule"});
  static const std::set<std::string> prop = with({"d", "n", "chain"});
  static const std::set<std::string> block =
      with({"d_model", "seq", "vocab", "k_mlp", "n_head", "p_max", "act", "causal"});
  static const std::set<std::string> shard =
      with({"d", "k", "m", "n", "steps", "scheme", "row_blocks", "col_blocks", "polar_mode"});
  static const std::set<std::string> bench = with({"count", "max_rows", "max_cols", "cond_max"});
  static const std::set<std::string> cost = with({"p", "q", "s"});
  switch (kind) {
    case ExperimentKind::Rf1:
    case ExperimentKind::Rf2:
      return rf;
    case ExperimentKind::RfGated:
      return gated;
    case ExperimentKind::MlpSparse:
      return mlp;
    case ExperimentKind::Propagation:
      return prop;
    case ExperimentKind::TransformerBlock:
      return block;
    case ExperimentKind::Shardwise:
      return shard;
    case ExperimentKind::PolarBench:
      return bench;
    case ExperimentKind::CostTable:
      return cost;
  }
  return common;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& want,
                                   const std::string& got) {
  throw ConfigError("key '" + key + "': expected " + want + ", got '" + got + "'");
}

inline std::int64_t parse_i64(const std::string& key, const std::string& value) {
  std::int64_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    bad_value(key, "an integer", value);
  }
  return out;
}

inline Eigen::Index parse_dim(const std::string& key, const std::string& value) {
  const std::int64_t v = parse_i64(key, value);
  if (v < 1) {
    throw ConfigError("key '" + key + "': must be positive");
  }
  return static_cast<Eigen::Index>(v);
}

inline int parse_count(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_dim(key, value));
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    bad_value(key, "an unsigned integer", value);
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    bad_value(key, "a real number", value);
  }
  return out;
}

inline bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") {
    return true;
  }
  if (value == "false" || value == "0") {
    return false;
  }
  bad_value(key, "true or false", value);
}

inline std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (true) {
    const size_t pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos - start));
    if (pos == std::string::npos) {
      return parts;
    }
    start = pos + 1;
  }
}

inline std::vector<Eigen::Index> parse_dim_list(const std::string& key, const std::string& value) {
  std::vector<Eigen::Index> out;
  for (const auto& part : split(value, ',')) {
    out.push_back(parse_dim(key, part));
  }
  return out;
}

inline PolarMode parse_polar_mode(const std::string& key, const std::string& value) {
  if (value == "exact") {
    return PolarMode::Exact;
  }
  if (value == "newton_schulz") {
    return PolarMode::NewtonSchulz;
  }
  bad_value(key, "'exact' or 'newton_schulz'", value);
}

inline ActivationSpec parse_activation(const std::string& key, const std::string& value) {
  if (value == "relu") return ActivationSpec::relu();
  if (value == "abs") return ActivationSpec::abs();
  if (value == "squared_relu") return ActivationSpec::squared_relu();
  if (value == "quadratic") return ActivationSpec::quadratic();
  if (value == "gelu") return ActivationSpec::gelu();
  if (value == "silu") return ActivationSpec::silu();
  if (value == "tanh") return ActivationSpec::tanh();
  if (value == "hardtanh") return ActivationSpec::hardtanh();
  if (value == "softsign") return ActivationSpec::softsign();
  if (value == "linear") return ActivationSpec::linear();
  bad_value(key, "an activation name", value);
}

}  // namespace detail

/// Stage-list syntax, one comma-separated token per stage:
///   linear:k          pointwise_<act>:k   residual:k      rms_norm
///   gating_<act>:k    attention:heads[:causal]            mlp_<act>[:k]
///   moe_<act>:experts[:soft]              token_embed:vocab:dim:p_max
inline std::vector<ChainStage> parse_chain(const std::string& text) {
  if (text.empty()) {
    throw ConfigError("key 'chain': stage list is empty");
  }
  std::vector<ChainStage> stages;
  for (const auto& token : detail::split(text, ',')) {
    const auto fields = detail::split(token, ':');
    const std::string& head = fields[0];
    auto field_dim = [&](size_t i) { return detail::parse_dim("chain", fields.at(i)); };
    auto want_fields = [&](size_t lo, size_t hi) {
      if (fields.size() < lo || fields.size() > hi) {
        throw ConfigError("key 'chain': bad stage token '" + token + "'");
      }
    };
    try {
      if (head == "rms_norm") {
        want_fields(1, 1);
        stages.push_back(ChainStage::rms_norm());
      } else if (head == "linear") {
        want_fields(2, 2);
        stages.push_back(ChainStage::linear(field_dim(1)));
      } else if (head == "residual") {
        want_fields(2, 2);
        stages.push_back(ChainStage::residual(field_dim(1)));
      } else if (head == "token_embed") {
        want_fields(4, 4);
        stages.push_back(ChainStage::token_embed(field_dim(1), field_dim(2),
                                                 detail::parse_real("chain", fields[3])));
      } else if (head == "attention") {
        want_fields(2, 3);
        const bool causal = fields.size() == 3 && fields[2] == "causal";
        if (fields.size() == 3 && !causal) {
          throw ConfigError("key 'chain': bad stage token '" + token + "'");
        }
        stages.push_back(ChainStage::attention(static_cast<int>(field_dim(1)), causal));
      } else if (head.starts_with("pointwise_")) {
        want_fields(2, 2);
        stages.push_back(ChainStage::pointwise(
            detail::parse_activation("chain", head.substr(10)), field_dim(1)));
      } else if (head.starts_with("gating_")) {
        want_fields(2, 2);
        stages.push_back(
            ChainStage::gating(detail::parse_activation("chain", head.substr(7)), field_dim(1)));
      } else if (head.starts_with("mlp_")) {
        want_fields(1, 2);
        stages.push_back(ChainStage::mlp(detail::parse_activation("chain", head.substr(4)),
                                         fields.size() == 2 ? field_dim(1) : 0));
      } else if (head.starts_with("moe_")) {
        want_fields(2, 3);
        const bool soft = fields.size() == 3 && fields[2] == "soft";
        if (fields.size() == 3 && !soft) {
          throw ConfigError("key 'chain': bad stage token '" + token + "'");
        }
        stages.push_back(ChainStage::moe(static_cast<int>(field_dim(1)),
                                         detail::parse_activation("chain", head.substr(4)), soft));
      } else {
        throw ConfigError("key 'chain': bad stage token '" + token + "'");
      }
    } catch (const std::out_of_range&) {
      throw ConfigError("key 'chain': bad stage token '" + token + "'");
    }
  }
  return stages;
}

inline void apply_config_key(ExperimentConfig& cfg, const std::string& key,
                             const std::string& value) {
  const auto& allowed = detail::allowed_keys(cfg.experiment);
  if (!allowed.contains(key)) {
    throw ConfigError(std::string(experiment_name(cfg.experiment)) + " config: unknown key '" +
                      key + "'");
  }
  if (key == "experiment") {
    if (parse_experiment_kind(value) != cfg.experiment) {
      throw ConfigError("experiment: config says '" + value + "' but '" +
                        experiment_name(cfg.experiment) + "' was selected");
    }
  } else if (key == "seed") {
    cfg.seed = detail::parse_u64(key, value);
  } else if (key == "steps") {
    cfg.steps = detail::parse_count(key, value);
  } else if (key == "trials") {
    cfg.trials = detail::parse_count(key, value);
  } else if (key == "output_path") {
    if (value.empty()) {
      throw ConfigError("key 'output_path': must not be empty");
    }
    cfg.output_path = value;
  } else if (key == "d") {
    cfg.d = detail::parse_dim(key, value);
  } else if (key == "k") {
    cfg.k = detail::parse_dim(key, value);
  } else if (key == "m") {
    cfg.m = detail::parse_dim(key, value);
  } else if (key == "n") {
    cfg.n = detail::parse_dim(key, value);
  } else if (key == "n_values") {
    cfg.n_values = detail::parse_dim_list(key, value);
  } else if (key == "hidden") {
    cfg.hidden = detail::parse_dim(key, value);
  } else if (key == "optimizer") {
    if (value != "gd" && value != "specgd" && value != "mixed") {
      detail::bad_value(key, "'gd', 'specgd' or 'mixed'", value);
    }
    cfg.optimizer = value;
  } else if (key == "eta_rule") {
    if (value != "majorize") {
      throw ConfigError("key 'eta_rule': only 'majorize' is implemented");
    }
  } else if (key == "alpha") {
    cfg.alpha = detail::parse_real(key, value);
    if (cfg.alpha < 0.0) {
      throw ConfigError("key 'alpha': must be nonnegative");
    }
  } else if (key == "spectral_set") {
    std::vector<int> layers;
    for (const auto dim : detail::parse_dim_list(key, value)) {
      layers.push_back(static_cast<int>(dim));
    }
    cfg.spectral_set = std::move(layers);
  } else if (key == "polar_mode") {
    cfg.polar_mode = detail::parse_polar_mode(key, value);
  } else if (key == "chain") {
    parse_chain(value);  // validate now so the error names the key
    cfg.chain = value;
  } else if (key == "d_model") {
    cfg.d_model = detail::parse_dim(key, value);
  } else if (key == "seq") {
    cfg.seq = detail::parse_dim(key, value);
  } else if (key == "vocab") {
    cfg.vocab = detail::parse_dim(key, value);
  } else if (key == "k_mlp") {
    cfg.k_mlp = detail::parse_dim(key, value);
  } else if (key == "n_head") {
    cfg.n_head = detail::parse_count(key, value);
  } else if (key == "p_max") {
    cfg.p_max = detail::parse_real(key, value);
    if (cfg.p_max < 0.0 || cfg.p_max >= 1.0) {
      throw ConfigError("key 'p_max': must lie in [0, 1)");
    }
  } else if (key == "act") {
    detail::parse_activation(key, value);
    cfg.act = value;
  } else if (key == "causal") {
    cfg.causal = detail::parse_flag(key, value);
  } else if (key == "scheme") {
    if (value != "rows" && value != "cols" && value != "grid") {
      detail::bad_value(key, "'rows', 'cols' or 'grid'", value);
    }
    cfg.scheme = value;
  } else if (key == "row_blocks") {
    cfg.row_blocks = detail::parse_dim(key, value);
  } else if (key == "col_blocks") {
    cfg.col_blocks = detail::parse_dim(key, value);
  } else if (key == "count") {
    cfg.count = detail::parse_count(key, value);
  } else if (key == "max_rows") {
    cfg.max_rows = detail::parse_dim(key, value);
  } else if (key == "max_cols") {
    cfg.max_cols = detail::parse_dim(key, value);
  } else if (key == "cond_max") {
    cfg.cond_max = detail::parse_real(key, value);
    if (cfg.cond_max < 1.0) {
      throw ConfigError("key 'cond_max': must be at least 1");
    }
  } else if (key == "p") {
    cfg.p = detail::parse_i64(key, value);
  } else if (key == "q") {
    cfg.q = detail::parse_i64(key, value);
  } else if (key == "s") {
    cfg.s = detail::parse_i64(key, value);
  } else {
    throw ConfigError("key '" + key + "': accepted but not handled");  // unreachable
  }
}

inline void validate_config(const ExperimentConfig& cfg) {
  if (cfg.experiment == ExperimentKind::MlpSparse && cfg.d < 3) {
    throw ConfigError("key 'd': the sparse target x1*x2*x3 needs d >= 3");
  }
  if (cfg.experiment == ExperimentKind::RfGated && cfg.n_values.empty()) {
    throw ConfigError("key 'n_values': must list at least one sample count");
  }
  if (cfg.experiment == ExperimentKind::TransformerBlock && cfg.d_model % cfg.n_head != 0) {
    throw ConfigError("key 'n_head': must divide d_model");
  }
  if (cfg.experiment == ExperimentKind::PolarBench &&
      (cfg.max_rows < 2 || cfg.max_cols < 2)) {
    throw ConfigError("key 'max_rows': bench shapes start at 2x2");
  }
  if (cfg.experiment == ExperimentKind::CostTable) {
    if (cfg.p < 1 || cfg.q < 1 || cfg.s < 1) {
      throw ConfigError("key 'p': shapes and device count must be positive");
    }
    if (cfg.p % cfg.s != 0) {
      throw ConfigError("key 's': must divide p evenly");
    }
  }
  if (cfg.experiment == ExperimentKind::Shardwise) {
    if (cfg.scheme != "cols" && cfg.row_blocks > cfg.m) {
      throw ConfigError("key 'row_blocks': more shards than rows");
    }
    if (cfg.scheme != "rows" && cfg.col_blocks > cfg.k) {
      throw ConfigError("key 'col_blocks': more shards than columns");
    }
  }
}

/// The full effective config, key for key, so a sidecar can be replayed as a
/// config file.
inline Json config_to_json(const ExperimentConfig& cfg) {
  Json j;
  auto dims_csv = [](const auto& values) {
    std::string out;
    for (const auto v : values) {
      out += (out.empty() ? "" : ",") + std::to_string(v);
    }
    return out;
  };
  j["experiment"] = experiment_name(cfg.experiment);
  j["seed"] = cfg.seed;
  j["trials"] = cfg.trials;
  j["output_path"] = cfg.output_path;
  for (const auto& key : detail::allowed_keys(cfg.experiment)) {
    if (j.contains(key)) {
      continue;
    }
    if (key == "steps") j[key] = cfg.steps;
    if (key == "d") j[key] = cfg.d;
    if (key == "k") j[key] = cfg.k;
    if (key == "m") j[key] = cfg.m;
    if (key == "n") j[key] = cfg.n;
    if (key == "n_values") j[key] = dims_csv(cfg.n_values);
    if (key == "hidden") j[key] = cfg.hidden;
    if (key == "optimizer") j[key] = cfg.optimizer;
    if (key == "eta_rule") j[key] = cfg.eta_rule;
    if (key == "alpha") j[key] = cfg.alpha;
    if (key == "spectral_set" && cfg.spectral_set) j[key] = dims_csv(*cfg.spectral_set);
    if (key == "polar_mode") {
      j[key] = cfg.polar_mode == PolarMode::Exact ? "exact" : "newton_schulz";
    }
    if (key == "chain") j[key] = cfg.chain;
    if (key == "d_model") j[key] = cfg.d_model;
    if (key == "seq") j[key] = cfg.seq;
    if (key == "vocab") j[key] = cfg.vocab;
    if (key == "k_mlp") j[key] = cfg.k_mlp;
    if (key == "n_head") j[key] = cfg.n_head;
    if (key == "p_max") j[key] = cfg.p_max;
    if (key == "act") j[key] = cfg.act;
    if (key == "causal") j[key] = cfg.causal;
    if (key == "scheme") j[key] = cfg.scheme;
    if (key == "row_blocks") j[key] = cfg.row_blocks;
    if (key == "col_blocks") j[key] = cfg.col_blocks;
    if (key == "count") j[key] = cfg.count;
    if (key == "max_rows") j[key] = cfg.max_rows;
    if (key == "max_cols") j[key] = cfg.max_cols;
    if (key == "cond_max") j[key] = cfg.cond_max;
    if (key == "p") j[key] = cfg.p;
    if (key == "q") j[key] = cfg.q;
    if (key == "s") j[key] = cfg.s;
  }
  return j;
}

/// Config file (flat JSON object) first, then overrides in order; later
/// assignments win. The experiment itself comes from the caller, normally the
/// CLI positional.
inline ExperimentConfig load_config(
    ExperimentKind kind, const std::string& config_path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  ExperimentConfig cfg = default_config(kind);
  if (!config_path.empty()) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) {
      throw IOError("config: cannot open '" + config_path + "'");
    }
    const Json parsed = Json::parse(in, nullptr, false);
    if (parsed.is_discarded()) {
      throw ConfigError("config: '" + config_path + "' is not valid JSON");
    }
    if (!parsed.is_object()) {
      throw ConfigError("config: top level of '" + config_path + "' must be a flat JSON object");
    }
    for (const auto& [key, value] : parsed.items()) {
      std::string text;
      if (value.is_string()) {
        text = value.get<std::string>();
      } else if (value.is_boolean()) {
        text = value.get<bool>() ? "true" : "false";
      } else if (value.is_number() || value.is_number_integer()) {
        text = value.dump();
      } else {
        throw ConfigError("key '" + key + "': config values must be flat scalars");
      }
      apply_config_key(cfg, key, text);
    }
  }
  for (const auto& [key, value] : overrides) {
    apply_config_key(cfg, key, value);
  }
  validate_config(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// Trace tables and their serialization.

struct Table {
  using Cell = std::variant<std::int64_t, double, std::string>;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

enum class EmitFormat { CSV, JSON };

namespace detail {

// 17 significant digits round-trips every finite double through from_chars.
inline std::string format_double(double v) {
  std::array<char, 64> buf;
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                                       std::chars_format::general, 17);
  assert(ec == std::errc());
  return std::string(buf.data(), ptr);
}

inline std::string cell_text(const Table::Cell& cell) {
  if (const auto* i = std::get_if<std::int64_t>(&cell)) {
    return std::to_string(*i);
  }
  if (const auto* d = std::get_if<double>(&cell)) {
    return format_double(*d);
  }
  return std::get<std::string>(cell);
}

inline Json cell_json(const Table::Cell& cell) {
  if (const auto* i = std::get_if<std::int64_t>(&cell)) {
    return *i;
  }
  if (const auto* d = std::get_if<double>(&cell)) {
    return *d;
  }
  return std::get<std::string>(cell);
}

}  // namespace detail

inline void emit_records(const Table& table, const std::string& path, EmitFormat format) {
  if (table.rows.empty()) {
    throw EmptySequenceError("emit_records: no records to write");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IOError("emit_records: cannot open '" + path + "'");
  }
  if (format == EmitFormat::CSV) {
    for (size_t c = 0; c < table.columns.size(); ++c) {
      out << (c ? "," : "") << table.columns[c];
    }
    out << '\n';
    for (const auto& row : table.rows) {
      for (size_t c = 0; c < row.size(); ++c) {
        out << (c ? "," : "") << detail::cell_text(row[c]);
      }
      out << '\n';
    }
  } else {
    Json arr = Json::array();
    for (const auto& row : table.rows) {
      Json obj;
      for (size_t c = 0; c < row.size(); ++c) {
        obj[table.columns[c]] = detail::cell_json(row[c]);
      }
      arr.push_back(std::move(obj));
    }
    out << arr.dump(2) << '\n';
  }
  out.flush();
  if (!out) {
    throw IOError("emit_records: write failed for '" + path + "'");
  }
}

// ---------------------------------------------------------------------------
// The experiments.

/// Realizable regression on gated features: A = silu(V X) (.*) (W X), the
/// centered high-stable-rank regime where plain GD is the favored method.
inline RFInstance rf_gated_instance(Eigen::Index d, Eigen::Index k, Eigen::Index m, Eigen::Index n,
                                    std::uint64_t seed) {
  Rng rx(seed, "gated.rf.x");
  RFInstance inst;
  inst.variant = RFVariant::Realizable;
  const Matrix x = rx.gaussian(d, n);
  inst.A = gated_block(x, x, ActivationSpec::silu(), k, seed);
  Rng rw(seed, "gated.rf.truth");
  inst.W_truth = rw.gaussian(m, k, 1.0 / std::sqrt(static_cast<double>(m)));
  inst.Y = inst.W_truth * inst.A;
  inst.B = (inst.A * inst.A.transpose()) / static_cast<double>(n);
  const SpectralSummary s = spectral_summary(inst.A);
  inst.L_F = s.op_norm * s.op_norm / static_cast<double>(n);
  inst.L_op = s.frob * s.frob / static_cast<double>(n);
  inst.n = n;
  inst.seed = seed;
  return inst;
}

struct ExperimentResult {
  Table table;
  Json extra = Json::object();  // experiment-specific sidecar payload
};

namespace detail {

/// GD and SpecGD side by side from zero init, one row per visited state.
inline Table rf_pair_table(const RFInstance& inst, int steps, PolarMode polar_mode) {
  const Matrix w0 = Matrix::Zero(inst.W_truth.rows(), inst.W_truth.cols());
  OptimizerConfig gd, sp;
  gd.kind = OptimizerKind::GD;
  gd.polar_mode = polar_mode;
  sp.kind = OptimizerKind::SpecGD;
  sp.polar_mode = polar_mode;
  const auto tg = train_rf(inst, w0, gd, steps + 1);
  const auto ts = train_rf(inst, w0, sp, steps + 1);
  Table t;
  t.columns = {"step", "loss_gd", "loss_spec", "nr_gd", "nr_spec", "st_A"};
  for (int i = 0; i <= steps; ++i) {
    const auto u = static_cast<size_t>(i);
    t.rows.push_back({static_cast<std::int64_t>(i), tg[u].loss, ts[u].loss, tg[u].nr[0],
                      ts[u].nr[0], tg[u].st[0]});
  }
  return t;
}

inline ExperimentResult run_rf_pair(const ExperimentConfig& cfg) {
  const RFInstance inst = cfg.experiment == ExperimentKind::Rf1
                              ? gen_realizable(cfg.d, cfg.k, cfg.m, cfg.n, cfg.seed)
                              : gen_teacher_student(cfg.d, cfg.k, cfg.m, cfg.n, cfg.seed);
  return {rf_pair_table(inst, cfg.steps, cfg.polar_mode), Json::object()};
}

inline ExperimentResult run_rf_gated(const ExperimentConfig& cfg) {
  ExperimentResult res;
  res.table.columns = {"n", "st_A", "loss_gd", "loss_spec", "gd_wins"};
  std::int64_t crossover = -1;
  for (const Eigen::Index n : cfg.n_values) {
    const RFInstance inst = rf_gated_instance(cfg.d, cfg.k, cfg.m, n, cfg.seed);
    const Table pair = rf_pair_table(inst, cfg.steps, cfg.polar_mode);
    const auto& last = pair.rows.back();
    const double loss_gd = std::get<double>(last[1]);
    const double loss_spec = std::get<double>(last[2]);
    const bool gd_wins = loss_gd <= loss_spec;
    if (gd_wins && crossover < 0) {
      crossover = static_cast<std::int64_t>(n);
    }
    res.table.rows.push_back({static_cast<std::int64_t>(n), inst.L_op / inst.L_F, loss_gd,
                              loss_spec, static_cast<std::int64_t>(gd_wins)});
  }
  res.extra["crossover_n"] = crossover;  // smallest swept n where GD is ahead, -1 if never
  return res;
}

inline ExperimentResult run_mlp_sparse(const ExperimentConfig& cfg) {
  Rng rx(cfg.seed, "mlp_sparse.x");
  const Matrix x = rx.gaussian(cfg.d, cfg.n);
  Matrix y(1, cfg.n);
  for (Eigen::Index t = 0; t < cfg.n; ++t) {
    y(0, t) = x(0, t) * x(1, t) * x(2, t);
  }
  MLPSpec spec;
  spec.widths = {cfg.d, cfg.hidden, 1};
  spec.activation = ActivationSpec::squared_relu();
  OptimizerConfig oc;
  oc.kind = cfg.optimizer == "gd" ? OptimizerKind::GD
            : cfg.optimizer == "specgd" ? OptimizerKind::SpecGD
                                        : OptimizerKind::Mixed;
  oc.polar_mode = cfg.polar_mode;
  oc.alpha = cfg.alpha;
  oc.spectral_set = cfg.spectral_set;
  const auto trace = train_mlp(spec, mlp_init(spec, cfg.seed), x, y, oc, cfg.steps + 1);

  Table t;
  t.columns = {"step", "loss"};
  const size_t layers = trace.front().nr.size();
  for (const char* field : {"nr", "st", "ratio", "favored", "grad_frob"}) {
    for (size_t l = 1; l <= layers; ++l) {
      t.columns.push_back(std::string(field) + "_" + std::to_string(l));
    }
  }
  t.columns.push_back("predicted_decrease");
  for (const auto& rec : trace) {
    std::vector<Table::Cell> row = {static_cast<std::int64_t>(rec.step), rec.loss};
    for (const double v : rec.nr) row.emplace_back(v);
    for (const double v : rec.st) row.emplace_back(v);
    for (const double v : rec.ratio) row.emplace_back(v);
    for (const int v : rec.favored) row.emplace_back(static_cast<std::int64_t>(v));
    for (const double v : rec.grad_frob) row.emplace_back(v);
    row.emplace_back(rec.predicted_decrease);
    t.rows.push_back(std::move(row));
  }
  return {std::move(t), Json::object()};
}

inline std::vector<Table::Cell> summary_cells(const SpectralSummary& s) {
  return {s.frob, s.op_norm, s.nuclear, s.stable_rank, s.nuclear_rank, s.effective_rank};
}

inline ExperimentResult run_propagation(const ExperimentConfig& cfg) {
  const auto stages = parse_chain(cfg.chain);
  Rng rx(cfg.seed, "propagation.input");
  const Matrix x0 = rx.gaussian(cfg.d, cfg.n);
  const auto reports = propagate_chain(stages, x0, cfg.seed);
  Table t;
  t.columns = {"stage",        "name",         "frob",           "op_norm",
               "nuclear",      "stable_rank",  "nuclear_rank",   "effective_rank",
               "min_col_sq",   "max_col_sq"};
  auto push = [&t](std::int64_t idx, const std::string& name, const SpectralSummary& s,
                   const ColumnEnvelope& env) {
    std::vector<Table::Cell> row = {idx, name};
    for (auto& cell : summary_cells(s)) {
      row.push_back(std::move(cell));
    }
    row.emplace_back(env.min_sq);
    row.emplace_back(env.max_sq);
    t.rows.push_back(std::move(row));
  };
  push(0, "input", spectral_summary(x0), column_envelope(x0));
  for (size_t i = 0; i < reports.size(); ++i) {
    push(static_cast<std::int64_t>(i + 1), reports[i].name, reports[i].summary,
         reports[i].envelope);
  }
  return {std::move(t), Json::object()};
}

inline ExperimentResult run_transformer_block(const ExperimentConfig& cfg) {
  Rng re(cfg.seed, "transformer.embed");
  const Matrix x = token_embedding(cfg.vocab, cfg.d_model, cfg.seq, cfg.p_max, re);
  AttentionBlockParams params = attention_block_init(
      cfg.d_model, cfg.k_mlp, detail::parse_activation("act", cfg.act), cfg.n_head, cfg.seed);
  params.causal = cfg.causal;
  const BlockCapture cap = attention_block_forward(params, x);
  Table t;
  t.columns = {"tensor",      "rows",         "cols",         "frob",          "op_norm",
               "nuclear",     "stable_rank",  "nuclear_rank", "effective_rank"};
  auto push = [&t](const std::string& name, const Matrix& m) {
    std::vector<Table::Cell> row = {name, static_cast<std::int64_t>(m.rows()),
                                    static_cast<std::int64_t>(m.cols())};
    for (auto& cell : summary_cells(spectral_summary(m))) {
      row.push_back(std::move(cell));
    }
    t.rows.push_back(std::move(row));
  };
  push("x", x);
  push("a_rms", cap.a_rms);
  push("h", cap.h);
  push("x_att", cap.x_att);
  push("a_rms_mlp", cap.a_rms_mlp);
  push("b", cap.b);
  push("x_plus", cap.x_plus);
  return {std::move(t), Json::object()};
}

inline ExperimentResult run_shardwise(const ExperimentConfig& cfg) {
  const RFInstance inst = gen_realizable(cfg.d, cfg.k, cfg.m, cfg.n, cfg.seed);
  const PartitionScheme scheme = cfg.scheme == "rows"   ? PartitionScheme::row_shards(cfg.row_blocks)
                                 : cfg.scheme == "cols" ? PartitionScheme::col_shards(cfg.col_blocks)
                                                        : PartitionScheme::grid(cfg.row_blocks,
                                                                                cfg.col_blocks);
  const Partition part = make_partition(cfg.m, cfg.k, scheme);
  const double st_a = inst.L_op / inst.L_F;

  Matrix w_global = Matrix::Zero(cfg.m, cfg.k);
  Matrix w_shard = w_global;
  Table t;
  t.columns = {"step", "loss_global", "loss_shard", "nr_global", "nr_shard", "st_A"};
  for (int step = 0; step <= cfg.steps; ++step) {
    const LossGrad lg_global = rf_loss_grad(w_global, inst);
    const LossGrad lg_shard = rf_loss_grad(w_shard, inst);
    const bool g_zero = is_zero(lg_global.grad);
    const bool s_zero = is_zero(lg_shard.grad);
    t.rows.push_back({static_cast<std::int64_t>(step), lg_global.loss, lg_shard.loss,
                      g_zero ? 0.0 : spectral_summary(lg_global.grad).nuclear_rank,
                      s_zero ? 0.0 : shardwise_nuclear_rank(lg_shard.grad, part), st_a});
    if (step == cfg.steps) {
      break;
    }
    if (!g_zero) {
      w_global = spec_step(w_global, lg_global.grad, inst.L_op, cfg.polar_mode);
    }
    if (!s_zero) {
      w_shard = shardwise_spec_step(w_shard, lg_shard.grad, part, inst.A, inst.n).W_next;
    }
  }
  ExperimentResult res{std::move(t), Json::object()};
  res.extra["kappa"] = part.kappa;
  res.extra["blocks"] = static_cast<std::int64_t>(part.blocks.size());
  return res;
}

/// U diag(sigma) V^T with log-spaced spectrum from 1 down to 1/cond.
inline Matrix conditioned_matrix(Eigen::Index rows, Eigen::Index cols, double cond, Rng& rng) {
  const Eigen::Index r = std::min(rows, cols);
  const Matrix qu = Eigen::HouseholderQR<Matrix>(rng.gaussian(rows, r))
                        .householderQ() *
                    Matrix::Identity(rows, r);
  const Matrix qv = Eigen::HouseholderQR<Matrix>(rng.gaussian(cols, r))
                        .householderQ() *
                    Matrix::Identity(cols, r);
  Vector sigma(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double frac = r == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(r - 1);
    sigma(i) = std::pow(cond, -frac);
  }
  return qu * sigma.asDiagonal() * qv.transpose();
}

inline ExperimentResult run_polar_bench(const ExperimentConfig& cfg) {
  Rng rng(cfg.seed, "polar.bench");
  Table t;
  t.columns = {"index", "rows", "cols", "cond", "frob_err", "ns_iters"};
  double ns_seconds = 0.0;
  double exact_seconds = 0.0;
  double max_err = 0.0;
  using Clock = std::chrono::steady_clock;
  for (int i = 0; i < cfg.count; ++i) {
    const auto rows = static_cast<Eigen::Index>(2 + rng.next_below(cfg.max_rows - 1));
    const auto cols = static_cast<Eigen::Index>(2 + rng.next_below(cfg.max_cols - 1));
    const double cond = std::exp(rng.next_uniform(0.0, std::log(cfg.cond_max)));
    const Matrix m = conditioned_matrix(rows, cols, cond, rng);
    const auto t0 = Clock::now();
    const Matrix exact = polar_exact(m);
    const auto t1 = Clock::now();
    const NewtonSchulzResult ns = polar_newton_schulz(m);
    const auto t2 = Clock::now();
    exact_seconds += std::chrono::duration<double>(t1 - t0).count();
    ns_seconds += std::chrono::duration<double>(t2 - t1).count();
    const double err = (ns.polar - exact).norm();
    max_err = std::max(max_err, err);
    t.rows.push_back({static_cast<std::int64_t>(i), static_cast<std::int64_t>(rows),
                      static_cast<std::int64_t>(cols), cond, err,
                      static_cast<std::int64_t>(ns.iters_used)});
  }
  ExperimentResult res{std::move(t), Json::object()};
  // Timings stay out of the CSV so reruns stay byte-identical.
  res.extra["ns_seconds_total"] = ns_seconds;
  res.extra["exact_seconds_total"] = exact_seconds;
  res.extra["max_frob_err"] = max_err;
  return res;
}

// Unit-constant cost model for orthogonalizing a p-by-q block: matmul-chain
// flops min(p,q)^2 max(p,q), data movement 8pq bytes. Row-sharding across s
// devices divides per-device flops by s^2 and bytes by s.
inline ExperimentResult run_cost_table(const ExperimentConfig& cfg) {
  auto orth_flops = [](std::int64_t rows, std::int64_t cols) {
    const std::int64_t lo = std::min(rows, cols);
    const std::int64_t hi = std::max(rows, cols);
    return lo * lo * hi;
  };
  Table t;
  t.columns = {"method", "shard_rows", "shard_cols", "devices", "flops_per_device",
               "bytes_per_device"};
  const std::int64_t shard_rows = cfg.p / cfg.s;
  t.rows.push_back({std::string("global"), cfg.p, cfg.q, std::int64_t{1}, orth_flops(cfg.p, cfg.q),
                    8 * cfg.p * cfg.q});
  t.rows.push_back({std::string("shardwise"), shard_rows, cfg.q, cfg.s,
                    orth_flops(shard_rows, cfg.q), 8 * shard_rows * cfg.q});
  ExperimentResult res{std::move(t), Json::object()};
  res.extra["flops_ratio"] = static_cast<double>(orth_flops(cfg.p, cfg.q)) /
                             static_cast<double>(orth_flops(shard_rows, cfg.q));
  return res;
}

}  // namespace detail

/// One experiment, purely from its config. No files are touched.
inline ExperimentResult build_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  switch (cfg.experiment) {
    case ExperimentKind::Rf1:
    case ExperimentKind::Rf2:
      return detail::run_rf_pair(cfg);
    case ExperimentKind::RfGated:
      return detail::run_rf_gated(cfg);
    case ExperimentKind::MlpSparse:
      return detail::run_mlp_sparse(cfg);
    case ExperimentKind::Propagation:
      return detail::run_propagation(cfg);
    case ExperimentKind::TransformerBlock:
      return detail::run_transformer_block(cfg);
    case ExperimentKind::Shardwise:
      return detail::run_shardwise(cfg);
    case ExperimentKind::PolarBench:
      return detail::run_polar_bench(cfg);
    case ExperimentKind::CostTable:
      return detail::run_cost_table(cfg);
  }
  throw InvalidSpecError("build_experiment: unhandled experiment kind");
}

/// Runs the experiment (fanning trials across threads when asked), writes the
/// CSV to output_path and a sidecar to output_path + ".meta.json". The CSV is
/// byte-identical across reruns of the same config; the sidecar carries wall
/// time so it is not.
inline void run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();

  Table table;
  Json extra = Json::object();
  if (cfg.trials == 1) {
    ExperimentResult res = build_experiment(cfg);
    table = std::move(res.table);
    extra = std::move(res.extra);
  } else {
    // Per-trial seeds are base + index; rows keep trial order no matter which
    // worker finishes first.
    std::vector<ExperimentResult> results(static_cast<size_t>(cfg.trials));
    std::vector<std::exception_ptr> failures(static_cast<size_t>(cfg.trials));
    std::atomic<int> cursor{0};
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const int workers = static_cast<int>(std::min<unsigned>(hw, static_cast<unsigned>(cfg.trials)));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (int i = cursor.fetch_add(1); i < cfg.trials; i = cursor.fetch_add(1)) {
          try {
            ExperimentConfig trial = cfg;
            trial.trials = 1;
            trial.seed = cfg.seed + static_cast<std::uint64_t>(i);
            results[static_cast<size_t>(i)] = build_experiment(trial);
          } catch (...) {
            failures[static_cast<size_t>(i)] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) {
      th.join();
    }
    for (const auto& failure : failures) {
      if (failure) {
        std::rethrow_exception(failure);
      }
    }
    table.columns = {"trial"};
    table.columns.insert(table.columns.end(), results[0].table.columns.begin(),
                         results[0].table.columns.end());
    Json per_trial = Json::array();
    for (int i = 0; i < cfg.trials; ++i) {
      auto& res = results[static_cast<size_t>(i)];
      for (auto& row : res.table.rows) {
        std::vector<Table::Cell> cells = {static_cast<std::int64_t>(i)};
        cells.insert(cells.end(), std::make_move_iterator(row.begin()),
                     std::make_move_iterator(row.end()));
        table.rows.push_back(std::move(cells));
      }
      per_trial.push_back(std::move(res.extra));
    }
    extra["trials"] = std::move(per_trial);
  }

  emit_records(table, cfg.output_path, EmitFormat::CSV);

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Json meta;
  meta["experiment"] = experiment_name(cfg.experiment);
  meta["config"] = config_to_json(cfg);
  meta["seed"] = cfg.seed;
  meta["library_version"] = library_version;
  meta["wall_time_seconds"] = wall;
  if (!extra.empty()) {
    meta["extra"] = std::move(extra);
  }
  const std::string meta_path = cfg.output_path + ".meta.json";
  std::ofstream out(meta_path, std::ios::binary);
  if (!out) {
    throw IOError("run_experiment: cannot open '" + meta_path + "'");
  }
  out << meta.dump(2) << '\n';
  out.flush();
  if (!out) {
    throw IOError("run_experiment: write failed for '" + meta_path + "'");
  }
}

}  // namespace spectralrank
