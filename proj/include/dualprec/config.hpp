#pragma once

// Flat `key = value` run configuration with `#` comments. Every key is known
// in advance; anything else is rejected so a typo cannot silently fall back
// to a default.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "dualprec/error.hpp"
#include "dualprec/trainer.hpp"

namespace dualprec {

struct RunConfig {
  std::string name = "default";
  TrainConfig train;
  PhasePlan plan;

  void validate() const {
    train.validate();
    plan.validate();
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value) {
  throw Error(ErrorCode::Config, "invalid value '" + value + "' for key '" + key + "'");
}

template <class U>
U parse_number(const std::string& key, const std::string& value) {
  U out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value);
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace config_detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "name",           "arch",          "dataset",        "data_dir",      "bits",
      "scale_rule",     "batch_size",    "seed",           "epochs",        "phase1_epochs",
      "lr_phase1_odd",  "lr_phase1_even", "lr_phase2",     "eta",           "index_sigma",
      "index_norm",     "quantize_layers", "augment",      "train_limit",   "test_limit",
  };
  return keys;
}

/// Sets one key. Unknown keys and malformed values throw ErrorCode::Config
/// with the key in the message.
inline void set_config_value(RunConfig& rc, const std::string& key, const std::string& value) {
  using namespace config_detail;
  TrainConfig& t = rc.train;
  PhasePlan& p = rc.plan;
  try {
    if (key == "name") rc.name = value;
    else if (key == "arch") t.arch = value;
    else if (key == "dataset") t.dataset = value;
    else if (key == "data_dir") t.data_dir = value;
    else if (key == "bits") t.bits = parse_number<int>(key, value);
    else if (key == "scale_rule") t.scale_rule = parse_scale_rule(value);
    else if (key == "batch_size") t.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "epochs") p.total_epochs = parse_number<int>(key, value);
    else if (key == "phase1_epochs") p.phase1_epochs = parse_number<int>(key, value);
    else if (key == "lr_phase1_odd") p.lr_phase1_odd = parse_number<double>(key, value);
    else if (key == "lr_phase1_even") p.lr_phase1_even = parse_number<double>(key, value);
    else if (key == "lr_phase2") p.lr_phase2 = parse_number<double>(key, value);
    else if (key == "eta") p.eta = parse_number<double>(key, value);
    else if (key == "index_sigma") t.index_sigma = parse_number<double>(key, value);
    else if (key == "index_norm") t.index_norm = parse_index_norm(value);
    else if (key == "quantize_layers") t.quantize_layers = value;
    else if (key == "augment") t.augment = parse_augment_policy(value);
    else if (key == "train_limit") t.train_limit = parse_number<std::size_t>(key, value);
    else if (key == "test_limit") t.test_limit = parse_number<std::size_t>(key, value);
    else throw Error(ErrorCode::Config, "unknown config key '" + key + "'");
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    throw Error(ErrorCode::Config, "key '" + key + "': " + e.what());
  }
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set_config_value(base, config_detail::trim(line.substr(0, eq)),
                     config_detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Config, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

/// Every key with its resolved value, one per line, in a fixed order. Parsing
/// this text reproduces the configuration exactly.
inline std::string resolved_config_text(const RunConfig& rc) {
  using config_detail::format_double;
  const TrainConfig& t = rc.train;
  const PhasePlan& p = rc.plan;
  std::map<std::string, std::string> kv = {
      {"name", rc.name},
      {"arch", t.arch},
      {"dataset", t.dataset},
      {"data_dir", t.data_dir},
      {"bits", std::to_string(t.bits)},
      {"scale_rule", to_string(t.scale_rule)},
      {"batch_size", std::to_string(t.batch_size)},
      {"seed", std::to_string(t.seed)},
      {"epochs", std::to_string(p.total_epochs)},
      {"phase1_epochs", std::to_string(p.phase1_epochs)},
      {"lr_phase1_odd", format_double(p.lr_phase1_odd)},
      {"lr_phase1_even", format_double(p.lr_phase1_even)},
      {"lr_phase2", format_double(p.lr_phase2)},
      {"eta", format_double(p.eta)},
      {"index_sigma", format_double(t.index_sigma)},
      {"index_norm", to_string(t.index_norm)},
      {"quantize_layers", t.quantize_layers},
      {"augment", to_string(t.augment)},
      {"train_limit", std::to_string(t.train_limit)},
      {"test_limit", std::to_string(t.test_limit)},
  };
  std::string out;
  for (const std::string& key : config_keys()) out += key + " = " + kv.at(key) + "\n";
  return out;
}

}  // namespace dualprec
