#pragma once

// Command implementations behind the `dualprec` executable. Each returns the
// process exit code: 0 success, 1 runtime failure, 2 usage or validation
// error. Inputs are never modified in place.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualprec/config.hpp"
#include "dualprec/data.hpp"
#include "dualprec/dual.hpp"
#include "dualprec/packstore.hpp"
#include "dualprec/trainer.hpp"

namespace dualprec::cli {

inline constexpr int kOk = 0;
inline constexpr int kRuntimeFailure = 1;
inline constexpr int kUsageError = 2;

struct TrainArgs {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;  // applied in order
  std::string out;                                             // run directory
};

struct EvalArgs {
  std::string model_path;
  std::string precision = "low";
  std::string data_dir;
  std::string dataset;  // inferred from the input shape when empty
  std::size_t limit = 0;
};

struct SwitchArgs {
  std::string model_path;
  std::string direction;
  std::string bitplane;  // down: output path (optional); up: input path
  std::string out;
};

inline std::string dataset_for_input(const Shape& input_shape) {
  if (input_shape == Shape{1, 28, 28}) return "mnist";
  if (input_shape == Shape{3, 32, 32}) return "cifar10";
  throw Error(ErrorCode::InvalidArgument, "no known dataset for input shape " + shape_string(input_shape));
}

inline Shape input_shape_for(const std::string& dataset) {
  if (dataset == "mnist") return {1, 28, 28};
  if (dataset == "cifar10") return {3, 32, 32};
  throw Error(ErrorCode::InvalidArgument, "unknown dataset '" + dataset + "'");
}

inline int usage_error(std::ostream& err, const std::string& msg) {
  err << "error: " << msg << '\n';
  return kUsageError;
}

inline std::optional<Bytes> read_model(const std::string& path, std::ostream& err) {
  if (!std::filesystem::is_regular_file(path)) {
    usage_error(err, "model file not found: " + path);
    return std::nullopt;
  }
  return read_bytes(path);
}

/// Resolves the configuration and runs both training phases, writing
/// model.dpw, history.log and config.resolved into the run directory.
inline int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  try {
    if (!args.config_path.empty()) {
      if (!std::filesystem::is_regular_file(args.config_path)) {
        return usage_error(err, "config file not found: " + args.config_path);
      }
      rc = load_config_file(args.config_path);
    }
    for (const auto& [k, v] : args.overrides) set_config_value(rc, k, v);
    rc.train.data_dir = resolve_data_dir(rc.train.data_dir).string();
    rc.validate();
    (void)make_architecture<float>(rc.train.arch, input_shape_for(rc.train.dataset), 10);
  } catch (const Error& e) {
    return usage_error(err, e.what());
  }

  const std::filesystem::path run_dir = args.out.empty()
                                            ? std::filesystem::path("runs") / rc.name
                                            : std::filesystem::path(args.out);
  std::ofstream history;
  try {
    std::filesystem::create_directories(run_dir);
    {
      std::ofstream snap(run_dir / "config.resolved", std::ios::trunc);
      snap << resolved_config_text(rc);
      if (!snap) throw Error(ErrorCode::Io, "cannot write " + (run_dir / "config.resolved").string());
    }
    DataSplits data = load_dataset(rc.train.dataset, rc.train.data_dir);
    const Dataset train = take(data.train, rc.train.train_limit);
    const Dataset test = take(data.test, rc.train.test_limit);

    history.open(run_dir / "history.log", std::ios::trunc);
    if (!history) throw Error(ErrorCode::Io, "cannot write " + (run_dir / "history.log").string());
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& rec) {
      history << to_json(rec).dump() << '\n';
      history.flush();
      out << "epoch " << rec.epoch << " phase " << rec.phase << " [" << rec.trainable
          << "] loss " << rec.train_loss << " low " << rec.low_accuracy << "% high "
          << rec.high_accuracy << "%\n";
    };
    const TrainResult result = run_training(rc.train, rc.plan, train, test, hooks);
    write_bytes(run_dir / "model.dpw", pack(freeze(result.model), true));
    out << "wrote " << (run_dir / "model.dpw").string() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kOk;
}

inline nlohmann::ordered_json levels_json(const std::vector<LayerLevels>& levels, bool high) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const LayerLevels& l : levels) {
    nlohmann::ordered_json j{{"layer", l.name}, {"low", l.low}};
    if (high) j["high"] = l.high;
    arr.push_back(std::move(j));
  }
  return arr;
}

/// Prints top-1 accuracy at the requested precision and per-layer distinct
/// level counts as one JSON object.
inline int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  QuantizedModel<float> qm;
  Precision precision;
  std::string dataset;
  try {
    precision = parse_precision(args.precision);
    const auto bytes = read_model(args.model_path, err);
    if (!bytes) return kUsageError;
    qm = unpack(*bytes);
    if (precision == Precision::High && !qm.has_upscale) {
      return usage_error(err, "model " + args.model_path + " has no up-scaling bits; high precision unavailable");
    }
    dataset = args.dataset.empty() ? dataset_for_input(qm.net.input_shape) : args.dataset;
    if (input_shape_for(dataset) != qm.net.input_shape) {
      return usage_error(err, "dataset " + dataset + " does not match the model input shape");
    }
  } catch (const Error& e) {
    return usage_error(err, e.what());
  }
  try {
    const DataSplits data = load_dataset(dataset, resolve_data_dir(args.data_dir));
    const Dataset test = take(data.test, args.limit);
    const double acc = accuracy(qm, test, precision);
    nlohmann::ordered_json j;
    j["model"] = args.model_path;
    j["precision"] = to_string(precision);
    j["bits"] = precision == Precision::Low ? qm.spec.bits() : qm.spec.bits() + 1;
    j["dataset"] = dataset;
    j["samples"] = test.size();
    j["accuracy"] = acc;
    j["levels"] = levels_json(layer_level_counts(qm), qm.has_upscale);
    out << j.dump(2) << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kOk;
}

inline std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

/// `down` writes the stripped stream and the detached .dpb; `up` re-attaches
/// a .dpb. Outputs default to <stem>.low.dpw / <stem>.dpb / <stem>.dual.dpw
/// next to the input.
inline int cmd_switch(const SwitchArgs& args, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  SwitchDirection direction;
  std::optional<Bytes> bytes;
  try {
    direction = parse_direction(args.direction);
  } catch (const Error& e) {
    return usage_error(err, e.what());
  }
  bytes = read_model(args.model_path, err);
  if (!bytes) return kUsageError;
  const fs::path in_path(args.model_path);
  try {
    if (direction == SwitchDirection::Down) {
      const fs::path out_path = args.out.empty() ? sibling(in_path, ".low.dpw") : fs::path(args.out);
      const fs::path bp_path = args.bitplane.empty() ? sibling(out_path, ".dpb") : fs::path(args.bitplane);
      if (fs::exists(out_path) && fs::equivalent(out_path, in_path)) {
        return usage_error(err, "refusing to overwrite the input " + args.model_path);
      }
      const SwitchResult res = switch_precision(*bytes, direction);
      write_bytes(out_path, res.stream);
      write_bytes(bp_path, *res.bitplane);
      out << "wrote " << out_path.string() << " (" << res.stream.size() << " bytes) and "
          << bp_path.string() << " (" << res.bitplane->size() << " bytes)\n";
    } else {
      if (args.bitplane.empty()) return usage_error(err, "--bitplane is required for --direction up");
      if (!fs::is_regular_file(args.bitplane)) {
        return usage_error(err, "bit-plane file not found: " + args.bitplane);
      }
      const fs::path out_path = args.out.empty() ? sibling(in_path, ".dual.dpw") : fs::path(args.out);
      if (fs::exists(out_path) && fs::equivalent(out_path, in_path)) {
        return usage_error(err, "refusing to overwrite the input " + args.model_path);
      }
      const Bytes plane = read_bytes(args.bitplane);
      const SwitchResult res = switch_precision(*bytes, direction, std::span<const std::uint8_t>(plane));
      write_bytes(out_path, res.stream);
      out << "wrote " << out_path.string() << " (" << res.stream.size() << " bytes)\n";
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Io) {
      err << "error: " << e.what() << '\n';
      return kRuntimeFailure;
    }
    return usage_error(err, e.what());
  }
  return kOk;
}

/// Per-layer bit-widths, scales, index histograms and distinct-level counts.
inline int cmd_inspect(const std::string& model_path, std::ostream& out, std::ostream& err) {
  const auto bytes = read_model(model_path, err);
  if (!bytes) return kUsageError;
  QuantizedModel<float> qm;
  try {
    qm = unpack(*bytes);
  } catch (const Error& e) {
    return usage_error(err, e.what());
  }
  const auto hist_json = [](const LevelHistogram& h) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [level, count] : h) j[std::to_string(level)] = count;
    return j;
  };
  nlohmann::ordered_json j;
  j["arch"] = qm.net.arch;
  j["input_shape"] = qm.net.input_shape;
  j["classes"] = qm.net.classes;
  j["scale_rule"] = to_string(qm.spec.scale_rule());
  j["low_bits"] = qm.spec.bits();
  if (qm.has_upscale) j["high_bits"] = qm.spec.bits() + 1;
  j["bytes"] = bytes->size();
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < qm.net.layers.size(); ++i) {
    const Layer<float>& layer = qm.net.layers[i];
    if (!layer.has_params()) continue;
    nlohmann::ordered_json l;
    l["name"] = layer.name;
    l["kind"] = to_string(layer.kind);
    if (!qm.quant[i]) {
      l["quantized"] = false;
      layers.push_back(std::move(l));
      continue;
    }
    const QuantizedLayer<float>& q = *qm.quant[i];
    l["quantized"] = true;
    l["shape"] = q.low.shape;
    l["low"] = {{"bits", q.low.spec.bits()},
                {"scale", q.low.scale},
                {"distinct_levels", distinct_levels(q.low.indices)},
                {"histogram", hist_json(level_histogram(q.low.indices))}};
    if (qm.has_upscale) {
      const LevelTensor<float> hi = high_levels(q);
      l["high"] = {{"bits", hi.spec.bits()},
                   {"scale", hi.scale},
                   {"distinct_levels", distinct_levels(hi.indices)},
                   {"histogram", hist_json(level_histogram(hi.indices))}};
    }
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  out << j.dump(2) << '\n';
  return kOk;
}

}  // namespace dualprec::cli
