#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipwm/fr_surrogates.hpp"
#include "dipwm/meta_trainer.hpp"

namespace dipwm::config {

using Json = nlohmann::ordered_json;

// Every reader rejects unknown keys and reports the offending field by its
// dotted path (e.g. `train.batch_size`). Missing keys keep their defaults.

Json to_json(const codec::EncoderConfig& c);
Json to_json(const codec::DecoderConfig& c);
Json to_json(const meta::TrainConfig& c);
Json to_json(const meta::LossWeights& c);
Json to_json(const noise::NoisePoolConfig& c);
Json to_json(const meta::TrainerSetup& s);
Json to_json(const meta::LossBreakdown& b);

codec::EncoderConfig encoder_from_json(const Json& j, codec::EncoderConfig base = {}, const std::string& path = "encoder");
codec::DecoderConfig decoder_from_json(const Json& j, codec::DecoderConfig base = {}, const std::string& path = "decoder");
meta::TrainConfig train_from_json(const Json& j, meta::TrainConfig base = {}, const std::string& path = "train");
meta::LossWeights weights_from_json(const Json& j, meta::LossWeights base = {}, const std::string& path = "weights");
noise::NoisePoolConfig noise_from_json(const Json& j, noise::NoisePoolConfig base = {}, const std::string& path = "noise");
/// `base` supplies the defaults for absent keys.
meta::TrainerSetup setup_from_json(const Json& j, const meta::TrainerSetup& base = {});
meta::LossBreakdown breakdown_from_json(const Json& j);

struct CorpusSpec {
  /// Directory with one subdirectory per identity; empty means synthetic.
  std::filesystem::path dir;
  int identities = 16;
  int images_per_identity = 12;
  std::uint64_t seed = 1;
};

struct SurrogateSpec {
  /// Declared order fixes the pool partition: first P meta-train, next Q
  /// meta-test, the rest held out.
  std::vector<fr::Arch> archs{fr::Arch::cnn4, fr::Arch::depthwise, fr::Arch::mini_residual, fr::Arch::cnn4_wide};
  int epochs = 30;
  double far = 0.01;
  std::uint64_t seed = 100;
};

/// Everything the CLI needs for a run.
struct RunConfig {
  CorpusSpec corpus;
  SurrogateSpec surrogates;
  meta::TrainerSetup setup = meta::desk_preset();
  std::filesystem::path run_dir = "run";
  std::uint64_t eval_seed = 7;
  int eval_images = 64;

  std::filesystem::path surrogate_dir() const { return run_dir / "surrogates"; }
  std::filesystem::path checkpoint_dir() const { return run_dir / "checkpoints"; }
  std::filesystem::path report_dir() const { return run_dir / "reports"; }
};

Json to_json(const RunConfig& c);
RunConfig run_from_json(const Json& j);

/// Parses a config file; syntax errors carry the line and column, semantic
/// errors the field path. Relative paths resolve against the file's directory.
RunConfig load_run_config(const std::filesystem::path& file);

}  // namespace dipwm::config
