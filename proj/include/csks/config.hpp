#pragma once

// Toolkit configuration: one JSON document whose schema is the serialized
// default configuration. Unknown keys are rejected; command-line overrides use
// dotted paths ("train.max_epochs=3").

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csks/datasim.hpp"
#include "csks/dsp.hpp"
#include "csks/evalkit.hpp"
#include "csks/model.hpp"
#include "csks/spotting.hpp"
#include "csks/trainer.hpp"

namespace csks::config {

struct Paths {
  std::string corpus_manifest;  // synth output / simulate input
  std::string background_dir;   // optional directory of background WAVs
  std::string output_dir = "csks_out";
  std::string data_dir;         // simulate output / train input (defaults to <output_dir>/data)
  std::string checkpoint;       // spot/calibrate input (defaults to <output_dir>/model/best.ckpt)
  std::string bank;             // spot/calibrate input (defaults to <output_dir>/model/bank.json)
};

struct SynthSection {
  int n_keywords = 20;
  int n_speakers = 40;
  int reps = 3;
  std::uint64_t template_seed = 7;
};

struct SimulateSection {
  double train_fraction = 0.8;
  bool all_positions = true;
  // Background-only segments in the validation set.
  std::size_t val_background = 60;
  // Synthetic background clips generated in addition to background_dir files.
  int synthetic_background = 8;
  double synthetic_seconds = 30.0;
  datasim::BackgroundStyle background_style = datasim::BackgroundStyle::babble;
  datasim::MixConfig mix{};
  datasim::AugmentConfig augment{};
  bool augment_enabled = true;
  // Long test recordings built from validation speakers, with a truth CSV.
  int test_recordings = 0;
  datasim::RecordingOptions recording{};
};

struct PretrainSection {
  // 0 disables auxiliary pretraining.
  std::size_t epochs = 0;
  int aux_classes = 8;
  int aux_speakers = 6;
  int aux_reps = 2;
  std::uint64_t aux_template_seed = 991;
  std::size_t batch_size = 16;
  double learning_rate = 0.02;
};

struct ToolkitConfig {
  std::uint64_t seed = 1;
  int workers = 0;
  Paths paths{};
  SynthSection synth{};
  dsp::FeatureConfig features{};
  SimulateSection simulate{};
  ModelConfig model{};
  trainer::TrainConfig train{};
  PretrainSection pretrain{};
  spotting::SpotConfig spot{};
  bool per_class_thresholds = false;
  // Inference prototypes from training speakers only, or also validation keywords.
  bool bank_with_validation = false;
  evalkit::MatchOptions match{};
  evalkit::Averaging averaging = evalkit::Averaging::micro;

  std::filesystem::path data_dir() const;
  std::filesystem::path checkpoint_path() const;
  std::filesystem::path bank_path() const;
  void validate() const;
};

std::string to_json(const ToolkitConfig& config);
// Parses a full or partial document on top of the defaults.
ToolkitConfig from_json(const std::string& text);
ToolkitConfig load(const std::filesystem::path& path);
// Applies "dotted.path=value"; the value is parsed as JSON and falls back to a string.
void apply_override(ToolkitConfig& config, const std::string& assignment);

// FNV-1a over the canonical JSON without paths and workers.
std::uint64_t digest(const ToolkitConfig& config);
std::string digest_hex(const ToolkitConfig& config);
// {"config_digest": "...", "seed": N, "tool": "csks"}
std::string provenance_json(const ToolkitConfig& config);
std::vector<std::string> provenance_comments(const ToolkitConfig& config);

}  // namespace csks::config
