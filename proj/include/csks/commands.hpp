#pragma once

// Pipeline commands behind the csks executable. Every command takes the full
// toolkit configuration and writes its artifacts under the configured paths.
//
// Layout (defaults):
//   <output_dir>/corpus/manifest.csv, *.wav          synth
//   <data_dir>/dataset.json                          simulate
//   <data_dir>/train_utterances.csv, val_utterances.csv
//   <data_dir>/background/*.wav, background.csv
//   <data_dir>/val/*.wav, val/segments.csv
//   <data_dir>/test/*.wav, test/truth.csv            (simulate.test_recordings > 0)
//   <output_dir>/model/best.ckpt, bank.json, report.json, metrics.csv   train

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "csks/config.hpp"
#include "csks/evalkit.hpp"
#include "csks/spotting.hpp"
#include "csks/trainer.hpp"

namespace csks::commands {

// Caps OpenMP threads; 0 keeps the runtime default.
void set_workers(int workers);

std::filesystem::path corpus_manifest_path(const config::ToolkitConfig& config);

struct SynthResult {
  std::filesystem::path manifest;
  std::size_t files = 0;
};
SynthResult cmd_synth(const config::ToolkitConfig& config);

struct SimulateResult {
  int n_keywords = 0;
  std::size_t train_utterances = 0;
  std::size_t val_segments = 0;
  std::size_t background_clips = 0;
  std::size_t test_recordings = 0;
};
SimulateResult cmd_simulate(const config::ToolkitConfig& config);

struct TrainResult {
  trainer::TrainReport report;
  std::filesystem::path checkpoint;
  std::filesystem::path bank;
  spotting::DecisionRule rule = spotting::DecisionRule::thresholded_prototype;
};
TrainResult cmd_train(const config::ToolkitConfig& config, std::ostream* log = nullptr);

// Recording ids are file stems. Writes events CSV (and JSON next to it).
std::vector<spotting::RecordingEvents> cmd_spot(const config::ToolkitConfig& config,
                                                const std::vector<std::filesystem::path>& recordings,
                                                const std::filesystem::path& events_csv);

struct EvalInput {
  std::string name;
  std::filesystem::path events_csv;
};
// One report row per events file; writes report.txt/.csv/.json into out_dir.
evalkit::RenderedReport cmd_eval(const config::ToolkitConfig& config, const std::vector<EvalInput>& inputs,
                                 const std::filesystem::path& truth_csv, const std::filesystem::path& out_dir);

// Recomputes the threshold(s) of an existing bank on the validation segments.
double cmd_calibrate(const config::ToolkitConfig& config);

}  // namespace csks::commands
