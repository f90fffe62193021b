// csks: synth | simulate | train | spot | eval | calibrate

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "csks/commands.hpp"
#include "csks/error.hpp"

namespace {

namespace fs = std::filesystem;
using namespace csks;

struct Globals {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string seed;
  int workers = -1;
};

config::ToolkitConfig resolve(const Globals& g, const std::vector<std::string>& extra = {}) {
  config::ToolkitConfig c = g.config_file.empty() ? config::ToolkitConfig{} : config::load(g.config_file);
  for (const auto& o : g.overrides) config::apply_override(c, o);
  for (const auto& o : extra) config::apply_override(c, o);
  if (!g.seed.empty()) config::apply_override(c, "seed=" + g.seed);
  if (g.workers >= 0) config::apply_override(c, "workers=" + std::to_string(g.workers));
  commands::set_workers(c.workers);
  return c;
}

int run(int argc, char** argv) {
  CLI::App app{"Continuous-speech keyword spotting toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("-c,--config", g.config_file, "JSON configuration file");
  app.add_option("--set", g.overrides, "Override a configuration value, e.g. train.max_epochs=3");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--workers", g.workers, "Thread cap (1 = deterministic single thread, 0 = default)");

  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");

  auto* synth = app.add_subcommand("synth", "Generate the synthetic keyword corpus");
  auto* simulate = app.add_subcommand("simulate", "Split speakers and write validation/background/test data");

  auto* train = app.add_subcommand("train", "Train a model variant, build and calibrate its prototype bank");
  std::string variant;
  std::string max_epochs;
  train->add_option("--variant", variant, "honk_ce | finetune_ce | finetune_proto | finetune_proto_metric");
  train->add_option("--max-epochs", max_epochs, "Epoch cap (0 writes the initial checkpoint only)");

  auto* spot = app.add_subcommand("spot", "Detect keywords in long recordings");
  std::vector<std::string> recordings;
  std::string events_out = "events.csv";
  spot->add_option("recordings", recordings, "WAV recordings");
  spot->add_option("-o,--out", events_out, "Events CSV path");

  auto* eval = app.add_subcommand("eval", "Score events against ground truth");
  std::vector<std::string> event_files;
  std::string truth, report_dir = "report";
  eval->add_option("--events", event_files, "Events CSV, optionally NAME=PATH; repeatable")->required();
  eval->add_option("--truth", truth, "Ground-truth CSV")->required();
  eval->add_option("-o,--out", report_dir, "Report directory");

  auto* calibrate = app.add_subcommand("calibrate", "Recalibrate the rejection threshold of a bank");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }

  std::vector<std::string> extra;
  if (!variant.empty()) extra.push_back("train.variant=\"" + variant + "\"");
  if (!max_epochs.empty()) extra.push_back("train.max_epochs=" + max_epochs);
  const config::ToolkitConfig c = resolve(g, extra);
  if (print_config) {
    std::cout << config::to_json(c) << "\n";
    return 0;
  }

  if (*synth) {
    const auto r = commands::cmd_synth(c);
    std::cout << "wrote " << r.files << " utterances, manifest " << r.manifest.string() << "\n";
  } else if (*simulate) {
    const auto r = commands::cmd_simulate(c);
    std::cout << "keywords " << r.n_keywords << ", train utterances " << r.train_utterances << ", validation segments "
              << r.val_segments << ", background clips " << r.background_clips << ", test recordings "
              << r.test_recordings << "\n";
  } else if (*train) {
    const auto r = commands::cmd_train(c, &std::cerr);
    std::cout << "checkpoint " << r.checkpoint.string() << ", bank " << r.bank.string() << "\n";
  } else if (*spot) {
    std::vector<fs::path> paths(recordings.begin(), recordings.end());
    const auto events = commands::cmd_spot(c, paths, events_out);
    std::size_t n = 0;
    for (const auto& r : events) n += r.events.size();
    std::cout << n << " events from " << events.size() << " recordings -> " << events_out << "\n";
  } else if (*eval) {
    std::vector<commands::EvalInput> inputs;
    for (const auto& spec : event_files) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos) {
        inputs.push_back({fs::path(spec).stem().string(), spec});
      } else {
        inputs.push_back({spec.substr(0, eq), spec.substr(eq + 1)});
      }
    }
    std::cout << commands::cmd_eval(c, inputs, truth, report_dir).text;
  } else if (*calibrate) {
    std::cout << "threshold " << commands::cmd_calibrate(c) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const csks::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
