#include "csks/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include <omp.h>

#include <json.hpp>

#include "csks/csv.hpp"
#include "csks/error.hpp"
#include "csks/kernels.hpp"

namespace csks::commands {

namespace fs = std::filesystem;
using config::ToolkitConfig;

namespace {

// Stream tags for derive_seed; fixed so reruns reproduce every artifact.
enum SeedTag : std::uint64_t {
  tag_split = 1,
  tag_background = 2,
  tag_val = 3,
  tag_test = 4,
  tag_bank = 5,
  tag_aux_corpus = 6,
  tag_aux_set = 7,
  tag_model = 8,
  tag_pretrain = 9,
};

std::string relative_to(const fs::path& file, const fs::path& dir) {
  return fs::absolute(file).lexically_normal().lexically_relative(fs::absolute(dir).lexically_normal()).generic_string();
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw DataError(what + " not found: " + p.string());
}

std::vector<datasim::KeywordUtterance> load_utterances(const fs::path& manifest) {
  require_file(manifest, "utterance manifest");
  std::vector<datasim::KeywordUtterance> out;
  for (const auto& e : datasim::read_corpus_manifest(manifest)) {
    AudioClip clip = load_wav(e.wav_path);
    if (clip.sample_rate != kCanonicalRate) clip = dsp::resample(clip, kCanonicalRate);
    out.push_back({std::move(clip), e.keyword_id, e.speaker_id});
  }
  return out;
}

std::vector<datasim::CorpusEntry> entries_for(const std::vector<datasim::KeywordUtterance>& utts,
                                              const std::vector<std::string>& wav_paths, const fs::path& dir) {
  std::vector<datasim::CorpusEntry> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    out.push_back({relative_to(wav_paths[i], dir), utts[i].keyword_id, utts[i].speaker_id});
  }
  return out;
}

std::vector<AudioClip> load_background_dir(const fs::path& dir) {
  std::vector<AudioClip> out;
  if (dir.empty()) return out;
  if (!fs::is_directory(dir)) throw DataError("background directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    AudioClip clip = load_wav(f);
    if (clip.sample_rate != kCanonicalRate) clip = dsp::resample(clip, kCanonicalRate);
    out.push_back(std::move(clip));
  }
  return out;
}

struct Dataset {
  int n_keywords = 0;
  std::vector<datasim::KeywordUtterance> train;
  std::vector<AudioClip> background;
  std::vector<LabeledFeatures> validation;
};

int read_dataset_keywords(const fs::path& data_dir) {
  const fs::path p = data_dir / "dataset.json";
  require_file(p, "dataset description (run simulate first)");
  std::ifstream in(p);
  try {
    return nlohmann::json::parse(in).at("n_keywords").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

std::vector<LabeledFeatures> load_validation(const fs::path& data_dir, const dsp::FeatureConfig& features) {
  const fs::path manifest = data_dir / "val" / "segments.csv";
  require_file(manifest, "validation manifest");
  const auto entries = datasim::read_segment_manifest(manifest);
  std::vector<datasim::LabeledSegment> segs;
  segs.reserve(entries.size());
  for (const auto& e : entries) segs.push_back({load_wav(e.wav_path), e.label, e.span, 1.0});
  return trainer::featurize(segs, features);
}

Dataset load_dataset(const ToolkitConfig& c) {
  const fs::path dir = c.data_dir();
  Dataset d;
  d.n_keywords = read_dataset_keywords(dir);
  d.train = load_utterances(dir / "train_utterances.csv");
  const fs::path bg_manifest = dir / "background.csv";
  require_file(bg_manifest, "background manifest");
  const csv::Table t = csv::read(bg_manifest);
  const std::size_t col = t.column("wav_path");
  for (const auto& row : t.rows) d.background.push_back(load_wav(dir / row[col]));
  d.validation = load_validation(dir, c.features);
  return d;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

spotting::DecisionRule rule_for(trainer::Variant v) {
  switch (v) {
    case trainer::Variant::honk_ce:
    case trainer::Variant::finetune_ce:
      return spotting::DecisionRule::head_argmax;
    case trainer::Variant::finetune_proto:
      return spotting::DecisionRule::nearest_prototype;
    case trainer::Variant::finetune_proto_metric:
      break;
  }
  return spotting::DecisionRule::thresholded_prototype;
}

bool is_not_head(const std::string& name) { return name.rfind("head.", 0) != 0; }

}  // namespace

void set_workers(int workers) {
  if (workers < 0) throw UsageError("--workers must be non-negative");
  kernels::set_worker_count(workers);
  if (workers > 0) omp_set_num_threads(workers);
}

fs::path corpus_manifest_path(const ToolkitConfig& c) {
  return c.paths.corpus_manifest.empty() ? fs::path(c.paths.output_dir) / "corpus" / "manifest.csv"
                                         : fs::path(c.paths.corpus_manifest);
}

SynthResult cmd_synth(const ToolkitConfig& c) {
  c.validate();
  datasim::SynthOptions opt;
  opt.template_seed = c.synth.template_seed;
  const auto corpus = datasim::synth_corpus(c.synth.n_keywords, c.synth.n_speakers, c.synth.reps, c.seed, opt);
  const fs::path manifest = corpus_manifest_path(c);
  const fs::path dir = manifest.parent_path().empty() ? fs::path(".") : manifest.parent_path();
  fs::create_directories(dir);
  std::vector<std::string> paths(corpus.size());
  char name[96];
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::snprintf(name, sizeof name, "utt%05zu_k%02d_%s.wav", i, corpus[i].keyword_id, corpus[i].speaker_id.c_str());
    paths[i] = (dir / name).string();
    save_wav(paths[i], corpus[i].clip);
  }
  datasim::write_corpus_manifest(manifest, entries_for(corpus, paths, dir), config::provenance_comments(c));
  return {manifest, corpus.size()};
}

SimulateResult cmd_simulate(const ToolkitConfig& c) {
  c.validate();
  const fs::path manifest = corpus_manifest_path(c);
  const auto corpus = load_utterances(manifest);
  if (corpus.empty()) throw DataError("corpus manifest is empty: " + manifest.string());

  std::vector<AudioClip> pool = load_background_dir(c.paths.background_dir);
  if (c.simulate.synthetic_background > 0) {
    auto synthetic = datasim::make_background_pool(c.simulate.synthetic_background, c.simulate.synthetic_seconds,
                                                   c.simulate.background_style,
                                                   datasim::derive_seed(c.seed, {tag_background}));
    for (auto& clip : synthetic) pool.push_back(std::move(clip));
  }
  if (pool.empty()) {
    throw UsageError("no background audio: set paths.background_dir or simulate.synthetic_background > 0");
  }

  int n_keywords = 0;
  for (const auto& u : corpus) n_keywords = std::max(n_keywords, u.keyword_id + 1);
  const auto [train, val] =
      datasim::speaker_split(corpus, c.simulate.train_fraction, datasim::derive_seed(c.seed, {tag_split}));

  // Original corpus paths, re-expressed relative to the data directory.
  const auto entries = datasim::read_corpus_manifest(manifest);
  std::set<std::string> train_speakers;
  for (const auto& u : train) train_speakers.insert(u.speaker_id);
  const fs::path dir = c.data_dir();
  fs::create_directories(dir / "background");
  fs::create_directories(dir / "val");
  const auto comments = config::provenance_comments(c);
  std::vector<datasim::CorpusEntry> train_entries, val_entries;
  for (const auto& e : entries) {
    datasim::CorpusEntry r{relative_to(e.wav_path, dir), e.keyword_id, e.speaker_id};
    (train_speakers.count(e.speaker_id) ? train_entries : val_entries).push_back(std::move(r));
  }
  datasim::write_corpus_manifest(dir / "train_utterances.csv", train_entries, comments);
  datasim::write_corpus_manifest(dir / "val_utterances.csv", val_entries, comments);

  csv::Table bg;
  bg.comments = comments;
  bg.header = {"wav_path"};
  char name[64];
  for (std::size_t i = 0; i < pool.size(); ++i) {
    std::snprintf(name, sizeof name, "background/bg%03zu.wav", i);
    save_wav(dir / name, pool[i]);
    bg.rows.push_back({name});
  }
  csv::write(dir / "background.csv", bg);

  const auto segs = trainer::simulate_fixed_set(val, pool, n_keywords, c.simulate.val_background, c.simulate.mix,
                                                datasim::derive_seed(c.seed, {tag_val}), c.simulate.all_positions);
  std::vector<datasim::SegmentEntry> seg_entries;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    std::snprintf(name, sizeof name, "seg%05zu.wav", i);
    save_wav(dir / "val" / name, segs[i].clip);
    seg_entries.push_back({name, segs[i].label, segs[i].keyword_span});
  }
  datasim::write_segment_manifest(dir / "val" / "segments.csv", seg_entries, comments);

  SimulateResult result{n_keywords, train.size(), segs.size(), pool.size(), 0};
  if (c.simulate.test_recordings > 0) {
    fs::create_directories(dir / "test");
    std::vector<evalkit::GroundTruthSpan> truths;
    for (int r = 0; r < c.simulate.test_recordings; ++r) {
      datasim::Rng rng(datasim::derive_seed(c.seed, {tag_test, static_cast<std::uint64_t>(r)}));
      const auto rec = datasim::simulate_recording(val, pool, c.simulate.recording, rng);
      std::snprintf(name, sizeof name, "rec%03d", r);
      save_wav(dir / "test" / (std::string(name) + ".wav"), rec.clip);
      for (const auto& k : rec.keywords) truths.push_back({name, k.keyword_id, k.start_s, k.end_s});
    }
    evalkit::write_truth_csv(dir / "test" / "truth.csv", truths, comments);
    result.test_recordings = static_cast<std::size_t>(c.simulate.test_recordings);
  }

  nlohmann::json meta = nlohmann::json::parse(config::provenance_json(c));
  meta["n_keywords"] = n_keywords;
  meta["train_utterances"] = train.size();
  meta["val_utterances"] = val.size();
  meta["val_segments"] = segs.size();
  meta["background_clips"] = pool.size();
  write_text(dir / "dataset.json", meta.dump(2) + "\n");
  return result;
}

TrainResult cmd_train(const ToolkitConfig& c, std::ostream* log) {
  c.validate();
  Dataset data = load_dataset(c);
  const int K = data.n_keywords;
  const trainer::Variant variant = c.train.variant;

  ModelConfig mc = c.model;
  mc.feature_kind = c.features.kind;
  mc.n_classes = trainer::uses_head(variant) ? static_cast<std::size_t>(K + 1) : 0;
  Model model = Model::build(mc, datasim::derive_seed(c.seed, {tag_model}));

  const bool finetune = variant != trainer::Variant::honk_ce;
  if (finetune && c.pretrain.epochs > 0) {
    datasim::SynthOptions aopt;
    aopt.template_seed = c.pretrain.aux_template_seed;
    const auto aux = datasim::synth_corpus(c.pretrain.aux_classes, c.pretrain.aux_speakers, c.pretrain.aux_reps,
                                           datasim::derive_seed(c.seed, {tag_aux_corpus}), aopt);
    const auto aux_segs = trainer::simulate_fixed_set(aux, data.background, c.pretrain.aux_classes, 40, c.simulate.mix,
                                                      datasim::derive_seed(c.seed, {tag_aux_set}), true);
    const auto aux_set = trainer::featurize(aux_segs, c.features);
    ModelConfig pc = mc;
    pc.n_classes = static_cast<std::size_t>(c.pretrain.aux_classes + 1);
    pc.frozen_prefix = 0;
    pc.pretrained_checkpoint.clear();
    Model pre = Model::build(pc, datasim::derive_seed(c.seed, {tag_pretrain}));
    PretrainOptions po;
    po.epochs = c.pretrain.epochs;
    po.batch_size = c.pretrain.batch_size;
    po.learning_rate = c.pretrain.learning_rate;
    po.seed = datasim::derive_seed(c.seed, {tag_pretrain, 1});
    const auto pr = pretrain_auxiliary(pre, aux_set, po);
    transfer_parameters(pre, model, is_not_head);
    if (log) *log << "pretrain: accuracy " << pr.epoch_accuracy.back() << " loss " << pr.epoch_loss.back() << "\n";
  }
  if (!mc.pretrained_checkpoint.empty()) {
    if (!finetune) throw UsageError("honk_ce trains from scratch; model.pretrained_checkpoint must be empty");
    require_file(mc.pretrained_checkpoint, "pretrained checkpoint");
    const auto loaded = load_parameters(model, mc.pretrained_checkpoint, LoadMode::partial, is_not_head);
    if (log) *log << "loaded " << loaded.size() << " pretrained tensors\n";
  }
  model.set_frozen_prefix(mc.frozen_prefix);

  trainer::SimulatedSource::Options so;
  so.mix = c.simulate.mix;
  so.augment = c.simulate.augment;
  so.augment_enabled = c.simulate.augment_enabled;
  so.features = c.features;
  trainer::SimulatedSource source(data.train, data.background, K, so);

  trainer::TrainConfig tc = c.train;
  tc.seed = c.seed;
  tc.output_dir = fs::path(c.paths.output_dir) / "model";
  tc.checkpoint_metadata = config::provenance_json(c);
  TrainResult result;
  result.report = trainer::fit(model, source, data.validation, tc);
  result.checkpoint = result.report.best_checkpoint;
  if (log) {
    for (const auto& e : result.report.epochs) {
      *log << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_loss " << e.val_loss << " val_acc "
           << e.val_accuracy << " val_f1 " << e.val_f1 << "\n";
    }
    *log << "stop: " << result.report.stop_reason << "\n";
  }

  // Prototypes from the training speakers at one position each plus background.
  const auto bank_segs = trainer::simulate_fixed_set(data.train, data.background, K, c.simulate.val_background,
                                                     c.simulate.mix, datasim::derive_seed(c.seed, {tag_bank}), false);
  auto bank_set = trainer::featurize(bank_segs, c.features);
  if (c.bank_with_validation) {
    for (const auto& item : data.validation) {
      if (item.label < K) bank_set.push_back(item);
    }
  }
  spotting::BankFile bf;
  bf.rule = rule_for(variant);
  bf.n_keywords = K;
  bf.bank = spotting::build_inference_bank(model, bank_set, K, trainer::background_prototype(variant), c.train.distance);
  if (bf.rule == spotting::DecisionRule::thresholded_prototype) {
    const double tau = spotting::calibrate_threshold(model, bf.bank, data.validation, K, c.per_class_thresholds);
    if (log) *log << "calibrated threshold " << tau << "\n";
  }
  result.bank = c.bank_path();
  result.rule = bf.rule;
  spotting::save_bank(result.bank, bf, config::provenance_json(c));
  return result;
}

std::vector<spotting::RecordingEvents> cmd_spot(const ToolkitConfig& c, const std::vector<fs::path>& recordings,
                                                const fs::path& events_csv) {
  c.validate();
  const fs::path ckpt = c.checkpoint_path();
  require_file(ckpt, "checkpoint");
  const Model model = load_checkpoint(ckpt);
  const fs::path bank_path = c.bank_path();
  require_file(bank_path, "prototype bank");
  const spotting::BankFile bf = spotting::load_bank(bank_path);
  if (bf.rule == spotting::DecisionRule::head_argmax && !model.has_head()) {
    throw DataError("bank requests head decisions but the checkpoint has no classification head");
  }
  spotting::SpotConfig sc = c.spot;
  sc.features = c.features;
  sc.rule = bf.rule;
  const losses::PrototypeBank* bank = bf.rule == spotting::DecisionRule::head_argmax ? nullptr : &bf.bank;

  std::vector<spotting::RecordingEvents> out;
  std::vector<std::string> ids;
  for (const auto& path : recordings) {
    require_file(path, "recording");
    AudioClip clip = load_wav(path);
    if (clip.sample_rate != kCanonicalRate) clip = dsp::resample(clip, kCanonicalRate);
    out.push_back({path.stem().string(), spotting::spot(model, bank, clip, sc, bf.n_keywords)});
    ids.push_back(path.stem().string());
  }
  auto comments = config::provenance_comments(c);
  std::string listed = "recordings=";
  for (std::size_t i = 0; i < ids.size(); ++i) listed += (i ? ";" : "") + ids[i];
  comments.push_back(listed);
  spotting::write_events_csv(events_csv, out, comments);
  fs::path json_path = events_csv;
  json_path.replace_extension(".json");
  spotting::write_events_json(json_path, out, config::provenance_json(c));
  return out;
}

evalkit::RenderedReport cmd_eval(const ToolkitConfig& c, const std::vector<EvalInput>& inputs,
                                 const fs::path& truth_csv, const fs::path& out_dir) {
  if (inputs.empty()) throw UsageError("eval needs at least one events file");
  require_file(truth_csv, "truth file");
  const auto truths = evalkit::read_truth_csv(truth_csv);
  std::set<std::string> truth_ids;
  for (const auto& t : truths) truth_ids.insert(t.recording_id);

  std::vector<evalkit::ReportRow> rows;
  for (const auto& in : inputs) {
    require_file(in.events_csv, "events file");
    const auto events = spotting::read_events_csv(in.events_csv);
    for (const auto& rec : events) {
      if (!rec.events.empty() && !truth_ids.count(rec.recording_id)) {
        throw DataError(in.events_csv.string() + ": recording '" + rec.recording_id + "' has no ground truth");
      }
    }
    for (const auto& line : csv::read(in.events_csv).comments) {
      if (line.rfind("recordings=", 0) != 0) continue;
      for (const auto& id : csv::split(line.substr(11), ';')) {
        if (!id.empty() && !truth_ids.count(id)) {
          throw DataError(in.events_csv.string() + ": recording '" + id + "' has no ground truth");
        }
      }
    }
    const auto preds = evalkit::flatten(events);
    const auto match = evalkit::match_events(preds, truths, c.match);
    rows.push_back({in.name, evalkit::average_scores(match, c.averaging), match.pooled});
  }
  auto report = evalkit::render_report(rows, config::provenance_json(c));
  fs::create_directories(out_dir);
  write_text(out_dir / "report.txt", report.text);
  write_text(out_dir / "report.csv", report.csv);
  write_text(out_dir / "report.json", report.json);
  return report;
}

double cmd_calibrate(const ToolkitConfig& c) {
  c.validate();
  const fs::path ckpt = c.checkpoint_path();
  require_file(ckpt, "checkpoint");
  const Model model = load_checkpoint(ckpt);
  const fs::path bank_path = c.bank_path();
  require_file(bank_path, "prototype bank");
  spotting::BankFile bf = spotting::load_bank(bank_path);
  if (bf.bank.size() == 0) throw DataError("prototype bank is empty: " + bank_path.string());
  const auto validation = load_validation(c.data_dir(), c.features);
  bf.rule = spotting::DecisionRule::thresholded_prototype;
  const double tau = spotting::calibrate_threshold(model, bf.bank, validation, bf.n_keywords, c.per_class_thresholds);
  spotting::save_bank(bank_path, bf, config::provenance_json(c));
  return tau;
}

}  // namespace csks::commands
