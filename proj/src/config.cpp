#include "csks/config.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "csks/error.hpp"

namespace csks::config {

using nlohmann::json;

namespace {

template <typename E, std::size_t N>
using Names = std::array<std::pair<E, const char*>, N>;

template <typename E, std::size_t N>
json name_of(E value, const Names<E, N>& names) {
  for (const auto& [e, s] : names) {
    if (e == value) return s;
  }
  return names.front().second;
}

template <typename E, std::size_t N>
E parse_name(const json& j, const Names<E, N>& names, const char* what) {
  const std::string s = j.get<std::string>();
  for (const auto& [e, n] : names) {
    if (s == n) return e;
  }
  std::string options;
  for (const auto& [e, n] : names) options += std::string(options.empty() ? "" : ", ") + n;
  throw UsageError(std::string("invalid ") + what + " '" + s + "' (expected one of: " + options + ")");
}

const Names<FeatureKind, 2> kFeatureKinds{{{FeatureKind::spectrogram, "spectrogram"}, {FeatureKind::mfcc, "mfcc"}}};
const Names<dsp::BandpassPlacement, 3> kPlacements{{{dsp::BandpassPlacement::none, "none"},
                                                     {dsp::BandpassPlacement::mfcc_only, "mfcc_only"},
                                                     {dsp::BandpassPlacement::both, "both"}}};
const Names<datasim::InsertMode, 2> kInsertModes{
    {{datasim::InsertMode::mix, "mix"}, {datasim::InsertMode::concatenate, "concatenate"}}};
const Names<datasim::BackgroundStyle, 2> kStyles{
    {{datasim::BackgroundStyle::noise, "noise"}, {datasim::BackgroundStyle::babble, "babble"}}};
const Names<Architecture, 2> kArchitectures{
    {{Architecture::conv_recurrent, "conv_recurrent"}, {Architecture::residual_conv, "residual_conv"}}};
const Names<RecurrentCell, 2> kCells{{{RecurrentCell::gru, "gru"}, {RecurrentCell::lstm, "lstm"}}};
const Names<Precision, 2> kPrecisions{{{Precision::f32, "f32"}, {Precision::f64, "f64"}}};
const Names<trainer::Variant, 4> kVariants{{{trainer::Variant::honk_ce, "honk_ce"},
                                             {trainer::Variant::finetune_ce, "finetune_ce"},
                                             {trainer::Variant::finetune_proto, "finetune_proto"},
                                             {trainer::Variant::finetune_proto_metric, "finetune_proto_metric"}}};
const Names<trainer::Selection, 2> kSelections{
    {{trainer::Selection::val_loss, "val_loss"}, {trainer::Selection::val_f1, "val_f1"}}};
const Names<OptimizerKind, 2> kOptimizers{{{OptimizerKind::sgd_momentum, "sgd_momentum"}, {OptimizerKind::adam, "adam"}}};
const Names<losses::DistanceKind, 2> kDistances{
    {{losses::DistanceKind::euclidean, "euclidean"}, {losses::DistanceKind::squared, "squared"}}};
const Names<spotting::DecisionRule, 3> kRules{{{spotting::DecisionRule::head_argmax, "head_argmax"},
                                               {spotting::DecisionRule::nearest_prototype, "nearest_prototype"},
                                               {spotting::DecisionRule::thresholded_prototype, "thresholded_prototype"}}};
const Names<evalkit::MatchRule, 2> kMatchRules{
    {{evalkit::MatchRule::any_overlap, "any_overlap"}, {evalkit::MatchRule::iou, "iou"}}};
const Names<evalkit::Averaging, 2> kAveraging{{{evalkit::Averaging::micro, "micro"}, {evalkit::Averaging::macro, "macro"}}};

json encode(const dsp::FeatureConfig& f) {
  return {{"kind", name_of(f.kind, kFeatureKinds)},
          {"window_ms", f.window_ms},
          {"hop_ms", f.hop_ms},
          {"nfft", f.nfft},
          {"n_mels", f.n_mels},
          {"n_coeffs", f.n_coeffs},
          {"low_hz", f.low_hz},
          {"high_hz", f.high_hz},
          {"bandpass", name_of(f.bandpass, kPlacements)},
          {"log_floor", f.log_floor}};
}

void decode(const json& j, dsp::FeatureConfig& f) {
  f.kind = parse_name(j.at("kind"), kFeatureKinds, "feature kind");
  f.window_ms = j.at("window_ms");
  f.hop_ms = j.at("hop_ms");
  f.nfft = j.at("nfft");
  f.n_mels = j.at("n_mels");
  f.n_coeffs = j.at("n_coeffs");
  f.low_hz = j.at("low_hz");
  f.high_hz = j.at("high_hz");
  f.bandpass = parse_name(j.at("bandpass"), kPlacements, "band-pass placement");
  f.log_floor = j.at("log_floor");
}

json encode(const OptimizerConfig& o) {
  return {{"kind", name_of(o.kind, kOptimizers)},
          {"learning_rate", o.learning_rate},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon},
          {"total_steps", o.total_steps},
          {"min_lr_fraction", o.min_lr_fraction},
          {"clip_norm", o.clip_norm}};
}

void decode(const json& j, OptimizerConfig& o) {
  o.kind = parse_name(j.at("kind"), kOptimizers, "optimizer");
  o.learning_rate = j.at("learning_rate");
  o.momentum = j.at("momentum");
  o.beta1 = j.at("beta1");
  o.beta2 = j.at("beta2");
  o.epsilon = j.at("epsilon");
  o.total_steps = j.at("total_steps");
  o.min_lr_fraction = j.at("min_lr_fraction");
  o.clip_norm = j.at("clip_norm");
}

json encode(const ModelConfig& m) {
  json convs = json::array();
  for (const auto& l : m.conv_layers) {
    convs.push_back({{"channels", l.channels},
                     {"kernel_h", l.kernel_h},
                     {"kernel_w", l.kernel_w},
                     {"stride_h", l.stride_h},
                     {"stride_w", l.stride_w}});
  }
  return {{"architecture", name_of(m.architecture, kArchitectures)},
          {"feature_dim", m.feature_dim},
          {"embedding_dim", m.embedding_dim},
          {"conv_layers", convs},
          {"cell", name_of(m.cell, kCells)},
          {"recurrent_width", m.recurrent_width},
          {"recurrent_layers", m.recurrent_layers},
          {"residual_channels", m.residual_channels},
          {"residual_blocks", m.residual_blocks},
          {"pool_h", m.pool_h},
          {"pool_w", m.pool_w},
          {"input_offset", m.input_offset},
          {"input_scale", m.input_scale},
          {"precision", name_of(m.precision, kPrecisions)},
          {"pretrained_checkpoint", m.pretrained_checkpoint},
          {"frozen_prefix", m.frozen_prefix}};
}

void decode(const json& j, ModelConfig& m) {
  m.architecture = parse_name(j.at("architecture"), kArchitectures, "architecture");
  m.feature_dim = j.at("feature_dim");
  m.embedding_dim = j.at("embedding_dim");
  m.conv_layers.clear();
  for (const auto& l : j.at("conv_layers")) {
    m.conv_layers.push_back({l.at("channels"), l.at("kernel_h"), l.at("kernel_w"), l.at("stride_h"), l.at("stride_w")});
  }
  m.cell = parse_name(j.at("cell"), kCells, "recurrent cell");
  m.recurrent_width = j.at("recurrent_width");
  m.recurrent_layers = j.at("recurrent_layers");
  m.residual_channels = j.at("residual_channels");
  m.residual_blocks = j.at("residual_blocks");
  m.pool_h = j.at("pool_h");
  m.pool_w = j.at("pool_w");
  m.input_offset = j.at("input_offset");
  m.input_scale = j.at("input_scale");
  m.precision = parse_name(j.at("precision"), kPrecisions, "precision");
  m.pretrained_checkpoint = j.at("pretrained_checkpoint");
  m.frozen_prefix = j.at("frozen_prefix");
}

json encode(const trainer::TrainConfig& t) {
  return {{"variant", name_of(t.variant, kVariants)},
          {"optimizer", encode(t.optimizer)},
          {"n_support", t.n_support},
          {"n_query", t.n_query},
          {"n_background", t.n_background},
          {"steps_per_epoch", t.steps_per_epoch},
          {"max_epochs", t.max_epochs},
          {"patience", t.patience},
          {"lambda", t.lambda},
          {"distance", name_of(t.distance, kDistances)},
          {"selection", name_of(t.selection, kSelections)},
          {"cache_factor", t.cache_factor}};
}

void decode(const json& j, trainer::TrainConfig& t) {
  t.variant = parse_name(j.at("variant"), kVariants, "variant");
  decode(j.at("optimizer"), t.optimizer);
  t.n_support = j.at("n_support");
  t.n_query = j.at("n_query");
  t.n_background = j.at("n_background");
  t.steps_per_epoch = j.at("steps_per_epoch");
  t.max_epochs = j.at("max_epochs");
  t.patience = j.at("patience");
  t.lambda = j.at("lambda");
  t.distance = parse_name(j.at("distance"), kDistances, "distance");
  t.selection = parse_name(j.at("selection"), kSelections, "selection metric");
  t.cache_factor = j.at("cache_factor");
}

json encode(const SimulateSection& s) {
  return {{"train_fraction", s.train_fraction},
          {"all_positions", s.all_positions},
          {"val_background", s.val_background},
          {"synthetic_background", s.synthetic_background},
          {"synthetic_seconds", s.synthetic_seconds},
          {"background_style", name_of(s.background_style, kStyles)},
          {"mix",
           {{"snr_low_db", s.mix.snr_low_db},
            {"snr_high_db", s.mix.snr_high_db},
            {"mode", name_of(s.mix.mode, kInsertModes)},
            {"keyword_gain", s.mix.keyword_gain}}},
          {"augment",
           {{"max_shift_s", s.augment.max_shift_s},
            {"max_semitones", s.augment.max_semitones},
            {"gain_low", s.augment.gain_low},
            {"gain_high", s.augment.gain_high}}},
          {"augment_enabled", s.augment_enabled},
          {"test_recordings", s.test_recordings},
          {"recording",
           {{"duration_s", s.recording.duration_s},
            {"n_keywords", s.recording.n_keywords},
            {"slot_margin_s", s.recording.slot_margin_s},
            {"snr_low_db", s.recording.snr_low_db},
            {"snr_high_db", s.recording.snr_high_db},
            {"background_rms", s.recording.background_rms}}}};
}

void decode(const json& j, SimulateSection& s) {
  s.train_fraction = j.at("train_fraction");
  s.all_positions = j.at("all_positions");
  s.val_background = j.at("val_background");
  s.synthetic_background = j.at("synthetic_background");
  s.synthetic_seconds = j.at("synthetic_seconds");
  s.background_style = parse_name(j.at("background_style"), kStyles, "background style");
  const json& m = j.at("mix");
  s.mix.snr_low_db = m.at("snr_low_db");
  s.mix.snr_high_db = m.at("snr_high_db");
  s.mix.mode = parse_name(m.at("mode"), kInsertModes, "insert mode");
  s.mix.keyword_gain = m.at("keyword_gain");
  const json& a = j.at("augment");
  s.augment.max_shift_s = a.at("max_shift_s");
  s.augment.max_semitones = a.at("max_semitones");
  s.augment.gain_low = a.at("gain_low");
  s.augment.gain_high = a.at("gain_high");
  s.augment_enabled = j.at("augment_enabled");
  s.test_recordings = j.at("test_recordings");
  const json& r = j.at("recording");
  s.recording.duration_s = r.at("duration_s");
  s.recording.n_keywords = r.at("n_keywords");
  s.recording.slot_margin_s = r.at("slot_margin_s");
  s.recording.snr_low_db = r.at("snr_low_db");
  s.recording.snr_high_db = r.at("snr_high_db");
  s.recording.background_rms = r.at("background_rms");
}

json encode_config(const ToolkitConfig& c) {
  return {{"seed", c.seed},
          {"workers", c.workers},
          {"paths",
           {{"corpus_manifest", c.paths.corpus_manifest},
            {"background_dir", c.paths.background_dir},
            {"output_dir", c.paths.output_dir},
            {"data_dir", c.paths.data_dir},
            {"checkpoint", c.paths.checkpoint},
            {"bank", c.paths.bank}}},
          {"synth",
           {{"n_keywords", c.synth.n_keywords},
            {"n_speakers", c.synth.n_speakers},
            {"reps", c.synth.reps},
            {"template_seed", c.synth.template_seed}}},
          {"features", encode(c.features)},
          {"simulate", encode(c.simulate)},
          {"model", encode(c.model)},
          {"train", encode(c.train)},
          {"pretrain",
           {{"epochs", c.pretrain.epochs},
            {"aux_classes", c.pretrain.aux_classes},
            {"aux_speakers", c.pretrain.aux_speakers},
            {"aux_reps", c.pretrain.aux_reps},
            {"aux_template_seed", c.pretrain.aux_template_seed},
            {"batch_size", c.pretrain.batch_size},
            {"learning_rate", c.pretrain.learning_rate}}},
          {"spot",
           {{"window_s", c.spot.window_s},
            {"stride_s", c.spot.stride_s},
            {"merge_gap_s", c.spot.merge_gap_s},
            {"batch", c.spot.batch}}},
          {"per_class_thresholds", c.per_class_thresholds},
          {"bank_with_validation", c.bank_with_validation},
          {"match", {{"rule", name_of(c.match.rule, kMatchRules)}, {"min_iou", c.match.min_iou}}},
          {"averaging", name_of(c.averaging, kAveraging)}};
}

ToolkitConfig decode_config(const json& j) {
  ToolkitConfig c;
  c.seed = j.at("seed");
  c.workers = j.at("workers");
  const json& p = j.at("paths");
  c.paths.corpus_manifest = p.at("corpus_manifest");
  c.paths.background_dir = p.at("background_dir");
  c.paths.output_dir = p.at("output_dir");
  c.paths.data_dir = p.at("data_dir");
  c.paths.checkpoint = p.at("checkpoint");
  c.paths.bank = p.at("bank");
  const json& s = j.at("synth");
  c.synth.n_keywords = s.at("n_keywords");
  c.synth.n_speakers = s.at("n_speakers");
  c.synth.reps = s.at("reps");
  c.synth.template_seed = s.at("template_seed");
  decode(j.at("features"), c.features);
  decode(j.at("simulate"), c.simulate);
  decode(j.at("model"), c.model);
  decode(j.at("train"), c.train);
  const json& pt = j.at("pretrain");
  c.pretrain.epochs = pt.at("epochs");
  c.pretrain.aux_classes = pt.at("aux_classes");
  c.pretrain.aux_speakers = pt.at("aux_speakers");
  c.pretrain.aux_reps = pt.at("aux_reps");
  c.pretrain.aux_template_seed = pt.at("aux_template_seed");
  c.pretrain.batch_size = pt.at("batch_size");
  c.pretrain.learning_rate = pt.at("learning_rate");
  const json& sp = j.at("spot");
  c.spot.window_s = sp.at("window_s");
  c.spot.stride_s = sp.at("stride_s");
  c.spot.merge_gap_s = sp.at("merge_gap_s");
  c.spot.batch = sp.at("batch");
  c.per_class_thresholds = j.at("per_class_thresholds");
  c.bank_with_validation = j.at("bank_with_validation");
  c.match.rule = parse_name(j.at("match").at("rule"), kMatchRules, "match rule");
  c.match.min_iou = j.at("match").at("min_iou");
  c.averaging = parse_name(j.at("averaging"), kAveraging, "averaging");
  // Derived fields kept consistent with the rest of the document.
  c.model.feature_kind = c.features.kind;
  c.model.n_classes = trainer::uses_head(c.train.variant) ? static_cast<std::size_t>(c.synth.n_keywords + 1) : 0;
  c.train.seed = c.seed;
  c.spot.features = c.features;
  return c;
}

// Every key in `user` must exist in `schema`; arrays and scalars are leaves.
void check_keys(const json& user, const json& schema, const std::string& where) {
  if (!user.is_object() || !schema.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    if (!schema.contains(key)) throw UsageError("unknown configuration key '" + where + key + "'");
    check_keys(value, schema.at(key), where + key + ".");
  }
}

ToolkitConfig merged(const json& base, const json& patch) {
  check_keys(patch, base, "");
  json doc = base;
  doc.merge_patch(patch);
  try {
    ToolkitConfig c = decode_config(doc);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid configuration value: ") + e.what());
  }
}

}  // namespace

std::filesystem::path ToolkitConfig::data_dir() const {
  return paths.data_dir.empty() ? std::filesystem::path(paths.output_dir) / "data" : std::filesystem::path(paths.data_dir);
}

std::filesystem::path ToolkitConfig::checkpoint_path() const {
  return paths.checkpoint.empty() ? std::filesystem::path(paths.output_dir) / "model" / "best.ckpt"
                                  : std::filesystem::path(paths.checkpoint);
}

std::filesystem::path ToolkitConfig::bank_path() const {
  return paths.bank.empty() ? std::filesystem::path(paths.output_dir) / "model" / "bank.json"
                            : std::filesystem::path(paths.bank);
}

void ToolkitConfig::validate() const {
  if (workers < 0) throw UsageError("workers must be non-negative");
  if (synth.n_keywords < 1 || synth.n_speakers < 1 || synth.reps < 1) throw UsageError("synth counts must be positive");
  if (!(simulate.train_fraction > 0.0 && simulate.train_fraction < 1.0)) {
    throw UsageError("simulate.train_fraction must be in (0, 1)");
  }
  if (simulate.synthetic_background < 0) throw UsageError("simulate.synthetic_background must be non-negative");
  simulate.augment.validate();
  model.validate();
  train.validate();
  spot.validate();
  if (features.kind == FeatureKind::mfcc && model.feature_dim != features.n_coeffs) {
    throw UsageError("model.feature_dim must equal features.n_coeffs for MFCC input");
  }
  if (features.kind == FeatureKind::spectrogram && model.feature_dim != features.nfft / 2 + 1) {
    throw UsageError("model.feature_dim must equal features.nfft/2 + 1 for spectrogram input");
  }
}

std::string to_json(const ToolkitConfig& config) { return encode_config(config).dump(2); }

ToolkitConfig from_json(const std::string& text) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("configuration is not valid JSON: ") + e.what());
  }
  if (!patch.is_object()) throw UsageError("configuration must be a JSON object");
  return merged(encode_config(ToolkitConfig{}), patch);
}

ToolkitConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open configuration file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void apply_override(ToolkitConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key.path=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = json::object();
  json* node = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("empty segment in override key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
  config = merged(encode_config(config), patch);
}

// File locations and thread caps do not change results, so they stay out of
// the digest; relocated reruns then produce identical artifacts.
std::uint64_t digest(const ToolkitConfig& config) {
  json j = encode_config(config);
  j.erase("paths");
  j.erase("workers");
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string digest_hex(const ToolkitConfig& config) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest(config)));
  return buf;
}

std::string provenance_json(const ToolkitConfig& config) {
  return json{{"tool", "csks"}, {"config_digest", digest_hex(config)}, {"seed", config.seed}}.dump();
}

std::vector<std::string> provenance_comments(const ToolkitConfig& config) {
  return {"config_digest=" + digest_hex(config), "seed=" + std::to_string(config.seed)};
}

}  // namespace csks::config
