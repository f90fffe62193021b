#include "csks/datasim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "csks/csv.hpp"
#include "csks/dsp.hpp"

namespace csks::datasim {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

struct Syllable {
  double duration_s;
  double gap_s;
  double f0_start;
  double f0_end;
  std::array<double, 4> harmonics;
};

struct VoiceTemplate {
  std::vector<Syllable> syllables;
};

VoiceTemplate make_template(Rng& rng) {
  VoiceTemplate t;
  const int count = std::uniform_int_distribution<int>(2, 4)(rng);
  for (int i = 0; i < count; ++i) {
    Syllable s{};
    s.duration_s = uniform(rng, 0.09, 0.2);
    s.gap_s = i + 1 < count ? uniform(rng, 0.01, 0.06) : 0.0;
    s.f0_start = uniform(rng, 130.0, 450.0);
    s.f0_end = s.f0_start * uniform(rng, 0.65, 1.5);
    for (double& h : s.harmonics) h = uniform(rng, 0.05, 1.0);
    t.syllables.push_back(s);
  }
  return t;
}

struct Voice {
  double pitch = 1.0;
  double tempo = 1.0;
  double tilt = 1.0;
};

// Renders syllables as harmonic chirps under a raised-cosine envelope.
std::vector<double> render(const VoiceTemplate& t, const Voice& voice, int rate) {
  std::vector<double> out;
  for (const Syllable& s : t.syllables) {
    const auto n = static_cast<std::size_t>(s.duration_s * voice.tempo * rate);
    const auto ramp = std::min<std::size_t>(n / 2, static_cast<std::size_t>(0.015 * rate));
    double phase = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(n);
      const double f0 = voice.pitch * (s.f0_start + (s.f0_end - s.f0_start) * frac);
      phase += 2.0 * kPi * f0 / rate;
      double v = 0.0;
      double tilt = 1.0;
      for (std::size_t h = 0; h < s.harmonics.size(); ++h) {
        if (f0 * static_cast<double>(h + 1) < 0.45 * rate) v += tilt * s.harmonics[h] * std::sin(static_cast<double>(h + 1) * phase);
        tilt *= voice.tilt;
      }
      double env = 1.0;
      if (i < ramp) env = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(i) / ramp);
      if (n - i <= ramp) env = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(n - i) / ramp);
      out.push_back(v * env);
    }
    out.insert(out.end(), static_cast<std::size_t>(s.gap_s * voice.tempo * rate), 0.0);
  }
  return out;
}

void normalize_peak(std::vector<double>& x, double peak) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > 0.0) {
    for (double& v : x) v *= peak / m;
  }
}

void normalize_rms(std::vector<double>& x, double target) {
  const double r = rms(x);
  if (r > 0.0) {
    for (double& v : x) v *= target / r;
  }
}

// `length` contiguous samples from `clip` starting at a random offset, wrapping if it is short.
std::vector<double> random_chunk(const AudioClip& clip, std::size_t length, Rng& rng) {
  std::vector<double> out(length, 0.0);
  if (length == 0 || clip.samples.empty()) return out;
  const std::size_t n = clip.samples.size();
  const std::size_t start = n > length ? std::uniform_int_distribution<std::size_t>(0, n - length)(rng)
                                       : uniform_index(rng, n);
  for (std::size_t i = 0; i < length; ++i) out[i] = clip.samples[(start + i) % n];
  return out;
}

// Colored noise from a one-pole low-pass over white noise, unit RMS.
std::vector<double> colored_noise(std::size_t n, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double pole = uniform(rng, 0.0, 0.97);
  std::vector<double> out(n);
  double y = 0.0;
  for (double& v : out) {
    y = pole * y + (1.0 - pole) * gauss(rng);
    v = y;
  }
  normalize_rms(out, 1.0);
  return out;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix(base);
  for (std::uint64_t t : tags) h = splitmix(h ^ splitmix(t + 0x51ED270B27B3A1ull));
  return h;
}

std::size_t segment_samples(int sample_rate) {
  return static_cast<std::size_t>(std::llround(kSegmentSeconds * sample_rate));
}

double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

void AugmentConfig::validate() const {
  if (!(max_shift_s >= 0.0 && max_shift_s < kSegmentSeconds)) throw UsageError("time shift must be in [0, 2) s");
  if (!(max_semitones >= 0.0 && max_semitones <= 12.0)) throw UsageError("pitch shift must be in [0, 12] semitones");
  if (!(gain_low > 0.0 && gain_low <= gain_high)) throw UsageError("gain range must satisfy 0 < low <= high");
}

std::pair<std::vector<KeywordUtterance>, std::vector<KeywordUtterance>> speaker_split(
    const std::vector<KeywordUtterance>& corpus, double train_fraction, std::uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& u : corpus) unique.insert(u.speaker_id);
  if (unique.size() < 2) {
    throw UsageError("speaker split needs at least 2 distinct speakers, got " + std::to_string(unique.size()));
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw UsageError("train fraction must be in (0, 1)");
  std::vector<std::string> speakers(unique.begin(), unique.end());
  Rng rng(seed);
  std::shuffle(speakers.begin(), speakers.end(), rng);
  auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(speakers.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, speakers.size() - 1);
  const std::set<std::string> train_speakers(speakers.begin(), speakers.begin() + static_cast<std::ptrdiff_t>(n_train));

  std::pair<std::vector<KeywordUtterance>, std::vector<KeywordUtterance>> out;
  for (const auto& u : corpus) {
    (train_speakers.count(u.speaker_id) ? out.first : out.second).push_back(u);
  }
  return out;
}

std::size_t insertion_offset(std::size_t segment, std::size_t keyword, Position position) {
  if (keyword > segment) throw UsageError("keyword longer than segment");
  switch (position) {
    case Position::begin:
      return 0;
    case Position::middle:
      return (segment - keyword) / 2;
    case Position::end:
      return segment - keyword;
  }
  return 0;
}

LabeledSegment simulate_positive(const KeywordUtterance& utterance, std::span<const AudioClip> background_pool,
                                 Position position, const MixConfig& mix, Rng& rng) {
  if (background_pool.empty()) throw UsageError("background pool is empty");
  const int rate = utterance.clip.sample_rate;
  const std::size_t total = segment_samples(rate);
  const std::size_t n_kw = utterance.clip.samples.size();
  if (n_kw > total) {
    throw UsageError("utterance of " + std::to_string(utterance.clip.duration()) + " s is longer than the segment");
  }
  const std::size_t offset = insertion_offset(total, n_kw, position);

  // Background assembled from two random contiguous chunks.
  std::vector<double> background;
  std::size_t first_len;
  if (mix.mode == InsertMode::mix) {
    first_len = std::uniform_int_distribution<std::size_t>(0, total)(rng);
  } else {
    first_len = offset;
  }
  const std::size_t second_len = (mix.mode == InsertMode::mix ? total : total - n_kw) - first_len;
  const AudioClip& clip_a = background_pool[uniform_index(rng, background_pool.size())];
  const AudioClip& clip_b = background_pool[uniform_index(rng, background_pool.size())];
  auto chunk_a = random_chunk(clip_a, first_len, rng);
  auto chunk_b = random_chunk(clip_b, second_len, rng);
  const double snr_db = uniform(rng, mix.snr_low_db, mix.snr_high_db);

  std::vector<double> keyword(utterance.clip.samples);
  for (double& v : keyword) v *= mix.keyword_gain;
  const double kw_rms = rms(keyword);

  std::vector<double> out(total, 0.0);
  if (mix.mode == InsertMode::mix) {
    background = std::move(chunk_a);
    background.insert(background.end(), chunk_b.begin(), chunk_b.end());
    const double bg_rms = rms(background);
    const double bg_scale = bg_rms > 0.0 ? kw_rms / (bg_rms * std::pow(10.0, snr_db / 20.0)) : 0.0;
    for (std::size_t i = 0; i < total; ++i) out[i] = background[i] * bg_scale;
  } else {
    std::vector<double> joined = chunk_a;
    joined.insert(joined.end(), chunk_b.begin(), chunk_b.end());
    const double bg_rms = rms(joined);
    const double bg_scale = bg_rms > 0.0 ? kw_rms / (bg_rms * std::pow(10.0, snr_db / 20.0)) : 0.0;
    for (std::size_t i = 0; i < first_len; ++i) out[i] = chunk_a[i] * bg_scale;
    for (std::size_t i = 0; i < second_len; ++i) out[offset + n_kw + i] = chunk_b[i] * bg_scale;
  }
  for (std::size_t i = 0; i < n_kw; ++i) out[offset + i] += keyword[i];

  double gain = mix.keyword_gain;
  double peak = 0.0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  if (peak > 1.0) {
    for (double& v : out) v /= peak;
    gain /= peak;
  }

  LabeledSegment seg;
  seg.clip.sample_rate = rate;
  seg.clip.samples = std::move(out);
  seg.label = utterance.keyword_id;
  seg.keyword_span = Span{static_cast<double>(offset) / rate, static_cast<double>(offset + n_kw) / rate};
  seg.keyword_gain = gain;
  return seg;
}

LabeledSegment simulate_background(std::span<const AudioClip> background_pool, int background_label, Rng& rng) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < background_pool.size(); ++i) {
    if (background_pool[i].samples.size() >= segment_samples(background_pool[i].sample_rate)) eligible.push_back(i);
  }
  if (eligible.empty()) throw UsageError("no background clip is at least 2 s long");
  const AudioClip& clip = background_pool[eligible[uniform_index(rng, eligible.size())]];
  const std::size_t total = segment_samples(clip.sample_rate);
  const std::size_t start = std::uniform_int_distribution<std::size_t>(0, clip.samples.size() - total)(rng);
  LabeledSegment seg;
  seg.clip.sample_rate = clip.sample_rate;
  seg.clip.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(start),
                          clip.samples.begin() + static_cast<std::ptrdiff_t>(start + total));
  seg.label = background_label;
  return seg;
}

AugmentDraw draw_augmentation(const AugmentConfig& config, Rng& rng) {
  config.validate();
  AugmentDraw d;
  d.shift_s = uniform(rng, -config.max_shift_s, config.max_shift_s);
  d.semitones = uniform(rng, -config.max_semitones, config.max_semitones);
  d.gain = uniform(rng, config.gain_low, config.gain_high);
  return d;
}

LabeledSegment augment(const LabeledSegment& segment, const AugmentDraw& draw) {
  LabeledSegment out = segment;
  const int rate = segment.clip.sample_rate;
  const std::size_t total = segment.clip.samples.size();
  std::optional<Span> span = segment.keyword_span;

  if (draw.semitones != 0.0) {
    // Raising pitch by `factor` shortens the signal by the same factor.
    const double factor = std::pow(2.0, draw.semitones / 12.0);
    std::vector<double> shifted = dsp::resample_ratio(segment.clip.samples, 1.0 / factor);
    shifted.resize(total, 0.0);
    out.clip.samples = std::move(shifted);
    if (span) {
      span->start_s /= factor;
      span->end_s /= factor;
    }
  }

  const auto shift = static_cast<std::int64_t>(std::llround(draw.shift_s * rate));
  if (shift != 0 && total > 0) {
    std::vector<double> rolled(total);
    const auto n = static_cast<std::int64_t>(total);
    for (std::int64_t i = 0; i < n; ++i) rolled[static_cast<std::size_t>(((i + shift) % n + n) % n)] = out.clip.samples[static_cast<std::size_t>(i)];
    out.clip.samples = std::move(rolled);
    if (span) {
      const double dt = static_cast<double>(shift) / rate;
      span->start_s += dt;
      span->end_s += dt;
    }
  }

  if (draw.gain != 1.0) {
    for (double& v : out.clip.samples) v = std::clamp(v * draw.gain, -1.0, 1.0);
    out.keyword_gain *= draw.gain;
  }

  if (span) {
    const double duration = static_cast<double>(total) / rate;
    span->start_s = std::clamp(span->start_s, 0.0, duration);
    span->end_s = std::clamp(span->end_s, 0.0, duration);
    out.keyword_span = span;
  }
  return out;
}

LabeledSegment augment(const LabeledSegment& segment, const AugmentConfig& config, Rng& rng) {
  return augment(segment, draw_augmentation(config, rng));
}

std::vector<KeywordUtterance> synth_corpus(int n_keywords, int n_speakers, int reps, std::uint64_t seed,
                                           const SynthOptions& options) {
  if (n_keywords < 1 || n_speakers < 1 || reps < 1) throw UsageError("corpus counts must be at least 1");
  Rng template_rng(derive_seed(options.template_seed, {0x4B57}));
  std::vector<VoiceTemplate> templates;
  for (int k = 0; k < n_keywords; ++k) templates.push_back(make_template(template_rng));

  const int rate = options.sample_rate;
  const auto max_len = segment_samples(rate) * 3 / 4;
  std::vector<KeywordUtterance> corpus;
  corpus.reserve(static_cast<std::size_t>(n_keywords) * n_speakers * reps);
  for (int s = 0; s < n_speakers; ++s) {
    Rng speaker_rng(derive_seed(seed, {0x5350, static_cast<std::uint64_t>(s)}));
    Voice base;
    base.pitch = uniform(speaker_rng, 0.85, 1.15);
    base.tempo = uniform(speaker_rng, 0.9, 1.1);
    base.tilt = uniform(speaker_rng, 0.6, 1.0);
    char id[16];
    std::snprintf(id, sizeof id, "spk%03d", s);
    for (int k = 0; k < n_keywords; ++k) {
      for (int r = 0; r < reps; ++r) {
        Rng rng(derive_seed(seed, {0x5554, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(k),
                                   static_cast<std::uint64_t>(r)}));
        Voice v = base;
        v.pitch *= uniform(rng, 0.97, 1.03);
        v.tempo *= uniform(rng, 0.96, 1.04);
        std::vector<double> samples = render(templates[static_cast<std::size_t>(k)], v, rate);
        if (samples.size() > max_len) samples.resize(max_len);
        normalize_peak(samples, uniform(rng, 0.4, 0.7));
        std::normal_distribution<double> gauss(0.0, options.noise_level);
        for (double& x : samples) x += gauss(rng);
        KeywordUtterance u;
        u.clip.sample_rate = rate;
        u.clip.samples = std::move(samples);
        u.keyword_id = k;
        u.speaker_id = id;
        corpus.push_back(std::move(u));
      }
    }
  }
  return corpus;
}

std::vector<AudioClip> make_background_pool(int n_clips, double seconds, BackgroundStyle style, std::uint64_t seed,
                                            int sample_rate) {
  if (n_clips < 0 || !(seconds > 0.0)) throw UsageError("invalid background pool size");
  std::vector<AudioClip> pool;
  const auto n = static_cast<std::size_t>(seconds * sample_rate);
  for (int c = 0; c < n_clips; ++c) {
    Rng rng(derive_seed(seed, {0x4247, static_cast<std::uint64_t>(c)}));
    std::vector<double> samples = colored_noise(n, rng);
    if (style == BackgroundStyle::babble) {
      const double noise_share = uniform(rng, 0.1, 0.5);
      for (double& v : samples) v *= noise_share;
      std::vector<double> babble;
      while (babble.size() < n) {
        const VoiceTemplate t = make_template(rng);
        Voice v{uniform(rng, 0.85, 1.15), uniform(rng, 0.9, 1.1), uniform(rng, 0.6, 1.0)};
        std::vector<double> word = render(t, v, sample_rate);
        normalize_peak(word, uniform(rng, 0.3, 1.0));
        babble.insert(babble.end(), word.begin(), word.end());
        babble.insert(babble.end(), static_cast<std::size_t>(uniform(rng, 0.05, 0.4) * sample_rate), 0.0);
      }
      babble.resize(n);
      normalize_rms(babble, 1.0);
      for (std::size_t i = 0; i < n; ++i) samples[i] += babble[i];
    }
    // Loudness varies across and within clips (log-uniform level, slow swell) so
    // background level carries no label information.
    normalize_rms(samples, std::pow(10.0, uniform(rng, -2.0, -0.7)));
    const double period = uniform(rng, 3.0, 10.0), phase = uniform(rng, 0.0, 2.0 * kPi);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / sample_rate;
      samples[i] *= std::pow(10.0, 0.3 * std::sin(2.0 * kPi * t / period + phase));
    }
    double peak = 0.0;
    for (double v : samples) peak = std::max(peak, std::abs(v));
    if (peak > 0.99) {
      for (double& v : samples) v *= 0.99 / peak;
    }
    pool.push_back(AudioClip{std::move(samples), sample_rate});
  }
  return pool;
}

Recording simulate_recording(std::span<const KeywordUtterance> utterances, std::span<const AudioClip> background_pool,
                             const RecordingOptions& options, Rng& rng) {
  if (utterances.empty()) throw UsageError("recording simulation needs keyword utterances");
  if (background_pool.empty()) throw UsageError("background pool is empty");
  if (options.n_keywords < 0 || !(options.duration_s > 0.0)) throw UsageError("invalid recording options");
  const int rate = utterances.front().clip.sample_rate;
  const auto total = static_cast<std::size_t>(std::llround(options.duration_s * rate));

  std::vector<double> samples;
  samples.reserve(total);
  while (samples.size() < total) {
    const AudioClip& clip = background_pool[uniform_index(rng, background_pool.size())];
    const std::size_t want = std::min(total - samples.size(), clip.samples.size());
    auto chunk = random_chunk(clip, want, rng);
    samples.insert(samples.end(), chunk.begin(), chunk.end());
  }
  normalize_rms(samples, options.background_rms);

  Recording rec;
  if (options.n_keywords > 0) {
    const double slot = options.duration_s / options.n_keywords;
    for (int i = 0; i < options.n_keywords; ++i) {
      const KeywordUtterance& u = utterances[uniform_index(rng, utterances.size())];
      const double dur = u.clip.duration();
      const double lo = i * slot + options.slot_margin_s;
      const double hi = (i + 1) * slot - options.slot_margin_s - dur;
      const double start = hi > lo ? uniform(rng, lo, hi) : i * slot + std::max(0.0, (slot - dur) / 2.0);
      const auto offset = static_cast<std::size_t>(std::llround(start * rate));
      if (offset + u.clip.samples.size() > total) continue;
      const double snr_db = uniform(rng, options.snr_low_db, options.snr_high_db);
      const double kw_rms = rms(u.clip.samples);
      const double gain = kw_rms > 0.0 ? options.background_rms * std::pow(10.0, snr_db / 20.0) / kw_rms : 0.0;
      for (std::size_t j = 0; j < u.clip.samples.size(); ++j) samples[offset + j] += gain * u.clip.samples[j];
      rec.keywords.push_back({u.keyword_id, static_cast<double>(offset) / rate,
                              static_cast<double>(offset + u.clip.samples.size()) / rate});
    }
  }
  double peak = 0.0;
  for (double v : samples) peak = std::max(peak, std::abs(v));
  if (peak > 1.0) {
    for (double& v : samples) v /= peak;
  }
  rec.clip = AudioClip{std::move(samples), rate};
  return rec;
}

void write_corpus_manifest(const std::filesystem::path& path, const std::vector<CorpusEntry>& entries,
                           const std::vector<std::string>& comments) {
  csv::Table t;
  t.comments = comments;
  t.header = {"wav_path", "keyword_id", "speaker_id"};
  for (const auto& e : entries) t.rows.push_back({e.wav_path, std::to_string(e.keyword_id), e.speaker_id});
  csv::write(path, t);
}

std::vector<CorpusEntry> read_corpus_manifest(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const std::size_t c_path = t.column("wav_path"), c_kw = t.column("keyword_id"), c_spk = t.column("speaker_id");
  const auto base = path.parent_path();
  std::vector<CorpusEntry> out;
  for (const auto& row : t.rows) {
    std::filesystem::path p(row[c_path]);
    if (p.is_relative()) p = base / p;
    out.push_back({p.string(), csv::to_int(row[c_kw]), row[c_spk]});
  }
  return out;
}

namespace {
std::string format_seconds(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", s);
  return buf;
}
}  // namespace

void write_segment_manifest(const std::filesystem::path& path, const std::vector<SegmentEntry>& entries,
                            const std::vector<std::string>& comments) {
  csv::Table t;
  t.comments = comments;
  t.header = {"wav_path", "label", "span_start_s", "span_end_s"};
  for (const auto& e : entries) {
    t.rows.push_back({e.wav_path, std::to_string(e.label), e.span ? format_seconds(e.span->start_s) : "",
                      e.span ? format_seconds(e.span->end_s) : ""});
  }
  csv::write(path, t);
}

std::vector<SegmentEntry> read_segment_manifest(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const std::size_t c_path = t.column("wav_path"), c_label = t.column("label");
  const std::size_t c_start = t.column("span_start_s"), c_end = t.column("span_end_s");
  const auto base = path.parent_path();
  std::vector<SegmentEntry> out;
  for (const auto& row : t.rows) {
    std::filesystem::path p(row[c_path]);
    if (p.is_relative()) p = base / p;
    SegmentEntry e{p.string(), csv::to_int(row[c_label]), std::nullopt};
    if (!row[c_start].empty()) e.span = Span{csv::to_double(row[c_start]), csv::to_double(row[c_end])};
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace csks::datasim
