#include "csks/dsp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "csks/error.hpp"
#include "csks/kernels.hpp"

namespace csks {

std::string to_string(FeatureKind kind) {
  return kind == FeatureKind::mfcc ? "mfcc" : "spectrogram";
}

FeatureKind feature_kind_from_string(const std::string& name) {
  if (name == "mfcc") return FeatureKind::mfcc;
  if (name == "spectrogram") return FeatureKind::spectrogram;
  throw UsageError("unknown feature kind '" + name + "'");
}

bool FeatureMatrix::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace dsp {

namespace {

constexpr double kPi = std::numbers::pi;

// FFTW plans are created once per size under a lock; execution with
// caller-owned buffers is thread-safe.
fftw_plan r2c_plan(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, fftw_plan> plans;
  std::lock_guard lock(mutex);
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;
  double* in = fftw_alloc_real(n);
  fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
  fftw_free(in);
  fftw_free(out);
  plans.emplace(n, plan);
  return plan;
}

class FftWorkspace {
 public:
  explicit FftWorkspace(std::size_t n)
      : n_(n), plan_(r2c_plan(n)), in_(fftw_alloc_real(n)), out_(fftw_alloc_complex(n / 2 + 1)) {}
  ~FftWorkspace() {
    fftw_free(in_);
    fftw_free(out_);
  }
  FftWorkspace(const FftWorkspace&) = delete;
  FftWorkspace& operator=(const FftWorkspace&) = delete;

  // |X_k|^2 for the zero-padded, windowed frame.
  void power(std::span<const double> frame, std::span<const double> window, std::span<double> out) {
    std::fill(in_, in_ + n_, 0.0);
    for (std::size_t i = 0; i < frame.size(); ++i) in_[i] = frame[i] * window[i];
    fftw_execute_dft_r2c(plan_, in_, out_);
    for (std::size_t k = 0; k < n_ / 2 + 1; ++k) out[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  std::size_t n_;
  fftw_plan plan_;
  double* in_;
  fftw_complex* out_;
};

struct Framing {
  std::size_t window;
  std::size_t hop;
  std::size_t count;
};

Framing framing_for(const AudioClip& clip, double window_ms, double hop_ms) {
  if (clip.sample_rate <= 0) throw UsageError("sample rate must be positive");
  const std::size_t window = ms_to_samples(window_ms, clip.sample_rate);
  const std::size_t hop = ms_to_samples(hop_ms, clip.sample_rate);
  if (window == 0 || hop == 0) throw UsageError("window and hop must be at least one sample");
  if (clip.samples.size() < window) {
    throw UsageError("clip of " + std::to_string(clip.samples.size()) +
                     " samples is shorter than one window of " + std::to_string(window));
  }
  return {window, hop, frame_count(clip.samples.size(), window, hop)};
}

// Power spectra of every frame, time-major (count x nfft/2+1).
std::vector<double> frame_power(const AudioClip& clip, const Framing& fr, std::size_t nfft) {
  if (nfft < fr.window) throw UsageError("nfft must be at least the window length");
  const std::size_t bins = nfft / 2 + 1;
  const std::vector<double> window = hann_window(fr.window);
  std::vector<double> power(fr.count * bins);
#pragma omp parallel num_threads(kernels::worker_count())
  {
    FftWorkspace fft(nfft);
#pragma omp for schedule(static)
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(fr.count); ++t) {
      std::span<const double> frame(clip.samples.data() + t * fr.hop, fr.window);
      fft.power(frame, window, std::span<double>(power).subspan(t * bins, bins));
    }
  }
  return power;
}

struct Biquad {
  double b0, b1, b2, a1, a2;
};

// RBJ cookbook sections; a0 normalized out.
Biquad butterworth_section(bool highpass, double corner_hz, double q, int rate) {
  const double w0 = 2.0 * kPi * corner_hz / static_cast<double>(rate);
  const double cosw = std::cos(w0);
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  Biquad s{};
  if (highpass) {
    s.b0 = (1.0 + cosw) / 2.0 / a0;
    s.b1 = -(1.0 + cosw) / a0;
  } else {
    s.b0 = (1.0 - cosw) / 2.0 / a0;
    s.b1 = (1.0 - cosw) / a0;
  }
  s.b2 = s.b0;
  s.a1 = -2.0 * cosw / a0;
  s.a2 = (1.0 - alpha) / a0;
  return s;
}

void run_biquad(const Biquad& s, std::vector<double>& x) {
  double z1 = 0.0, z2 = 0.0;
  for (double& v : x) {
    const double in = v;
    const double out = s.b0 * in + z1;
    z1 = s.b1 * in - s.a1 * out + z2;
    z2 = s.b2 * in - s.a2 * out;
    v = out;
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4] = {};
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr char kFeatureMagic[4] = {'C', 'S', 'K', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;

}  // namespace

std::size_t ms_to_samples(double ms, int sample_rate) {
  return static_cast<std::size_t>(std::llround(ms * 1e-3 * static_cast<double>(sample_rate)));
}

std::size_t frame_count(std::size_t n, std::size_t window, std::size_t hop) {
  if (n < window || hop == 0) return 0;
  return (n - window) / hop + 1;
}

std::vector<std::span<const double>> frame(const AudioClip& clip, double window_ms, double hop_ms) {
  const Framing fr = framing_for(clip, window_ms, hop_ms);
  std::vector<std::span<const double>> frames;
  frames.reserve(fr.count);
  for (std::size_t t = 0; t < fr.count; ++t) {
    frames.emplace_back(clip.samples.data() + t * fr.hop, fr.window);
  }
  return frames;
}

std::vector<double> resample_ratio(std::span<const double> samples, double ratio) {
  if (!(ratio > 0.0)) throw UsageError("resample ratio must be positive");
  const std::size_t n_in = samples.size();
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * ratio));
  std::vector<double> out(n_out, 0.0);
  if (n_in == 0) return out;

  constexpr double kZeroCrossings = 16.0;
  const double cutoff = std::min(1.0, ratio);
  const double half_width = kZeroCrossings / cutoff;
  // Successive taps step t by -1, so the sinc and taper phases advance by
  // fixed angles; rotate them instead of calling sin/cos per tap.
  const double step_s = kPi * cutoff, step_w = kPi / half_width;
  const double cs = std::cos(step_s), ss = std::sin(step_s);
  const double cw = std::cos(step_w), sw = std::sin(step_w);
#pragma omp parallel for schedule(static) num_threads(kernels::worker_count()) if (n_out > 4096)
  for (std::int64_t j = 0; j < static_cast<std::int64_t>(n_out); ++j) {
    const double x = static_cast<double>(j) / ratio;
    const auto first = std::max<std::int64_t>(static_cast<std::int64_t>(std::ceil(x - half_width)), 0);
    const auto last =
        std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(x + half_width)), static_cast<std::int64_t>(n_in) - 1);
    if (first > last) continue;
    double t = x - static_cast<double>(first);
    double sin_s = std::sin(step_s * t), cos_s = std::cos(step_s * t);
    double sin_w = std::sin(step_w * t), cos_w = std::cos(step_w * t);
    double acc = 0.0;
    for (std::int64_t k = first; k <= last; ++k) {
      // The rotated sine carries absolute error, so use the series near t = 0.
      const double a = step_s * t;
      const double sinc = std::abs(a) < 1e-3 ? 1.0 - a * a / 6.0 : sin_s / a;
      const double taper = 0.5 + 0.5 * cos_w;
      acc += samples[static_cast<std::size_t>(k)] * cutoff * sinc * taper;
      t -= 1.0;
      const double s1 = sin_s * cs - cos_s * ss;
      cos_s = cos_s * cs + sin_s * ss;
      sin_s = s1;
      const double w1 = sin_w * cw - cos_w * sw;
      cos_w = cos_w * cw + sin_w * sw;
      sin_w = w1;
    }
    out[static_cast<std::size_t>(j)] = acc;
  }
  return out;
}

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw UsageError("target rate must be positive");
  if (clip.sample_rate <= 0) throw UsageError("source rate must be positive");
  if (target_rate == clip.sample_rate) return clip;
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples = resample_ratio(clip.samples,
                               static_cast<double>(target_rate) / static_cast<double>(clip.sample_rate));
  return out;
}

AudioClip bandpass(const AudioClip& clip, double low_hz, double high_hz) {
  const double nyquist = clip.sample_rate / 2.0;
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist)) {
    throw UsageError("band-pass needs 0 < low < high < sample_rate/2");
  }
  // Pole-pair Q values of a 4th-order Butterworth prototype.
  const double q1 = 1.0 / (2.0 * std::cos(kPi / 8.0));
  const double q2 = 1.0 / (2.0 * std::cos(3.0 * kPi / 8.0));
  AudioClip out = clip;
  for (const Biquad& s : {butterworth_section(true, low_hz, q1, clip.sample_rate),
                          butterworth_section(true, low_hz, q2, clip.sample_rate),
                          butterworth_section(false, high_hz, q1, clip.sample_rate),
                          butterworth_section(false, high_hz, q2, clip.sample_rate)}) {
    run_biquad(s, out.samples);
  }
  return out;
}

std::vector<double> hann_window(std::size_t length) {
  std::vector<double> w(length, 1.0);
  if (length < 2) return w;
  for (std::size_t i = 0; i < length; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(length - 1));
  }
  return w;
}

FeatureMatrix spectrogram(const AudioClip& clip, double window_ms, double hop_ms, std::size_t nfft,
                          double log_floor) {
  const Framing fr = framing_for(clip, window_ms, hop_ms);
  std::vector<double> power = frame_power(clip, fr, nfft);
  for (double& v : power) v = std::log(v + log_floor);
  FeatureMatrix out;
  out.kind = FeatureKind::spectrogram;
  out.rows = fr.count;
  out.cols = nfft / 2 + 1;
  out.frame_hop_seconds = static_cast<double>(fr.hop) / clip.sample_rate;
  out.values = std::move(power);
  return out;
}

std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t nfft, int sample_rate,
                                                double low_hz, double high_hz) {
  if (n_mels == 0 || !(low_hz < high_hz)) throw UsageError("invalid mel filterbank parameters");
  const std::size_t bins = nfft / 2 + 1;
  const double mel_lo = hz_to_mel(low_hz);
  const double mel_hi = hz_to_mel(high_hz);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  std::vector<std::vector<double>> bank(n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(nfft);
      if (f > left && f <= center) {
        bank[m][k] = (f - left) / (center - left);
      } else if (f > center && f < right) {
        bank[m][k] = (right - f) / (right - center);
      }
    }
  }
  return bank;
}

FeatureMatrix mfcc(const AudioClip& clip, const FeatureConfig& config) {
  if (config.n_coeffs == 0 || config.n_coeffs > config.n_mels) {
    throw UsageError("MFCC coefficient count must be in [1, n_mels]");
  }
  const Framing fr = framing_for(clip, config.window_ms, config.hop_ms);
  const std::vector<double> power = frame_power(clip, fr, config.nfft);
  const std::size_t bins = config.nfft / 2 + 1;
  const auto bank = mel_filterbank(config.n_mels, config.nfft, clip.sample_rate, config.low_hz, config.high_hz);

  const std::size_t n_mels = config.n_mels;
  std::vector<double> dct(config.n_coeffs * n_mels);
  for (std::size_t k = 0; k < config.n_coeffs; ++k) {
    const double norm = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n_mels));
    for (std::size_t n = 0; n < n_mels; ++n) {
      dct[k * n_mels + n] = norm * std::cos(kPi * static_cast<double>(k) * (2.0 * n + 1.0) / (2.0 * n_mels));
    }
  }

  FeatureMatrix out;
  out.kind = FeatureKind::mfcc;
  out.rows = fr.count;
  out.cols = config.n_coeffs;
  out.frame_hop_seconds = static_cast<double>(fr.hop) / clip.sample_rate;
  out.values.assign(out.rows * out.cols, 0.0);
  std::vector<double> logmel(n_mels);
  for (std::size_t t = 0; t < fr.count; ++t) {
    const double* p = power.data() + t * bins;
    for (std::size_t m = 0; m < n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += bank[m][k] * p[k];
      logmel[m] = std::log(e + config.log_floor);
    }
    for (std::size_t k = 0; k < config.n_coeffs; ++k) {
      double s = 0.0;
      for (std::size_t m = 0; m < n_mels; ++m) s += dct[k * n_mels + m] * logmel[m];
      out.values[t * out.cols + k] = s;
    }
  }
  return out;
}

FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& config) {
  const bool filter = config.bandpass == BandpassPlacement::both ||
                      (config.bandpass == BandpassPlacement::mfcc_only && config.kind == FeatureKind::mfcc);
  const AudioClip& source = clip;
  AudioClip filtered;
  if (filter) filtered = bandpass(clip, config.low_hz, config.high_hz);
  const AudioClip& input = filter ? filtered : source;
  if (config.kind == FeatureKind::mfcc) return mfcc(input, config);
  return spectrogram(input, config.window_ms, config.hop_ms, config.nfft, config.log_floor);
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file " + path.string());
  out.write(kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  const char kind = features.kind == FeatureKind::mfcc ? 0 : 1;
  out.write(&kind, 1);
  put_u32(out, static_cast<std::uint32_t>(features.rows));
  put_u32(out, static_cast<std::uint32_t>(features.cols));
  const auto hop_bits = std::bit_cast<std::uint64_t>(features.frame_hop_seconds);
  put_u32(out, static_cast<std::uint32_t>(hop_bits & 0xFFFFFFFFu));
  put_u32(out, static_cast<std::uint32_t>(hop_bits >> 32));
  for (double v : features.values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw DataError("failed writing feature file " + path.string());
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0) throw FormatError(path.string() + ": bad feature magic");
  if (get_u32(in) != kFeatureVersion) throw FormatError(path.string() + ": unsupported feature version");
  char kind = 0;
  in.read(&kind, 1);
  if (kind != 0 && kind != 1) throw FormatError(path.string() + ": bad feature kind");
  FeatureMatrix f;
  f.kind = kind == 0 ? FeatureKind::mfcc : FeatureKind::spectrogram;
  f.rows = get_u32(in);
  f.cols = get_u32(in);
  const std::uint64_t lo = get_u32(in);
  const std::uint64_t hi = get_u32(in);
  f.frame_hop_seconds = std::bit_cast<double>(lo | (hi << 32));
  if (!in) throw FormatError(path.string() + ": truncated feature header");
  f.values.resize(f.rows * f.cols);
  for (double& v : f.values) v = std::bit_cast<float>(get_u32(in));
  if (!in) throw FormatError(path.string() + ": truncated feature body");
  return f;
}

void write_features_csv(const std::filesystem::path& path, const FeatureMatrix& features) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write feature CSV " + path.string());
  out.precision(9);
  for (std::size_t r = 0; r < features.rows; ++r) {
    for (std::size_t c = 0; c < features.cols; ++c) {
      if (c) out << ',';
      out << features.at(r, c);
    }
    out << '\n';
  }
}

namespace reference {

FeatureMatrix spectrogram(const AudioClip& clip, double window_ms, double hop_ms, std::size_t nfft,
                          double log_floor) {
  const Framing fr = framing_for(clip, window_ms, hop_ms);
  if (nfft < fr.window) throw UsageError("nfft must be at least the window length");
  const std::size_t bins = nfft / 2 + 1;
  const std::vector<double> window = hann_window(fr.window);
  FeatureMatrix out;
  out.kind = FeatureKind::spectrogram;
  out.rows = fr.count;
  out.cols = bins;
  out.frame_hop_seconds = static_cast<double>(fr.hop) / clip.sample_rate;
  out.values.resize(fr.count * bins);
  for (std::size_t t = 0; t < fr.count; ++t) {
    for (std::size_t k = 0; k < bins; ++k) {
      double re = 0.0, im = 0.0;
      for (std::size_t n = 0; n < fr.window; ++n) {
        const double x = clip.samples[t * fr.hop + n] * window[n];
        const double phase = -2.0 * kPi * static_cast<double>(k * n % nfft) / static_cast<double>(nfft);
        re += x * std::cos(phase);
        im += x * std::sin(phase);
      }
      out.values[t * bins + k] = std::log(re * re + im * im + log_floor);
    }
  }
  return out;
}

}  // namespace reference
}  // namespace dsp
}  // namespace csks
