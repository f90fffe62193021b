#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csks/audio.hpp"

namespace csks {

enum class FeatureKind { mfcc, spectrogram };

std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);

// Time-major feature matrix: rows are frames, columns are coefficients or bins.
struct FeatureMatrix {
  FeatureKind kind = FeatureKind::spectrogram;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double frame_hop_seconds = 0.0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values).subspan(r * cols, cols);
  }
  bool all_finite() const;
};

namespace dsp {

inline constexpr double kLogFloor = 1e-10;

// Where the 20 Hz - 4 kHz band-pass is applied in `extract_features`.
enum class BandpassPlacement { none, mfcc_only, both };

struct FeatureConfig {
  FeatureKind kind = FeatureKind::spectrogram;
  double window_ms = 20.0;
  double hop_ms = 10.0;
  std::size_t nfft = 480;
  std::size_t n_mels = 40;
  std::size_t n_coeffs = 40;
  double low_hz = 20.0;
  double high_hz = 4000.0;
  BandpassPlacement bandpass = BandpassPlacement::mfcc_only;
  double log_floor = kLogFloor;
};

std::size_t ms_to_samples(double ms, int sample_rate);

// floor((n - window) / hop) + 1, or 0 when n < window.
std::size_t frame_count(std::size_t n, std::size_t window, std::size_t hop);

// Views into `clip.samples`; valid while the clip lives. No padding.
std::vector<std::span<const double>> frame(const AudioClip& clip, double window_ms = 20.0,
                                           double hop_ms = 10.0);

// Windowed-sinc band-limited resampling.
AudioClip resample(const AudioClip& clip, int target_rate);
// Resamples the sample sequence by `ratio` (output length = round(n * ratio)).
std::vector<double> resample_ratio(std::span<const double> samples, double ratio);

// Fourth-order Butterworth high-pass at low_hz cascaded with a fourth-order
// low-pass at high_hz (bilinear transform, prewarped), run forward only.
AudioClip bandpass(const AudioClip& clip, double low_hz = 20.0, double high_hz = 4000.0);

// Symmetric Hann window of the given length.
std::vector<double> hann_window(std::size_t length);

// log(|FFT|^2 + floor) per frame; frames are Hann-windowed and zero-padded to nfft.
FeatureMatrix spectrogram(const AudioClip& clip, double window_ms = 20.0, double hop_ms = 10.0,
                          std::size_t nfft = 480, double log_floor = kLogFloor);

// Triangular filters on the HTK mel scale, shape (n_mels, nfft/2 + 1).
std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t nfft,
                                                int sample_rate, double low_hz, double high_hz);

// Power spectrum -> mel filterbank -> log -> orthonormal DCT-II.
FeatureMatrix mfcc(const AudioClip& clip, const FeatureConfig& config = {});

// Band-pass placement, then spectrogram or MFCC per `config.kind`.
FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& config);

// Flat binary container: "CSKF", u32 version, u8 kind, u32 rows, u32 cols,
// f64 hop seconds, then rows*cols little-endian f32 values row-major.
void write_features(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_features(const std::filesystem::path& path);
void write_features_csv(const std::filesystem::path& path, const FeatureMatrix& features);

namespace reference {

// Same contract as dsp::spectrogram, computed serially with a direct DFT.
FeatureMatrix spectrogram(const AudioClip& clip, double window_ms = 20.0, double hop_ms = 10.0,
                          std::size_t nfft = 480, double log_floor = kLogFloor);

}  // namespace reference
}  // namespace dsp
}  // namespace csks
