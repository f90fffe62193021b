#pragma once

#include <filesystem>
#include <vector>

namespace csks {

inline constexpr int kCanonicalRate = 16000;

// Mono audio. Amplitudes are nominally in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = kCanonicalRate;

  std::size_t size() const { return samples.size(); }
  double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
  bool all_finite() const;
};

enum class WavEncoding { pcm16, float32 };

// Reads RIFF/WAVE with 8/16/24/32-bit integer or 32-bit float samples.
// Multichannel input is averaged to mono; integers are scaled into [-1, 1].
AudioClip load_wav(const std::filesystem::path& path);
void save_wav(const std::filesystem::path& path, const AudioClip& clip,
              WavEncoding encoding = WavEncoding::float32);

}  // namespace csks
