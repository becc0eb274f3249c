#pragma once

#include <filesystem>
#include <vector>

namespace fsa {

struct Waveform {
    std::vector<float> samples;  // mono, [-1, 1]
    int sample_rate = 0;
};

/// Reads PCM (8/16/24/32-bit integer) or 32-bit float WAV. Multi-channel
/// input is downmixed by averaging channels.
Waveform read_wav(const std::filesystem::path& path);

/// Writes 16-bit PCM mono. Samples outside [-1, 1] are clipped.
void write_wav(const std::filesystem::path& path, const Waveform& wave);

/// Linear-interpolation resampling.
std::vector<float> resample_linear(const std::vector<float>& in, int from_rate, int to_rate);

}  // namespace fsa
