#pragma once

// Offline dataset preparation: manifest ingestion, pruning, sub-clip
// segmentation, log-mel spectrograms, normalization statistics and the
// on-disk spectrogram cache.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "fsa/core.hpp"

namespace fsa {

struct DatasetIndex {
    std::string dataset_id;
    std::vector<AudioClip> clips;
    std::map<std::string, std::size_t> class_inventory;
    bool fixed_length = false;

    std::vector<std::string> classes() const;
    void validate() const;
};

struct SpectrogramConfig {
    int sample_rate_hz = 16000;
    int n_mels = 64;
    double window_ms = 25.0;
    double hop_ms = 10.0;
    bool log_scale = true;
    double clip_length_s = 5.0;  // L
    double log_floor = 1e-10;

    void validate() const;
    std::size_t window_samples() const;
    std::size_t hop_samples() const;
    std::size_t clip_samples() const;
    std::size_t fft_size() const;
    /// floor((clip_samples - window) / hop) + 1
    std::size_t frames_per_clip() const;
    /// Stable 16-hex-digit hash of every field; embedded in cache files.
    std::string hash() const;
    bool operator==(const SpectrogramConfig&) const = default;
};

/// Reads a delimited manifest (tab, or comma when the header has no tab).
/// The header must name clip_id, class, duration_s, sample_rate, path in any order.
DatasetIndex ingest_dataset(std::istream& manifest, const std::string& dataset_id);
DatasetIndex ingest_dataset_file(const std::filesystem::path& manifest, const std::string& dataset_id);
void write_manifest(std::ostream& out, const DatasetIndex& index);

/// Drops clips longer than max_duration, then classes with fewer than
/// min_class_count surviving clips.
DatasetIndex prune_dataset(const DatasetIndex& index, double max_duration, std::size_t min_class_count);

/// ceil(duration / L) sub-clips (at least one); the last one is zero-padded.
std::vector<SubClip> segment_clip(const AudioClip& clip, double length_s);

/// Cuts a waveform into L-second windows, zero-padding the last one.
std::vector<std::vector<float>> segment_waveform(const std::vector<float>& samples, std::size_t segment_samples);

/// Deterministic log-magnitude mel spectrogram (n_mels x frames).
Spectrogram compute_spectrogram(const std::vector<float>& waveform, const SpectrogramConfig& config);

/// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Triangular filterbank, n_mels rows x (fft_size/2 + 1) columns.
std::vector<std::vector<double>> mel_filterbank(int n_mels, std::size_t fft_size, int sample_rate);

using SpectrogramVisitor = std::function<void(const Spectrogram&)>;
using SpectrogramStream = std::function<void(const SpectrogramVisitor&)>;

/// Population statistics over a stream of (train-partition) spectrograms.
NormalizationStats compute_normalization_stats(const SpectrogramStream& stream, NormMode mode);
NormalizationStats compute_normalization_stats(const std::vector<Spectrogram>& spectrograms, NormMode mode);

Spectrogram normalize(const Spectrogram& spectrogram, const NormalizationStats& stats);
/// Inverse of normalize for global and channel_wise stats.
Spectrogram denormalize(const Spectrogram& spectrogram, const NormalizationStats& stats);

// --- cache -----------------------------------------------------------------

struct CacheEntry {
    std::string subclip_id;
    std::string parent_id;
    std::string class_label;
    std::string file;  // relative to the cache directory
    std::string config_hash;
};

struct CacheManifest {
    std::string dataset_id;
    std::vector<CacheEntry> entries;
    std::vector<std::pair<std::string, std::string>> errors;  // clip_id, message
    std::size_t files_written = 0;                           // by the producing run only

    void save(const std::filesystem::path& path) const;
    static CacheManifest load(const std::filesystem::path& path);
};

inline constexpr const char* kCacheManifestName = "cache_manifest.tsv";

/// Segments, converts and writes every clip of `index` under `cache_dir`.
/// Relative clip paths resolve against `audio_root`. Existing entries with a
/// matching config hash are kept; unreadable audio is listed in `errors`.
CacheManifest materialize_cache(const DatasetIndex& index, const std::filesystem::path& audio_root,
                                const SpectrogramConfig& config, const std::filesystem::path& cache_dir);

void write_spectrogram_file(const std::filesystem::path& path, const Spectrogram& s, const std::string& config_hash);
Spectrogram read_spectrogram_file(const std::filesystem::path& path, std::string* config_hash = nullptr);

}  // namespace fsa
