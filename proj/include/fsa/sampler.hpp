#pragma once

// Episode sampling: single-dataset, joint within-dataset and joint free.
// The sampling unit is the parent clip; each selected clip is represented by
// one uniformly chosen cached sub-clip.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "fsa/core.hpp"
#include "fsa/pipeline.hpp"
#include "fsa/random.hpp"

namespace fsa {

struct PartitionClip {
    std::string clip_id;
    int n_subclips = 1;
};

/// Class -> clips view of one dataset partition (train, val, test or all).
struct Partition {
    std::string dataset_id;
    std::vector<std::string> classes;
    std::vector<std::vector<PartitionClip>> clips;  // parallel to classes

    std::size_t clip_count() const;
    /// Classes that can fill k support slots and still leave a query clip.
    std::vector<std::size_t> eligible_classes(int k_shot) const;
};

class SpectrogramSource {
public:
    virtual ~SpectrogramSource() = default;
    virtual SpectrogramPtr load(const std::string& dataset_id, const std::string& clip_id, int subclip) const = 0;
};

/// Cached spectrograms of one or more datasets, normalized on load and
/// memoized. Thread-safe.
class CacheStore : public SpectrogramSource {
public:
    CacheStore() = default;
    explicit CacheStore(NormalizationStats stats) : stats_(std::move(stats)) {}

    /// Registers a dataset cache directory (containing cache_manifest.tsv).
    void add_dataset(const std::string& dataset_id, const std::filesystem::path& cache_dir);
    void set_stats(NormalizationStats stats);
    const NormalizationStats& stats() const { return stats_; }

    /// Classes of a dataset with their clips; restricted to `classes` when non-empty.
    Partition partition(const std::string& dataset_id, const std::vector<std::string>& classes = {}) const;
    std::vector<std::string> classes(const std::string& dataset_id) const;

    SpectrogramPtr load(const std::string& dataset_id, const std::string& clip_id, int subclip) const override;
    /// Un-normalized spectrogram as stored on disk.
    Spectrogram load_raw(const std::string& dataset_id, const std::string& clip_id, int subclip) const;

private:
    struct DatasetCache {
        std::filesystem::path dir;
        std::map<std::string, std::vector<std::string>> files;  // clip -> sub-clip files in order
        std::map<std::string, std::string> clip_class;
    };
    const DatasetCache& dataset(const std::string& id) const;

    NormalizationStats stats_;
    std::map<std::string, DatasetCache> datasets_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, SpectrogramPtr> memo_;
};

/// In-memory source for tests and synthetic fixtures.
class MemorySource : public SpectrogramSource {
public:
    void put(const std::string& dataset_id, const std::string& clip_id, int subclip, SpectrogramPtr s);
    SpectrogramPtr load(const std::string& dataset_id, const std::string& clip_id, int subclip) const override;

private:
    std::map<std::string, SpectrogramPtr> items_;
};

enum class SamplingMode { single, joint_within, joint_free };
std::string to_string(SamplingMode mode);
SamplingMode parse_sampling_mode(const std::string& text);

struct SamplerConfig {
    EpisodeSpec spec;
    SamplingMode mode = SamplingMode::single;
    std::uint64_t seed = 0;
    void validate(std::size_t n_datasets) const;
};

struct ResolvedClip {
    int subclip_index = 0;
    SpectrogramPtr spectrogram;
};

/// random_subclip policy: one of the clip's sub-clips, uniformly.
ResolvedClip resolve_clip(const std::string& dataset_id, const PartitionClip& clip, const SpectrogramSource& source,
                          Rng& rng);

Episode sample_episode_single(const Partition& partition, const EpisodeSpec& spec, Rng& rng,
                              const SpectrogramSource& source);
Episode sample_episode_joint_within(const std::vector<Partition>& datasets, const EpisodeSpec& spec, Rng& rng,
                                    const SpectrogramSource& source);
Episode sample_episode_joint_free(const std::vector<Partition>& datasets, const EpisodeSpec& spec, Rng& rng,
                                  const SpectrogramSource& source);

/// Stateful episode stream for training.
class EpisodeSampler {
public:
    EpisodeSampler(SamplerConfig config, std::vector<Partition> datasets, const SpectrogramSource& source);
    Episode next();
    const SamplerConfig& config() const { return config_; }

private:
    SamplerConfig config_;
    std::vector<Partition> datasets_;
    const SpectrogramSource& source_;
    Rng rng_;
};

}  // namespace fsa
