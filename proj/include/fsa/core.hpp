#pragma once

// Domain types shared by every module. Everything here is immutable once
// constructed and validated; behaviour lives in the owning modules.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace fsa {

enum class ErrorCode : int {
    invalid_argument = 1,
    io = 2,
    format = 3,
    not_found = 4,
    numerical = 5,
    unavailable = 6,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

/// Floor applied to every standard deviation before it is used as a divisor.
inline constexpr double kStdFloor = 1e-6;

struct AudioClip {
    std::string clip_id;
    std::string dataset_id;
    std::string class_label;  // weak, clip-level label
    double duration = 0.0;    // seconds
    int sample_rate = 0;      // Hz
    std::string source_path;

    void validate() const;
    bool operator==(const AudioClip&) const = default;
};

struct SubClip {
    std::string parent_clip_id;
    int index = 0;
    double length = 0.0;  // seconds, equals the segmentation length L
    std::string class_label;
    std::string spectrogram_ref;

    std::string id() const { return parent_clip_id + "#" + std::to_string(index); }
    bool operator==(const SubClip&) const = default;
};

struct EpisodeSpec {
    int n_way = 5;
    int k_shot = 1;
    int q_queries = 5;

    void validate() const;
    bool operator==(const EpisodeSpec&) const = default;
};

/// Log-mel spectrogram, row-major [mel][frame].
struct Spectrogram {
    std::size_t n_mels = 0;
    std::size_t n_frames = 0;
    std::vector<float> values;

    Spectrogram() = default;
    Spectrogram(std::size_t mels, std::size_t frames, float fill = 0.0f)
        : n_mels(mels), n_frames(frames), values(mels * frames, fill) {}

    float& at(std::size_t mel, std::size_t frame) { return values[mel * n_frames + frame]; }
    float at(std::size_t mel, std::size_t frame) const { return values[mel * n_frames + frame]; }
    bool same_shape(const Spectrogram& o) const { return n_mels == o.n_mels && n_frames == o.n_frames; }
    bool operator==(const Spectrogram&) const = default;
};

using SpectrogramPtr = std::shared_ptr<const Spectrogram>;

struct EpisodeItem {
    SpectrogramPtr spectrogram;
    int class_index = 0;  // episode-local, 0..n_way-1
    std::string parent_clip_id;
    int subclip_index = 0;
};

/// One N-way k-shot task. Construct through make(), which enforces the
/// per-class counts, the shape agreement, and the support/query leakage guard.
class Episode {
public:
    static Episode make(EpisodeSpec spec, std::vector<EpisodeItem> support, std::vector<EpisodeItem> query,
                        std::vector<std::string> class_map, std::vector<std::string> class_sources);

    const EpisodeSpec& spec() const { return spec_; }
    const std::vector<EpisodeItem>& support() const { return support_; }
    const std::vector<EpisodeItem>& query() const { return query_; }
    /// episode-local index -> global class label
    const std::vector<std::string>& class_map() const { return class_map_; }
    /// episode-local index -> dataset the class came from
    const std::vector<std::string>& class_sources() const { return class_sources_; }
    std::set<std::string> source_datasets() const { return {class_sources_.begin(), class_sources_.end()}; }

private:
    Episode() = default;
    EpisodeSpec spec_;
    std::vector<EpisodeItem> support_;
    std::vector<EpisodeItem> query_;
    std::vector<std::string> class_map_;
    std::vector<std::string> class_sources_;
};

struct ClassSplit {
    std::string dataset_id;
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
    std::uint64_t seed = 0;

    /// Pairwise disjointness; when `all_classes` is non-empty also checks coverage.
    void validate(const std::vector<std::string>& all_classes = {}) const;
    bool operator==(const ClassSplit&) const = default;
};

enum class NormMode { per_sample, channel_wise, global };

std::string to_string(NormMode mode);
NormMode parse_norm_mode(const std::string& text);

struct NormalizationStats {
    NormMode mode = NormMode::global;
    std::vector<double> mean;  // global: 1 value, channel_wise: one per mel bin, per_sample: empty
    std::vector<double> std;

    void validate() const;
    bool operator==(const NormalizationStats&) const = default;
};

// JSON forms of the core types.
void to_json(nlohmann::json& j, const AudioClip& c);
void from_json(const nlohmann::json& j, AudioClip& c);
void to_json(nlohmann::json& j, const SubClip& c);
void from_json(const nlohmann::json& j, SubClip& c);
void to_json(nlohmann::json& j, const EpisodeSpec& s);
void from_json(const nlohmann::json& j, EpisodeSpec& s);
void to_json(nlohmann::json& j, const Spectrogram& s);
void from_json(const nlohmann::json& j, Spectrogram& s);
void to_json(nlohmann::json& j, const ClassSplit& s);
void from_json(const nlohmann::json& j, ClassSplit& s);
void to_json(nlohmann::json& j, const NormalizationStats& s);
void from_json(const nlohmann::json& j, NormalizationStats& s);
nlohmann::json episode_to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& j);

}  // namespace fsa
