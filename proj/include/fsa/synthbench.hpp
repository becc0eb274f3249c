#pragma once

// Deterministic synthetic audio corpora: each class is a harmonic tone
// complex with a slow amplitude modulation, each clip adds Gaussian noise.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fsa/pipeline.hpp"

namespace fsa {

struct DurationDist {
    enum class Kind { fixed, uniform } kind = Kind::fixed;
    double lo = 5.0;  // fixed: the duration
    double hi = 5.0;
};

struct ClassFamily {
    double f0_hz = 440.0;
    std::vector<double> partial_amps;    // harmonic p+1 has amplitude partial_amps[p]
    std::vector<double> partial_phases;  // fixed per class
    double am_rate_hz = 1.0;
    double am_depth = 0.5;
    double noise_sigma = 0.05;
};

struct SynthSpec {
    std::string dataset_id = "synth";
    int n_classes = 10;
    std::vector<int> clips_per_class;  // one entry per class
    DurationDist duration;
    double noise_sigma = 0.05;
    int sample_rate = 16000;
    double f0_lo_hz = 150.0;
    double f0_hi_hz = 3000.0;
    std::uint64_t seed = 0;

    void validate() const;
    /// Class families drawn from the seed; fundamentals are at least half a
    /// semitone apart, so families are pairwise distinct.
    std::vector<ClassFamily> families() const;
    std::size_t total_clips() const;
};

/// Shipped presets: "synth-fixed", "synth-var", "synth-train".
SynthSpec synth_preset(const std::string& name);
std::vector<std::string> synth_preset_names();

std::string synth_class_label(int class_index);
std::string synth_clip_id(const SynthSpec& spec, int class_index, int clip_index);

/// Samples of one clip; deterministic in (seed, global clip index).
std::vector<float> synth_clip(const SynthSpec& spec, const ClassFamily& family, std::uint64_t global_index,
                              double duration_s);

/// Writes audio/<clip>.wav for every clip plus manifest.tsv under `out_dir`.
DatasetIndex generate_synthetic_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

inline constexpr const char* kSynthManifestName = "manifest.tsv";

}  // namespace fsa
