#include "fsa/synthbench.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "fsa/random.hpp"
#include "fsa/wav.hpp"

namespace fsa {

void SynthSpec::validate() const {
    if (dataset_id.empty()) fail(ErrorCode::invalid_argument, "synthetic dataset needs an id");
    if (n_classes < 2) fail(ErrorCode::invalid_argument, "synthetic dataset needs at least two classes");
    if (clips_per_class.size() != static_cast<std::size_t>(n_classes))
        fail(ErrorCode::invalid_argument, "clips_per_class must have one entry per class");
    for (int n : clips_per_class)
        if (n < 1) fail(ErrorCode::invalid_argument, "every class needs at least one clip");
    const bool fixed = duration.kind == DurationDist::Kind::fixed;
    const double hi = fixed ? duration.lo : duration.hi;
    if (!(duration.lo > 0.0) || hi > 600.0 || (!fixed && duration.hi < duration.lo))
        fail(ErrorCode::invalid_argument, "clip durations must lie in (0, 600] s");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
        fail(ErrorCode::invalid_argument, "noise level must be finite and non-negative");
    if (sample_rate < 4000) fail(ErrorCode::invalid_argument, "sample rate too low");
    if (!(f0_lo_hz > 0.0) || f0_hi_hz <= f0_lo_hz || f0_hi_hz >= sample_rate / 2.0)
        fail(ErrorCode::invalid_argument, "fundamental range must lie below Nyquist");
}

std::size_t SynthSpec::total_clips() const {
    std::size_t n = 0;
    for (int c : clips_per_class) n += static_cast<std::size_t>(c);
    return n;
}

std::vector<ClassFamily> SynthSpec::families() const {
    validate();
    Rng rng(derive_seed(seed, 0xFA111E5ULL));
    const double min_ratio = std::pow(2.0, 1.0 / 24.0);
    const double span = std::log(f0_hi_hz / f0_lo_hz);
    if (std::log(min_ratio) * n_classes > span)
        fail(ErrorCode::invalid_argument, "too many classes for the fundamental range at half-semitone spacing");
    std::vector<ClassFamily> out;
    int attempts = 0;
    while (out.size() < static_cast<std::size_t>(n_classes)) {
        if (++attempts > 100000) fail(ErrorCode::invalid_argument, "could not place distinct class fundamentals");
        const double f0 = f0_lo_hz * std::exp(rng.uniform() * span);
        bool clash = false;
        for (const auto& f : out)
            if (std::max(f.f0_hz, f0) / std::min(f.f0_hz, f0) < min_ratio) clash = true;
        // Partials and modulation are drawn either way so the stream stays aligned.
        ClassFamily fam;
        fam.f0_hz = f0;
        const int partials = 1 + static_cast<int>(rng.uniform_index(4));
        for (int p = 0; p < partials; ++p) {
            fam.partial_amps.push_back(rng.uniform(0.3, 1.0) / (p + 1));
            fam.partial_phases.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
        }
        fam.am_rate_hz = rng.uniform(0.5, 4.0);
        fam.am_depth = 0.5;
        fam.noise_sigma = noise_sigma;
        if (!clash) out.push_back(std::move(fam));
    }
    return out;
}

std::string synth_class_label(int class_index) {
    std::ostringstream s;
    s << "tone" << std::setw(3) << std::setfill('0') << class_index;
    return s.str();
}

std::string synth_clip_id(const SynthSpec& spec, int class_index, int clip_index) {
    std::ostringstream s;
    s << spec.dataset_id << '_' << std::setw(3) << std::setfill('0') << class_index << '_' << std::setw(4)
      << std::setfill('0') << clip_index;
    return s.str();
}

std::vector<float> synth_clip(const SynthSpec& spec, const ClassFamily& fam, std::uint64_t global_index,
                              double duration_s) {
    Rng rng(derive_seed(spec.seed, global_index + 1));
    const double am_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto n = static_cast<std::size_t>(std::llround(duration_s * spec.sample_rate));
    const double nyquist = spec.sample_rate / 2.0;
    double norm = 0.0;
    for (double a : fam.partial_amps) norm += a;
    std::vector<float> out(n);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / spec.sample_rate;
        double tone = 0.0;
        for (std::size_t p = 0; p < fam.partial_amps.size(); ++p) {
            const double f = fam.f0_hz * static_cast<double>(p + 1);
            if (f >= nyquist) break;
            tone += fam.partial_amps[p] * std::sin(two_pi * f * t + fam.partial_phases[p]);
        }
        const double env = (1.0 + fam.am_depth * std::sin(two_pi * fam.am_rate_hz * t + am_phase)) / (1.0 + fam.am_depth);
        out[i] = static_cast<float>(0.5 * env * tone / norm);
    }
    if (fam.noise_sigma > 0.0)
        for (auto& v : out) v += static_cast<float>(fam.noise_sigma * rng.normal());
    return out;
}

SynthSpec synth_preset(const std::string& name) {
    SynthSpec s;
    s.dataset_id = name;
    if (name == "synth-fixed") {
        s.n_classes = 10;
        s.clips_per_class.assign(10, 60);
        s.duration = {DurationDist::Kind::fixed, 5.0, 5.0};
        s.noise_sigma = 0.05;
        s.seed = 1;
    } else if (name == "synth-var") {
        s.n_classes = 10;
        s.duration = {DurationDist::Kind::uniform, 3.0, 12.0};
        s.noise_sigma = 0.05;
        s.seed = 2;
        Rng rng(derive_seed(s.seed, 0xC0C0ULL));
        for (int c = 0; c < s.n_classes; ++c) s.clips_per_class.push_back(30 + static_cast<int>(rng.uniform_index(91)));
    } else if (name == "synth-train") {
        s.n_classes = 50;
        s.clips_per_class.assign(50, 30);
        s.duration = {DurationDist::Kind::fixed, 5.0, 5.0};
        s.noise_sigma = 0.05;
        s.seed = 3;
    } else {
        fail(ErrorCode::invalid_argument, "unknown synthetic preset '" + name + "'");
    }
    return s;
}

std::vector<std::string> synth_preset_names() { return {"synth-fixed", "synth-var", "synth-train"}; }

DatasetIndex generate_synthetic_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    const auto families = spec.families();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "audio", ec);
    if (ec) fail(ErrorCode::io, "cannot create " + (out_dir / "audio").string() + ": " + ec.message());

    DatasetIndex index;
    index.dataset_id = spec.dataset_id;
    std::uint64_t global = 0;
    for (int c = 0; c < spec.n_classes; ++c) {
        for (int i = 0; i < spec.clips_per_class[static_cast<std::size_t>(c)]; ++i, ++global) {
            double dur = spec.duration.lo;
            if (spec.duration.kind == DurationDist::Kind::uniform) {
                Rng rng(derive_seed(spec.seed ^ 0xD0D0ULL, global));
                dur = rng.uniform(spec.duration.lo, spec.duration.hi);
            }
            Waveform w;
            w.sample_rate = spec.sample_rate;
            w.samples = synth_clip(spec, families[static_cast<std::size_t>(c)], global, dur);
            AudioClip clip;
            clip.clip_id = synth_clip_id(spec, c, i);
            clip.dataset_id = spec.dataset_id;
            clip.class_label = synth_class_label(c);
            clip.sample_rate = spec.sample_rate;
            clip.duration = static_cast<double>(w.samples.size()) / spec.sample_rate;
            clip.source_path = "audio/" + clip.clip_id + ".wav";
            write_wav(out_dir / clip.source_path, w);
            index.clips.push_back(std::move(clip));
        }
    }
    const auto manifest = out_dir / kSynthManifestName;
    {
        std::ofstream out(manifest);
        if (!out) fail(ErrorCode::io, "cannot write " + manifest.string());
        write_manifest(out, index);
    }
    return ingest_dataset_file(manifest, spec.dataset_id);
}

}  // namespace fsa
