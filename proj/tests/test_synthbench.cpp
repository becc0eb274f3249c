#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "fsa/synthbench.hpp"
#include "fsa/wav.hpp"

using namespace fsa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("fsa_test_synth_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Mel-band energy profile summed over time, by naive DFT over 1024-sample frames.
std::vector<double> band_profile(const std::vector<float>& x, int sample_rate, int bands) {
    const std::size_t n = 1024;
    const double top = 2595.0 * std::log10(1.0 + sample_rate / 2.0 / 700.0);
    std::vector<double> profile(static_cast<std::size_t>(bands), 0.0);
    for (std::size_t start = 0; start + n <= x.size(); start += 4 * n) {
        for (std::size_t k = 1; k < n / 2; ++k) {
            std::complex<double> acc = 0;
            for (std::size_t i = 0; i < n; ++i)
                acc += double(x[start + i]) * std::polar(1.0, -2 * std::numbers::pi * double(k * i) / n);
            const double f = double(k) * sample_rate / n;
            const double mel = 2595.0 * std::log10(1.0 + f / 700.0);
            const auto b = std::min<std::size_t>(static_cast<std::size_t>(mel / top * bands), profile.size() - 1);
            profile[b] += std::norm(acc);
        }
    }
    return profile;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

SynthSpec small_spec() {
    SynthSpec s;
    s.dataset_id = "tiny";
    s.n_classes = 3;
    s.clips_per_class = {2, 3, 1};
    s.duration = {DurationDist::Kind::uniform, 0.2, 0.6};
    s.seed = 5;
    return s;
}

}  // namespace

TEST_CASE("presets") {
    const auto fixed = synth_preset("synth-fixed");
    CHECK(fixed.n_classes == 10);
    CHECK(fixed.total_clips() == 600);
    CHECK(fixed.noise_sigma == 0.05);
    const auto var = synth_preset("synth-var");
    CHECK(var.duration.kind == DurationDist::Kind::uniform);
    CHECK(var.duration.lo == 3.0);
    CHECK(var.duration.hi == 12.0);
    for (int n : var.clips_per_class) {
        CHECK(n >= 30);
        CHECK(n <= 120);
    }
    CHECK(*std::min_element(var.clips_per_class.begin(), var.clips_per_class.end()) <
          *std::max_element(var.clips_per_class.begin(), var.clips_per_class.end()));
    CHECK(synth_preset("synth-train").n_classes == 50);
    CHECK_THROWS_AS(synth_preset("nope"), Error);
}

TEST_CASE("class families are pairwise distinct") {
    for (const auto& name : synth_preset_names()) {
        const auto fams = synth_preset(name).families();
        for (std::size_t i = 0; i < fams.size(); ++i)
            for (std::size_t j = i + 1; j < fams.size(); ++j) {
                const double ratio = std::max(fams[i].f0_hz, fams[j].f0_hz) / std::min(fams[i].f0_hz, fams[j].f0_hz);
                CHECK(ratio >= std::pow(2.0, 1.0 / 24.0));
            }
    }
}

TEST_CASE("spec validation") {
    auto s = small_spec();
    s.clips_per_class = {1, 1};
    CHECK_THROWS_AS(s.validate(), Error);
    s = small_spec();
    s.duration = {DurationDist::Kind::fixed, 700.0, 700.0};
    CHECK_THROWS_AS(s.validate(), Error);
    s = small_spec();
    s.duration = {DurationDist::Kind::uniform, 0.0, 1.0};
    CHECK_THROWS_AS(s.validate(), Error);
    s = small_spec();
    s.noise_sigma = -1;
    CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("generation: counts, lengths and byte-identical reruns") {
    const auto spec = small_spec();
    const auto a = scratch("a"), b = scratch("b");
    const auto index = generate_synthetic_dataset(spec, a);
    generate_synthetic_dataset(spec, b);
    CHECK(index.clips.size() == 6);
    CHECK(index.class_inventory.at(synth_class_label(1)) == 3);
    CHECK(!index.fixed_length);
    for (const auto& c : index.clips) {
        CHECK(c.duration >= 0.2);
        CHECK(c.duration <= 0.6);
        const auto w = read_wav(a / c.source_path);
        CHECK(w.samples.size() == static_cast<std::size_t>(std::llround(c.duration * spec.sample_rate)));
        CHECK(slurp(a / c.source_path) == slurp(b / c.source_path));
    }
    CHECK(slurp(a / kSynthManifestName) == slurp(b / kSynthManifestName));

    auto other = spec;
    other.seed = 6;
    const auto c = scratch("c");
    generate_synthetic_dataset(other, c);
    CHECK(slurp(a / index.clips[0].source_path) != slurp(c / index.clips[0].source_path));
    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(c);
}

TEST_CASE("fixed-length preset shape") {
    auto spec = synth_preset("synth-fixed");
    spec.clips_per_class.assign(10, 2);
    spec.duration = {DurationDist::Kind::fixed, 0.5, 0.5};
    const auto dir = scratch("fixed");
    const auto index = generate_synthetic_dataset(spec, dir);
    CHECK(index.clips.size() == 20);
    CHECK(index.fixed_length);
    fs::remove_all(dir);
}

TEST_CASE("noiseless clips of one class share their band profile") {
    auto spec = synth_preset("synth-fixed");
    spec.noise_sigma = 0.0;
    const auto fams = spec.families();
    for (std::size_t c : {0u, 3u, 7u}) {
        const auto x = synth_clip(spec, fams[c], 0, 2.0);
        const auto y = synth_clip(spec, fams[c], 1, 2.0);
        CHECK(x != y);  // AM phase differs
        CHECK(correlation(band_profile(x, spec.sample_rate, 32), band_profile(y, spec.sample_rate, 32)) > 0.99);
    }
    // and differ across classes
    const auto p0 = band_profile(synth_clip(spec, fams[0], 0, 2.0), spec.sample_rate, 32);
    const auto p1 = band_profile(synth_clip(spec, fams[1], 0, 2.0), spec.sample_rate, 32);
    CHECK(correlation(p0, p1) < 0.9);
}

TEST_CASE("clip generation is deterministic per (seed, index)") {
    const auto spec = synth_preset("synth-fixed");
    const auto fam = spec.families()[2];
    CHECK(synth_clip(spec, fam, 17, 0.3) == synth_clip(spec, fam, 17, 0.3));
    CHECK(synth_clip(spec, fam, 17, 0.3) != synth_clip(spec, fam, 18, 0.3));
}
