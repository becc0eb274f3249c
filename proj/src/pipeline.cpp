#include "fsa/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <fftw3.h>

#include "fsa/wav.hpp"

namespace fsa {

namespace fs = std::filesystem;

// --- index -------------------------------------------------------------------

std::vector<std::string> DatasetIndex::classes() const {
    std::vector<std::string> out;
    for (const auto& [label, count] : class_inventory) out.push_back(label);
    return out;
}

void DatasetIndex::validate() const {
    std::size_t total = 0;
    for (const auto& [label, count] : class_inventory) total += count;
    if (total != clips.size()) fail(ErrorCode::invalid_argument, "class inventory does not sum to clip count");
}

namespace {

DatasetIndex build_index(std::string dataset_id, std::vector<AudioClip> clips) {
    DatasetIndex idx;
    idx.dataset_id = std::move(dataset_id);
    idx.clips = std::move(clips);
    for (const auto& c : idx.clips) ++idx.class_inventory[c.class_label];
    idx.fixed_length = !idx.clips.empty() && std::all_of(idx.clips.begin(), idx.clips.end(), [&](const AudioClip& c) {
        return c.duration == idx.clips.front().duration;
    });
    return idx;
}

std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, delim)) out.push_back(field);
    if (!line.empty() && line.back() == delim) out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

DatasetIndex ingest_dataset(std::istream& manifest, const std::string& dataset_id) {
    std::string header;
    while (std::getline(manifest, header) && trim(header).empty()) {
    }
    if (trim(header).empty()) fail(ErrorCode::format, "empty manifest");
    if (!header.empty() && header.back() == '\r') header.pop_back();
    const char delim = header.find('\t') != std::string::npos ? '\t' : ',';
    const auto names = split_line(header, delim);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < names.size(); ++i) col[trim(names[i])] = i;
    for (const char* required : {"clip_id", "class", "duration_s", "sample_rate", "path"})
        if (!col.count(required)) fail(ErrorCode::format, std::string("manifest header lacks field '") + required + "'");

    std::vector<AudioClip> clips;
    std::set<std::string> ids;
    std::string line;
    std::size_t record = 0;
    while (std::getline(manifest, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        ++record;
        const auto fields = split_line(line, delim);
        auto get = [&](const char* name) {
            const std::size_t i = col.at(name);
            std::string v = i < fields.size() ? trim(fields[i]) : std::string();
            if (v.empty())
                fail(ErrorCode::format, "manifest record " + std::to_string(record) + ": missing field '" + name + "'");
            return v;
        };
        AudioClip c;
        c.dataset_id = dataset_id;
        c.clip_id = get("clip_id");
        c.class_label = get("class");
        c.source_path = get("path");
        try {
            c.duration = std::stod(get("duration_s"));
            c.sample_rate = std::stoi(get("sample_rate"));
        } catch (const std::logic_error&) {
            fail(ErrorCode::format, "manifest record " + std::to_string(record) + ": unparseable number");
        }
        if (!(c.duration > 0.0))
            fail(ErrorCode::format, "manifest record " + std::to_string(record) + ": non-positive duration");
        if (c.sample_rate <= 0)
            fail(ErrorCode::format, "manifest record " + std::to_string(record) + ": non-positive sample rate");
        if (!ids.insert(c.clip_id).second)
            fail(ErrorCode::format,
                 "manifest record " + std::to_string(record) + ": duplicate clip_id '" + c.clip_id + "'");
        clips.push_back(std::move(c));
    }
    if (clips.empty()) fail(ErrorCode::format, "empty manifest");
    return build_index(dataset_id, std::move(clips));
}

DatasetIndex ingest_dataset_file(const fs::path& manifest, const std::string& dataset_id) {
    std::ifstream in(manifest);
    if (!in) fail(ErrorCode::io, "cannot open manifest " + manifest.string());
    return ingest_dataset(in, dataset_id);
}

void write_manifest(std::ostream& out, const DatasetIndex& index) {
    out << "clip_id\tclass\tduration_s\tsample_rate\tpath\n";
    for (const auto& c : index.clips) {
        std::ostringstream d;
        d.precision(17);
        d << c.duration;
        out << c.clip_id << '\t' << c.class_label << '\t' << d.str() << '\t' << c.sample_rate << '\t' << c.source_path
            << '\n';
    }
}

DatasetIndex prune_dataset(const DatasetIndex& index, double max_duration, std::size_t min_class_count) {
    if (!(max_duration > 0.0)) fail(ErrorCode::invalid_argument, "max_duration must be positive");
    std::vector<AudioClip> kept;
    for (const auto& c : index.clips)
        if (c.duration <= max_duration) kept.push_back(c);
    std::map<std::string, std::size_t> counts;
    for (const auto& c : kept) ++counts[c.class_label];
    std::vector<AudioClip> out;
    for (auto& c : kept)
        if (counts[c.class_label] >= min_class_count) out.push_back(std::move(c));
    if (out.empty()) fail(ErrorCode::invalid_argument, "pruning removed all data");
    return build_index(index.dataset_id, std::move(out));
}

// --- segmentation --------------------------------------------------------------

std::vector<SubClip> segment_clip(const AudioClip& clip, double length_s) {
    if (!(length_s > 0.0)) fail(ErrorCode::invalid_argument, "sub-clip length must be positive");
    // Tolerate representation error so that 10.000000000001 / 5 still gives 2.
    const double ratio = clip.duration / length_s;
    auto count = static_cast<long long>(std::ceil(ratio - 1e-9));
    count = std::max<long long>(count, 1);
    std::vector<SubClip> out;
    out.reserve(static_cast<std::size_t>(count));
    for (long long i = 0; i < count; ++i)
        out.push_back(SubClip{clip.clip_id, static_cast<int>(i), length_s, clip.class_label, {}});
    return out;
}

std::vector<std::vector<float>> segment_waveform(const std::vector<float>& samples, std::size_t segment_samples) {
    if (segment_samples == 0) fail(ErrorCode::invalid_argument, "segment length must be positive");
    const std::size_t count = std::max<std::size_t>(1, (samples.size() + segment_samples - 1) / segment_samples);
    std::vector<std::vector<float>> out(count, std::vector<float>(segment_samples, 0.0f));
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t begin = s * segment_samples;
        const std::size_t end = std::min(begin + segment_samples, samples.size());
        if (begin < end) std::copy(samples.begin() + static_cast<long>(begin), samples.begin() + static_cast<long>(end), out[s].begin());
    }
    return out;
}

// --- spectrogram ---------------------------------------------------------------

void SpectrogramConfig::validate() const {
    if (sample_rate_hz <= 0) fail(ErrorCode::invalid_argument, "sample rate must be positive");
    if (n_mels < 1) fail(ErrorCode::invalid_argument, "n_mels must be >= 1");
    if (!(hop_ms > 0.0) || window_ms < hop_ms) fail(ErrorCode::invalid_argument, "need window_ms >= hop_ms > 0");
    if (!(clip_length_s > 0.0)) fail(ErrorCode::invalid_argument, "clip length must be positive");
    if (!(log_floor > 0.0)) fail(ErrorCode::invalid_argument, "log floor must be positive");
    if (clip_samples() < window_samples()) fail(ErrorCode::invalid_argument, "clip shorter than one window");
}

std::size_t SpectrogramConfig::window_samples() const {
    return static_cast<std::size_t>(std::lround(window_ms * sample_rate_hz / 1000.0));
}
std::size_t SpectrogramConfig::hop_samples() const {
    return static_cast<std::size_t>(std::lround(hop_ms * sample_rate_hz / 1000.0));
}
std::size_t SpectrogramConfig::clip_samples() const {
    return static_cast<std::size_t>(std::lround(clip_length_s * sample_rate_hz));
}
std::size_t SpectrogramConfig::fft_size() const {
    std::size_t n = 1;
    while (n < window_samples()) n <<= 1;
    return n;
}
std::size_t SpectrogramConfig::frames_per_clip() const {
    const std::size_t n = clip_samples(), w = window_samples();
    return n < w ? 0 : (n - w) / hop_samples() + 1;
}

std::string SpectrogramConfig::hash() const {
    std::ostringstream s;
    s.precision(17);
    s << "sr=" << sample_rate_hz << ";mels=" << n_mels << ";win=" << window_ms << ";hop=" << hop_ms
      << ";log=" << log_scale << ";L=" << clip_length_s << ";floor=" << log_floor << ";window=hann;mel=htk";
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : s.str()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<std::vector<double>> mel_filterbank(int n_mels, std::size_t fft_size, int sample_rate) {
    const std::size_t n_bins = fft_size / 2 + 1;
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    std::vector<std::vector<double>> bank(static_cast<std::size_t>(n_mels), std::vector<double>(n_bins, 0.0));
    for (std::size_t m = 0; m < bank.size(); ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (std::size_t b = 0; b < n_bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / static_cast<double>(fft_size);
            double w = 0.0;
            if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
            else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
            bank[m][b] = w;
        }
    }
    return bank;
}

namespace {

// FFTW planning is not thread-safe; executing a plan on new arrays is.
struct FftPlan {
    std::size_t n = 0;
    fftw_plan plan = nullptr;
};

std::mutex& plan_mutex() {
    static std::mutex m;
    return m;
}

fftw_plan plan_for(std::size_t n) {
    static std::map<std::size_t, fftw_plan> plans;
    std::lock_guard<std::mutex> lock(plan_mutex());
    auto it = plans.find(n);
    if (it != plans.end()) return it->second;
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans.emplace(n, p);
    return p;
}

}  // namespace

Spectrogram compute_spectrogram(const std::vector<float>& waveform, const SpectrogramConfig& config) {
    config.validate();
    const std::size_t win = config.window_samples(), hop = config.hop_samples(), nfft = config.fft_size();
    const std::size_t frames = waveform.size() < win ? 0 : (waveform.size() - win) / hop + 1;
    if (frames == 0) fail(ErrorCode::invalid_argument, "waveform shorter than one analysis window");

    std::vector<double> window(win);
    for (std::size_t i = 0; i < win; ++i)
        window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(win));
    const auto bank = mel_filterbank(config.n_mels, nfft, config.sample_rate_hz);
    const std::size_t n_bins = nfft / 2 + 1;

    fftw_plan plan = plan_for(nfft);
    double* in = fftw_alloc_real(nfft);
    fftw_complex* out = fftw_alloc_complex(n_bins);
    std::vector<double> power(n_bins);

    Spectrogram s(static_cast<std::size_t>(config.n_mels), frames);
    for (std::size_t t = 0; t < frames; ++t) {
        std::fill(in, in + nfft, 0.0);
        for (std::size_t i = 0; i < win; ++i) in[i] = window[i] * waveform[t * hop + i];
        fftw_execute_dft_r2c(plan, in, out);
        for (std::size_t b = 0; b < n_bins; ++b) power[b] = out[b][0] * out[b][0] + out[b][1] * out[b][1];
        for (std::size_t m = 0; m < bank.size(); ++m) {
            double e = 0.0;
            for (std::size_t b = 0; b < n_bins; ++b) e += bank[m][b] * power[b];
            s.at(m, t) = static_cast<float>(config.log_scale ? std::log(std::max(e, config.log_floor)) : e);
        }
    }
    fftw_free(in);
    fftw_free(out);
    return s;
}

// --- normalization -------------------------------------------------------------

NormalizationStats compute_normalization_stats(const SpectrogramStream& stream, NormMode mode) {
    NormalizationStats st;
    st.mode = mode;
    std::size_t examples = 0;
    std::vector<double> sum, sumsq;
    std::vector<std::size_t> n;
    std::size_t mels = 0;
    stream([&](const Spectrogram& s) {
        if (examples == 0) {
            mels = s.n_mels;
            const std::size_t groups = mode == NormMode::channel_wise ? mels : 1;
            sum.assign(groups, 0.0);
            sumsq.assign(groups, 0.0);
            n.assign(groups, 0);
        } else if (mode == NormMode::channel_wise && s.n_mels != mels) {
            fail(ErrorCode::invalid_argument, "channel-wise stats need a common mel count");
        }
        ++examples;
        if (mode == NormMode::per_sample) return;
        for (std::size_t m = 0; m < s.n_mels; ++m) {
            const std::size_t g = mode == NormMode::channel_wise ? m : 0;
            for (std::size_t t = 0; t < s.n_frames; ++t) {
                const double v = s.at(m, t);
                sum[g] += v;
                sumsq[g] += v * v;
            }
            n[g] += s.n_frames;
        }
    });
    if (examples == 0) fail(ErrorCode::invalid_argument, "cannot compute normalization stats of an empty stream");
    if (mode == NormMode::per_sample) return st;
    for (std::size_t g = 0; g < sum.size(); ++g) {
        const double mean = sum[g] / static_cast<double>(n[g]);
        const double var = std::max(0.0, sumsq[g] / static_cast<double>(n[g]) - mean * mean);
        st.mean.push_back(mean);
        st.std.push_back(std::max(std::sqrt(var), kStdFloor));
    }
    return st;
}

NormalizationStats compute_normalization_stats(const std::vector<Spectrogram>& spectrograms, NormMode mode) {
    return compute_normalization_stats(
        [&](const SpectrogramVisitor& visit) {
            for (const auto& s : spectrograms) visit(s);
        },
        mode);
}

Spectrogram normalize(const Spectrogram& s, const NormalizationStats& stats) {
    Spectrogram out = s;
    if (stats.mode == NormMode::per_sample) {
        double sum = 0.0, sumsq = 0.0;
        for (float v : s.values) {
            sum += v;
            sumsq += static_cast<double>(v) * v;
        }
        const double n = static_cast<double>(s.values.size());
        const double mean = sum / n;
        const double sd = std::max(std::sqrt(std::max(0.0, sumsq / n - mean * mean)), kStdFloor);
        for (auto& v : out.values) v = static_cast<float>((v - mean) / sd);
        return out;
    }
    if (stats.mode == NormMode::channel_wise && stats.mean.size() != s.n_mels)
        fail(ErrorCode::invalid_argument, "channel-wise stats do not match the mel count");
    for (std::size_t m = 0; m < s.n_mels; ++m) {
        const std::size_t g = stats.mode == NormMode::channel_wise ? m : 0;
        for (std::size_t t = 0; t < s.n_frames; ++t)
            out.at(m, t) = static_cast<float>((s.at(m, t) - stats.mean[g]) / stats.std[g]);
    }
    return out;
}

Spectrogram denormalize(const Spectrogram& s, const NormalizationStats& stats) {
    if (stats.mode == NormMode::per_sample) fail(ErrorCode::invalid_argument, "per-sample normalization has no inverse");
    Spectrogram out = s;
    for (std::size_t m = 0; m < s.n_mels; ++m) {
        const std::size_t g = stats.mode == NormMode::channel_wise ? m : 0;
        for (std::size_t t = 0; t < s.n_frames; ++t)
            out.at(m, t) = static_cast<float>(s.at(m, t) * stats.std[g] + stats.mean[g]);
    }
    return out;
}

// --- cache ---------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'S', 'A', 'S'};
constexpr std::uint32_t kCacheVersion = 1;

std::string sanitize(const std::string& id) {
    std::string out;
    for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
    return out;
}

bool entry_is_current(const fs::path& path, const std::string& hash) {
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    std::uint32_t version = 0;
    char stored[16];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) return false;
    if (!in.read(reinterpret_cast<char*>(&version), 4) || version != kCacheVersion) return false;
    if (!in.read(stored, 16)) return false;
    return std::string(stored, 16) == hash;
}

}  // namespace

void write_spectrogram_file(const fs::path& path, const Spectrogram& s, const std::string& config_hash) {
    if (config_hash.size() != 16) fail(ErrorCode::invalid_argument, "config hash must be 16 hex digits");
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) fail(ErrorCode::io, "cannot write " + tmp.string());
        const auto mels = static_cast<std::uint32_t>(s.n_mels), frames = static_cast<std::uint32_t>(s.n_frames);
        out.write(kMagic, 4);
        out.write(reinterpret_cast<const char*>(&kCacheVersion), 4);
        out.write(config_hash.data(), 16);
        out.write(reinterpret_cast<const char*>(&mels), 4);
        out.write(reinterpret_cast<const char*>(&frames), 4);
        out.write(reinterpret_cast<const char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * 4));
        if (!out) fail(ErrorCode::io, "failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

Spectrogram read_spectrogram_file(const fs::path& path, std::string* config_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::not_found, "missing cache entry " + path.string());
    char magic[4];
    std::uint32_t version = 0, mels = 0, frames = 0;
    char hash[16];
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(hash, 16);
    in.read(reinterpret_cast<char*>(&mels), 4);
    in.read(reinterpret_cast<char*>(&frames), 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0 || version != kCacheVersion)
        fail(ErrorCode::format, "bad cache file " + path.string());
    Spectrogram s(mels, frames);
    in.read(reinterpret_cast<char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * 4));
    if (!in) fail(ErrorCode::format, "truncated cache file " + path.string());
    if (config_hash) *config_hash = std::string(hash, 16);
    return s;
}

void CacheManifest::save(const fs::path& path) const {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) fail(ErrorCode::io, "cannot write " + tmp.string());
        out << "# dataset_id=" << dataset_id << '\n';
        out << "subclip_id\tparent_id\tclass\tfile\tconfig_hash\n";
        for (const auto& e : entries)
            out << e.subclip_id << '\t' << e.parent_id << '\t' << e.class_label << '\t' << e.file << '\t'
                << e.config_hash << '\n';
        out << "#errors\n";
        for (const auto& [clip, msg] : errors) out << clip << '\t' << msg << '\n';
    }
    fs::rename(tmp, path);
}

CacheManifest CacheManifest::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::not_found, "missing cache manifest " + path.string());
    CacheManifest m;
    std::string line;
    bool in_errors = false, header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# dataset_id=", 0) == 0) {
            m.dataset_id = line.substr(13);
            continue;
        }
        if (line == "#errors") {
            in_errors = true;
            continue;
        }
        const auto f = split_line(line, '\t');
        if (in_errors) {
            if (f.size() >= 2) m.errors.emplace_back(f[0], f[1]);
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        if (f.size() != 5) fail(ErrorCode::format, "malformed cache manifest line: " + line);
        m.entries.push_back(CacheEntry{f[0], f[1], f[2], f[3], f[4]});
    }
    return m;
}

CacheManifest materialize_cache(const DatasetIndex& index, const fs::path& audio_root, const SpectrogramConfig& config,
                                const fs::path& cache_dir) {
    config.validate();
    index.validate();
    const std::string hash = config.hash();
    const fs::path dir = cache_dir / hash;
    fs::create_directories(dir);

    CacheManifest manifest;
    manifest.dataset_id = index.dataset_id;
    const std::size_t seg_len = config.clip_samples();
    for (const auto& clip : index.clips) {
        const auto subclips = segment_clip(clip, config.clip_length_s);
        std::vector<std::string> files;
        bool all_present = true;
        for (const auto& sc : subclips) {
            files.push_back(hash + "/" + sanitize(clip.clip_id) + "_" + std::to_string(sc.index) + ".spec");
            all_present = all_present && entry_is_current(cache_dir / files.back(), hash);
        }
        if (!all_present) {
            try {
                fs::path src = clip.source_path;
                if (src.is_relative()) src = audio_root / src;
                Waveform w = read_wav(src);
                std::vector<float> samples = resample_linear(w.samples, w.sample_rate, config.sample_rate_hz);
                // The manifest duration fixes the segment count; trim or pad the
                // decoded audio to agree with it.
                samples.resize(std::min(samples.size(), subclips.size() * seg_len));
                auto segments = segment_waveform(samples, seg_len);
                segments.resize(subclips.size(), std::vector<float>(seg_len, 0.0f));
                for (std::size_t i = 0; i < subclips.size(); ++i) {
                    const fs::path out = cache_dir / files[i];
                    if (entry_is_current(out, hash)) continue;
                    write_spectrogram_file(out, compute_spectrogram(segments[i], config), hash);
                    ++manifest.files_written;
                }
            } catch (const Error& e) {
                manifest.errors.emplace_back(clip.clip_id, e.what());
                continue;
            }
        }
        for (std::size_t i = 0; i < subclips.size(); ++i)
            manifest.entries.push_back(CacheEntry{subclips[i].id(), clip.clip_id, clip.class_label, files[i], hash});
    }
    manifest.save(cache_dir / kCacheManifestName);
    return manifest;
}

}  // namespace fsa
