#include "fsa/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "fsa/core.hpp"

namespace fsa {

namespace {

std::uint32_t le32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
std::uint16_t le16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

void put32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open audio file " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        fail(ErrorCode::format, "not a RIFF/WAVE file: " + path.string());

    int format = 0, channels = 0, rate = 0, bits = 0;
    const unsigned char* data = nullptr;
    std::size_t data_size = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        const std::size_t size = le32(chunk + 4);
        const std::size_t body = pos + 8;
        const std::size_t avail = std::min(size, bytes.size() - body);
        if (std::memcmp(chunk, "fmt ", 4) == 0 && avail >= 16) {
            format = le16(chunk + 8);
            channels = le16(chunk + 10);
            rate = static_cast<int>(le32(chunk + 12));
            bits = le16(chunk + 22);
            if (format == 0xFFFE && avail >= 26) format = le16(chunk + 8 + 24);  // WAVE_FORMAT_EXTENSIBLE subformat
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            data_size = avail;
        }
        pos = body + size + (size & 1);
    }
    if (!data || channels <= 0 || rate <= 0) fail(ErrorCode::format, "incomplete WAV header: " + path.string());
    const bool is_float = format == 3;
    if (!(format == 1 || (is_float && bits == 32))) fail(ErrorCode::format, "unsupported WAV encoding: " + path.string());
    if (!is_float && bits != 8 && bits != 16 && bits != 24 && bits != 32)
        fail(ErrorCode::format, "unsupported PCM bit depth: " + path.string());

    const std::size_t bytes_per_sample = static_cast<std::size_t>(bits / 8);
    const std::size_t frame = bytes_per_sample * static_cast<std::size_t>(channels);
    const std::size_t n = data_size / frame;
    Waveform w;
    w.sample_rate = rate;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
            const unsigned char* p = data + i * frame + static_cast<std::size_t>(c) * bytes_per_sample;
            double v = 0.0;
            if (is_float) {
                float f;
                std::uint32_t u = le32(p);
                std::memcpy(&f, &u, 4);
                v = f;
            } else if (bits == 8) {
                v = (static_cast<int>(p[0]) - 128) / 128.0;
            } else if (bits == 16) {
                v = static_cast<std::int16_t>(le16(p)) / 32768.0;
            } else if (bits == 24) {
                std::int32_t s = std::int32_t(p[0]) | (std::int32_t(p[1]) << 8) | (std::int32_t(p[2]) << 16);
                if (s & 0x800000) s -= 0x1000000;
                v = s / 8388608.0;
            } else {
                v = static_cast<std::int32_t>(le32(p)) / 2147483648.0;
            }
            acc += v;
        }
        w.samples[i] = static_cast<float>(acc / channels);
    }
    return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::io, "cannot write audio file " + path.string());
    const auto n = static_cast<std::uint32_t>(wave.samples.size());
    out.write("RIFF", 4);
    put32(out, 36 + n * 2);
    out.write("WAVEfmt ", 8);
    put32(out, 16);
    put16(out, 1);
    put16(out, 1);
    put32(out, static_cast<std::uint32_t>(wave.sample_rate));
    put32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
    put16(out, 2);
    put16(out, 16);
    out.write("data", 4);
    put32(out, n * 2);
    for (float s : wave.samples) {
        const double c = std::clamp(static_cast<double>(s), -1.0, 1.0);
        put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32767.0))));
    }
    if (!out) fail(ErrorCode::io, "failed writing " + path.string());
}

std::vector<float> resample_linear(const std::vector<float>& in, int from_rate, int to_rate) {
    if (from_rate == to_rate || in.empty()) return in;
    const double ratio = static_cast<double>(from_rate) / to_rate;
    const auto n_out = static_cast<std::size_t>(std::floor(static_cast<double>(in.size()) / ratio));
    std::vector<float> out(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double src = static_cast<double>(i) * ratio;
        const auto i0 = static_cast<std::size_t>(src);
        const std::size_t i1 = std::min(i0 + 1, in.size() - 1);
        const double t = src - static_cast<double>(i0);
        out[i] = static_cast<float>((1.0 - t) * in[i0] + t * in[i1]);
    }
    return out;
}

}  // namespace fsa
