#include "fsa/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fsa/random.hpp"

namespace fsa {

std::array<std::size_t, 3> apportion(std::size_t n_classes, const std::array<double, 3>& ratios) {
    if (n_classes < 3) fail(ErrorCode::invalid_argument, "a split needs at least 3 classes");
    const double total = ratios[0] + ratios[1] + ratios[2];
    for (double r : ratios)
        if (!(r > 0.0)) fail(ErrorCode::invalid_argument, "split ratios must be positive");

    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = static_cast<double>(n_classes) * ratios[i] / total;
        sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        remainder[i] = exact - static_cast<double>(sizes[i]);
        assigned += sizes[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return remainder[a] > remainder[b] + 1e-12;
    });
    for (std::size_t i = 0; assigned < n_classes; ++i, ++assigned) ++sizes[order[i % 3]];

    for (std::size_t i = 0; i < 3; ++i) {
        if (sizes[i] > 0) continue;
        const auto donor = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
        --sizes[donor];
        ++sizes[i];
    }
    return sizes;
}

ClassSplit generate_split(const std::string& dataset_id, std::vector<std::string> labels, std::uint64_t seed,
                          const std::array<double, 3>& ratios) {
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    const auto sizes = apportion(labels.size(), ratios);
    Rng rng(seed);
    rng.shuffle(labels);

    ClassSplit split;
    split.dataset_id = dataset_id;
    split.seed = seed;
    auto it = labels.begin();
    split.train.assign(it, it + static_cast<long>(sizes[0]));
    it += static_cast<long>(sizes[0]);
    split.val.assign(it, it + static_cast<long>(sizes[1]));
    it += static_cast<long>(sizes[1]);
    split.test.assign(it, labels.end());
    for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
    return split;
}

void save_split(std::ostream& out, const ClassSplit& split) {
    split.validate();
    out << "# fsaudio class split\n";
    out << "dataset_id: " << split.dataset_id << '\n';
    out << "seed: " << split.seed << '\n';
    out << "tool_version: " << kToolVersion << '\n';
    const std::pair<const char*, const std::vector<std::string>*> sections[] = {
        {"[TRAIN]", &split.train}, {"[VAL]", &split.val}, {"[TEST]", &split.test}};
    for (const auto& [name, labels] : sections) {
        out << name << '\n';
        for (const auto& l : *labels) out << l << '\n';
    }
}

void save_split(const std::filesystem::path& path, const ClassSplit& split) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) fail(ErrorCode::io, "cannot write split file " + path.string());
    save_split(out, split);
}

ClassSplit load_split(std::istream& in, const std::vector<std::string>& known_classes) {
    ClassSplit split;
    std::vector<std::string>* current = nullptr;
    bool seen[3] = {false, false, false};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (line == "[TRAIN]") { current = &split.train; seen[0] = true; continue; }
        if (line == "[VAL]") { current = &split.val; seen[1] = true; continue; }
        if (line == "[TEST]") { current = &split.test; seen[2] = true; continue; }
        if (!current) {
            const auto colon = line.find(':');
            if (colon == std::string::npos) fail(ErrorCode::format, "malformed split header line: " + line);
            const std::string key = line.substr(0, colon);
            std::string value = line.substr(colon + 1);
            value.erase(0, value.find_first_not_of(' '));
            if (key == "dataset_id") split.dataset_id = value;
            else if (key == "seed") split.seed = std::stoull(value);
            continue;
        }
        current->push_back(line);
    }
    if (!(seen[0] && seen[1] && seen[2])) fail(ErrorCode::format, "split file lacks a TRAIN, VAL or TEST section");
    split.validate(known_classes);
    return split;
}

ClassSplit load_split(const std::filesystem::path& path, const std::vector<std::string>& known_classes) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::not_found, "cannot open split file " + path.string());
    return load_split(in, known_classes);
}

std::array<double, 3> parse_ratios(const std::string& text) {
    std::array<double, 3> r{};
    std::istringstream ss(text);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, '/')) {
        if (i >= 3) fail(ErrorCode::invalid_argument, "ratios need exactly three parts: " + text);
        try {
            r[i++] = std::stod(part);
        } catch (const std::logic_error&) {
            fail(ErrorCode::invalid_argument, "bad ratio string: " + text);
        }
    }
    if (i != 3) fail(ErrorCode::invalid_argument, "ratios need exactly three parts: " + text);
    return r;
}

}  // namespace fsa
