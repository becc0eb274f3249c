#include "fsa/core.hpp"

#include <algorithm>
#include <map>

namespace fsa {

using nlohmann::json;

void AudioClip::validate() const {
    if (clip_id.empty()) fail(ErrorCode::invalid_argument, "clip has empty clip_id");
    if (class_label.empty()) fail(ErrorCode::invalid_argument, "clip '" + clip_id + "' has no class label");
    if (!(duration > 0.0)) fail(ErrorCode::invalid_argument, "clip '" + clip_id + "' has non-positive duration");
    if (sample_rate <= 0) fail(ErrorCode::invalid_argument, "clip '" + clip_id + "' has non-positive sample rate");
}

void EpisodeSpec::validate() const {
    if (n_way < 2) fail(ErrorCode::invalid_argument, "n_way must be >= 2");
    if (k_shot < 1) fail(ErrorCode::invalid_argument, "k_shot must be >= 1");
    if (q_queries < 1) fail(ErrorCode::invalid_argument, "q_queries must be >= 1");
}

Episode Episode::make(EpisodeSpec spec, std::vector<EpisodeItem> support, std::vector<EpisodeItem> query,
                      std::vector<std::string> class_map, std::vector<std::string> class_sources) {
    spec.validate();
    const auto n = static_cast<std::size_t>(spec.n_way);
    if (class_map.size() != n) fail(ErrorCode::invalid_argument, "class_map size differs from n_way");
    if (class_sources.size() != n) fail(ErrorCode::invalid_argument, "class_sources size differs from n_way");

    auto check_counts = [&](const std::vector<EpisodeItem>& items, int per_class, const char* what) {
        std::vector<int> counts(n, 0);
        for (const auto& it : items) {
            if (it.class_index < 0 || static_cast<std::size_t>(it.class_index) >= n)
                fail(ErrorCode::invalid_argument, std::string(what) + " item has out-of-range class index");
            if (!it.spectrogram) fail(ErrorCode::invalid_argument, std::string(what) + " item has no spectrogram");
            ++counts[static_cast<std::size_t>(it.class_index)];
        }
        for (std::size_t c = 0; c < n; ++c)
            if (counts[c] != per_class)
                fail(ErrorCode::invalid_argument, std::string(what) + " class " + std::to_string(c) + " has " +
                                                      std::to_string(counts[c]) + " items, expected " +
                                                      std::to_string(per_class));
    };
    check_counts(support, spec.k_shot, "support");
    check_counts(query, spec.q_queries, "query");

    const Spectrogram& ref = *support.front().spectrogram;
    for (const auto* set : {&support, &query})
        for (const auto& it : *set)
            if (!it.spectrogram->same_shape(ref)) fail(ErrorCode::invalid_argument, "episode spectrogram shapes differ");

    std::set<std::string> support_parents;
    for (const auto& it : support) support_parents.insert(it.parent_clip_id);
    for (const auto& it : query)
        if (support_parents.count(it.parent_clip_id))
            fail(ErrorCode::invalid_argument, "clip '" + it.parent_clip_id + "' appears in both support and query");

    Episode e;
    e.spec_ = spec;
    e.support_ = std::move(support);
    e.query_ = std::move(query);
    e.class_map_ = std::move(class_map);
    e.class_sources_ = std::move(class_sources);
    return e;
}

void ClassSplit::validate(const std::vector<std::string>& all_classes) const {
    std::map<std::string, int> seen;
    for (const auto* part : {&train, &val, &test})
        for (const auto& c : *part)
            if (++seen[c] > 1) fail(ErrorCode::format, "class '" + c + "' appears in more than one partition");
    if (!all_classes.empty()) {
        for (const auto& c : all_classes)
            if (!seen.count(c)) fail(ErrorCode::format, "class '" + c + "' is missing from the split");
        if (seen.size() != std::set<std::string>(all_classes.begin(), all_classes.end()).size())
            fail(ErrorCode::format, "split contains classes unknown to the dataset");
    }
}

std::string to_string(NormMode mode) {
    switch (mode) {
        case NormMode::per_sample: return "per_sample";
        case NormMode::channel_wise: return "channel_wise";
        case NormMode::global: return "global";
    }
    return "global";
}

NormMode parse_norm_mode(const std::string& text) {
    if (text == "per_sample") return NormMode::per_sample;
    if (text == "channel_wise") return NormMode::channel_wise;
    if (text == "global") return NormMode::global;
    fail(ErrorCode::invalid_argument, "unknown normalization mode '" + text + "'");
}

void NormalizationStats::validate() const {
    if (mean.size() != std.size()) fail(ErrorCode::invalid_argument, "normalization mean/std size mismatch");
    if (mode == NormMode::global && mean.size() != 1) fail(ErrorCode::invalid_argument, "global stats need one value");
    if (mode == NormMode::per_sample && !mean.empty())
        fail(ErrorCode::invalid_argument, "per_sample stats carry no values");
    for (double s : std)
        if (!(s > 0.0)) fail(ErrorCode::invalid_argument, "normalization std must be positive");
}

void to_json(json& j, const AudioClip& c) {
    j = json{{"clip_id", c.clip_id},         {"dataset_id", c.dataset_id},   {"class_label", c.class_label},
             {"duration", c.duration},       {"sample_rate", c.sample_rate}, {"source_path", c.source_path}};
}
void from_json(const json& j, AudioClip& c) {
    j.at("clip_id").get_to(c.clip_id);
    j.at("dataset_id").get_to(c.dataset_id);
    j.at("class_label").get_to(c.class_label);
    j.at("duration").get_to(c.duration);
    j.at("sample_rate").get_to(c.sample_rate);
    j.at("source_path").get_to(c.source_path);
}

void to_json(json& j, const SubClip& c) {
    j = json{{"parent_clip_id", c.parent_clip_id},
             {"index", c.index},
             {"length", c.length},
             {"class_label", c.class_label},
             {"spectrogram_ref", c.spectrogram_ref}};
}
void from_json(const json& j, SubClip& c) {
    j.at("parent_clip_id").get_to(c.parent_clip_id);
    j.at("index").get_to(c.index);
    j.at("length").get_to(c.length);
    j.at("class_label").get_to(c.class_label);
    j.at("spectrogram_ref").get_to(c.spectrogram_ref);
}

void to_json(json& j, const EpisodeSpec& s) { j = json{{"n_way", s.n_way}, {"k_shot", s.k_shot}, {"q_queries", s.q_queries}}; }
void from_json(const json& j, EpisodeSpec& s) {
    j.at("n_way").get_to(s.n_way);
    j.at("k_shot").get_to(s.k_shot);
    j.at("q_queries").get_to(s.q_queries);
}

void to_json(json& j, const Spectrogram& s) {
    j = json{{"n_mels", s.n_mels}, {"n_frames", s.n_frames}, {"values", s.values}};
}
void from_json(const json& j, Spectrogram& s) {
    j.at("n_mels").get_to(s.n_mels);
    j.at("n_frames").get_to(s.n_frames);
    j.at("values").get_to(s.values);
    if (s.values.size() != s.n_mels * s.n_frames) fail(ErrorCode::format, "spectrogram value count mismatch");
}

void to_json(json& j, const ClassSplit& s) {
    j = json{{"dataset_id", s.dataset_id}, {"seed", s.seed}, {"train", s.train}, {"val", s.val}, {"test", s.test}};
}
void from_json(const json& j, ClassSplit& s) {
    j.at("dataset_id").get_to(s.dataset_id);
    j.at("seed").get_to(s.seed);
    j.at("train").get_to(s.train);
    j.at("val").get_to(s.val);
    j.at("test").get_to(s.test);
    s.validate();
}

void to_json(json& j, const NormalizationStats& s) {
    j = json{{"mode", to_string(s.mode)}, {"mean", s.mean}, {"std", s.std}};
}
void from_json(const json& j, NormalizationStats& s) {
    s.mode = parse_norm_mode(j.at("mode").get<std::string>());
    j.at("mean").get_to(s.mean);
    j.at("std").get_to(s.std);
    s.validate();
}

namespace {
json items_to_json(const std::vector<EpisodeItem>& items) {
    json arr = json::array();
    for (const auto& it : items)
        arr.push_back(json{{"class_index", it.class_index},
                           {"parent_clip_id", it.parent_clip_id},
                           {"subclip_index", it.subclip_index},
                           {"spectrogram", *it.spectrogram}});
    return arr;
}
std::vector<EpisodeItem> items_from_json(const json& arr) {
    std::vector<EpisodeItem> items;
    for (const auto& j : arr) {
        EpisodeItem it;
        it.class_index = j.at("class_index").get<int>();
        it.parent_clip_id = j.at("parent_clip_id").get<std::string>();
        it.subclip_index = j.at("subclip_index").get<int>();
        it.spectrogram = std::make_shared<const Spectrogram>(j.at("spectrogram").get<Spectrogram>());
        items.push_back(std::move(it));
    }
    return items;
}
}  // namespace

json episode_to_json(const Episode& e) {
    return json{{"spec", e.spec()},
                {"support", items_to_json(e.support())},
                {"query", items_to_json(e.query())},
                {"class_map", e.class_map()},
                {"class_sources", e.class_sources()}};
}

Episode episode_from_json(const json& j) {
    return Episode::make(j.at("spec").get<EpisodeSpec>(), items_from_json(j.at("support")),
                         items_from_json(j.at("query")), j.at("class_map").get<std::vector<std::string>>(),
                         j.at("class_sources").get<std::vector<std::string>>());
}

}  // namespace fsa
