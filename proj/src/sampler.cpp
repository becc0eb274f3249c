#include "fsa/sampler.hpp"

#include <algorithm>

namespace fsa {

namespace fs = std::filesystem;

std::size_t Partition::clip_count() const {
    std::size_t n = 0;
    for (const auto& c : clips) n += c.size();
    return n;
}

std::vector<std::size_t> Partition::eligible_classes(int k_shot) const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < clips.size(); ++c)
        if (clips[c].size() >= static_cast<std::size_t>(k_shot) + 1) out.push_back(c);
    return out;
}

// --- sources -------------------------------------------------------------------

void CacheStore::add_dataset(const std::string& dataset_id, const fs::path& cache_dir) {
    const CacheManifest manifest = CacheManifest::load(cache_dir / kCacheManifestName);
    DatasetCache d;
    d.dir = cache_dir;
    for (const auto& e : manifest.entries) {
        d.files[e.parent_id].push_back(e.file);
        d.clip_class[e.parent_id] = e.class_label;
    }
    std::lock_guard<std::mutex> lock(mutex_);
    datasets_[dataset_id] = std::move(d);
}

void CacheStore::set_stats(NormalizationStats stats) {
    std::lock_guard<std::mutex> lock(mutex_);
    stats_ = std::move(stats);
    memo_.clear();
}

const CacheStore::DatasetCache& CacheStore::dataset(const std::string& id) const {
    auto it = datasets_.find(id);
    if (it == datasets_.end()) fail(ErrorCode::not_found, "dataset '" + id + "' is not registered in the cache store");
    return it->second;
}

std::vector<std::string> CacheStore::classes(const std::string& dataset_id) const {
    std::set<std::string> labels;
    for (const auto& [clip, label] : dataset(dataset_id).clip_class) labels.insert(label);
    return {labels.begin(), labels.end()};
}

Partition CacheStore::partition(const std::string& dataset_id, const std::vector<std::string>& classes) const {
    const DatasetCache& d = dataset(dataset_id);
    Partition p;
    p.dataset_id = dataset_id;
    p.classes = classes.empty() ? this->classes(dataset_id) : classes;
    std::sort(p.classes.begin(), p.classes.end());
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < p.classes.size(); ++i) pos[p.classes[i]] = i;
    p.clips.resize(p.classes.size());
    for (const auto& [clip, label] : d.clip_class) {  // map order keeps clip lists sorted
        auto it = pos.find(label);
        if (it == pos.end()) continue;
        p.clips[it->second].push_back(PartitionClip{clip, static_cast<int>(d.files.at(clip).size())});
    }
    for (std::size_t i = 0; i < p.classes.size(); ++i)
        if (p.clips[i].empty())
            fail(ErrorCode::not_found, "class '" + p.classes[i] + "' has no cached clips in dataset '" + dataset_id + "'");
    return p;
}

Spectrogram CacheStore::load_raw(const std::string& dataset_id, const std::string& clip_id, int subclip) const {
    const DatasetCache& d = dataset(dataset_id);
    auto it = d.files.find(clip_id);
    if (it == d.files.end() || subclip < 0 || static_cast<std::size_t>(subclip) >= it->second.size())
        fail(ErrorCode::not_found, "no cache entry for " + clip_id + "#" + std::to_string(subclip));
    return read_spectrogram_file(d.dir / it->second[static_cast<std::size_t>(subclip)]);
}

SpectrogramPtr CacheStore::load(const std::string& dataset_id, const std::string& clip_id, int subclip) const {
    const std::string key = dataset_id + '\x1f' + clip_id + '\x1f' + std::to_string(subclip);
    {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = memo_.find(key);
        if (it != memo_.end()) return it->second;
    }
    Spectrogram raw = load_raw(dataset_id, clip_id, subclip);
    auto s = std::make_shared<const Spectrogram>(stats_.mean.empty() && stats_.mode != NormMode::per_sample
                                                     ? std::move(raw)
                                                     : normalize(raw, stats_));
    std::lock_guard<std::mutex> lock(mutex_);
    return memo_.emplace(key, std::move(s)).first->second;
}

void MemorySource::put(const std::string& dataset_id, const std::string& clip_id, int subclip, SpectrogramPtr s) {
    items_[dataset_id + '\x1f' + clip_id + '\x1f' + std::to_string(subclip)] = std::move(s);
}

SpectrogramPtr MemorySource::load(const std::string& dataset_id, const std::string& clip_id, int subclip) const {
    auto it = items_.find(dataset_id + '\x1f' + clip_id + '\x1f' + std::to_string(subclip));
    if (it == items_.end()) fail(ErrorCode::not_found, "no spectrogram for " + clip_id + "#" + std::to_string(subclip));
    return it->second;
}

// --- config --------------------------------------------------------------------

std::string to_string(SamplingMode mode) {
    switch (mode) {
        case SamplingMode::single: return "single";
        case SamplingMode::joint_within: return "joint_within";
        case SamplingMode::joint_free: return "joint_free";
    }
    return "single";
}

SamplingMode parse_sampling_mode(const std::string& text) {
    if (text == "single") return SamplingMode::single;
    if (text == "joint_within") return SamplingMode::joint_within;
    if (text == "joint_free") return SamplingMode::joint_free;
    fail(ErrorCode::invalid_argument, "unknown sampling mode '" + text + "'");
}

void SamplerConfig::validate(std::size_t n_datasets) const {
    spec.validate();
    if (n_datasets == 0) fail(ErrorCode::invalid_argument, "sampler needs at least one dataset");
    if (mode != SamplingMode::single && n_datasets < 2)
        fail(ErrorCode::invalid_argument, "joint sampling modes need at least two datasets");
    if (mode == SamplingMode::single && n_datasets != 1)
        fail(ErrorCode::invalid_argument, "single sampling mode takes exactly one dataset");
}

// --- sampling ------------------------------------------------------------------

ResolvedClip resolve_clip(const std::string& dataset_id, const PartitionClip& clip, const SpectrogramSource& source,
                          Rng& rng) {
    if (clip.n_subclips < 1) fail(ErrorCode::not_found, "clip '" + clip.clip_id + "' has no cached sub-clips");
    const int idx = clip.n_subclips == 1 ? 0 : static_cast<int>(rng.uniform_index(static_cast<std::size_t>(clip.n_subclips)));
    return ResolvedClip{idx, source.load(dataset_id, clip.clip_id, idx)};
}

namespace {

struct ClassPick {
    const Partition* partition;
    std::size_t class_index;
};

Episode assemble(const std::vector<ClassPick>& picks, const EpisodeSpec& spec, Rng& rng, const SpectrogramSource& source) {
    std::vector<EpisodeItem> support, query;
    std::vector<std::string> class_map, sources;
    const auto k = static_cast<std::size_t>(spec.k_shot), q = static_cast<std::size_t>(spec.q_queries);
    for (std::size_t local = 0; local < picks.size(); ++local) {
        const Partition& p = *picks[local].partition;
        const auto& clips = p.clips[picks[local].class_index];
        const std::size_t n = clips.size();
        const auto perm = rng.sample_without_replacement(n, std::min(n, k + q));
        std::vector<std::size_t> query_idx;
        if (n >= k + q) {
            query_idx.assign(perm.begin() + static_cast<long>(k), perm.end());
        } else {
            // Too few clips: reserve k distinct support clips, draw queries
            // with replacement from the rest.
            for (std::size_t j = 0; j < q; ++j) query_idx.push_back(perm[k + rng.uniform_index(n - k)]);
        }
        auto add = [&](std::vector<EpisodeItem>& dst, std::size_t clip_index) {
            const PartitionClip& clip = clips[clip_index];
            ResolvedClip r = resolve_clip(p.dataset_id, clip, source, rng);
            dst.push_back(EpisodeItem{std::move(r.spectrogram), static_cast<int>(local), clip.clip_id, r.subclip_index});
        };
        for (std::size_t j = 0; j < k; ++j) add(support, perm[j]);
        for (std::size_t idx : query_idx) add(query, idx);
        class_map.push_back(p.classes[picks[local].class_index]);
        sources.push_back(p.dataset_id);
    }
    return Episode::make(spec, std::move(support), std::move(query), std::move(class_map), std::move(sources));
}

}  // namespace

Episode sample_episode_single(const Partition& partition, const EpisodeSpec& spec, Rng& rng,
                              const SpectrogramSource& source) {
    spec.validate();
    const auto eligible = partition.eligible_classes(spec.k_shot);
    if (eligible.size() < static_cast<std::size_t>(spec.n_way))
        fail(ErrorCode::unavailable, "dataset '" + partition.dataset_id + "' has " + std::to_string(eligible.size()) +
                                         " usable classes, fewer than n_way=" + std::to_string(spec.n_way));
    std::vector<ClassPick> picks;
    for (std::size_t i : rng.sample_without_replacement(eligible.size(), static_cast<std::size_t>(spec.n_way)))
        picks.push_back(ClassPick{&partition, eligible[i]});
    return assemble(picks, spec, rng, source);
}

Episode sample_episode_joint_within(const std::vector<Partition>& datasets, const EpisodeSpec& spec, Rng& rng,
                                    const SpectrogramSource& source) {
    spec.validate();
    std::vector<const Partition*> usable;
    for (const auto& p : datasets)
        if (p.eligible_classes(spec.k_shot).size() >= static_cast<std::size_t>(spec.n_way)) usable.push_back(&p);
    if (usable.empty()) fail(ErrorCode::unavailable, "no dataset has n_way usable classes");
    const Partition& chosen = *usable[rng.uniform_index(usable.size())];
    return sample_episode_single(chosen, spec, rng, source);
}

Episode sample_episode_joint_free(const std::vector<Partition>& datasets, const EpisodeSpec& spec, Rng& rng,
                                  const SpectrogramSource& source) {
    spec.validate();
    std::vector<ClassPick> pool;
    for (const auto& p : datasets)
        for (std::size_t c : p.eligible_classes(spec.k_shot)) pool.push_back(ClassPick{&p, c});
    if (pool.size() < static_cast<std::size_t>(spec.n_way))
        fail(ErrorCode::unavailable, "pooled datasets have fewer than n_way usable classes");
    std::vector<ClassPick> picks;
    for (std::size_t i : rng.sample_without_replacement(pool.size(), static_cast<std::size_t>(spec.n_way)))
        picks.push_back(pool[i]);
    return assemble(picks, spec, rng, source);
}

EpisodeSampler::EpisodeSampler(SamplerConfig config, std::vector<Partition> datasets, const SpectrogramSource& source)
    : config_(config), datasets_(std::move(datasets)), source_(source), rng_(config.seed) {
    config_.validate(datasets_.size());
}

Episode EpisodeSampler::next() {
    switch (config_.mode) {
        case SamplingMode::single: return sample_episode_single(datasets_.front(), config_.spec, rng_, source_);
        case SamplingMode::joint_within: return sample_episode_joint_within(datasets_, config_.spec, rng_, source_);
        case SamplingMode::joint_free: return sample_episode_joint_free(datasets_, config_.spec, rng_, source_);
    }
    fail(ErrorCode::invalid_argument, "unknown sampling mode");
}

}  // namespace fsa
