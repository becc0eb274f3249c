#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "fsa/sampler.hpp"

using namespace fsa;

namespace {

// Dataset `id` with the given clip counts per class; clip c<i>_<j> has `subclips` sub-clips.
Partition make_partition(const std::string& id, const std::vector<int>& clips_per_class, MemorySource& source,
                         int subclips = 1) {
    Partition p;
    p.dataset_id = id;
    for (std::size_t c = 0; c < clips_per_class.size(); ++c) {
        p.classes.push_back(id + "_c" + std::to_string(c));
        std::vector<PartitionClip> list;
        for (int j = 0; j < clips_per_class[c]; ++j) {
            const std::string clip = id + "_c" + std::to_string(c) + "_" + std::to_string(j);
            list.push_back({clip, subclips});
            for (int s = 0; s < subclips; ++s) {
                auto spec = std::make_shared<Spectrogram>(2, 3, static_cast<float>(s));
                source.put(id, clip, s, spec);
            }
        }
        p.clips.push_back(std::move(list));
    }
    return p;
}

double binomial_sigma(double p, double n) { return std::sqrt(p * (1 - p) / n); }

double choose(int n, int k) {
    double r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

void check_episode(const Episode& e, const EpisodeSpec& spec) {
    std::map<int, int> support, query;
    std::set<std::string> support_parents;
    for (const auto& it : e.support()) {
        ++support[it.class_index];
        support_parents.insert(it.parent_clip_id);
    }
    for (const auto& it : e.query()) {
        ++query[it.class_index];
        REQUIRE(!support_parents.count(it.parent_clip_id));
    }
    REQUIRE(support.size() == static_cast<std::size_t>(spec.n_way));
    REQUIRE(query.size() == static_cast<std::size_t>(spec.n_way));
    for (const auto& [c, n] : support) REQUIRE(n == spec.k_shot);
    for (const auto& [c, n] : query) REQUIRE(n == spec.q_queries);
    REQUIRE(e.class_map().size() == static_cast<std::size_t>(spec.n_way));
    REQUIRE(std::set<std::string>(e.class_map().begin(), e.class_map().end()).size() ==
            static_cast<std::size_t>(spec.n_way));
}

}  // namespace

TEST_CASE("single-dataset episodes: counts and disjointness over 10^4 episodes") {
    MemorySource src;
    // includes classes with fewer than k+q clips
    const auto p = make_partition("d", {3, 4, 10, 20, 6, 2, 30, 8}, src);
    for (const EpisodeSpec spec : {EpisodeSpec{5, 1, 5}, EpisodeSpec{5, 2, 15}, EpisodeSpec{3, 1, 1}}) {
        Rng rng(1);
        for (int i = 0; i < 10000; ++i) check_episode(sample_episode_single(p, spec, rng, src), spec);
    }
}

TEST_CASE("shape and degenerate cases") {
    MemorySource src;
    const auto p = make_partition("d", {6, 6, 6, 6, 6}, src);
    Rng rng(2);
    const auto e = sample_episode_single(p, EpisodeSpec{5, 1, 5}, rng, src);
    CHECK(e.support().size() == 5);
    CHECK(e.query().size() == 25);
    std::set<std::string> cls(e.class_map().begin(), e.class_map().end());
    CHECK(cls == std::set<std::string>(p.classes.begin(), p.classes.end()));
    CHECK_THROWS_AS(sample_episode_single(p, EpisodeSpec{6, 1, 5}, rng, src), Error);

    // a class with a single clip cannot supply support and query
    const auto q = make_partition("s", {1, 6, 6, 6, 6}, src);
    CHECK_THROWS_AS(sample_episode_single(q, EpisodeSpec{5, 1, 5}, rng, src), Error);
}

TEST_CASE("classes are drawn uniformly regardless of clip counts") {
    MemorySource src;
    const auto p = make_partition("d", {50, 500, 50, 50, 50, 50, 50, 50, 50, 50}, src);
    Rng rng(3);
    const int draws = 20000;
    std::vector<int> hits(10, 0);
    for (int i = 0; i < draws; ++i) {
        const auto e = sample_episode_single(p, EpisodeSpec{5, 1, 1}, rng, src);
        for (const auto& c : e.class_map())
            for (std::size_t k = 0; k < 10; ++k)
                if (p.classes[k] == c) ++hits[k];
    }
    const double expect = 0.5, sigma = binomial_sigma(expect, draws);
    for (int h : hits) CHECK(std::abs(h / double(draws) - expect) < 3 * sigma);
}

TEST_CASE("joint within-dataset sampling never mixes sources") {
    MemorySource src;
    const std::vector<Partition> ds{make_partition("a", std::vector<int>(10, 6), src),
                                    make_partition("b", std::vector<int>(10, 6), src)};
    Rng rng(4);
    const int n = 10000;
    int from_a = 0;
    for (int i = 0; i < n; ++i) {
        const auto e = sample_episode_joint_within(ds, EpisodeSpec{5, 1, 5}, rng, src);
        REQUIRE(e.source_datasets().size() == 1);
        check_episode(e, EpisodeSpec{5, 1, 5});
        from_a += *e.source_datasets().begin() == "a";
    }
    CHECK(std::abs(from_a / double(n) - 0.5) < 3 * binomial_sigma(0.5, n));

    // datasets with too few classes are excluded
    const std::vector<Partition> mixed{make_partition("small", {6, 6, 6}, src),
                                       make_partition("big", std::vector<int>(6, 6), src)};
    for (int i = 0; i < 100; ++i)
        CHECK(*sample_episode_joint_within(mixed, EpisodeSpec{5, 1, 2}, rng, src).source_datasets().begin() == "big");
    const std::vector<Partition> none{make_partition("x", {6, 6}, src), make_partition("y", {6, 6}, src)};
    CHECK_THROWS_AS(sample_episode_joint_within(none, EpisodeSpec{5, 1, 2}, rng, src), Error);
}

TEST_CASE("joint free sampling matches the combinatorial single-source probability") {
    MemorySource src;
    const std::vector<Partition> ds{make_partition("a", std::vector<int>(10, 6), src),
                                    make_partition("b", std::vector<int>(10, 6), src)};
    const double exact = 2 * choose(10, 5) / choose(20, 5);
    CHECK(std::abs(exact - 0.0325) < 5e-4);
    Rng rng(5);
    const int n = 10000;
    int single = 0;
    std::map<std::string, int> inclusion;
    for (int i = 0; i < n; ++i) {
        const auto e = sample_episode_joint_free(ds, EpisodeSpec{5, 1, 5}, rng, src);
        check_episode(e, EpisodeSpec{5, 1, 5});
        single += e.source_datasets().size() == 1;
        for (const auto& c : e.class_map()) ++inclusion[c];
    }
    CHECK(std::abs(single / double(n) - exact) < 3 * binomial_sigma(exact, n));

    // per-class inclusion uniform: chi-square with 19 dof, p > 0.01 critical value 36.19
    double chi2 = 0;
    const double expect = n * 5.0 / 20.0;
    for (const auto& [c, k] : inclusion) chi2 += (k - expect) * (k - expect) / expect;
    CHECK(inclusion.size() == 20);
    CHECK(chi2 < 36.19);

    const std::vector<Partition> tiny{make_partition("a", {6, 6}, src), make_partition("b", {6, 6, 6}, src)};
    const auto e = sample_episode_joint_free(tiny, EpisodeSpec{5, 1, 2}, rng, src);
    CHECK(e.source_datasets().size() == 2);
    CHECK_THROWS_AS(sample_episode_joint_free(tiny, EpisodeSpec{6, 1, 2}, rng, src), Error);
}

TEST_CASE("joint free over one dataset equals single-dataset sampling") {
    MemorySource src;
    const auto p = make_partition("d", std::vector<int>(8, 7), src);
    Rng a(6), b(6);
    for (int i = 0; i < 200; ++i) {
        const auto x = sample_episode_single(p, EpisodeSpec{5, 1, 3}, a, src);
        const auto y = sample_episode_joint_free({p}, EpisodeSpec{5, 1, 3}, b, src);
        REQUIRE(episode_to_json(x) == episode_to_json(y));
    }
}

TEST_CASE("sub-clip resolution is uniform and deterministic") {
    MemorySource src;
    const auto p = make_partition("d", {1}, src, 3);
    Rng rng(7);
    const int n = 30000;
    std::vector<int> hits(3, 0);
    for (int i = 0; i < n; ++i) {
        const auto r = resolve_clip("d", p.clips[0][0], src, rng);
        ++hits[static_cast<std::size_t>(r.subclip_index)];
        REQUIRE(r.spectrogram->values[0] == static_cast<float>(r.subclip_index));
    }
    for (int h : hits) CHECK(std::abs(h / double(n) - 1.0 / 3) < 3 * binomial_sigma(1.0 / 3, n));

    const auto one = make_partition("f", {1}, src, 1);
    CHECK(resolve_clip("f", one.clips[0][0], src, rng).subclip_index == 0);
    Rng r1(9), r2(9);
    CHECK(resolve_clip("d", p.clips[0][0], src, r1).subclip_index == resolve_clip("d", p.clips[0][0], src, r2).subclip_index);
    CHECK_THROWS_AS(resolve_clip("d", PartitionClip{"missing", 0}, src, rng), Error);
}

TEST_CASE("episode streams are deterministic") {
    MemorySource src;
    const std::vector<Partition> ds{make_partition("a", std::vector<int>(7, 5), src),
                                    make_partition("b", std::vector<int>(9, 4), src)};
    for (auto mode : {SamplingMode::joint_within, SamplingMode::joint_free}) {
        EpisodeSampler s1({EpisodeSpec{5, 1, 3}, mode, 42}, ds, src), s2({EpisodeSpec{5, 1, 3}, mode, 42}, ds, src);
        for (int i = 0; i < 50; ++i) REQUIRE(episode_to_json(s1.next()) == episode_to_json(s2.next()));
    }
    CHECK_THROWS_AS(EpisodeSampler({EpisodeSpec{5, 1, 3}, SamplingMode::joint_free, 1}, {ds[0]}, src), Error);
    CHECK_THROWS_AS(EpisodeSampler({EpisodeSpec{5, 1, 3}, SamplingMode::single, 1}, ds, src), Error);
}
