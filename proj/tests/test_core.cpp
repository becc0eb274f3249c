#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fsa/core.hpp"
#include "fsa/random.hpp"

using namespace fsa;
using nlohmann::json;

namespace {

EpisodeItem item(int cls, const std::string& parent, float fill = 0.0f) {
    return EpisodeItem{std::make_shared<Spectrogram>(2, 3, fill), cls, parent, 0};
}

}  // namespace

TEST_CASE("value types round trip through JSON") {
    const AudioClip clip{"c1", "esc50", "dog", 5.0, 44100, "audio/c1.wav"};
    CHECK(json(clip).get<AudioClip>() == clip);
    const SubClip sub{"c1", 2, 5.0, "dog", "cache/c1_2.spec"};
    CHECK(json(sub).get<SubClip>() == sub);
    CHECK(sub.id() == "c1#2");
    const EpisodeSpec spec{5, 1, 15};
    CHECK(json(spec).get<EpisodeSpec>() == spec);
    Spectrogram s(2, 3);
    for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = 0.25f * static_cast<float>(i);
    CHECK(json(s).get<Spectrogram>() == s);
    const ClassSplit split{"d", {"a", "b"}, {"c"}, {"e"}, 9};
    CHECK(json(split).get<ClassSplit>() == split);
    const NormalizationStats stats{NormMode::channel_wise, {1.0, 2.0}, {0.5, 0.25}};
    CHECK(json(stats).get<NormalizationStats>() == stats);
}

TEST_CASE("episode construction and serialization") {
    const EpisodeSpec spec{2, 1, 2};
    auto e = Episode::make(spec, {item(0, "a"), item(1, "b")}, {item(0, "c"), item(0, "d"), item(1, "e"), item(1, "e")},
                           {"dog", "cat"}, {"d1", "d1"});
    CHECK(e.source_datasets() == std::set<std::string>{"d1"});
    const auto back = episode_from_json(episode_to_json(e));
    CHECK(episode_to_json(back) == episode_to_json(e));
    CHECK(back.class_map() == e.class_map());
}

TEST_CASE("episode invariants are enforced") {
    const EpisodeSpec spec{2, 1, 1};
    // wrong per-class count
    CHECK_THROWS_AS(Episode::make(spec, {item(0, "a"), item(0, "b")}, {item(0, "c"), item(1, "d")}, {"x", "y"},
                                  {"d", "d"}),
                    Error);
    // leakage: same parent clip in support and query
    CHECK_THROWS_AS(Episode::make(spec, {item(0, "a"), item(1, "b")}, {item(0, "a"), item(1, "d")}, {"x", "y"},
                                  {"d", "d"}),
                    Error);
    // shape mismatch
    auto odd = item(1, "d");
    odd.spectrogram = std::make_shared<Spectrogram>(3, 3);
    CHECK_THROWS_AS(Episode::make(spec, {item(0, "a"), item(1, "b")}, {item(0, "c"), odd}, {"x", "y"}, {"d", "d"}),
                    Error);
    // class map size
    CHECK_THROWS_AS(Episode::make(spec, {item(0, "a"), item(1, "b")}, {item(0, "c"), item(1, "d")}, {"x"}, {"d", "d"}),
                    Error);
    CHECK_THROWS_AS((EpisodeSpec{1, 1, 1}.validate()), Error);
    CHECK_THROWS_AS((EpisodeSpec{5, 0, 1}.validate()), Error);
}

TEST_CASE("split and stats validation") {
    CHECK_THROWS_AS((ClassSplit{"d", {"a"}, {"a"}, {"b"}, 1}.validate()), Error);
    CHECK_THROWS_AS((ClassSplit{"d", {"a"}, {"b"}, {"c"}, 1}.validate({"a", "b", "c", "z"})), Error);
    CHECK_NOTHROW((ClassSplit{"d", {"a"}, {"b"}, {"c"}, 1}.validate({"a", "b", "c"})));
    CHECK_THROWS_AS((NormalizationStats{NormMode::global, {0.0}, {0.0}}.validate()), Error);
    CHECK(parse_norm_mode(to_string(NormMode::channel_wise)) == NormMode::channel_wise);
    CHECK_THROWS_AS(parse_norm_mode("bogus"), Error);
}

TEST_CASE("random streams") {
    Rng a(1), b(1), c(2);
    for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
    CHECK(Rng(1).next() != c.next());
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));

    Rng r(3);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 70000; ++i) ++hits[r.uniform_index(7)];
    for (int h : hits) CHECK(std::abs(h - 10000) < 4 * std::sqrt(10000.0 * 6 / 7));
    const auto pick = r.sample_without_replacement(10, 10);
    CHECK(std::set<std::size_t>(pick.begin(), pick.end()).size() == 10);
}
