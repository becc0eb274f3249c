#pragma once

// Published 5-way 1-shot accuracies (percent, 95% CI half-width) for the five
// learners trained and tested within each dataset. They need the original
// corpora and long GPU training, so they are documentation targets only and
// no test asserts them. The rank row is the published average algorithm rank.

#include <array>
#include <string_view>

namespace fsa::reference {

struct Cell {
    double mean;
    double ci95;
};

inline constexpr std::array<std::string_view, 5> kAlgorithms{"fo_maml", "fo_meta_curvature", "protonet", "simpleshot",
                                                              "meta_baseline"};

struct Row {
    std::string_view dataset;
    std::array<Cell, 5> cells;  // in kAlgorithms order
};

inline constexpr std::array<Row, 5> kWithinDataset{{
    {"ESC-50", {{{74.66, 0.42}, {76.17, 0.41}, {68.83, 0.38}, {68.82, 0.39}, {71.72, 0.38}}}},
    {"NSynth", {{{93.85, 0.24}, {96.47, 0.19}, {95.23, 0.19}, {90.04, 0.27}, {90.74, 0.25}}}},
    {"Kaggle18", {{{43.45, 0.46}, {43.18, 0.45}, {39.44, 0.44}, {42.03, 0.42}, {40.27, 0.44}}}},
    {"VoxCeleb1", {{{60.89, 0.45}, {63.85, 0.44}, {59.64, 0.44}, {48.50, 0.42}, {55.54, 0.42}}}},
    {"BirdClef (Pruned)", {{{56.26, 0.45}, {61.34, 0.46}, {56.11, 0.46}, {57.66, 0.43}, {57.28, 0.41}}}},
}};

inline constexpr std::array<double, 5> kWithinDatasetRank{2.4, 1.2, 3.8, 4.0, 3.6};

}  // namespace fsa::reference
