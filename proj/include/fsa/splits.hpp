#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fsa/core.hpp"

namespace fsa {

inline constexpr const char* kToolVersion = "0.1.0";

/// Partition sizes for `n_classes` by largest-remainder apportionment of
/// `ratios` (ties go to the earlier partition), with every partition lifted
/// to at least one class by taking from the largest partition.
std::array<std::size_t, 3> apportion(std::size_t n_classes, const std::array<double, 3>& ratios);

/// Seeded Fisher-Yates over the lexicographically sorted labels, then the
/// first sizes[0] go to train, the next sizes[1] to val, the rest to test.
ClassSplit generate_split(const std::string& dataset_id, std::vector<std::string> class_labels,
                          std::uint64_t seed, const std::array<double, 3>& ratios = {7, 1, 2});

void save_split(std::ostream& out, const ClassSplit& split);
void save_split(const std::filesystem::path& path, const ClassSplit& split);
/// Rejects overlapping partitions; with `known_classes` also rejects missing or unknown labels.
ClassSplit load_split(std::istream& in, const std::vector<std::string>& known_classes = {});
ClassSplit load_split(const std::filesystem::path& path, const std::vector<std::string>& known_classes = {});

/// Parses "7/1/2" style ratio strings.
std::array<double, 3> parse_ratios(const std::string& text);

}  // namespace fsa
