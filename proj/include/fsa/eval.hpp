#pragma once

// Evaluation: many-task accuracy with a 95% confidence interval, shot and
// way sweeps, average-rank tables, fixed-feature baselines and the report
// renderers.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsa/core.hpp"
#include "fsa/learners.hpp"
#include "fsa/sampler.hpp"

namespace fsa {

inline constexpr const char* kCiMethod = "normal approximation, 1.96 * sample std / sqrt(n)";

struct EvalReport {
    std::string dataset_id;
    std::string algorithm;
    EpisodeSpec spec;
    int n_tasks = 0;
    double mean_accuracy = 0.0;
    double ci95_halfwidth = 0.0;
    std::vector<double> per_task_accuracies;  // empty when not stored
    std::uint64_t seed = 0;
    bool available = true;  // false when the partition cannot supply N classes
    nlohmann::json metadata = nlohmann::json::object();

    void validate() const;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

void save_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> load_reports(const std::filesystem::path& path);

struct MeanCi {
    double mean = 0.0;
    double ci95 = 0.0;
};

/// Mean and 1.96 * sample-std / sqrt(n); a single value has ci95 = 0.
MeanCi mean_ci95(const std::vector<double>& values);

struct EvalOptions {
    int n_tasks = 10000;
    std::uint64_t seed = 0;
    bool store_per_task = true;
    int threads = 1;
};

/// Tasks t = 0..n-1 are drawn with seed derive_seed(seed, t); frozen-feature
/// learners share one feature cache across tasks.
EvalReport evaluate(const LearnerState& state, const Partition& partition, const EpisodeSpec& spec,
                    const SpectrogramSource& source, const EvalOptions& options);

/// One report per k at the state's training N.
std::vector<EvalReport> sweep_shots(const LearnerState& state, const Partition& partition,
                                    const std::vector<int>& k_values, int q_queries, const SpectrogramSource& source,
                                    const EvalOptions& options);

/// One report per N at k = 1; N beyond the partition's usable classes gives an
/// unavailable entry. Gradient-based learners are rejected.
std::vector<EvalReport> sweep_ways(const LearnerState& state, const Partition& partition,
                                   const std::vector<int>& n_values, int q_queries, const SpectrogramSource& source,
                                   const EvalOptions& options);

/// Accuracy table: rows are datasets, columns are algorithms.
struct RankTable {
    std::vector<std::string> algorithms;
    std::vector<std::string> datasets;
    std::vector<std::vector<double>> accuracy;  // [dataset][algorithm], NaN = missing
};

/// Per dataset rank 1 = best, ties share the mean rank; averaged over datasets.
std::vector<double> average_rank(const RankTable& table);

// --- fixed-feature evaluation ---------------------------------------------------

using FeatureTable = std::map<std::string, std::vector<float>>;

/// Lines of `clip_id v1 v2 ...` (whitespace, tab or comma separated).
FeatureTable read_feature_table(std::istream& in);
FeatureTable read_feature_table(const std::filesystem::path& path);

enum class FixedClassifier { ncc_cl2n, linear_svm };
std::string to_string(FixedClassifier c);
FixedClassifier parse_fixed_classifier(const std::string& text);

/// Mean feature over every clip of `partition`.
std::vector<float> partition_feature_mean(const FeatureTable& table, const Partition& partition);

struct LinearSvm {
    Matrix weights;  // classes x (dim + 1), last column is the bias
    std::vector<int> predict(const Matrix& x) const;
};

/// One-vs-rest L2-regularised hinge loss (C) by dual coordinate descent,
/// stopping when the projected-gradient gap drops below `tol`.
LinearSvm train_linear_svm(const Matrix& x, const std::vector<int>& labels, int n_classes, double c = 1.0,
                           double tol = 1e-4, int max_iter = 2000);

EvalReport fixed_feature_evaluate(const FeatureTable& table, const Partition& partition, const EpisodeSpec& spec,
                                  FixedClassifier classifier, const std::vector<float>& train_mean,
                                  const EvalOptions& options);

// --- rendering -----------------------------------------------------------------

/// Comparison table (datasets x algorithms) built from reports of one spec.
struct ResultTable {
    std::vector<std::string> algorithms;
    std::vector<std::string> datasets;
    std::map<std::pair<std::string, std::string>, EvalReport> cells;  // (dataset, algorithm)
    RankTable ranks() const;
};

ResultTable build_result_table(const std::vector<EvalReport>& reports);
std::string render_text(const ResultTable& table);
std::string render_csv(const ResultTable& table);
/// Plot data: one row per x (k or N) with mean and ci per algorithm.
std::string render_sweep(const std::vector<EvalReport>& reports, bool by_shots);

}  // namespace fsa
