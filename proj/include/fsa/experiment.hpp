#pragma once

// Experiment configuration and the end-to-end flows behind the command line:
// synth, prepare, split, train, evaluate, sweep and report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fsa/backbone.hpp"
#include "fsa/eval.hpp"
#include "fsa/learners.hpp"
#include "fsa/pipeline.hpp"
#include "fsa/sampler.hpp"

namespace fsa {

inline constexpr const char* kCacheRootEnv = "FSA_CACHE_ROOT";
inline constexpr const char* kResolvedConfigName = "config.resolved";

/// Typed view of a resolved configuration.
struct Settings {
    std::filesystem::path workspace;
    std::filesystem::path cache_root;
    std::filesystem::path run_dir;
    std::vector<std::string> datasets;          // training datasets
    std::vector<std::string> eval_datasets;     // tested on their test split; unset means `datasets`, empty means none
    std::vector<std::string> heldout_datasets;  // tested on all classes, never trained on
    std::map<std::string, std::filesystem::path> manifests;
    std::map<std::string, std::filesystem::path> splits;

    SpectrogramConfig spectrogram;
    NormMode norm = NormMode::global;
    double prune_max_duration = 0.0;  // 0 = no pruning
    std::size_t prune_min_class_count = 0;

    SamplingMode sampling = SamplingMode::single;
    EpisodeSpec train_spec{5, 1, 5};
    CRNNConfig model;
    Algorithm algorithm = Algorithm::protonet;
    InnerLoopConfig inner;
    int train_steps = 2000;
    int meta_batch = 4;
    double lr = 1e-3;
    int val_every = 200;
    int val_tasks = 200;
    std::uint64_t seed = 1;

    int conventional_epochs = 20;
    int conventional_batch = 32;
    bool class_weighting = true;
    double metabaseline_scale = 10.0;
    int metabaseline_steps = 1000;
    int metabaseline_patience = 3;

    EpisodeSpec eval_spec{5, 1, 15};
    int eval_tasks = 10000;
    std::uint64_t eval_seed = 7;
    int threads = 1;
    std::vector<int> sweep_shots;
    std::vector<int> sweep_ways;

    std::filesystem::path manifest_for(const std::string& dataset_id) const;
    std::filesystem::path split_for(const std::string& dataset_id) const;
    std::filesystem::path cache_for(const std::string& dataset_id) const;
    std::filesystem::path checkpoint_path() const { return run_dir / "checkpoints" / "best.ckpt"; }
};

/// Flat key = value configuration. Unknown keys are rejected; every value is
/// checked by settings() before any computation starts.
class ExperimentConfig {
public:
    ExperimentConfig();

    static ExperimentConfig parse(std::istream& in);
    static ExperimentConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;
    std::string get(const std::string& key) const;
    bool explicitly_set(const std::string& key) const { return explicit_.count(key) > 0; }

    /// Every key with its effective value, sorted; parseable by parse().
    std::string resolved_text() const;
    /// Parses and validates all values. The cache root falls back to the
    /// environment variable when the config does not set it.
    Settings settings() const;

    static const std::map<std::string, std::string>& defaults();

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, bool> explicit_;
};

/// "1..30", "1-30", "1,5,10" or a mix of them.
std::vector<int> parse_int_list(const std::string& text);

using ProgressFn = std::function<void(const std::string&)>;

DatasetIndex run_synth(const std::string& preset, const std::filesystem::path& out_dir, double noise_sigma = -1.0);

struct PrepareResult {
    std::size_t clips = 0;
    std::size_t subclips = 0;
    std::size_t files_written = 0;
    std::size_t errors = 0;
};
PrepareResult run_prepare(const Settings& s, const std::string& dataset_id, const ProgressFn& progress = {});

ClassSplit run_split(const Settings& s, const std::string& dataset_id, std::uint64_t seed,
                     const std::array<double, 3>& ratios);

struct TrainResult {
    LearnerState state;
    double best_val_accuracy = -1.0;
    std::int64_t best_step = 0;
};
/// `on_start` runs once the data has loaded, just before the run directory is
/// first written; a run that fails earlier leaves no trace.
TrainResult run_train(const Settings& s, const ProgressFn& progress = {}, const std::function<void()>& on_start = {});

/// Evaluates the checkpoint on every eval and held-out dataset; writes
/// reports/<dataset>.json under the run directory.
std::vector<EvalReport> run_evaluate(const Settings& s, const std::filesystem::path& checkpoint,
                                     const ProgressFn& progress = {});

/// kind = "shots" or "ways"; writes reports/sweep_<kind>_<dataset>.json and plot data.
std::vector<EvalReport> run_sweep(const Settings& s, const std::filesystem::path& checkpoint, const std::string& kind,
                                  const ProgressFn& progress = {});

struct ReportFiles {
    std::filesystem::path text, csv;
    std::vector<std::filesystem::path> plots;
};
/// Collects reports from run directories into comparison tables and plot data.
ReportFiles run_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir);

/// Writes the resolved configuration snapshot into the run directory.
void write_snapshot(const ExperimentConfig& config, const Settings& s);

}  // namespace fsa
