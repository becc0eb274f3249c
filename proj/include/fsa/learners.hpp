#pragma once

// The few-shot learners: ProtoNets, first-order MAML, first-order
// Meta-Curvature, SimpleShot (CL2N) and Meta-Baseline, plus the
// inverse-frequency class weighting used by the conventional stages.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsa/backbone.hpp"
#include "fsa/core.hpp"
#include "fsa/random.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

enum class Algorithm { protonet, fo_maml, fo_meta_curvature, simpleshot, meta_baseline, random };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& text);
/// GBML learners carry an N-way head and adapt per task.
bool is_gradient_based(Algorithm a);

using Matrix = CRNN<float>::Mat;

struct InnerLoopConfig {
    int steps = 5;
    double lr = 0.01;
};

/// Meta-Curvature gradient transforms: an elementwise scale for every
/// parameter tensor and a left (output-dim) matrix for every 2-D tensor.
struct MCTransforms {
    ParamSet<float> scales;  // same layout as the model parameters
    ParamSet<float> lefts;   // rows x rows, named after the 2-D parameter they act on

    static MCTransforms identity(const ParamSet<float>& params);
    bool operator==(const MCTransforms&) const = default;
};

/// Transformed gradient: left * (scale .* g) for 2-D tensors, scale .* g otherwise.
ParamSet<float> metacurvature_transform(const ParamSet<float>& raw_gradients, const MCTransforms& transforms);

struct LearnerState {
    Algorithm algorithm = Algorithm::protonet;
    CRNNConfig backbone;
    ParamSet<float> params;
    BnBuffers<float> buffers;
    std::optional<MCTransforms> mc;       // fo_meta_curvature
    std::vector<float> train_mean;        // simpleshot: mean train-set embedding
    std::optional<float> logit_scale;     // meta_baseline
    InnerLoopConfig inner;
    NormalizationStats norm;
    EpisodeSpec train_spec;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    nlohmann::json metadata = nlohmann::json::object();

    /// Fresh state with seeded parameters; the head follows the algorithm.
    static LearnerState create(Algorithm algorithm, CRNNConfig backbone, const EpisodeSpec& train_spec,
                               std::uint64_t seed);
    void validate() const;
    CRNN<float> model() const { return CRNN<float>(backbone); }

    void save(const std::filesystem::path& path) const;
    static LearnerState load(const std::filesystem::path& path);
};

// --- losses ----------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    double accuracy = 0.0;
    Matrix d_logits;
};

/// Mean cross-entropy; with class weights the weighted mean
/// sum(w_y * l) / sum(w_y). Empty weights mean all ones.
LossResult softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels,
                                 const std::vector<double>& class_weights = {});

/// w_c proportional to 1/count_c, rescaled to mean 1.
std::map<std::string, double> inverse_frequency_weights(const std::map<std::string, std::size_t>& class_counts);

// --- metric heads ------------------------------------------------------------

struct MetricResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<int> predictions;
    Matrix d_support;  // gradient w.r.t. support features
    Matrix d_query;
    double d_scale = 0.0;  // Meta-Baseline only
};

/// Class centroids (n_way rows) of support features.
Matrix class_centroids(const Matrix& support, const std::vector<int>& labels, int n_way);

/// Prototypical loss: logits are negative squared Euclidean distances.
MetricResult protonet_loss(const Matrix& support, const std::vector<int>& support_labels, const Matrix& query,
                           const std::vector<int>& query_labels, int n_way);

/// Meta-Baseline loss: logits are scale * cosine(query, centroid).
MetricResult metabaseline_loss(const Matrix& support, const std::vector<int>& support_labels, const Matrix& query,
                               const std::vector<int>& query_labels, int n_way, double scale);

/// CL2N: subtract `mean`, then L2-normalize (norm floored at 1e-12).
Matrix cl2n(const Matrix& features, const std::vector<float>& mean);

/// Nearest centroid by squared Euclidean distance; ties go to the lower index.
std::vector<int> nearest_centroid(const Matrix& support, const std::vector<int>& support_labels, const Matrix& query,
                                  int n_way);

/// SimpleShot decision rule on precomputed features.
std::vector<int> cl2n_nearest_centroid(const Matrix& support, const std::vector<int>& support_labels,
                                       const Matrix& query, int n_way, const std::vector<float>& mean);

// --- episode helpers -----------------------------------------------------------

std::vector<int> labels_of(const std::vector<EpisodeItem>& items);
std::vector<float> pack_items(const std::vector<EpisodeItem>& items, const CRNNConfig& config);

/// Memoized inference-mode embeddings keyed by (dataset, clip, sub-clip).
class FeatureCache {
public:
    Matrix embed(const LearnerState& state, const Episode& episode, const std::vector<EpisodeItem>& items);

private:
    std::mutex mutex_;
    std::map<std::string, std::vector<float>> features_;
};

/// Inference-mode embeddings of a list of spectrograms, in chunks.
Matrix embed_spectrograms(const LearnerState& state, const std::vector<const Spectrogram*>& items);

// --- ProtoNets -----------------------------------------------------------------

struct EpisodeOutcome {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// One training episode: forward support+query in train mode, prototypical
/// loss, gradients with respect to all parameters.
EpisodeOutcome protonet_episode(const LearnerState& state, const Episode& episode, ParamSet<float>* grads,
                                BnBuffers<float>* buffers);

// --- FO-MAML / FO-Meta-Curvature ---------------------------------------------------

struct Adaptation {
    ParamSet<float> params;
    std::vector<ParamSet<float>> support_grads;  // raw gradient at every inner step
    std::vector<double> support_losses;
};

/// Plain gradient descent on the support cross-entropy from `params`
/// (transformed by `mc` when given). `params` is not modified.
Adaptation fomaml_adapt(const CRNN<float>& model, const ParamSet<float>& params, const Episode& episode,
                        const InnerLoopConfig& inner, const MCTransforms* mc = nullptr);

struct MetaGradient {
    ParamSet<float> params;                 // gradient of the query loss at the adapted parameters
    std::optional<MCTransforms> transforms; // first-order transform gradients
    double query_loss = 0.0;
    double query_accuracy = 0.0;
};

MetaGradient fomaml_meta_gradient(const CRNN<float>& model, const ParamSet<float>& params, const Episode& episode,
                                  const InnerLoopConfig& inner, const MCTransforms* mc = nullptr);

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(ParamSet<float>& params, const ParamSet<float>& grads);
    double lr() const { return lr_; }
    std::int64_t steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct MetaStepResult {
    double query_loss = 0.0;
    double query_accuracy = 0.0;
    ParamSet<float> meta_gradient;
};

/// Averages first-order meta-gradients over the batch and applies one Adam
/// step to the initialization (and to the MC transforms when `transform_optimizer` is given).
MetaStepResult fomaml_meta_step(LearnerState& state, const std::vector<Episode>& batch, Adam& optimizer,
                                Adam* transform_optimizer = nullptr);

// --- conventional stage (SimpleShot / Meta-Baseline) ------------------------------------

struct LabelledItem {
    SpectrogramPtr spectrogram;
    int label = 0;
};

struct ConventionalConfig {
    int epochs = 10;
    int batch_size = 32;
    double lr = 1e-3;
    bool class_weighting = true;
    std::uint64_t seed = 0;
    /// Called after every epoch with (epoch, mean loss, accuracy).
    std::function<void(int, double, double)> on_epoch;
};

struct ConventionalResult {
    ParamSet<float> classifier;  // clf.weight [n_classes x embed], clf.bias
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
};

/// Cross-entropy training of encoder + linear |C_train| layer over labelled
/// sub-clips; updates `state.params`/`state.buffers` and sets `state.train_mean`.
ConventionalResult conventional_train(LearnerState& state, const std::vector<LabelledItem>& items, int n_classes,
                                      const std::vector<double>& class_weights, const ConventionalConfig& config);

/// Mean inference-mode embedding over the items.
std::vector<float> feature_mean(const LearnerState& state, const std::vector<LabelledItem>& items);

// --- Meta-Baseline fine-tuning -----------------------------------------------------

EpisodeOutcome metabaseline_episode(const LearnerState& state, const Episode& episode, ParamSet<float>* grads,
                                    double* d_scale, BnBuffers<float>* buffers);

// --- inference -------------------------------------------------------------------

/// Predicted episode-local class for every query item.
std::vector<int> predict_episode(const LearnerState& state, const Episode& episode, FeatureCache* cache, Rng& rng);

double accuracy_of(const std::vector<int>& predictions, const std::vector<EpisodeItem>& query);

}  // namespace fsa
