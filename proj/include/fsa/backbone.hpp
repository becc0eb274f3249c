#pragma once

// CRNN encoder: conv blocks (3x3 conv, batch norm, ReLU, 2x2 max-pool) over
// a [mel x frame] spectrogram, a unidirectional GRU over the time axis, and a
// linear head. Forward and backward passes are explicit; the model itself is
// stateless and operates on a ParamSet so that meta-learners can run it on
// adapted copies of the parameters.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fsa/core.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

enum class HeadKind { n_way, embedding };
enum class Readout { last, mean };

struct CRNNConfig {
    int in_channels = 1;
    std::vector<int> conv_channels{64, 64, 64, 64};
    int rnn_hidden = 64;
    int rnn_layers = 1;
    bool bidirectional = false;
    HeadKind head = HeadKind::embedding;
    int head_width = 64;
    Readout readout = Readout::last;
    int input_mels = 64;
    int input_frames = 498;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    void validate() const;
    /// Spatial size (mels, frames) after every pooling stage.
    std::pair<int, int> conv_output_dims() const;
    int rnn_input_size() const;
    int output_size() const { return head_width; }
    bool operator==(const CRNNConfig&) const = default;
};

void to_json(nlohmann::json& j, const CRNNConfig& c);
void from_json(const nlohmann::json& j, CRNNConfig& c);

enum class Mode { train, infer };

/// Batch-norm running statistics, one entry per conv block.
template <typename T>
struct BnBuffers {
    std::vector<std::vector<T>> running_mean;
    std::vector<std::vector<T>> running_var;
};

template <typename T>
class CRNN {
public:
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    /// Activations kept by forward() for backward().
    struct Cache {
        struct Block {
            int cin = 0, cout = 0, h = 0, w = 0, ho = 0, wo = 0;
            std::vector<Mat> cols;    // per sample, (cin*9) x (h*w)
            std::vector<T> xhat;      // batch x cout x h x w
            std::vector<T> inv_std;   // cout
            std::vector<T> act;       // post-ReLU, batch x cout x h x w
            std::vector<int> argmax;  // batch x cout x ho x wo, flat index into act
        };
        int batch = 0;
        Mode mode = Mode::train;
        std::vector<Block> blocks;
        std::vector<Mat> x, h_prev, r, z, n, hn;  // per time step, batch rows
        Mat h_read;
    };

    explicit CRNN(CRNNConfig config);
    ~CRNN();
    CRNN(const CRNN&);
    CRNN& operator=(const CRNN&);

    const CRNNConfig& config() const { return config_; }
    std::size_t input_size() const {
        return static_cast<std::size_t>(config_.input_mels) * static_cast<std::size_t>(config_.input_frames);
    }

    /// Seeded, deterministic initialization.
    ParamSet<T> init_params(std::uint64_t seed) const;
    BnBuffers<T> init_buffers() const;
    std::size_t parameter_count() const;

    /// `input` holds `batch` spectrograms of input_size() values each.
    /// Train mode normalizes with batch statistics and, when `buffers` is
    /// given, updates the running statistics. Infer mode uses `buffers`.
    /// When `cache` is given, everything needed by backward() is kept.
    Mat forward(const ParamSet<T>& params, const std::vector<T>& input, int batch, Mode mode,
                BnBuffers<T>* buffers, Cache* cache) const;

    /// Gradient of sum(d_output .* output) with respect to every parameter.
    ParamSet<T> backward(const ParamSet<T>& params, const Cache& cache, const Mat& d_output) const;

    std::unique_ptr<Cache> make_cache() const;

private:
    CRNNConfig config_;
};

/// Packs episode items (or any spectrogram list) into a contiguous batch.
template <typename T>
std::vector<T> pack_batch(const std::vector<const Spectrogram*>& items, const CRNNConfig& config);

extern template class CRNN<float>;
extern template class CRNN<double>;

}  // namespace fsa
