#pragma once

#include <memory>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciml/config.hpp"
#include "ciml/nn.hpp"

namespace ciml::train {

using ag::Var;

inline constexpr double kDiceSmooth = 1e-5;

struct LossBreakdown {
    double ce = 0;
    double dice_loss = 0;
    double kl = 0;
    double total = 0;
    double beta = 0;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Mean over elements of KL(N(mu, sigma^2) || N(0, 1)).
template <typename T>
Var<T> gaussian_kl_to_standard(const nn::GaussianLatent<T>& latent);

// labels hold this segmentor's local classes ([N, spatial]).
template <typename T>
Var<T> ce_loss(const Var<T>& logits, const Tensor<int32_t>& labels);
template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<int32_t>& labels);

template <typename T>
struct TotalLoss {
    Var<T> total;
    std::vector<LossBreakdown> per_segmentor;
    double total_value = 0;
};

// Per segmentor: ce + dice + beta * mean KL over all of its gate latents.
// The grand total sums the segmentors.
template <typename T>
TotalLoss<T> ciml_total_loss(const std::vector<nn::SegmentorOutput<T>>& outputs,
                             const std::vector<Tensor<int32_t>>& labels, double beta);

// One segmentor per assignment entry, wired for full message passing.
template <typename T>
class CimlModel {
public:
    // `base` supplies patch size, base filters, spatial dims, norm and gate switch;
    // message_count and out_channels are derived per segmentor.
    CimlModel(TaskAssignment assignment, RegionSet regions, const ArchitectureConfig& base, uint64_t seed);

    const TaskAssignment& assignment() const { return assignment_; }
    const RegionSet& regions() const { return regions_; }
    const ArchitectureConfig& base_config() const { return base_; }
    size_t size() const { return segmentors_.size(); }
    const nn::Segmentor<T>& segmentor(size_t i) const { return *segmentors_.at(i); }
    nn::Segmentor<T>& segmentor(size_t i) { return *segmentors_.at(i); }
    const LabelRemap& remap(size_t i) const { return remaps_.at(i); }
    nn::ParameterSet<T>& params() { return params_; }
    const nn::ParameterSet<T>& params() const { return params_; }

    // inputs[i] is the patch batch [N, 1, spatial] of entry i's primary modality.
    std::vector<nn::SegmentorOutput<T>> forward(const std::vector<Var<T>>& inputs, const nn::NoiseMode& noise,
                                                bool training) const;

    // JSON describing the model, stored alongside checkpoints.
    std::string config_json() const;
    static std::unique_ptr<CimlModel> from_config_json(const std::string& json_text);

private:
    TaskAssignment assignment_;
    RegionSet regions_;
    ArchitectureConfig base_;
    uint64_t seed_;
    nn::ParameterSet<T> params_;
    std::vector<std::unique_ptr<nn::Segmentor<T>>> segmentors_;
    std::vector<LabelRemap> remaps_;
};

// Adam with L2 weight decay folded into the gradient.
template <typename T>
class Adam {
public:
    Adam(nn::ParameterSet<T>& params, std::pair<double, double> betas, double weight_decay, double eps = 1e-8);
    void step(double lr);
    int64_t steps() const { return t_; }

private:
    nn::ParameterSet<T>& params_;
    double beta1_, beta2_, weight_decay_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct Batch {
    std::vector<Tensor<float>> inputs;   // per segmentor, [N, 1, P...]
    std::vector<Tensor<int32_t>> labels; // per segmentor, [N, P...] local classes
    Tensor<uint8_t> mask;                // [N, P...] global classes
};

// Random P^d crops (forced to contain foreground with probability fg_prob),
// optionally augmented with axis flips and quarter-turn rotations.
Batch sample_batch(const std::vector<VolumeSample>& data, const CimlModel<float>& model, int batch_size,
                   double fg_prob, bool augment, std::mt19937_64& rng);

struct TrainState {
    std::unique_ptr<CimlModel<float>> model;
    std::unique_ptr<Adam<float>> optimizer;
    std::mt19937_64 rng;
    int epoch_id = 0;
    int64_t iteration = 0;
};

TrainState make_train_state(const TaskAssignment& assignment, const RegionSet& regions,
                            const ArchitectureConfig& base, const TrainConfig& cfg);

struct IterationRecord {
    int epoch = 0;
    int64_t iter = 0;
    double lr = 0;
    std::vector<LossBreakdown> per_segmentor;
};

std::string to_jsonl(const IterationRecord& rec, const CimlModel<float>& model);

// Runs one epoch of iterations_per_epoch steps at poly_lr(epoch_id) and advances
// the state. Records are appended to `jsonl` when given.
std::vector<IterationRecord> train_epoch(TrainState& state, const std::vector<VolumeSample>& data,
                                         const TrainConfig& cfg, std::ostream* jsonl = nullptr);

// Origin of the P^d window centred in a volume (clamped at 0).
std::vector<int64_t> centered_origin(const Shape& spatial, int patch_size);

// Model inputs for the P^d window at `origin`, each [1, 1, P...]; voxels
// outside the volume read as zero.
std::vector<Tensor<float>> window_inputs(const CimlModel<float>& model, const VolumeSample& sample,
                                         const std::vector<int64_t>& origin);
Tensor<uint8_t> window_mask(const VolumeSample& sample, const std::vector<int64_t>& origin, int patch_size);

// Sliding-window softmax probabilities per segmentor, each [O_i, spatial],
// computed with the posterior mean (no sampling).
std::vector<Tensor<float>> predict_probabilities(const CimlModel<float>& model, const VolumeSample& sample);

}  // namespace ciml::train
