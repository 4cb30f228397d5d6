#pragma once

#include <filesystem>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciml/nn.hpp"

namespace ciml::shapes {

using ag::Var;

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One triangle/ellipse set. All masks are [H, W] with values 0/1.
struct ShapePair {
    Tensor<uint8_t> primary_image;
    Tensor<uint8_t> auxiliary_image;
    Tensor<uint8_t> union_mask;
    Tensor<uint8_t> overlap_mask;
    Tensor<uint8_t> aux_exclusive_mask;
    bool triangle_is_primary = true;

    // Empty when the mask identities hold.
    std::vector<std::string> check() const;
};

inline constexpr double kMinAreaFraction = 0.05;
inline constexpr int kMaxAttempts = 1000;

Tensor<uint8_t> fill_triangle(int size, const double (&v)[3][2]);
Tensor<uint8_t> fill_ellipse(int size, double cy, double cx, double ry, double rx, double angle);
ShapePair make_pair(Tensor<uint8_t> primary, Tensor<uint8_t> auxiliary, bool triangle_is_primary);

// Pair i draws from its own stream seeded by (seed, i); the triangle is the
// primary image for even i and the ellipse for odd i.
std::vector<ShapePair> generate_dataset(int n, int image_size, uint64_t seed);

void save_dataset(const std::vector<ShapePair>& pairs, const std::filesystem::path& dir);
std::vector<ShapePair> load_dataset(const std::filesystem::path& dir);

struct DemoConfig {
    int image_size = 64;
    int filters = 8;
    int latent_channels = 4;
    NormKind norm_kind = NormKind::instance;
};

// Two encoders; a plain fusion decoder over (detached primary, auxiliary)
// features emitting mu and sigma at image resolution; a primary decoder whose
// output is combined with the sampled kappa to predict the union.
template <typename T>
class DemoModel {
public:
    struct Output {
        Var<T> logits;  // [N, 2, H, W]
        Var<T> mu, sigma, kappa;
        Tensor<T> eps;
    };

    DemoModel(const DemoConfig& cfg, uint64_t seed);

    Output forward(const Var<T>& primary, const Var<T>& auxiliary, const nn::NoiseMode& noise, bool training) const;

    const DemoConfig& config() const { return cfg_; }
    nn::ParameterSet<T>& params() { return params_; }
    const nn::ParameterSet<T>& params() const { return params_; }

private:
    struct Features {
        Var<T> f1, f2, f3;
    };
    struct EncoderLayers {
        nn::ConvBlock<T> c1a, c1b, d2, c2, d3, c3;
    };
    struct DecoderLayers {
        nn::ConvTranspose<T> up3, up2;
        nn::Norm<T> up3_norm, up2_norm;
        nn::ConvBlock<T> c2, c1;
    };

    EncoderLayers make_encoder(nn::LayerFactory<T>& f, const std::string& prefix);
    DecoderLayers make_decoder(nn::LayerFactory<T>& f, const std::string& prefix, int64_t in1, int64_t in2, int64_t in3);
    Features encode(const EncoderLayers& e, const Var<T>& x, bool training) const;
    Var<T> decode(const DecoderLayers& d, const Var<T>& x3, const Var<T>& x2, const Var<T>& x1, bool training) const;

    DemoConfig cfg_;
    nn::ParameterSet<T> params_;
    EncoderLayers enc_primary_, enc_aux_;
    DecoderLayers fusion_, primary_;
    nn::Conv<T> mu_, sigma_, align_;
    nn::ConvBlock<T> head_block_;
    nn::Conv<T> head_;
};

struct DemoTrainConfig {
    int epochs = 200;
    int iterations_per_epoch = 5;
    int batch_size = 8;
    double initial_lr = 1e-3;
    double weight_decay = 3e-5;
    double beta = 0.5;
    uint64_t seed = 0;
    double test_fraction = 0.1;
};

struct DemoSplit {
    std::vector<size_t> train, test;
};

// Deterministic shuffle of indices into train and held-out parts.
DemoSplit split_dataset(size_t n, double test_fraction, uint64_t seed);

struct DemoEpochLog {
    int epoch = 0;
    double lr = 0;
    double ce = 0, dice_loss = 0, kl = 0;
};

struct DemoTrainResult {
    std::vector<DemoEpochLog> epochs;
    // Mean KL over the last 10% of epochs.
    double converged_kl = 0;
};

// Trains on split.train with CE + Dice + beta * KL under the poly schedule.
DemoTrainResult train_demo(DemoModel<float>& model, const std::vector<ShapePair>& pairs, const DemoSplit& split,
                           const DemoTrainConfig& cfg, std::ostream* jsonl = nullptr);

struct DemoPrediction {
    Tensor<uint8_t> union_pred;   // [H, W]
    Tensor<float> complementary;  // mean |mu| over channels, [H, W]
};

DemoPrediction predict_pair(const DemoModel<float>& model, const ShapePair& pair);

// Mass share of the min-max normalized map inside the auxiliary-exclusive
// region against the primary region. Throws std::domain_error for a constant map.
double localization_score(const Tensor<float>& map, const ShapePair& pair);

struct DemoEvaluation {
    double dice = 0;
    double localization = 0;
    double mean_abs_mu = 0;
    double mean_abs_sigma_minus_one = 0;
};

DemoEvaluation evaluate_demo(const DemoModel<float>& model, const std::vector<ShapePair>& pairs,
                             const std::vector<size_t>& indices);

// Panel with one row per pair: primary, auxiliary, prediction,
// ground truth and the complementary map.
void export_figure(const DemoModel<float>& model, const std::vector<ShapePair>& pairs,
                   const std::vector<size_t>& indices, const std::filesystem::path& path, int zoom = 3);

}  // namespace ciml::shapes
