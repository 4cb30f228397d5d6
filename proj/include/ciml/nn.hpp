#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ciml/autograd.hpp"
#include "ciml/config.hpp"

namespace ciml::nn {

using ag::Var;

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Named trainable tensors plus non-trainable buffers (batch-norm running stats).
template <typename T>
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Var<T> var;
    };

    Var<T> add(const std::string& name, Tensor<T> init);
    std::shared_ptr<Tensor<T>> add_buffer(const std::string& name, Tensor<T> init);

    const std::vector<Entry>& entries() const { return entries_; }
    const std::map<std::string, std::shared_ptr<Tensor<T>>>& buffers() const { return buffers_; }
    const Var<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    int64_t scalar_count() const;
    void zero_grad();

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
    std::map<std::string, std::shared_ptr<Tensor<T>>> buffers_;
};

template <typename T>
struct Conv {
    Var<T> weight, bias;
    ag::ConvSpec spec;
    Var<T> operator()(const Var<T>& x) const { return ag::conv(x, weight, bias, spec); }
};

template <typename T>
struct ConvTranspose {
    Var<T> weight, bias;
    ag::ConvSpec spec;
    Var<T> operator()(const Var<T>& x) const { return ag::conv_transpose(x, weight, bias, spec); }
};

template <typename T>
struct Norm {
    NormKind kind = NormKind::instance;
    Var<T> gamma, beta;
    std::shared_ptr<Tensor<T>> running_mean, running_var;
    Var<T> operator()(const Var<T>& x, bool training) const;
};

// conv + norm + LeakyReLU(0.01)
template <typename T>
struct ConvBlock {
    Conv<T> conv;
    Norm<T> norm;
    Var<T> operator()(const Var<T>& x, bool training) const {
        return ag::leaky_relu(norm(conv(x), training), static_cast<T>(kLeakySlope));
    }
};

// Creates layers, registering parameters under hierarchical names.
// Weights are He-normal for LeakyReLU(0.01); biases and norm shifts start at 0.
template <typename T>
class LayerFactory {
public:
    LayerFactory(ParameterSet<T>& params, std::mt19937_64& rng, int dims, NormKind norm)
        : params_(params), rng_(rng), dims_(dims), norm_(norm) {}

    Conv<T> conv(const std::string& name, int64_t cin, int64_t cout, int kernel, int stride = 1, bool bias = true);
    ConvTranspose<T> conv_transpose(const std::string& name, int64_t cin, int64_t cout);
    Norm<T> norm(const std::string& name, int64_t channels);
    ConvBlock<T> block(const std::string& name, int64_t cin, int64_t cout, int kernel = 3, int stride = 1);
    int dims() const { return dims_; }

private:
    Tensor<T> he_normal(Shape shape, int64_t fan_in);

    ParameterSet<T>& params_;
    std::mt19937_64& rng_;
    int dims_;
    NormKind norm_;
};

// Four encoder stage outputs; stage s (1-based, index s-1) has extent P/2^s and C*2^(s-1) channels.
template <typename T>
struct MessageBundle {
    std::array<Var<T>, 4> stages;
};

template <typename T>
struct EncoderOutput {
    MessageBundle<T> messages;
    // Full-resolution conv output of each Down stage, used as decoder skips.
    std::array<Var<T>, 4> skips;
};

// Records the shape of every named intermediate when passed to a forward call.
using ShapeTrace = std::map<std::string, Shape>;

template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(LayerFactory<T>& f, const std::string& prefix, const ArchitectureConfig& cfg);
    EncoderOutput<T> operator()(const Var<T>& patch, bool training, ShapeTrace* trace = nullptr) const;

private:
    ArchitectureConfig cfg_;
    std::array<ConvBlock<T>, 4> conv_, down_;
};

// Transposed conv doubling resolution, then conv over concat(skip, upsampled).
template <typename T>
class UpStage {
public:
    UpStage() = default;
    UpStage(LayerFactory<T>& f, const std::string& prefix, int64_t in_ch, int64_t skip_ch, int64_t out_ch);
    Var<T> operator()(const Var<T>& h, const Var<T>& skip, bool training, ShapeTrace* trace = nullptr,
                      const std::string& tag = "") const;

private:
    ConvTranspose<T> transpose_;
    Norm<T> transpose_norm_;
    ConvBlock<T> conv_;
};

struct NoiseMode {
    enum class Kind { sample, mean, fixed, seeded };
    Kind kind = Kind::mean;
    double fixed_value = 0.0;
    uint64_t seed = 0;
    std::mt19937_64* rng = nullptr;

    static NoiseMode sample(std::mt19937_64& rng) { return {Kind::sample, 0.0, 0, &rng}; }
    static NoiseMode mean() { return {}; }
    static NoiseMode fixed(double value) { return {Kind::fixed, value, 0, nullptr}; }
    // Standard-normal noise that depends only on (seed, stream), so repeated
    // forwards see identical eps.
    static NoiseMode seeded(uint64_t seed) { return {Kind::seeded, 0.0, seed, nullptr}; }
};

template <typename T>
Tensor<T> draw_noise(const NoiseMode& mode, const Shape& shape, uint64_t stream);

template <typename T>
struct GaussianLatent {
    Var<T> mu, sigma, kappa;
    Tensor<T> eps;
};

template <typename T>
struct CigOutput {
    Var<T> complementary;
    Var<T> attention;  // [N, K, spatial], strictly inside (0, 1)
    std::vector<GaussianLatent<T>> latents;
};

// Cross-modality information gate for one decoder stage.
template <typename T>
class CigModule {
public:
    CigModule() = default;
    CigModule(LayerFactory<T>& f, const std::string& prefix, int64_t local_ch, int64_t message_ch, int messages);

    int message_count() const { return static_cast<int>(mu_.size()); }
    Var<T> attention(const Var<T>& local, const std::vector<Var<T>>& messages, bool training) const;
    // supplied_eps, when non-null, overrides `noise` with one tensor per message.
    CigOutput<T> operator()(const Var<T>& local, const std::vector<Var<T>>& messages, const NoiseMode& noise,
                            uint64_t noise_stream, bool training, const std::vector<Tensor<T>>* supplied_eps = nullptr) const;

    // Zeroes the channel-aligning conv of message j, severing its contribution.
    void sever(int j);

private:
    ConvBlock<T> attn1_;
    Conv<T> attn2_;
    Norm<T> attn2_norm_;
    std::vector<Conv<T>> mu_, sigma_, align_;
};

template <typename T>
struct SegmentorOutput {
    Var<T> logits;
    // latents[i][j]: CIG stage i (decoder order, deepest first) and message j.
    std::vector<std::vector<GaussianLatent<T>>> latents;
    std::vector<Var<T>> attention_maps;
    MessageBundle<T> messages;
};

// One per-modality segmentor: message-generating encoder, CIG-gated decoder, predictor.
template <typename T>
class Segmentor {
public:
    Segmentor(std::string name, const ArchitectureConfig& cfg, ParameterSet<T>& params, std::mt19937_64& rng);

    const std::string& name() const { return name_; }
    const ArchitectureConfig& config() const { return cfg_; }

    EncoderOutput<T> encode(const Var<T>& patch, bool training, ShapeTrace* trace = nullptr) const;
    // incoming holds exactly message_count bundles from the auxiliary segmentors.
    SegmentorOutput<T> decode(const EncoderOutput<T>& own, const std::vector<const MessageBundle<T>*>& incoming,
                              const NoiseMode& noise, bool training, ShapeTrace* trace = nullptr) const;
    SegmentorOutput<T> forward(const Var<T>& patch, const std::vector<const MessageBundle<T>*>& incoming,
                               const NoiseMode& noise, bool training, ShapeTrace* trace = nullptr) const;

    const CigModule<T>& cig(int up_stage) const { return cig_.at(static_cast<size_t>(up_stage - 1)); }
    CigModule<T>& cig(int up_stage) { return cig_.at(static_cast<size_t>(up_stage - 1)); }
    uint64_t noise_salt() const { return salt_; }

private:
    std::string name_;
    ArchitectureConfig cfg_;
    uint64_t salt_;
    Encoder<T> encoder_;
    std::array<CigModule<T>, 4> cig_;
    std::array<UpStage<T>, 4> up_;
    Conv<T> output_;
};

}  // namespace ciml::nn
