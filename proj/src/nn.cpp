#include "ciml/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ciml::nn {

namespace {

int64_t pow_int(int64_t base, int exp) {
    int64_t r = 1;
    for (int i = 0; i < exp; ++i) r *= base;
    return r;
}

Shape kernel_shape(int64_t a, int64_t b, int kernel, int dims) {
    Shape s{a, b};
    for (int i = 0; i < dims; ++i) s.push_back(kernel);
    return s;
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void record(ShapeTrace* trace, const std::string& key, const Shape& shape) {
    if (trace) (*trace)[key] = shape;
}

}  // namespace

template <typename T>
Var<T> ParameterSet<T>::add(const std::string& name, Tensor<T> init) {
    if (index_.count(name) || buffers_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>::parameter(std::move(init))});
    return entries_.back().var;
}

template <typename T>
std::shared_ptr<Tensor<T>> ParameterSet<T>::add_buffer(const std::string& name, Tensor<T> init) {
    if (index_.count(name) || buffers_.count(name)) throw std::logic_error("duplicate buffer name " + name);
    auto ptr = std::make_shared<Tensor<T>>(std::move(init));
    buffers_[name] = ptr;
    return ptr;
}

template <typename T>
const Var<T>& ParameterSet<T>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].var;
}

template <typename T>
int64_t ParameterSet<T>::scalar_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.var.value().numel();
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
Var<T> Norm<T>::operator()(const Var<T>& x, bool training) const {
    if (kind == NormKind::instance) return ag::instance_norm(x, gamma, beta, static_cast<T>(kNormEps));
    return ag::batch_norm(x, gamma, beta, *running_mean, *running_var, training, static_cast<T>(kBatchNormMomentum),
                          static_cast<T>(kNormEps));
}

template <typename T>
Tensor<T> LayerFactory<T>::he_normal(Shape shape, int64_t fan_in) {
    const double stddev = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * static_cast<double>(fan_in)));
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
    return t;
}

template <typename T>
Conv<T> LayerFactory<T>::conv(const std::string& name, int64_t cin, int64_t cout, int kernel, int stride, bool bias) {
    Conv<T> c;
    c.spec = ag::ConvSpec{dims_, kernel, stride, kernel / 2, 0};
    c.weight = params_.add(name + ".weight", he_normal(kernel_shape(cout, cin, kernel, dims_), cin * pow_int(kernel, dims_)));
    if (bias) c.bias = params_.add(name + ".bias", Tensor<T>({cout}));
    return c;
}

template <typename T>
ConvTranspose<T> LayerFactory<T>::conv_transpose(const std::string& name, int64_t cin, int64_t cout) {
    ConvTranspose<T> c;
    c.spec = ag::ConvSpec{dims_, 3, 2, 1, 1};
    c.weight = params_.add(name + ".weight", he_normal(kernel_shape(cin, cout, 3, dims_), cout * pow_int(3, dims_)));
    c.bias = params_.add(name + ".bias", Tensor<T>({cout}));
    return c;
}

template <typename T>
Norm<T> LayerFactory<T>::norm(const std::string& name, int64_t channels) {
    Norm<T> n;
    n.kind = norm_;
    n.gamma = params_.add(name + ".weight", Tensor<T>({channels}, T(1)));
    n.beta = params_.add(name + ".bias", Tensor<T>({channels}));
    if (norm_ == NormKind::batch) {
        n.running_mean = params_.add_buffer(name + ".running_mean", Tensor<T>({channels}));
        n.running_var = params_.add_buffer(name + ".running_var", Tensor<T>({channels}, T(1)));
    }
    return n;
}

template <typename T>
ConvBlock<T> LayerFactory<T>::block(const std::string& name, int64_t cin, int64_t cout, int kernel, int stride) {
    return {conv(name + ".conv", cin, cout, kernel, stride), norm(name + ".norm", cout)};
}

template <typename T>
Encoder<T>::Encoder(LayerFactory<T>& f, const std::string& prefix, const ArchitectureConfig& cfg) : cfg_(cfg) {
    int64_t cin = cfg.in_channels;
    for (int e = 1; e <= 4; ++e) {
        const int64_t c = cfg.stage_channels(e);
        const std::string p = prefix + ".down" + std::to_string(e);
        conv_[e - 1] = f.block(p, cin, c);
        down_[e - 1] = f.block(p + ".down", c, c, 3, 2);
        cin = c;
    }
}

template <typename T>
EncoderOutput<T> Encoder<T>::operator()(const Var<T>& patch, bool training, ShapeTrace* trace) const {
    const Shape& s = patch.shape();
    bool ok = static_cast<int>(s.size()) == cfg_.spatial_dims + 2 && s[1] == cfg_.in_channels;
    for (size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == cfg_.patch_size;
    if (!ok) {
        throw std::domain_error("encode: patch shape " + shape_str(s) + " does not match patch size " +
                                std::to_string(cfg_.patch_size) + " in " + std::to_string(cfg_.spatial_dims) + "D");
    }
    EncoderOutput<T> out;
    Var<T> h = patch;
    for (int e = 1; e <= 4; ++e) {
        out.skips[e - 1] = conv_[e - 1](h, training);
        h = down_[e - 1](out.skips[e - 1], training);
        out.messages.stages[e - 1] = h;
        record(trace, "encoder.down" + std::to_string(e) + ".conv", out.skips[e - 1].shape());
        record(trace, "encoder.stage" + std::to_string(e), h.shape());
    }
    return out;
}

template <typename T>
UpStage<T>::UpStage(LayerFactory<T>& f, const std::string& prefix, int64_t in_ch, int64_t skip_ch, int64_t out_ch)
    : transpose_(f.conv_transpose(prefix + ".transpose", in_ch, out_ch)),
      transpose_norm_(f.norm(prefix + ".transpose_norm", out_ch)),
      conv_(f.block(prefix, skip_ch + out_ch, out_ch)) {}

template <typename T>
Var<T> UpStage<T>::operator()(const Var<T>& h, const Var<T>& skip, bool training, ShapeTrace* trace,
                              const std::string& tag) const {
    record(trace, tag + ".input", h.shape());
    Var<T> up = ag::leaky_relu(transpose_norm_(transpose_(h), training), static_cast<T>(kLeakySlope));
    record(trace, tag + ".transpose", up.shape());
    Var<T> out = conv_(ag::concat_channels<T>({skip, up}), training);
    record(trace, tag + ".output", out.shape());
    return out;
}

template <typename T>
Tensor<T> draw_noise(const NoiseMode& mode, const Shape& shape, uint64_t stream) {
    Tensor<T> eps(shape);
    switch (mode.kind) {
        case NoiseMode::Kind::mean:
            break;
        case NoiseMode::Kind::fixed:
            eps.fill(static_cast<T>(mode.fixed_value));
            break;
        case NoiseMode::Kind::sample: {
            if (!mode.rng) throw std::invalid_argument("sample noise mode needs an rng");
            std::normal_distribution<double> n(0.0, 1.0);
            for (auto& v : eps.values()) v = static_cast<T>(n(*mode.rng));
            break;
        }
        case NoiseMode::Kind::seeded: {
            std::seed_seq seq{static_cast<uint32_t>(mode.seed), static_cast<uint32_t>(mode.seed >> 32),
                              static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
            std::mt19937_64 rng(seq);
            std::normal_distribution<double> n(0.0, 1.0);
            for (auto& v : eps.values()) v = static_cast<T>(n(rng));
            break;
        }
    }
    return eps;
}

template <typename T>
CigModule<T>::CigModule(LayerFactory<T>& f, const std::string& prefix, int64_t local_ch, int64_t message_ch,
                        int messages) {
    if (messages < 1) throw std::domain_error("information gate needs at least one message");
    const int64_t k1 = messages + 1;
    attn1_ = f.block(prefix + ".attn1", k1, 4 * k1, 3);
    attn2_ = f.conv(prefix + ".attn2.conv", 4 * k1, messages, 1);
    attn2_norm_ = f.norm(prefix + ".attn2.norm", messages);
    for (int j = 0; j < messages; ++j) {
        const std::string s = std::to_string(j);
        mu_.push_back(f.conv(prefix + ".mu" + s, message_ch, message_ch, 1));
        sigma_.push_back(f.conv(prefix + ".sigma" + s, message_ch, message_ch, 1));
        align_.push_back(f.conv(prefix + ".align" + s, message_ch, local_ch, 1));
    }
}

template <typename T>
Var<T> CigModule<T>::attention(const Var<T>& local, const std::vector<Var<T>>& messages, bool training) const {
    if (messages.empty()) throw std::domain_error("cig_attention: no messages to gate");
    if (static_cast<int>(messages.size()) != message_count()) {
        throw std::domain_error("cig_attention: expected " + std::to_string(message_count()) + " messages, got " +
                                std::to_string(messages.size()));
    }
    const Shape local_spatial(local.shape().begin() + 2, local.shape().end());
    std::vector<Var<T>> pooled{ag::channel_mean(ag::detach(local))};
    for (const auto& m : messages) {
        if (Shape(m.shape().begin() + 2, m.shape().end()) != local_spatial || m.shape()[0] != local.shape()[0]) {
            throw std::domain_error("cig_attention: message " + shape_str(m.shape()) + " does not align with local " +
                                    shape_str(local.shape()));
        }
        pooled.push_back(ag::channel_mean(m));
    }
    Var<T> h = attn1_(ag::concat_channels(pooled), training);
    return ag::sigmoid(attn2_norm_(attn2_(h), training));
}

template <typename T>
CigOutput<T> CigModule<T>::operator()(const Var<T>& local, const std::vector<Var<T>>& messages, const NoiseMode& noise,
                                      uint64_t noise_stream, bool training,
                                      const std::vector<Tensor<T>>* supplied_eps) const {
    CigOutput<T> out;
    out.attention = attention(local, messages, training);
    if (supplied_eps && supplied_eps->size() != messages.size()) {
        throw std::domain_error("cig_filter: supplied noise has " + std::to_string(supplied_eps->size()) +
                                " tensors for " + std::to_string(messages.size()) + " messages");
    }
    out.complementary = local;
    for (size_t j = 0; j < messages.size(); ++j) {
        const auto& m = messages[j];
        if (m.shape()[1] != mu_[j].weight.shape()[1]) {
            throw std::domain_error("cig_filter: message " + std::to_string(j) + " has " + std::to_string(m.shape()[1]) +
                                    " channels, expected " + std::to_string(mu_[j].weight.shape()[1]));
        }
        Var<T> gated = ag::mul(m, ag::slice_channels(out.attention, static_cast<int64_t>(j), 1));
        GaussianLatent<T> lat;
        lat.mu = mu_[j](gated);
        lat.sigma = ag::add_scalar(ag::softplus(sigma_[j](gated)), static_cast<T>(kSigmaFloor));
        if (supplied_eps) {
            lat.eps = (*supplied_eps)[j];
            if (lat.eps.shape() != lat.mu.shape()) {
                throw std::domain_error("cig_filter: noise shape " + shape_str(lat.eps.shape()) + " != latent shape " +
                                        shape_str(lat.mu.shape()));
            }
        } else {
            lat.eps = draw_noise<T>(noise, lat.mu.shape(), noise_stream * 64 + j);
        }
        lat.kappa = ag::reparameterize(lat.mu, lat.sigma, lat.eps);
        out.complementary = ag::add(out.complementary, align_[j](lat.kappa));
        out.latents.push_back(std::move(lat));
    }
    return out;
}

template <typename T>
void CigModule<T>::sever(int j) {
    auto& a = align_.at(static_cast<size_t>(j));
    a.weight.mutable_value().fill(T(0));
    if (a.bias.defined()) a.bias.mutable_value().fill(T(0));
}

template <typename T>
Segmentor<T>::Segmentor(std::string name, const ArchitectureConfig& cfg, ParameterSet<T>& params, std::mt19937_64& rng)
    : name_(std::move(name)), cfg_(cfg), salt_(fnv1a(name_)) {
    cfg_.validate();
    LayerFactory<T> f(params, rng, cfg.spatial_dims, cfg.norm_kind);
    const std::string prefix = "segmentor." + name_;
    encoder_ = Encoder<T>(f, prefix + ".encoder", cfg);
    const bool gated = cfg.cig_enabled && cfg.message_count > 0;
    for (int s = 1; s <= 4; ++s) {
        const int e = 5 - s;
        const int64_t ce = cfg.stage_channels(e);
        const int64_t local_ch = s == 1 ? ce : 2 * ce;
        if (gated) {
            cig_[s - 1] = CigModule<T>(f, prefix + ".decoder.cig" + std::to_string(s), local_ch, ce, cfg.message_count);
        }
        up_[s - 1] = UpStage<T>(f, prefix + ".decoder.up" + std::to_string(s), 2 * ce, ce, ce);
    }
    output_ = f.conv(prefix + ".output", cfg.base_filters, cfg.out_channels, 3);
}

template <typename T>
EncoderOutput<T> Segmentor<T>::encode(const Var<T>& patch, bool training, ShapeTrace* trace) const {
    return encoder_(patch, training, trace);
}

template <typename T>
SegmentorOutput<T> Segmentor<T>::decode(const EncoderOutput<T>& own, const std::vector<const MessageBundle<T>*>& incoming,
                                        const NoiseMode& noise, bool training, ShapeTrace* trace) const {
    const int k = cfg_.message_count;
    if (static_cast<int>(incoming.size()) != k) {
        throw std::domain_error("segmentor " + name_ + ": expected " + std::to_string(k) + " message bundles, got " +
                                std::to_string(incoming.size()));
    }
    const bool gated = cfg_.cig_enabled && k > 0;
    SegmentorOutput<T> out;
    out.messages = own.messages;
    Var<T> local = own.messages.stages[3];
    for (int s = 1; s <= 4; ++s) {
        const int e = 5 - s;
        const std::string tag = "up" + std::to_string(s);
        Var<T> comp = local;
        if (gated) {
            std::vector<Var<T>> msgs;
            for (const auto* b : incoming) {
                const Var<T>& m = b->stages[static_cast<size_t>(e - 1)];
                if (m.shape() != own.messages.stages[static_cast<size_t>(e - 1)].shape()) {
                    throw std::domain_error("segmentor " + name_ + ": stage-" + std::to_string(e) + " message " +
                                            shape_str(m.shape()) + " does not match " +
                                            shape_str(own.messages.stages[static_cast<size_t>(e - 1)].shape()));
                }
                msgs.push_back(m);
            }
            auto cig = cig_[s - 1](local, msgs, noise, salt_ * 8 + static_cast<uint64_t>(s), training);
            record(trace, "cig" + std::to_string(s) + ".attention", cig.attention.shape());
            for (size_t j = 0; j < cig.latents.size(); ++j) {
                record(trace, "cig" + std::to_string(s) + ".mu" + std::to_string(j), cig.latents[j].mu.shape());
            }
            record(trace, "cig" + std::to_string(s) + ".complementary", cig.complementary.shape());
            comp = cig.complementary;
            out.attention_maps.push_back(cig.attention);
            out.latents.push_back(std::move(cig.latents));
        }
        // The deepest stage concatenates the bottleneck with its complementary features
        // (without messages this repeats the bottleneck, keeping layer shapes unchanged).
        Var<T> h = s == 1 ? ag::concat_channels<T>({own.messages.stages[3], comp}) : comp;
        local = up_[s - 1](h, own.skips[static_cast<size_t>(e - 1)], training, trace, tag);
    }
    out.logits = output_(local);
    record(trace, "logits", out.logits.shape());
    return out;
}

template <typename T>
SegmentorOutput<T> Segmentor<T>::forward(const Var<T>& patch, const std::vector<const MessageBundle<T>*>& incoming,
                                         const NoiseMode& noise, bool training, ShapeTrace* trace) const {
    return decode(encode(patch, training, trace), incoming, noise, training, trace);
}

#define CIML_INSTANTIATE_NN(T)                                                 \
    template class ParameterSet<T>;                                            \
    template struct Norm<T>;                                                   \
    template class LayerFactory<T>;                                            \
    template class Encoder<T>;                                                 \
    template class UpStage<T>;                                                 \
    template class CigModule<T>;                                               \
    template class Segmentor<T>;                                               \
    template Tensor<T> draw_noise<T>(const NoiseMode&, const Shape&, uint64_t);

CIML_INSTANTIATE_NN(float)
CIML_INSTANTIATE_NN(double)

}  // namespace ciml::nn
