#include "ciml/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace ciml::train {

using json = nlohmann::ordered_json;

template <typename T>
Var<T> gaussian_kl_to_standard(const nn::GaussianLatent<T>& latent) {
    return ag::gaussian_kl_mean(latent.mu, latent.sigma);
}

template <typename T>
Var<T> ce_loss(const Var<T>& logits, const Tensor<int32_t>& labels) {
    return ag::softmax_cross_entropy(logits, labels);
}

template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<int32_t>& labels) {
    return ag::soft_dice_loss(logits, labels, static_cast<T>(kDiceSmooth));
}

template <typename T>
TotalLoss<T> ciml_total_loss(const std::vector<nn::SegmentorOutput<T>>& outputs,
                             const std::vector<Tensor<int32_t>>& labels, double beta) {
    if (!(beta >= 0.0)) throw std::domain_error("beta must be non-negative, got " + std::to_string(beta));
    if (outputs.size() != labels.size() || outputs.empty()) {
        throw std::invalid_argument("ciml_total_loss: " + std::to_string(outputs.size()) + " outputs for " +
                                    std::to_string(labels.size()) + " label maps");
    }
    TotalLoss<T> out;
    for (size_t i = 0; i < outputs.size(); ++i) {
        const auto& o = outputs[i];
        Var<T> ce = ce_loss(o.logits, labels[i]);
        Var<T> dice = soft_dice_loss(o.logits, labels[i]);
        Var<T> seg = ag::add(ce, dice);
        LossBreakdown b;
        b.ce = static_cast<double>(ce.item());
        b.dice_loss = static_cast<double>(dice.item());
        b.beta = beta;
        Var<T> kl;
        int count = 0;
        for (const auto& stage : o.latents) {
            for (const auto& lat : stage) {
                Var<T> k = gaussian_kl_to_standard(lat);
                kl = kl.defined() ? ag::add(kl, k) : k;
                ++count;
            }
        }
        if (count > 0) {
            kl = ag::scale(kl, static_cast<T>(1.0 / count));
            b.kl = static_cast<double>(kl.item());
            if (beta != 0.0) seg = ag::add(seg, ag::scale(kl, static_cast<T>(beta)));
        }
        b.total = b.ce + b.dice_loss + beta * b.kl;
        out.per_segmentor.push_back(b);
        out.total = out.total.defined() ? ag::add(out.total, seg) : seg;
        out.total_value += b.total;
    }
    return out;
}

template <typename T>
CimlModel<T>::CimlModel(TaskAssignment assignment, RegionSet regions, const ArchitectureConfig& base, uint64_t seed)
    : assignment_(std::move(assignment)), regions_(std::move(regions)), base_(base), seed_(seed) {
    auto report = validate_assignment(assignment_, regions_.regions);
    if (!report.ok()) throw std::invalid_argument("invalid task assignment: " + report.summary());
    std::mt19937_64 rng(seed);
    const int n = static_cast<int>(assignment_.entries.size());
    for (const auto& e : assignment_.entries) {
        remaps_.emplace_back(regions_, e.targets);
        ArchitectureConfig cfg = base_;
        cfg.in_channels = 1;
        cfg.out_channels = remaps_.back().out_channels();
        cfg.message_count = base_.cig_enabled ? n - 1 : 0;
        segmentors_.push_back(std::make_unique<nn::Segmentor<T>>(e.primary.name, cfg, params_, rng));
    }
}

template <typename T>
std::vector<nn::SegmentorOutput<T>> CimlModel<T>::forward(const std::vector<Var<T>>& inputs,
                                                          const nn::NoiseMode& noise, bool training) const {
    if (inputs.size() != segmentors_.size()) {
        throw std::invalid_argument("model expects " + std::to_string(segmentors_.size()) + " inputs, got " +
                                    std::to_string(inputs.size()));
    }
    std::vector<nn::EncoderOutput<T>> enc;
    enc.reserve(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) enc.push_back(segmentors_[i]->encode(inputs[i], training));
    std::vector<nn::SegmentorOutput<T>> out;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<const nn::MessageBundle<T>*> incoming;
        if (segmentors_[i]->config().message_count > 0) {
            for (size_t j = 0; j < inputs.size(); ++j) {
                if (j != i) incoming.push_back(&enc[j].messages);
            }
        }
        out.push_back(segmentors_[i]->decode(enc[i], incoming, noise, training));
    }
    return out;
}

template <typename T>
std::string CimlModel<T>::config_json() const {
    json j;
    j["architecture"] = {{"patch_size", base_.patch_size},   {"base_filters", base_.base_filters},
                         {"spatial_dims", base_.spatial_dims}, {"norm", to_string(base_.norm_kind)},
                         {"cig", base_.cig_enabled}};
    j["seed"] = seed_;
    j["regions"]["nested"] = regions_.nested;
    j["regions"]["items"] = json::array();
    for (const auto& r : regions_.regions) j["regions"]["items"].push_back({{"name", r.name}, {"class_index", r.class_index}});
    j["assignment"] = json::array();
    for (const auto& e : assignment_.entries) {
        json targets = json::array();
        for (const auto& t : e.targets) targets.push_back(t.name);
        j["assignment"].push_back({{"modality", e.primary.name}, {"index", e.primary.index}, {"targets", targets}});
    }
    return j.dump();
}

template <typename T>
std::unique_ptr<CimlModel<T>> CimlModel<T>::from_config_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        ArchitectureConfig base;
        const auto& a = j.at("architecture");
        base.patch_size = a.at("patch_size").get<int>();
        base.base_filters = a.at("base_filters").get<int>();
        base.spatial_dims = a.at("spatial_dims").get<int>();
        base.norm_kind = norm_kind_from_string(a.at("norm").get<std::string>());
        base.cig_enabled = a.at("cig").get<bool>();
        RegionSet regions;
        regions.nested = j.at("regions").at("nested").get<bool>();
        for (const auto& r : j.at("regions").at("items")) {
            regions.regions.push_back({r.at("name").get<std::string>(), r.at("class_index").get<int>()});
        }
        TaskAssignment assignment;
        for (const auto& e : j.at("assignment")) {
            AssignmentEntry entry;
            entry.primary = {e.at("modality").get<std::string>(), e.at("index").get<int>()};
            for (const auto& t : e.at("targets")) entry.targets.push_back(regions.find(t.get<std::string>()));
            assignment.entries.push_back(std::move(entry));
        }
        return std::make_unique<CimlModel<T>>(std::move(assignment), std::move(regions), base,
                                              j.at("seed").get<uint64_t>());
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("bad model description: ") + e.what());
    }
}

template <typename T>
Adam<T>::Adam(nn::ParameterSet<T>& params, std::pair<double, double> betas, double weight_decay, double eps)
    : params_(params), beta1_(betas.first), beta2_(betas.second), weight_decay_(weight_decay), eps_(eps) {
    for (const auto& e : params_.entries()) {
        m_.emplace_back(static_cast<size_t>(e.var.value().numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(e.var.value().numel()), 0.0);
    }
}

template <typename T>
void Adam<T>::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto& entries = params_.entries();
    for (size_t p = 0; p < entries.size(); ++p) {
        Var<T> var = entries[p].var;
        if (!var.has_grad()) continue;
        Tensor<T>& w = var.mutable_value();
        const Tensor<T>& g = var.grad();
        auto& m = m_[p];
        auto& v = v_[p];
        for (int64_t i = 0; i < w.numel(); ++i) {
            const double gi = static_cast<double>(g[i]) + weight_decay_ * static_cast<double>(w[i]);
            const size_t k = static_cast<size_t>(i);
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * gi;
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * gi * gi;
            w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_));
        }
    }
}

namespace {

// Crops a P^d window at `origin` (zero outside the volume) and applies an
// axis permutation plus flips: out[c] = in[origin + src(c)], src[perm[k]] = flip[k] ? P-1-c[k] : c[k].
template <typename V>
void crop_into(const Tensor<V>& vol, const std::vector<int64_t>& origin, int P, const std::vector<int>& perm,
               const std::vector<bool>& flip, V* out) {
    const auto& shape = vol.shape();
    const size_t d = shape.size();
    std::vector<int64_t> stride(d, 1);
    for (size_t k = d - 1; k > 0; --k) stride[k - 1] = stride[k] * shape[k];
    std::vector<int64_t> c(d, 0);
    const int64_t total = shape_numel(Shape(d, P));
    for (int64_t idx = 0; idx < total; ++idx) {
        int64_t off = 0;
        bool inside = true;
        for (size_t k = 0; k < d; ++k) {
            const int64_t s = flip[k] ? P - 1 - c[k] : c[k];
            const size_t ax = static_cast<size_t>(perm[k]);
            const int64_t pos = origin[ax] + s;
            if (pos < 0 || pos >= shape[ax]) {
                inside = false;
                break;
            }
            off += pos * stride[ax];
        }
        out[idx] = inside ? vol[off] : V(0);
        for (size_t k = d; k-- > 0;) {
            if (++c[k] < P) break;
            c[k] = 0;
        }
    }
}

}  // namespace

Batch sample_batch(const std::vector<VolumeSample>& data, const CimlModel<float>& model, int batch_size,
                   double fg_prob, bool augment, std::mt19937_64& rng) {
    if (data.empty()) throw std::invalid_argument("sample_batch: empty dataset");
    const int P = model.base_config().patch_size;
    const int d = model.base_config().spatial_dims;
    const int64_t pvox = shape_numel(Shape(static_cast<size_t>(d), P));
    Shape img{batch_size, 1};
    Shape lab{batch_size};
    for (int k = 0; k < d; ++k) {
        img.push_back(P);
        lab.push_back(P);
    }
    Batch b;
    b.mask = Tensor<uint8_t>(lab);
    for (size_t i = 0; i < model.size(); ++i) b.inputs.emplace_back(img);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int n = 0; n < batch_size; ++n) {
        const auto& s = data[std::uniform_int_distribution<size_t>(0, data.size() - 1)(rng)];
        const Shape& shape = s.spatial_shape();
        if (static_cast<int>(shape.size()) != d) {
            throw std::invalid_argument("case " + s.case_id + " has " + std::to_string(shape.size()) +
                                        " axes, model expects " + std::to_string(d));
        }
        std::vector<int64_t> origin(static_cast<size_t>(d));
        std::vector<int64_t> fg;
        if (u01(rng) < fg_prob) {
            for (int64_t i = 0; i < s.mask.numel(); ++i) {
                if (s.mask[i] != 0) fg.push_back(i);
            }
        }
        if (!fg.empty()) {
            int64_t v = fg[std::uniform_int_distribution<size_t>(0, fg.size() - 1)(rng)];
            for (int k = d - 1; k >= 0; --k) {
                const int64_t pos = v % shape[static_cast<size_t>(k)];
                v /= shape[static_cast<size_t>(k)];
                const int64_t lo = std::max<int64_t>(0, pos - P + 1);
                const int64_t hi = std::max<int64_t>(lo, std::min<int64_t>(pos, shape[static_cast<size_t>(k)] - P));
                origin[static_cast<size_t>(k)] = std::uniform_int_distribution<int64_t>(lo, hi)(rng);
            }
        } else {
            for (int k = 0; k < d; ++k) {
                const int64_t hi = std::max<int64_t>(0, shape[static_cast<size_t>(k)] - P);
                origin[static_cast<size_t>(k)] = std::uniform_int_distribution<int64_t>(0, hi)(rng);
            }
        }
        std::vector<int> perm(static_cast<size_t>(d));
        std::vector<bool> flip(static_cast<size_t>(d), false);
        for (int k = 0; k < d; ++k) perm[static_cast<size_t>(k)] = k;
        if (augment) {
            for (int k = 0; k < d; ++k) flip[static_cast<size_t>(k)] = u01(rng) < 0.5;
            if (u01(rng) < 0.5) {
                int a = std::uniform_int_distribution<int>(0, d - 1)(rng);
                int c = std::uniform_int_distribution<int>(0, d - 2)(rng);
                if (c >= a) ++c;
                std::swap(perm[static_cast<size_t>(a)], perm[static_cast<size_t>(c)]);
            }
        }
        crop_into(s.mask, origin, P, perm, flip, b.mask.data() + n * pvox);
        for (size_t i = 0; i < model.size(); ++i) {
            const std::string& mod = model.assignment().entries[i].primary.name;
            auto it = s.volumes.find(mod);
            if (it == s.volumes.end()) throw std::invalid_argument("case " + s.case_id + " has no modality " + mod);
            crop_into(it->second, origin, P, perm, flip, b.inputs[i].data() + n * pvox);
        }
    }
    for (size_t i = 0; i < model.size(); ++i) b.labels.push_back(model.remap(i).apply(b.mask));
    return b;
}

TrainState make_train_state(const TaskAssignment& assignment, const RegionSet& regions,
                            const ArchitectureConfig& base, const TrainConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.model = std::make_unique<CimlModel<float>>(assignment, regions, base, cfg.seed);
    st.optimizer = std::make_unique<Adam<float>>(st.model->params(), cfg.adam_betas, cfg.weight_decay);
    st.rng.seed(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    return st;
}

std::string to_jsonl(const IterationRecord& rec, const CimlModel<float>& model) {
    json j;
    j["epoch"] = rec.epoch;
    j["iter"] = rec.iter;
    j["lr"] = rec.lr;
    double total = 0;
    for (size_t i = 0; i < rec.per_segmentor.size(); ++i) {
        const auto& b = rec.per_segmentor[i];
        j["segmentors"][model.segmentor(i).name()] = {
            {"ce", b.ce}, {"dice", b.dice_loss}, {"kl", b.kl}, {"beta", b.beta}, {"total", b.total}};
        total += b.total;
    }
    j["total"] = total;
    return j.dump();
}

std::vector<IterationRecord> train_epoch(TrainState& state, const std::vector<VolumeSample>& data,
                                         const TrainConfig& cfg, std::ostream* jsonl) {
    if (!state.model || !state.optimizer) throw std::invalid_argument("train_epoch: uninitialised state");
    auto& model = *state.model;
    const double lr = poly_lr(cfg.initial_lr, state.epoch_id, cfg.max_epoch);
    std::vector<IterationRecord> records;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
        Batch batch = sample_batch(data, model, cfg.batch_size, cfg.foreground_probability, cfg.augment, state.rng);
        std::vector<Var<float>> inputs;
        for (auto& t : batch.inputs) inputs.push_back(Var<float>::constant(std::move(t)));
        auto outputs = model.forward(inputs, nn::NoiseMode::sample(state.rng), true);
        auto loss = ciml_total_loss(outputs, batch.labels, cfg.beta_kl);
        for (size_t i = 0; i < loss.per_segmentor.size(); ++i) {
            const auto& b = loss.per_segmentor[i];
            const std::pair<const char*, double> terms[] = {{"ce", b.ce}, {"dice", b.dice_loss}, {"kl", b.kl}};
            for (const auto& [term, value] : terms) {
                if (!std::isfinite(value)) {
                    std::ostringstream msg;
                    msg << "segmentor " << model.segmentor(i).name() << ": loss term '" << term << "' is " << value
                        << " at epoch " << state.epoch_id << " iteration " << state.iteration;
                    throw TrainingError(msg.str());
                }
            }
        }
        model.params().zero_grad();
        loss.total.backward();
        state.optimizer->step(lr);
        IterationRecord rec{state.epoch_id, state.iteration, lr, loss.per_segmentor};
        if (jsonl) *jsonl << to_jsonl(rec, model) << '\n';
        records.push_back(std::move(rec));
        ++state.iteration;
    }
    if (jsonl) jsonl->flush();
    ++state.epoch_id;
    return records;
}

std::vector<int64_t> centered_origin(const Shape& spatial, int patch_size) {
    std::vector<int64_t> o;
    for (int64_t e : spatial) o.push_back(std::max<int64_t>(0, (e - patch_size) / 2));
    return o;
}

std::vector<Tensor<float>> window_inputs(const CimlModel<float>& model, const VolumeSample& sample,
                                         const std::vector<int64_t>& origin) {
    const int P = model.base_config().patch_size;
    const int d = model.base_config().spatial_dims;
    if (static_cast<int>(origin.size()) != d || static_cast<int>(sample.spatial_shape().size()) != d) {
        throw std::invalid_argument("case " + sample.case_id + " has " + std::to_string(sample.spatial_shape().size()) +
                                    " axes, model expects " + std::to_string(d));
    }
    std::vector<int> perm(static_cast<size_t>(d));
    for (int k = 0; k < d; ++k) perm[static_cast<size_t>(k)] = k;
    const std::vector<bool> noflip(static_cast<size_t>(d), false);
    Shape img{1, 1};
    for (int k = 0; k < d; ++k) img.push_back(P);
    std::vector<Tensor<float>> out;
    for (size_t i = 0; i < model.size(); ++i) {
        const std::string& mod = model.assignment().entries[i].primary.name;
        auto it = sample.volumes.find(mod);
        if (it == sample.volumes.end()) throw std::invalid_argument("case " + sample.case_id + " has no modality " + mod);
        Tensor<float> patch(img);
        crop_into(it->second, origin, P, perm, noflip, patch.data());
        out.push_back(std::move(patch));
    }
    return out;
}

Tensor<uint8_t> window_mask(const VolumeSample& sample, const std::vector<int64_t>& origin, int patch_size) {
    const size_t d = origin.size();
    std::vector<int> perm(d);
    for (size_t k = 0; k < d; ++k) perm[k] = static_cast<int>(k);
    Tensor<uint8_t> out(Shape(d, patch_size));
    crop_into(sample.mask, origin, patch_size, perm, std::vector<bool>(d, false), out.data());
    return out;
}

std::vector<Tensor<float>> predict_probabilities(const CimlModel<float>& model, const VolumeSample& sample) {
    ag::NoGradGuard guard;
    const int P = model.base_config().patch_size;
    const int d = model.base_config().spatial_dims;
    const Shape& shape = sample.spatial_shape();
    if (static_cast<int>(shape.size()) != d) {
        throw std::invalid_argument("case " + sample.case_id + " has " + std::to_string(shape.size()) +
                                    " axes, model expects " + std::to_string(d));
    }
    const int64_t vox = shape_numel(shape);
    const int64_t pvox = shape_numel(Shape(static_cast<size_t>(d), P));
    const int step = std::max(1, P / 2);
    std::vector<std::vector<int64_t>> starts(static_cast<size_t>(d));
    for (int k = 0; k < d; ++k) {
        const int64_t ext = shape[static_cast<size_t>(k)];
        auto& s = starts[static_cast<size_t>(k)];
        for (int64_t o = 0; o + P < ext; o += step) s.push_back(o);
        s.push_back(std::max<int64_t>(0, ext - P));
    }
    std::vector<Tensor<float>> probs;
    for (size_t i = 0; i < model.size(); ++i) {
        Shape ps{model.remap(i).out_channels()};
        ps.insert(ps.end(), shape.begin(), shape.end());
        probs.emplace_back(ps);
    }
    Tensor<float> counts(shape);
    std::vector<size_t> w(static_cast<size_t>(d), 0);
    std::vector<int64_t> vstride(static_cast<size_t>(d), 1);
    for (size_t k = static_cast<size_t>(d) - 1; k > 0; --k) vstride[k - 1] = vstride[k] * shape[k];
    while (true) {
        std::vector<int64_t> origin(static_cast<size_t>(d));
        for (size_t k = 0; k < origin.size(); ++k) origin[k] = starts[k][w[k]];
        std::vector<Var<float>> inputs;
        for (auto& t : window_inputs(model, sample, origin)) inputs.push_back(Var<float>::constant(std::move(t)));
        auto outputs = model.forward(inputs, nn::NoiseMode::mean(), false);
        std::vector<int64_t> c(static_cast<size_t>(d), 0);
        for (int64_t idx = 0; idx < pvox; ++idx) {
            int64_t off = 0;
            bool inside = true;
            for (size_t k = 0; k < c.size(); ++k) {
                const int64_t pos = origin[k] + c[k];
                if (pos >= shape[k]) inside = false;
                off += pos * vstride[k];
            }
            if (inside) {
                counts[off] += 1.0f;
                for (size_t i = 0; i < outputs.size(); ++i) {
                    const auto& lg = outputs[i].logits.value();
                    const int64_t O = lg.dim(1);
                    float mx = lg[idx];
                    for (int64_t o = 1; o < O; ++o) mx = std::max(mx, lg[o * pvox + idx]);
                    float z = 0;
                    for (int64_t o = 0; o < O; ++o) z += std::exp(lg[o * pvox + idx] - mx);
                    for (int64_t o = 0; o < O; ++o) probs[i][o * vox + off] += std::exp(lg[o * pvox + idx] - mx) / z;
                }
            }
            for (size_t k = c.size(); k-- > 0;) {
                if (++c[k] < P) break;
                c[k] = 0;
            }
        }
        size_t k = static_cast<size_t>(d);
        while (k-- > 0) {
            if (++w[k] < starts[k].size()) break;
            w[k] = 0;
        }
        if (k == static_cast<size_t>(-1)) break;
    }
    for (auto& p : probs) {
        const int64_t O = p.dim(0);
        for (int64_t o = 0; o < O; ++o) {
            for (int64_t v = 0; v < vox; ++v) p[o * vox + v] /= counts[v];
        }
    }
    return probs;
}

#define CIML_INSTANTIATE(T)                                                                                      \
    template Var<T> gaussian_kl_to_standard(const nn::GaussianLatent<T>&);                                       \
    template Var<T> ce_loss(const Var<T>&, const Tensor<int32_t>&);                                              \
    template Var<T> soft_dice_loss(const Var<T>&, const Tensor<int32_t>&);                                       \
    template TotalLoss<T> ciml_total_loss(const std::vector<nn::SegmentorOutput<T>>&,                            \
                                          const std::vector<Tensor<int32_t>>&, double);                          \
    template class CimlModel<T>;                                                                                 \
    template class Adam<T>;

CIML_INSTANTIATE(float)
CIML_INSTANTIATE(double)

}  // namespace ciml::train
