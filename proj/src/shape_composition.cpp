#include "ciml/shape_composition.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ciml/io.hpp"
#include "ciml/png_export.hpp"
#include "ciml/training.hpp"
#include "json.hpp"

namespace ciml::shapes {

using json = nlohmann::ordered_json;

std::vector<std::string> ShapePair::check() const {
    std::vector<std::string> bad;
    const Shape& s = primary_image.shape();
    for (const auto* m : {&auxiliary_image, &union_mask, &overlap_mask, &aux_exclusive_mask}) {
        if (m->shape() != s) bad.push_back("mask shape mismatch");
    }
    if (!bad.empty()) return bad;
    bool any_overlap = false;
    for (int64_t i = 0; i < primary_image.numel(); ++i) {
        const bool p = primary_image[i] != 0, a = auxiliary_image[i] != 0;
        if ((union_mask[i] != 0) != (p || a)) bad.push_back("union at " + std::to_string(i));
        if ((overlap_mask[i] != 0) != (p && a)) bad.push_back("overlap at " + std::to_string(i));
        if ((aux_exclusive_mask[i] != 0) != (a && !p)) bad.push_back("aux-exclusive at " + std::to_string(i));
        any_overlap |= p && a;
    }
    if (!any_overlap) bad.push_back("empty overlap");
    return bad;
}

Tensor<uint8_t> fill_triangle(int size, const double (&v)[3][2]) {
    Tensor<uint8_t> m({size, size});
    auto edge = [](const double* a, const double* b, double y, double x) {
        return (b[1] - a[1]) * (y - a[0]) - (b[0] - a[0]) * (x - a[1]);
    };
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double py = y + 0.5, px = x + 0.5;
            const double e0 = edge(v[0], v[1], py, px), e1 = edge(v[1], v[2], py, px), e2 = edge(v[2], v[0], py, px);
            const bool inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
            m[y * size + x] = inside ? 1 : 0;
        }
    }
    return m;
}

Tensor<uint8_t> fill_ellipse(int size, double cy, double cx, double ry, double rx, double angle) {
    Tensor<uint8_t> m({size, size});
    const double c = std::cos(angle), s = std::sin(angle);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double u = c * dx + s * dy, w = -s * dx + c * dy;
            m[y * size + x] = (u * u) / (rx * rx) + (w * w) / (ry * ry) <= 1.0 ? 1 : 0;
        }
    }
    return m;
}

ShapePair make_pair(Tensor<uint8_t> primary, Tensor<uint8_t> auxiliary, bool triangle_is_primary) {
    if (primary.shape() != auxiliary.shape()) throw std::invalid_argument("make_pair: shape mismatch");
    ShapePair p;
    p.union_mask = Tensor<uint8_t>(primary.shape());
    p.overlap_mask = Tensor<uint8_t>(primary.shape());
    p.aux_exclusive_mask = Tensor<uint8_t>(primary.shape());
    for (int64_t i = 0; i < primary.numel(); ++i) {
        const bool a = primary[i] != 0, b = auxiliary[i] != 0;
        p.union_mask[i] = a || b;
        p.overlap_mask[i] = a && b;
        p.aux_exclusive_mask[i] = b && !a;
    }
    p.primary_image = std::move(primary);
    p.auxiliary_image = std::move(auxiliary);
    p.triangle_is_primary = triangle_is_primary;
    return p;
}

std::vector<ShapePair> generate_dataset(int n, int image_size, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
    if (image_size < 32) throw std::invalid_argument("generate_dataset: image_size must be >= 32");
    const double size = image_size;
    const double margin = size / 16.0;
    const double min_area = kMinAreaFraction * size * size;
    std::vector<ShapePair> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(i)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> pos(margin, size - margin);
        std::uniform_real_distribution<double> centre(size / 4.0, 3.0 * size / 4.0);
        std::uniform_real_distribution<double> axis(size / 8.0, size / 3.0);
        std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
        const bool tri_primary = i % 2 == 0;
        bool ok = false;
        for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
            double v[3][2];
            for (auto& p : v) {
                p[0] = pos(rng);
                p[1] = pos(rng);
            }
            const double cy = centre(rng), cx = centre(rng), ry = axis(rng), rx = axis(rng), th = angle(rng);
            auto tri = fill_triangle(image_size, v);
            auto ell = fill_ellipse(image_size, cy, cx, ry, rx, th);
            int64_t both = 0, only_t = 0, only_e = 0;
            for (int64_t k = 0; k < tri.numel(); ++k) {
                both += tri[k] && ell[k];
                only_t += tri[k] && !ell[k];
                only_e += ell[k] && !tri[k];
            }
            if (both >= min_area && only_t >= min_area && only_e >= min_area) {
                out.push_back(tri_primary ? make_pair(std::move(tri), std::move(ell), true)
                                          : make_pair(std::move(ell), std::move(tri), false));
                ok = true;
            }
        }
        if (!ok) {
            throw GenerationError("pair " + std::to_string(i) + ": no valid triangle/ellipse layout after " +
                                  std::to_string(kMaxAttempts) + " attempts");
        }
    }
    return out;
}

void save_dataset(const std::vector<ShapePair>& pairs, const std::filesystem::path& dir) {
    json index = json::array();
    for (size_t i = 0; i < pairs.size(); ++i) {
        const std::string id = "pair" + std::to_string(i);
        io::write_tensor(dir / (id + "_primary.u8"), pairs[i].primary_image);
        io::write_tensor(dir / (id + "_auxiliary.u8"), pairs[i].auxiliary_image);
        index.push_back({{"id", id}, {"triangle_is_primary", pairs[i].triangle_is_primary}});
    }
    io::atomic_write(dir / "pairs.json", index.dump(1) + "\n");
}

std::vector<ShapePair> load_dataset(const std::filesystem::path& dir) {
    json index;
    try {
        index = json::parse(io::read_file(dir / "pairs.json"));
    } catch (const json::parse_error& e) {
        throw io::IoError((dir / "pairs.json").string() + ": " + e.what());
    }
    std::vector<ShapePair> out;
    for (const auto& e : index) {
        const std::string id = e.at("id").get<std::string>();
        out.push_back(make_pair(io::read_tensor_u8(dir / (id + "_primary.u8")),
                                io::read_tensor_u8(dir / (id + "_auxiliary.u8")), e.at("triangle_is_primary").get<bool>()));
    }
    return out;
}

template <typename T>
DemoModel<T>::DemoModel(const DemoConfig& cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.image_size < 16 || cfg.image_size % 4 != 0) {
        throw std::invalid_argument("demo image size must be a multiple of 4 and >= 16");
    }
    if (cfg.filters < 1 || cfg.latent_channels < 1) throw std::invalid_argument("demo filters must be positive");
    std::mt19937_64 rng(seed);
    nn::LayerFactory<T> f(params_, rng, 2, cfg.norm_kind);
    const int64_t F = cfg.filters;
    enc_primary_ = make_encoder(f, "demo.encoder_primary");
    enc_aux_ = make_encoder(f, "demo.encoder_aux");
    fusion_ = make_decoder(f, "demo.fusion", 2 * F, 4 * F, 8 * F);
    primary_ = make_decoder(f, "demo.primary", F, 2 * F, 4 * F);
    mu_ = f.conv("demo.fusion.mu", F, cfg.latent_channels, 1);
    sigma_ = f.conv("demo.fusion.sigma", F, cfg.latent_channels, 1);
    align_ = f.conv("demo.primary.align", cfg.latent_channels, F, 1);
    head_block_ = f.block("demo.primary.head_block", F, F);
    head_ = f.conv("demo.primary.head", F, 2, 1);
}

template <typename T>
typename DemoModel<T>::EncoderLayers DemoModel<T>::make_encoder(nn::LayerFactory<T>& f, const std::string& p) {
    const int64_t F = cfg_.filters;
    return {f.block(p + ".c1a", 1, F),         f.block(p + ".c1b", F, F),
            f.block(p + ".d2", F, 2 * F, 3, 2), f.block(p + ".c2", 2 * F, 2 * F),
            f.block(p + ".d3", 2 * F, 4 * F, 3, 2), f.block(p + ".c3", 4 * F, 4 * F)};
}

template <typename T>
typename DemoModel<T>::DecoderLayers DemoModel<T>::make_decoder(nn::LayerFactory<T>& f, const std::string& p,
                                                                int64_t in1, int64_t in2, int64_t in3) {
    const int64_t F = cfg_.filters;
    DecoderLayers d;
    d.up3 = f.conv_transpose(p + ".up3", in3, 2 * F);
    d.up3_norm = f.norm(p + ".up3.norm", 2 * F);
    d.c2 = f.block(p + ".c2", 2 * F + in2, 2 * F);
    d.up2 = f.conv_transpose(p + ".up2", 2 * F, F);
    d.up2_norm = f.norm(p + ".up2.norm", F);
    d.c1 = f.block(p + ".c1", F + in1, F);
    return d;
}

template <typename T>
typename DemoModel<T>::Features DemoModel<T>::encode(const EncoderLayers& e, const Var<T>& x, bool training) const {
    Features out;
    out.f1 = e.c1b(e.c1a(x, training), training);
    out.f2 = e.c2(e.d2(out.f1, training), training);
    out.f3 = e.c3(e.d3(out.f2, training), training);
    return out;
}

template <typename T>
Var<T> DemoModel<T>::decode(const DecoderLayers& d, const Var<T>& x3, const Var<T>& x2, const Var<T>& x1,
                            bool training) const {
    const T slope = static_cast<T>(nn::kLeakySlope);
    Var<T> h = ag::leaky_relu(d.up3_norm(d.up3(x3), training), slope);
    h = d.c2(ag::concat_channels<T>({h, x2}), training);
    h = ag::leaky_relu(d.up2_norm(d.up2(h), training), slope);
    return d.c1(ag::concat_channels<T>({h, x1}), training);
}

template <typename T>
typename DemoModel<T>::Output DemoModel<T>::forward(const Var<T>& primary, const Var<T>& auxiliary,
                                                    const nn::NoiseMode& noise, bool training) const {
    const Shape& s = primary.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.image_size || s[3] != cfg_.image_size || auxiliary.shape() != s) {
        throw std::domain_error("demo model expects [N, 1, " + std::to_string(cfg_.image_size) + ", " +
                                std::to_string(cfg_.image_size) + "] inputs, got " + shape_str(s) + " and " +
                                shape_str(auxiliary.shape()));
    }
    const Features p = encode(enc_primary_, primary, training);
    const Features a = encode(enc_aux_, auxiliary, training);
    const Var<T> fused = decode(fusion_, ag::concat_channels<T>({ag::detach(p.f3), a.f3}),
                                ag::concat_channels<T>({ag::detach(p.f2), a.f2}),
                                ag::concat_channels<T>({ag::detach(p.f1), a.f1}), training);
    Output out;
    out.mu = mu_(fused);
    out.sigma = ag::add_scalar(ag::softplus(sigma_(fused)), static_cast<T>(nn::kSigmaFloor));
    out.eps = nn::draw_noise<T>(noise, out.mu.shape(), 0);
    out.kappa = ag::reparameterize(out.mu, out.sigma, out.eps);
    const Var<T> own = decode(primary_, p.f3, p.f2, p.f1, training);
    out.logits = head_(head_block_(ag::add(own, align_(out.kappa)), training));
    return out;
}

template class DemoModel<float>;
template class DemoModel<double>;

DemoSplit split_dataset(size_t n, double test_fraction, uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test fraction must lie in (0, 1)");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const size_t n_test = std::max<size_t>(1, static_cast<size_t>(std::lround(test_fraction * static_cast<double>(n))));
    if (n_test >= n) throw std::invalid_argument("dataset too small to split");
    DemoSplit s;
    s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

namespace {

struct PairBatch {
    Tensor<float> primary, auxiliary;
    Tensor<int32_t> labels;
};

PairBatch make_batch(const std::vector<ShapePair>& pairs, const std::vector<size_t>& which) {
    const int64_t n = static_cast<int64_t>(which.size());
    const int64_t H = pairs.at(which.at(0)).primary_image.dim(0), W = pairs[which[0]].primary_image.dim(1);
    PairBatch b{Tensor<float>({n, 1, H, W}), Tensor<float>({n, 1, H, W}), Tensor<int32_t>({n, H, W})};
    for (int64_t k = 0; k < n; ++k) {
        const auto& p = pairs.at(which[static_cast<size_t>(k)]);
        for (int64_t i = 0; i < H * W; ++i) {
            b.primary[k * H * W + i] = p.primary_image[i];
            b.auxiliary[k * H * W + i] = p.auxiliary_image[i];
            b.labels[k * H * W + i] = p.union_mask[i];
        }
    }
    return b;
}

}  // namespace

DemoTrainResult train_demo(DemoModel<float>& model, const std::vector<ShapePair>& pairs, const DemoSplit& split,
                           const DemoTrainConfig& cfg, std::ostream* jsonl) {
    if (split.train.empty()) throw std::invalid_argument("train_demo: empty training split");
    if (!(cfg.beta >= 0.0)) throw std::domain_error("beta must be non-negative");
    train::Adam<float> opt(model.params(), {0.9, 0.999}, cfg.weight_decay);
    std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
    std::uniform_int_distribution<size_t> pick(0, split.train.size() - 1);
    DemoTrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        DemoEpochLog log;
        log.epoch = epoch;
        log.lr = poly_lr(cfg.initial_lr, epoch, cfg.epochs);
        for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
            std::vector<size_t> which;
            for (int k = 0; k < cfg.batch_size; ++k) which.push_back(split.train[pick(rng)]);
            PairBatch b = make_batch(pairs, which);
            auto out = model.forward(Var<float>::constant(std::move(b.primary)), Var<float>::constant(std::move(b.auxiliary)),
                                     nn::NoiseMode::sample(rng), true);
            auto ce = train::ce_loss(out.logits, b.labels);
            auto dice = train::soft_dice_loss(out.logits, b.labels);
            auto kl = ag::gaussian_kl_mean(out.mu, out.sigma);
            auto total = ag::add(ag::add(ce, dice), ag::scale(kl, static_cast<float>(cfg.beta)));
            if (!std::isfinite(total.item())) {
                throw train::TrainingError("demo: non-finite loss at epoch " + std::to_string(epoch) + " (ce " +
                                           std::to_string(ce.item()) + ", dice " + std::to_string(dice.item()) +
                                           ", kl " + std::to_string(kl.item()) + ")");
            }
            model.params().zero_grad();
            total.backward();
            opt.step(log.lr);
            log.ce += ce.item() / cfg.iterations_per_epoch;
            log.dice_loss += dice.item() / cfg.iterations_per_epoch;
            log.kl += kl.item() / cfg.iterations_per_epoch;
        }
        if (jsonl) {
            *jsonl << json{{"epoch", log.epoch}, {"lr", log.lr}, {"ce", log.ce}, {"dice", log.dice_loss}, {"kl", log.kl}}.dump()
                   << '\n';
        }
        result.epochs.push_back(log);
    }
    const size_t tail = std::max<size_t>(1, result.epochs.size() / 10);
    for (size_t i = result.epochs.size() - tail; i < result.epochs.size(); ++i) result.converged_kl += result.epochs[i].kl;
    result.converged_kl /= static_cast<double>(tail);
    return result;
}

DemoPrediction predict_pair(const DemoModel<float>& model, const ShapePair& pair) {
    ag::NoGradGuard guard;
    PairBatch b = make_batch({pair}, {0});
    auto out = model.forward(Var<float>::constant(std::move(b.primary)), Var<float>::constant(std::move(b.auxiliary)),
                             nn::NoiseMode::mean(), false);
    const int64_t H = pair.primary_image.dim(0), W = pair.primary_image.dim(1), HW = H * W;
    DemoPrediction p{Tensor<uint8_t>({H, W}), Tensor<float>({H, W})};
    const auto& lg = out.logits.value();
    for (int64_t i = 0; i < HW; ++i) p.union_pred[i] = lg[HW + i] > lg[i] ? 1 : 0;
    const auto& mu = out.mu.value();
    const int64_t L = mu.dim(1);
    for (int64_t c = 0; c < L; ++c) {
        for (int64_t i = 0; i < HW; ++i) p.complementary[i] += std::abs(mu[c * HW + i]) / static_cast<float>(L);
    }
    return p;
}

double localization_score(const Tensor<float>& map, const ShapePair& pair) {
    if (map.shape() != pair.primary_image.shape()) throw std::invalid_argument("localization map shape mismatch");
    const auto [lo_it, hi_it] = std::minmax_element(map.values().begin(), map.values().end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) throw std::domain_error("localization score undefined for a constant map");
    double excl = 0, prim = 0;
    for (int64_t i = 0; i < map.numel(); ++i) {
        const double v = (map[i] - lo) / (hi - lo);
        if (pair.aux_exclusive_mask[i]) excl += v;
        if (pair.primary_image[i]) prim += v;
    }
    if (excl + prim <= 0) throw std::domain_error("localization score undefined: no mass on either region");
    return excl / (excl + prim);
}

DemoEvaluation evaluate_demo(const DemoModel<float>& model, const std::vector<ShapePair>& pairs,
                             const std::vector<size_t>& indices) {
    if (indices.empty()) throw std::invalid_argument("evaluate_demo: no pairs");
    ag::NoGradGuard guard;
    DemoEvaluation ev;
    int64_t latent_count = 0;
    for (size_t i : indices) {
        const auto& pair = pairs.at(i);
        PairBatch b = make_batch(pairs, {i});
        auto out = model.forward(Var<float>::constant(std::move(b.primary)), Var<float>::constant(std::move(b.auxiliary)),
                                 nn::NoiseMode::mean(), false);
        const int64_t H = pair.primary_image.dim(0), W = pair.primary_image.dim(1), HW = H * W;
        const auto& lg = out.logits.value();
        int64_t inter = 0, a = 0, t = 0;
        Tensor<float> comp({H, W});
        const auto& mu = out.mu.value();
        const auto& sg = out.sigma.value();
        const int64_t L = mu.dim(1);
        for (int64_t v = 0; v < HW; ++v) {
            const bool pr = lg[HW + v] > lg[v];
            const bool tr = pair.union_mask[v] != 0;
            inter += pr && tr;
            a += pr;
            t += tr;
        }
        for (int64_t k = 0; k < mu.numel(); ++k) {
            comp[k % HW] += std::abs(mu[k]) / static_cast<float>(L);
            ev.mean_abs_mu += std::abs(mu[k]);
            ev.mean_abs_sigma_minus_one += std::abs(sg[k] - 1.0);
        }
        latent_count += mu.numel();
        ev.dice += a + t == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(a + t);
        ev.localization += localization_score(comp, pair);
    }
    const double n = static_cast<double>(indices.size());
    ev.dice /= n;
    ev.localization /= n;
    ev.mean_abs_mu /= static_cast<double>(latent_count);
    ev.mean_abs_sigma_minus_one /= static_cast<double>(latent_count);
    return ev;
}

void export_figure(const DemoModel<float>& model, const std::vector<ShapePair>& pairs,
                   const std::vector<size_t>& indices, const std::filesystem::path& path, int zoom) {
    if (indices.empty()) throw std::invalid_argument("export_figure: no pairs");
    const int S = static_cast<int>(pairs.at(indices[0]).primary_image.dim(0)) * zoom;
    const int gap = 4;
    png::Canvas cv(5 * S + 6 * gap, static_cast<int>(indices.size()) * (S + gap) + gap);
    int row = 0;
    for (size_t i : indices) {
        const auto& pair = pairs.at(i);
        const auto pred = predict_pair(model, pair);
        const int y = gap + row * (S + gap);
        const auto f = [](const Tensor<uint8_t>& m) { return m.cast<float>(); };
        cv.blit_gray(f(pair.primary_image), gap, y, 0, 1, zoom);
        cv.blit_gray(f(pair.auxiliary_image), gap * 2 + S, y, 0, 1, zoom);
        cv.blit_gray(f(pred.union_pred), gap * 3 + 2 * S, y, 0, 1, zoom);
        cv.blit_gray(f(pair.union_mask), gap * 4 + 3 * S, y, 0, 1, zoom);
        const auto [lo, hi] = std::minmax_element(pred.complementary.values().begin(), pred.complementary.values().end());
        cv.blit_ramp(pred.complementary, gap * 5 + 4 * S, y, *lo, *hi, zoom);
        ++row;
    }
    cv.save(path);
}

}  // namespace ciml::shapes
