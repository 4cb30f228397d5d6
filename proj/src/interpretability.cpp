#include "ciml/interpretability.hpp"

#include <algorithm>

namespace ciml::interp {

template <typename T>
std::vector<std::vector<double>> gradcam_alphas(const std::vector<Var<T>>& feature_maps, const Var<T>& y) {
    for (const auto& a : feature_maps) {
        if (!a.defined() || !a.requires_grad()) {
            throw std::domain_error("gradcam_alpha: feature maps are detached from the graph");
        }
        if (a.shape().size() < 2) throw std::domain_error("gradcam_alpha: feature map needs a channel axis");
    }
    for (auto a : feature_maps) a.zero_grad();
    if (y.requires_grad()) y.backward();
    std::vector<std::vector<double>> out;
    for (const auto& a : feature_maps) {
        const Shape& s = a.shape();
        const bool batched = s.size() >= 3;
        const int64_t C = batched ? s[1] : s[0];
        if (batched && s[0] != 1) throw std::domain_error("gradcam_alpha: expects a single sample");
        const int64_t N = a.value().numel() / C;
        std::vector<double> alpha(static_cast<size_t>(C), 0.0);
        if (a.has_grad()) {
            for (int64_t c = 0; c < C; ++c) {
                double acc = 0;
                for (int64_t v = 0; v < N; ++v) acc += static_cast<double>(a.grad()[c * N + v]);
                alpha[static_cast<size_t>(c)] = acc / static_cast<double>(N);
            }
        }
        out.push_back(std::move(alpha));
    }
    return out;
}

template <typename T>
std::vector<double> gradcam_alpha(const Var<T>& feature_map, const Var<T>& y) {
    return gradcam_alphas<T>({feature_map}, y).front();
}

template std::vector<std::vector<double>> gradcam_alphas(const std::vector<Var<float>>&, const Var<float>&);
template std::vector<std::vector<double>> gradcam_alphas(const std::vector<Var<double>>&, const Var<double>&);
template std::vector<double> gradcam_alpha(const Var<float>&, const Var<float>&);
template std::vector<double> gradcam_alpha(const Var<double>&, const Var<double>&);

Tensor<double> gradcam_heatmap(const Tensor<double>& feature_map, const std::vector<double>& alpha) {
    Shape s = feature_map.shape();
    if (s.size() >= 3 && s[0] == 1 && static_cast<int64_t>(alpha.size()) == s[1] && s[1] != 1) s.erase(s.begin());
    else if (s.size() >= 3 && s[0] == 1 && s[1] == 1 && alpha.size() == 1) s.erase(s.begin());
    if (s.empty() || static_cast<int64_t>(alpha.size()) != s[0]) {
        throw std::domain_error("gradcam_heatmap: " + std::to_string(alpha.size()) + " weights for feature map " +
                                shape_str(feature_map.shape()));
    }
    const Shape spatial(s.begin() + 1, s.end());
    const int64_t N = shape_numel(spatial);
    Tensor<double> z(spatial);
    for (size_t c = 0; c < alpha.size(); ++c) {
        const double* a = feature_map.data() + static_cast<int64_t>(c) * N;
        for (int64_t v = 0; v < N; ++v) z[v] += alpha[c] * a[v];
    }
    for (auto& v : z.values()) v = std::max(0.0, v);
    return z;
}

std::map<std::string, double> complementary_weights(const std::vector<HeatmapStack>& heatmaps) {
    if (heatmaps.empty()) throw UndefinedWeightsError("complementary weights need at least one heatmap");
    double total = 0;
    for (const auto& h : heatmaps) {
        if (h.mass < 0) throw std::domain_error("negative heatmap mass for " + h.aux_modality);
        total += h.mass;
    }
    if (!(total > 0)) {
        throw UndefinedWeightsError("complementary weights undefined for region " + heatmaps[0].region.name +
                                    ": total heatmap mass is zero");
    }
    std::map<std::string, double> w;
    for (const auto& h : heatmaps) w[h.aux_modality] += h.mass / total;
    return w;
}

Tensor<double> upsample_nearest(const Tensor<double>& map, int factor) {
    if (factor < 1) throw std::invalid_argument("upsample factor must be positive");
    const Shape& in = map.shape();
    Shape out_shape = in;
    for (auto& e : out_shape) e *= factor;
    Tensor<double> out(out_shape);
    const size_t d = in.size();
    std::vector<int64_t> c(d, 0), istride(d, 1);
    for (size_t k = d; k-- > 1;) istride[k - 1] = istride[k] * in[k];
    for (int64_t i = 0; i < out.numel(); ++i) {
        int64_t src = 0;
        for (size_t k = 0; k < d; ++k) src += (c[k] / factor) * istride[k];
        out[i] = map[src];
        for (size_t k = d; k-- > 0;) {
            if (++c[k] < out_shape[k]) break;
            c[k] = 0;
        }
    }
    return out;
}

void normalize_jointly(std::vector<HeatmapStack>& heatmaps) {
    double mx = 0;
    for (const auto& h : heatmaps) {
        for (double v : h.zeta.values()) mx = std::max(mx, v);
    }
    if (mx <= 0) return;
    for (auto& h : heatmaps) {
        for (auto& v : h.zeta.values()) v /= mx;
        h.mass /= mx;
    }
}

size_t segmentor_for(const train::CimlModel<float>& model, const RegionId& region, const std::string& excluded) {
    for (size_t i : model.assignment().segmentors_for(region)) {
        if (model.assignment().entries[i].primary.name != excluded) return i;
    }
    throw std::domain_error("no segmentor for region " + region.name +
                            (excluded.empty() ? std::string() : " that is not driven by " + excluded));
}

std::vector<HeatmapStack> extract_complementary_cams(const train::CimlModel<float>& model,
                                                     const std::vector<Tensor<float>>& inputs, size_t seg,
                                                     const RegionId& region) {
    const auto& remap = model.remap(seg);
    int local = -1;
    for (size_t j = 0; j < remap.targets().size(); ++j) {
        if (remap.targets()[j] == region) local = static_cast<int>(j) + 1;
    }
    if (local < 0) {
        throw std::domain_error("segmentor " + model.segmentor(seg).name() + " is not assigned region " + region.name);
    }
    if (model.segmentor(seg).config().message_count == 0) {
        throw std::domain_error("segmentor " + model.segmentor(seg).name() + " receives no messages");
    }
    std::vector<Var<float>> vars;
    for (const auto& t : inputs) vars.push_back(Var<float>::constant(t));
    auto outputs = model.forward(vars, nn::NoiseMode::mean(), false);
    const auto& out = outputs.at(seg);
    const auto& lg = out.logits.value();
    const int64_t O = lg.dim(1);
    const int64_t V = lg.numel() / O;
    Shape mshape{1};
    for (size_t k = 2; k < lg.shape().size(); ++k) mshape.push_back(lg.shape()[k]);
    Tensor<uint8_t> predicted(mshape);
    int64_t count = 0;
    for (int64_t v = 0; v < V; ++v) {
        int64_t best = 0;
        for (int64_t o = 1; o < O; ++o) {
            if (lg[o * V + v] > lg[best * V + v]) best = o;
        }
        predicted[v] = best == local ? 1 : 0;
        count += predicted[v];
    }
    if (count == 0) {
        throw ZeroRegionError("no voxel predicted as " + region.name + " by segmentor " + model.segmentor(seg).name());
    }
    const Var<float> y = ag::masked_class_sum(out.logits, local, predicted);

    const auto& shallow = out.latents.back();
    std::vector<Var<float>> maps;
    for (const auto& lat : shallow) maps.push_back(lat.kappa);
    const auto alphas = gradcam_alphas(maps, y);
    const int factor = static_cast<int>(lg.shape()[2] / shallow.front().kappa.shape()[2]);

    std::vector<HeatmapStack> stacks;
    size_t j = 0;
    for (size_t m = 0; m < model.size(); ++m) {
        if (m == seg) continue;
        HeatmapStack h;
        h.aux_modality = model.assignment().entries[m].primary.name;
        h.region = region;
        h.segmentor = model.segmentor(seg).name();
        h.alpha = alphas[j];
        h.zeta = upsample_nearest(gradcam_heatmap(maps[j].value().cast<double>(), alphas[j]), factor);
        for (double v : h.zeta.values()) h.mass += v;
        stacks.push_back(std::move(h));
        ++j;
    }
    return stacks;
}

HeatmapStack extract_complementary_cam(const train::CimlModel<float>& model, const VolumeSample& sample,
                                       const std::string& aux_modality, const RegionId& region) {
    const size_t seg = segmentor_for(model, region, aux_modality);
    const auto inputs =
        train::window_inputs(model, sample, train::centered_origin(sample.spatial_shape(), model.base_config().patch_size));
    for (auto& h : extract_complementary_cams(model, inputs, seg, region)) {
        if (h.aux_modality == aux_modality) return h;
    }
    throw std::domain_error("modality " + aux_modality + " is not an auxiliary of segmentor " +
                            model.segmentor(seg).name());
}

WeightTable average_weights(const train::CimlModel<float>& model, const std::vector<VolumeSample>& samples,
                            const std::map<std::string, std::string>& exclude_primary) {
    WeightTable table;
    for (const auto& region : model.regions().regions) {
        auto ex = exclude_primary.find(region.name);
        size_t seg;
        try {
            seg = segmentor_for(model, region, ex == exclude_primary.end() ? "" : ex->second);
        } catch (const std::domain_error&) {
            continue;
        }
        if (model.segmentor(seg).config().message_count == 0) continue;
        table.segmentor[region.name] = model.segmentor(seg).name();
        auto& acc = table.weights[region.name];
        int& n = table.samples[region.name];
        for (const auto& s : samples) {
            const auto inputs =
                train::window_inputs(model, s, train::centered_origin(s.spatial_shape(), model.base_config().patch_size));
            try {
                auto w = complementary_weights(extract_complementary_cams(model, inputs, seg, region));
                for (const auto& [mod, v] : w) acc[mod] += v;
                ++n;
            } catch (const ZeroRegionError&) {
            } catch (const UndefinedWeightsError&) {
            }
        }
        if (n > 0) {
            for (auto& [mod, v] : acc) v /= n;
        } else {
            table.weights.erase(region.name);
        }
    }
    return table;
}

}  // namespace ciml::interp
