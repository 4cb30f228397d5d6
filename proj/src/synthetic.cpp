#include "ciml/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace ciml::synth {

RegionSet brats_regions() { return RegionSet{{{"WT", 1}, {"TC", 2}, {"ET", 3}}, true}; }

std::vector<ModalityId> brats_modalities() { return {{"FLAIR", 0}, {"T1", 1}, {"T1CE", 2}, {"T2", 3}}; }

std::vector<std::pair<std::string, std::vector<std::string>>> default_assignment() {
    return {{"FLAIR", {"WT"}}, {"T1", {"TC"}}, {"T1CE", {"TC", "ET"}}, {"T2", {"WT", "TC"}}};
}

void SynthConfig::validate() const {
    if (n_cases < 1) throw std::invalid_argument("synthetic: n_cases must be >= 1");
    if (size < 16 || size % 16 != 0) throw std::invalid_argument("synthetic: size must be >= 16 and divisible by 16");
    if (spatial_dims != 2 && spatial_dims != 3) throw std::invalid_argument("synthetic: spatial_dims must be 2 or 3");
    if (modalities.empty()) throw std::invalid_argument("synthetic: no modalities");
    std::set<std::string> names(modalities.begin(), modalities.end());
    if (names.size() != modalities.size()) throw std::invalid_argument("synthetic: duplicate modality names");
    if (!regions.nested) throw std::invalid_argument("synthetic: regions must be nested");
    auto bad = regions.validate();
    if (!bad.empty()) throw std::invalid_argument("synthetic: " + bad.front());
    for (const auto& [r, m] : contrast_modality) {
        regions.find(r);
        if (!names.count(m)) throw std::invalid_argument("synthetic: contrast modality " + m + " is not generated");
    }
    if (!(noise_sigma >= 0)) throw std::invalid_argument("synthetic: noise_sigma must be non-negative");
}

namespace {

constexpr int kMaxAttempts = 100;

// Draws one nested ellipsoid layout into `mask` and returns the voxel count per region.
std::vector<int64_t> draw_regions(const SynthConfig& cfg, const std::vector<RegionId>& order, std::mt19937_64& rng,
                                  Tensor<uint8_t>& mask) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int d = cfg.spatial_dims;
    const double S = cfg.size;
    const Shape shape(static_cast<size_t>(d), cfg.size);
    const int64_t vox = shape_numel(shape);
    // Ellipsoid per region: centre and semi-axes, each shrinking inside its parent.
    std::vector<std::vector<double>> centre(order.size(), std::vector<double>(static_cast<size_t>(d)));
    std::vector<std::vector<double>> axes(order.size(), std::vector<double>(static_cast<size_t>(d)));
    for (size_t r = 0; r < order.size(); ++r) {
        for (size_t k = 0; k < static_cast<size_t>(d); ++k) {
            if (r == 0) {
                axes[r][k] = S * (0.18 + 0.12 * u(rng));
                centre[r][k] = S / 2 + (u(rng) - 0.5) * (S - 2 * axes[r][k] - 2);
            } else {
                axes[r][k] = axes[r - 1][k] * (0.5 + 0.2 * u(rng));
                const double slack = axes[r - 1][k] - axes[r][k];
                centre[r][k] = centre[r - 1][k] + (u(rng) - 0.5) * slack;
            }
        }
    }
    mask = Tensor<uint8_t>(shape);
    std::vector<int64_t> counts(order.size(), 0);
    std::vector<int64_t> idx(static_cast<size_t>(d), 0);
    for (int64_t v = 0; v < vox; ++v) {
        int label = 0;
        for (size_t r = 0; r < order.size(); ++r) {
            double q = 0;
            for (size_t k = 0; k < idx.size(); ++k) {
                const double t = (static_cast<double>(idx[k]) + 0.5 - centre[r][k]) / axes[r][k];
                q += t * t;
            }
            if (q > 1.0) break;
            label = order[r].class_index;
            ++counts[r];
        }
        mask[v] = static_cast<uint8_t>(label);
        for (size_t k = idx.size(); k-- > 0;) {
            if (++idx[k] < cfg.size) break;
            idx[k] = 0;
        }
    }
    return counts;
}

}  // namespace

std::vector<VolumeSample> generate_synthetic_volumes(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<RegionId> order = cfg.regions.regions;
    std::sort(order.begin(), order.end(), [](const RegionId& a, const RegionId& b) { return a.class_index < b.class_index; });
    const int d = cfg.spatial_dims;
    const Shape shape(static_cast<size_t>(d), cfg.size);
    const int64_t vox = shape_numel(shape);
    std::vector<VolumeSample> out;
    for (int c = 0; c < cfg.n_cases; ++c) {
        std::seed_seq seq{static_cast<uint32_t>(cfg.seed), static_cast<uint32_t>(cfg.seed >> 32), static_cast<uint32_t>(c)};
        std::mt19937_64 rng(seq);
        VolumeSample s;
        s.case_id = "case" + std::to_string(c);
        std::vector<int64_t> counts;
        for (int attempt = 0;; ++attempt) {
            if (attempt == kMaxAttempts) {
                throw GenerationError("case " + std::to_string(c) + ": no layout gives every region " +
                                      std::to_string(cfg.min_region_voxels) + " voxels at size " +
                                      std::to_string(cfg.size) + " after " + std::to_string(kMaxAttempts) +
                                      " attempts");
            }
            counts = draw_regions(cfg, order, rng, s.mask);
            if (*std::min_element(counts.begin(), counts.end()) >= cfg.min_region_voxels) break;
        }
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        for (const auto& mod : cfg.modalities) {
            std::vector<double> level(order.size());
            for (size_t r = 0; r < order.size(); ++r) {
                auto it = cfg.contrast_modality.find(order[r].name);
                const bool strong = it != cfg.contrast_modality.end() && it->second == mod;
                level[r] = strong ? cfg.strong_step : cfg.weak_step;
            }
            Tensor<float> vol(shape);
            for (int64_t v = 0; v < vox; ++v) {
                double val = 0;
                for (size_t r = 0; r < order.size(); ++r) {
                    if (s.mask[v] >= order[r].class_index) val += level[r];
                }
                vol[v] = static_cast<float>(val + (cfg.noise_sigma > 0 ? noise(rng) : 0.0));
            }
            s.volumes.emplace(mod, std::move(vol));
        }
        out.push_back(std::move(s));
    }
    return out;
}

io::DatasetManifest write_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& root) {
    auto samples = generate_synthetic_volumes(cfg);
    io::DatasetManifest m;
    m.root = root;
    for (size_t i = 0; i < cfg.modalities.size(); ++i) m.modalities.push_back({cfg.modalities[i], static_cast<int>(i)});
    m.regions = cfg.regions;
    m.spacing.assign(static_cast<size_t>(cfg.spatial_dims), 1.0);
    for (const auto& s : samples) m.cases.push_back(io::write_case(s, root));
    io::write_manifest(m);
    return m;
}

}  // namespace ciml::synth
