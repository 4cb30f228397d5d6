#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciml/training.hpp"

namespace ciml::interp {

using ag::Var;

class UndefinedWeightsError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class ZeroRegionError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct HeatmapStack {
    std::string aux_modality;
    RegionId region;
    std::string segmentor;
    Tensor<double> zeta;  // [spatial] at patch resolution, >= 0
    std::vector<double> alpha;
    double mass = 0;
};

// Backpropagates y once and returns, for each feature map A ([1, C, spatial]),
// alpha_c = mean over voxels of dy/dA_c. y must come from a fresh graph.
template <typename T>
std::vector<std::vector<double>> gradcam_alphas(const std::vector<Var<T>>& feature_maps, const Var<T>& y);
template <typename T>
std::vector<double> gradcam_alpha(const Var<T>& feature_map, const Var<T>& y);

// ReLU(sum_c alpha_c A_c) for A shaped [C, spatial...] or [1, C, spatial...];
// the result drops the channel (and batch) axes.
Tensor<double> gradcam_heatmap(const Tensor<double>& feature_map, const std::vector<double>& alpha);

// Mass share of each heatmap: aux modality -> weight.
std::map<std::string, double> complementary_weights(const std::vector<HeatmapStack>& heatmaps);

// Nearest-neighbour upsampling of a [spatial] map by an integer factor per axis.
Tensor<double> upsample_nearest(const Tensor<double>& map, int factor);

// Rescales all maps by the largest value over the set so one figure shares a scale.
void normalize_jointly(std::vector<HeatmapStack>& heatmaps);

// Index of a segmentor assigned `region` whose primary modality is not
// `excluded` (empty string: any); throws std::domain_error when none exists.
size_t segmentor_for(const train::CimlModel<float>& model, const RegionId& region, const std::string& excluded = "");

// Grad-CAM of every auxiliary message in segmentor `seg` for `region`. A is the
// message's latent kappa at the shallowest gate (half patch resolution), so
// each auxiliary modality gets its own map; y is the sum of the region's class
// logits over voxels predicted as that class. `inputs` are the model's
// [1, 1, P...] patches.
std::vector<HeatmapStack> extract_complementary_cams(const train::CimlModel<float>& model,
                                                     const std::vector<Tensor<float>>& inputs, size_t seg,
                                                     const RegionId& region);

// Single (aux modality, region) pair on the centred patch of a sample, using
// the first segmentor for the region that is not driven by `aux_modality`.
HeatmapStack extract_complementary_cam(const train::CimlModel<float>& model, const VolumeSample& sample,
                                       const std::string& aux_modality, const RegionId& region);

// Region -> aux modality -> weight averaged over samples (skipping samples
// where the region is not predicted), for the first eligible segmentor per region.
// A region with no usable sample keeps samples = 0 and has no weights entry.
struct WeightTable {
    std::map<std::string, std::string> segmentor;  // region -> segmentor used
    std::map<std::string, std::map<std::string, double>> weights;
    std::map<std::string, int> samples;
};

WeightTable average_weights(const train::CimlModel<float>& model, const std::vector<VolumeSample>& samples,
                            const std::map<std::string, std::string>& exclude_primary = {});

}  // namespace ciml::interp
