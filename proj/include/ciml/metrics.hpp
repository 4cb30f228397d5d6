#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ciml/config.hpp"
#include "ciml/tensor.hpp"

namespace ciml::metrics {

// Masks are binary in the sense of value != 0.
// 2|X n Y| / (|X| + |Y|); 1 when both are empty.
double dice_score(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth);

// Symmetric 95th-percentile surface distance. Boundary voxels are foreground
// voxels with a face neighbour in the background (out-of-grid counts as
// background); each boundary voxel is matched to the nearest boundary voxel of
// the other set. Percentiles interpolate linearly between order statistics.
// nullopt when either set is empty.
std::optional<double> hd95(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                           const std::vector<double>& spacing);
// Same construction with the 100th percentile (the classic Hausdorff distance).
std::optional<double> hausdorff(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                                const std::vector<double>& spacing);
// Generic form used by both of the above; q in [0, 100].
std::optional<double> percentile_surface_distance(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                                                  const std::vector<double>& spacing, double q);

// Linear-interpolation percentile of an unsorted sample.
double percentile(std::vector<double> values, double q);

// Binary membership of `region` in a global label map.
Tensor<uint8_t> region_mask(const Tensor<uint8_t>& labels, const RegionSet& regions, const RegionId& region);

// Combines per-segmentor softmax outputs ([O_i, spatial], local classes as in
// `remaps[i]`) into a global label map. Each region's probability is averaged
// over every segmentor assigned to it. A region is predicted where that
// average exceeds 0.5; for nested regions the most specific region whose
// whole ancestor chain also exceeds 0.5 wins, otherwise the highest average wins.
Tensor<uint8_t> ensemble_regions(const std::vector<Tensor<float>>& probs, const TaskAssignment& assignment,
                                 const RegionSet& regions);

// Averaged foreground probability of one region ([spatial]).
Tensor<float> region_probability(const std::vector<Tensor<float>>& probs, const TaskAssignment& assignment,
                                 const RegionSet& regions, const RegionId& region);

struct RegionReport {
    RegionId region;
    double dice = 0;
    std::optional<double> hd95;
};

struct CaseReport {
    std::string case_id;
    std::vector<RegionReport> regions;
};

CaseReport evaluate_case(const std::string& case_id, const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth,
                         const RegionSet& regions, const std::vector<double>& spacing);

// Rows "case_id,region,dice,hd95" followed by one MEAN row per region; an
// undefined hd95 is written as "nan" and skipped by the mean.
std::string reports_to_csv(const std::vector<CaseReport>& reports);

// Mean Dice over all cases and regions.
double mean_dice(const std::vector<CaseReport>& reports);

}  // namespace ciml::metrics
