#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciml/config.hpp"
#include "ciml/io.hpp"

namespace ciml::synth {

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Nested WT (1) > TC (2) > ET (3).
RegionSet brats_regions();
std::vector<ModalityId> brats_modalities();
// FLAIR -> {WT}, T1 -> {TC}, T1CE -> {TC, ET}, T2 -> {WT, TC}.
std::vector<std::pair<std::string, std::vector<std::string>>> default_assignment();

struct SynthConfig {
    int n_cases = 20;
    int size = 32;
    int spatial_dims = 3;
    std::vector<std::string> modalities{"FLAIR", "T1", "T1CE", "T2"};
    RegionSet regions = brats_regions();
    // Region -> modality carrying its strong boundary contrast.
    std::map<std::string, std::string> contrast_modality{{"WT", "FLAIR"}, {"TC", "T1CE"}, {"ET", "T1CE"}};
    double strong_step = 1.5;
    double weak_step = 0.5;
    double noise_sigma = 0.1;
    uint64_t seed = 0;
    // Smallest voxel count accepted for any region; layouts are redrawn until it holds.
    int min_region_voxels = 8;

    void validate() const;
};

// Each case: nested ellipsoids (each clipped to its parent), and per modality
// intensity = sum over regions containing the voxel of the region's step
// (strong in its contrast modality, weak elsewhere) plus Gaussian noise.
std::vector<VolumeSample> generate_synthetic_volumes(const SynthConfig& cfg);

// Writes cases and manifest under root; returns the manifest.
io::DatasetManifest write_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& root);

}  // namespace ciml::synth
