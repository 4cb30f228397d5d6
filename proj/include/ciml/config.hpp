#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ciml/tensor.hpp"

namespace ciml {

struct ModalityId {
    std::string name;
    int index = 0;
    bool operator==(const ModalityId&) const = default;
};

// class_index 0 is background and is never a RegionId.
struct RegionId {
    std::string name;
    int class_index = 1;
    bool operator==(const RegionId&) const = default;
};

// The label space of a dataset. A mask voxel holds the class index of the
// most specific region that contains it. With nested = true regions form a
// chain ordered by class index (higher index inside lower, e.g. ET in TC in
// WT), so voxel v belongs to region r iff label(v) >= r.class_index.
struct RegionSet {
    std::vector<RegionId> regions;
    bool nested = false;

    int num_classes() const;
    bool contains(int label, const RegionId& region) const;
    const RegionId& find(const std::string& name) const;
    std::vector<std::string> validate() const;
};

struct AssignmentEntry {
    ModalityId primary;
    std::vector<RegionId> targets;
};

struct TaskAssignment {
    std::vector<AssignmentEntry> entries;

    std::vector<ModalityId> modalities() const;
    // Entries whose targets include the region.
    std::vector<size_t> segmentors_for(const RegionId& region) const;
};

struct ValidationReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
    std::string summary() const;
};

ValidationReport validate_assignment(const TaskAssignment& assignment, const std::vector<RegionId>& regions);

enum class NormKind { batch, instance };

std::string to_string(NormKind kind);
NormKind norm_kind_from_string(const std::string& s);

struct ArchitectureConfig {
    int patch_size = 64;
    int base_filters = 24;
    int message_count = 0;
    int out_channels = 2;
    int spatial_dims = 3;
    NormKind norm_kind = NormKind::instance;
    int in_channels = 1;
    // Off reproduces the plain encoder-decoder baseline (requires message_count == 0).
    bool cig_enabled = true;

    // Channel count of encoder stage s in 1..4.
    int stage_channels(int stage) const { return base_filters << (stage - 1); }
    // Per-axis extent of encoder stage s in 1..4.
    int stage_extent(int stage) const { return patch_size >> stage; }
    void validate() const;
};

struct TrainConfig {
    double initial_lr = 1e-4;
    int max_epoch = 500;
    int iterations_per_epoch = 100;
    int batch_size = 2;
    double weight_decay = 3e-5;
    std::pair<double, double> adam_betas{0.9, 0.999};
    double beta_kl = 0.5;
    uint64_t seed = 0;
    double foreground_probability = 0.5;
    bool augment = true;

    void validate() const;
};

// Learning rate for epoch_id under the poly schedule with exponent 0.9.
double poly_lr(double initial_lr, int epoch_id, int max_epoch);

struct VolumeSample {
    std::string case_id;
    std::map<std::string, Tensor<float>> volumes;  // keyed by modality name
    Tensor<uint8_t> mask;

    const Shape& spatial_shape() const { return mask.shape(); }
    void validate(int num_classes) const;
};

// Maps global class labels to one segmentor's local label space:
// 0 = background, j = targets[j - 1], with the most specific region winning.
class LabelRemap {
public:
    LabelRemap(const RegionSet& regions, std::vector<RegionId> targets);

    int local_label(int global_label) const { return table_.at(static_cast<size_t>(global_label)); }
    Tensor<int32_t> apply(const Tensor<uint8_t>& mask) const;
    const std::vector<RegionId>& targets() const { return targets_; }
    int out_channels() const { return static_cast<int>(targets_.size()) + 1; }

private:
    std::vector<RegionId> targets_;
    std::vector<int> table_;
};

// A full experiment configuration as read from a JSON file.
struct RunConfig {
    std::vector<std::pair<std::string, std::vector<std::string>>> assignment;
    ArchitectureConfig architecture;
    TrainConfig training;
    std::filesystem::path data_root;
    std::filesystem::path output_dir = "run";
    int checkpoint_every = 0;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& json_text);

// Resolves names in a RunConfig against a dataset's modalities and regions.
TaskAssignment resolve_assignment(const std::vector<std::pair<std::string, std::vector<std::string>>>& spec,
                                  const std::vector<ModalityId>& modalities, const RegionSet& regions);

}  // namespace ciml
