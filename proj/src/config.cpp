#include "ciml/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ciml {

using json = nlohmann::ordered_json;

int RegionSet::num_classes() const {
    int mx = 0;
    for (const auto& r : regions) mx = std::max(mx, r.class_index);
    return mx + 1;
}

bool RegionSet::contains(int label, const RegionId& region) const {
    return nested ? label >= region.class_index : label == region.class_index;
}

const RegionId& RegionSet::find(const std::string& name) const {
    for (const auto& r : regions) {
        if (r.name == name) return r;
    }
    throw std::domain_error("unknown region '" + name + "'");
}

std::vector<std::string> RegionSet::validate() const {
    std::vector<std::string> errors;
    std::set<std::string> names;
    std::set<int> classes;
    if (regions.empty()) errors.push_back("region set is empty");
    for (const auto& r : regions) {
        if (r.class_index < 1) errors.push_back("region " + r.name + " has class index < 1 (0 is background)");
        if (!names.insert(r.name).second) errors.push_back("duplicate region name " + r.name);
        if (!classes.insert(r.class_index).second) {
            errors.push_back("duplicate class index " + std::to_string(r.class_index));
        }
    }
    if (!classes.empty() && *classes.rbegin() != static_cast<int>(classes.size())) {
        errors.push_back("region class indices must be contiguous from 1");
    }
    return errors;
}

std::vector<ModalityId> TaskAssignment::modalities() const {
    std::vector<ModalityId> out;
    for (const auto& e : entries) out.push_back(e.primary);
    return out;
}

std::vector<size_t> TaskAssignment::segmentors_for(const RegionId& region) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& t = entries[i].targets;
        if (std::find(t.begin(), t.end(), region) != t.end()) out.push_back(i);
    }
    return out;
}

std::string ValidationReport::summary() const {
    std::string s;
    for (const auto& v : violations) {
        if (!s.empty()) s += "; ";
        s += v;
    }
    return s.empty() ? "ok" : s;
}

ValidationReport validate_assignment(const TaskAssignment& assignment, const std::vector<RegionId>& regions) {
    ValidationReport report;
    std::set<std::string> modality_names;
    std::set<int> modality_indices;
    for (const auto& e : assignment.entries) {
        if (!modality_names.insert(e.primary.name).second) {
            report.violations.push_back("modality " + e.primary.name + " is primary more than once");
        }
        if (!modality_indices.insert(e.primary.index).second) {
            report.violations.push_back("modality index " + std::to_string(e.primary.index) + " is not unique");
        }
        if (e.targets.empty()) report.violations.push_back("modality " + e.primary.name + " has no target regions");
        for (const auto& t : e.targets) {
            if (std::find(regions.begin(), regions.end(), t) == regions.end()) {
                report.violations.push_back("modality " + e.primary.name + " targets unknown region " + t.name);
            }
        }
    }
    if (!modality_indices.empty() &&
        (*modality_indices.begin() != 0 || *modality_indices.rbegin() != static_cast<int>(modality_indices.size()) - 1)) {
        report.violations.push_back("modality indices are not contiguous from 0");
    }
    for (const auto& r : regions) {
        if (assignment.segmentors_for(r).empty()) report.violations.push_back("region " + r.name + " uncovered");
    }
    return report;
}

std::string to_string(NormKind kind) { return kind == NormKind::batch ? "batch" : "instance"; }

NormKind norm_kind_from_string(const std::string& s) {
    if (s == "batch") return NormKind::batch;
    if (s == "instance") return NormKind::instance;
    throw ConfigError("norm must be 'batch' or 'instance', got '" + s + "'");
}

void ArchitectureConfig::validate() const {
    if (spatial_dims != 2 && spatial_dims != 3) throw std::domain_error("spatial_dims must be 2 or 3");
    if (patch_size < 16 || patch_size % 16 != 0) {
        throw std::domain_error("patch_size must be a positive multiple of 16, got " + std::to_string(patch_size));
    }
    if (base_filters < 1) throw std::domain_error("base_filters must be >= 1");
    if (message_count < 0) throw std::domain_error("message_count must be >= 0");
    if (out_channels < 2) throw std::domain_error("out_channels must be >= 2");
    if (in_channels < 1) throw std::domain_error("in_channels must be >= 1");
    if (!cig_enabled && message_count != 0) {
        throw std::domain_error("message_count must be 0 when the information gate is disabled");
    }
}

void TrainConfig::validate() const {
    if (!(initial_lr > 0)) throw std::domain_error("initial_lr must be positive");
    if (max_epoch < 1) throw std::domain_error("max_epoch must be positive");
    if (iterations_per_epoch < 1) throw std::domain_error("iterations_per_epoch must be positive");
    if (batch_size < 1) throw std::domain_error("batch_size must be positive");
    if (weight_decay < 0) throw std::domain_error("weight_decay must be non-negative");
    auto in_unit = [](double b) { return b > 0 && b < 1; };
    if (!in_unit(adam_betas.first) || !in_unit(adam_betas.second)) {
        throw std::domain_error("adam betas must lie in (0, 1)");
    }
    if (beta_kl < 0) throw std::domain_error("beta_kl must be non-negative");
    if (foreground_probability < 0 || foreground_probability > 1) {
        throw std::domain_error("foreground_probability must lie in [0, 1]");
    }
}

double poly_lr(double initial_lr, int epoch_id, int max_epoch) {
    if (max_epoch <= 0) throw std::domain_error("poly_lr: max_epoch must be positive");
    if (epoch_id < 0 || epoch_id > max_epoch) {
        throw std::domain_error("poly_lr: epoch_id " + std::to_string(epoch_id) + " outside [0, " +
                                std::to_string(max_epoch) + "]");
    }
    return initial_lr * std::pow(1.0 - static_cast<double>(epoch_id) / max_epoch, 0.9);
}

void VolumeSample::validate(int num_classes) const {
    for (const auto& [name, vol] : volumes) {
        if (vol.shape() != mask.shape()) {
            throw std::domain_error("case " + case_id + ": modality " + name + " shape " + shape_str(vol.shape()) +
                                    " differs from mask shape " + shape_str(mask.shape()));
        }
    }
    for (uint8_t v : mask.values()) {
        if (v >= num_classes) {
            throw std::domain_error("case " + case_id + ": mask value " + std::to_string(v) + " >= " +
                                    std::to_string(num_classes));
        }
    }
}

LabelRemap::LabelRemap(const RegionSet& regions, std::vector<RegionId> targets) : targets_(std::move(targets)) {
    std::sort(targets_.begin(), targets_.end(),
              [](const RegionId& a, const RegionId& b) { return a.class_index < b.class_index; });
    const int classes = regions.num_classes();
    table_.assign(static_cast<size_t>(classes), 0);
    for (int label = 0; label < classes; ++label) {
        for (size_t j = 0; j < targets_.size(); ++j) {
            if (label > 0 && regions.contains(label, targets_[j])) table_[static_cast<size_t>(label)] = static_cast<int>(j) + 1;
        }
    }
}

Tensor<int32_t> LabelRemap::apply(const Tensor<uint8_t>& mask) const {
    Tensor<int32_t> out(mask.shape());
    for (int64_t i = 0; i < mask.numel(); ++i) out[i] = local_label(mask[i]);
    return out;
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!obj.is_object()) throw ConfigError("section [" + section + "] must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
            throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
        }
    }
}

template <typename V>
void read_opt(const json& obj, const char* key, V& out, const std::string& section) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<V>();
    } catch (const json::exception& e) {
        throw ConfigError("[" + section + "]." + key + ": " + e.what());
    }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(root, {"assignment", "architecture", "training", "data", "output"}, "root");
    for (const char* required : {"assignment", "architecture", "training", "data"}) {
        if (!root.contains(required)) throw ConfigError(std::string("missing section [") + required + "]");
    }
    RunConfig cfg;

    const json& assignment = root.at("assignment");
    if (!assignment.is_object() || assignment.empty()) throw ConfigError("[assignment] must be a non-empty object");
    for (const auto& [modality, regions] : assignment.items()) {
        if (!regions.is_array()) throw ConfigError("[assignment]." + modality + " must be a list of region names");
        cfg.assignment.emplace_back(modality, regions.get<std::vector<std::string>>());
    }

    const json& arch = root.at("architecture");
    reject_unknown(arch, {"patch_size", "base_filters", "spatial_dims", "norm", "cig", "in_channels"}, "architecture");
    read_opt(arch, "patch_size", cfg.architecture.patch_size, "architecture");
    read_opt(arch, "base_filters", cfg.architecture.base_filters, "architecture");
    read_opt(arch, "spatial_dims", cfg.architecture.spatial_dims, "architecture");
    read_opt(arch, "in_channels", cfg.architecture.in_channels, "architecture");
    read_opt(arch, "cig", cfg.architecture.cig_enabled, "architecture");
    if (arch.contains("norm")) cfg.architecture.norm_kind = norm_kind_from_string(arch.at("norm").get<std::string>());

    const json& tr = root.at("training");
    reject_unknown(tr,
                   {"initial_lr", "max_epoch", "iterations_per_epoch", "batch_size", "weight_decay", "adam_betas",
                    "beta_kl", "seed", "foreground_probability", "augment"},
                   "training");
    auto& t = cfg.training;
    read_opt(tr, "initial_lr", t.initial_lr, "training");
    read_opt(tr, "max_epoch", t.max_epoch, "training");
    read_opt(tr, "iterations_per_epoch", t.iterations_per_epoch, "training");
    read_opt(tr, "batch_size", t.batch_size, "training");
    read_opt(tr, "weight_decay", t.weight_decay, "training");
    read_opt(tr, "beta_kl", t.beta_kl, "training");
    read_opt(tr, "seed", t.seed, "training");
    read_opt(tr, "foreground_probability", t.foreground_probability, "training");
    read_opt(tr, "augment", t.augment, "training");
    if (tr.contains("adam_betas")) {
        auto b = tr.at("adam_betas").get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("[training].adam_betas must have two entries");
        t.adam_betas = {b[0], b[1]};
    }

    const json& data = root.at("data");
    reject_unknown(data, {"root"}, "data");
    if (!data.contains("root")) throw ConfigError("[data].root is required");
    cfg.data_root = data.at("root").get<std::string>();

    if (root.contains("output")) {
        const json& out = root.at("output");
        reject_unknown(out, {"dir", "checkpoint_every"}, "output");
        if (out.contains("dir")) cfg.output_dir = out.at("dir").get<std::string>();
        read_opt(out, "checkpoint_every", cfg.checkpoint_every, "output");
    }

    try {
        cfg.training.validate();
    } catch (const std::domain_error& e) {
        throw ConfigError(std::string("[training] ") + e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg = parse_run_config(ss.str());
    if (cfg.data_root.is_relative()) cfg.data_root = path.parent_path() / cfg.data_root;
    return cfg;
}

TaskAssignment resolve_assignment(const std::vector<std::pair<std::string, std::vector<std::string>>>& spec,
                                  const std::vector<ModalityId>& modalities, const RegionSet& regions) {
    TaskAssignment out;
    for (const auto& [modality, region_names] : spec) {
        auto it = std::find_if(modalities.begin(), modalities.end(),
                               [&](const ModalityId& m) { return m.name == modality; });
        if (it == modalities.end()) throw ConfigError("assignment names unknown modality '" + modality + "'");
        AssignmentEntry entry{*it, {}};
        for (const auto& r : region_names) {
            try {
                entry.targets.push_back(regions.find(r));
            } catch (const std::domain_error& e) {
                throw ConfigError(std::string("assignment for ") + modality + ": " + e.what());
            }
        }
        out.entries.push_back(std::move(entry));
    }
    // Segmentor order follows modality index so message order is stable.
    std::sort(out.entries.begin(), out.entries.end(),
              [](const AssignmentEntry& a, const AssignmentEntry& b) { return a.primary.index < b.primary.index; });
    return out;
}

}  // namespace ciml
