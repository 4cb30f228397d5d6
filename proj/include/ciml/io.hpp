#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciml/config.hpp"
#include "ciml/tensor.hpp"

namespace ciml::io {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Writes to a sibling temp file and renames it over `path`.
void atomic_write(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);
uint32_t crc32_of(const void* data, size_t size);

// Raw little-endian payload plus a JSON sidecar at `<path>.json`:
// {"shape": [...], "dtype": "float32"|"uint8", "axis_order": [...], "crc32": n}.
void write_tensor(const fs::path& path, const Tensor<float>& t);
void write_tensor(const fs::path& path, const Tensor<uint8_t>& t);
Tensor<float> read_tensor_f32(const fs::path& path);
Tensor<uint8_t> read_tensor_u8(const fs::path& path);

struct CaseEntry {
    std::string case_id;
    std::vector<std::pair<std::string, std::string>> volumes;  // modality name -> path relative to root
    std::string mask;
};

struct DatasetManifest {
    fs::path root;
    std::vector<ModalityId> modalities;
    RegionSet regions;
    std::vector<double> spacing;
    std::vector<CaseEntry> cases;

    // Checks names, indices and that every file exists with the declared shape and dtype.
    ValidationReport validate() const;
};

DatasetManifest read_manifest(const fs::path& root);
void write_manifest(const DatasetManifest& manifest);

// Stores a case under root/cases/<case_id>/ and returns its entry.
CaseEntry write_case(const VolumeSample& sample, const fs::path& root);
VolumeSample read_case(const DatasetManifest& manifest, const CaseEntry& entry);
std::vector<VolumeSample> load_dataset(const DatasetManifest& manifest);

}  // namespace ciml::io
