#pragma once

#include <filesystem>
#include <string>

#include "ciml/nn.hpp"

namespace ciml {

// Single-file archive: magic, JSON manifest (caller config plus a tensor index)
// and raw little-endian float32 data for every parameter and buffer.
void save_checkpoint(const std::filesystem::path& path, const nn::ParameterSet<float>& params,
                     const std::string& config_json);

// Returns the stored config JSON without touching tensors.
std::string read_checkpoint_config(const std::filesystem::path& path);

// Copies stored values into `params`. Every parameter and buffer must be
// present with a matching shape; extra stored tensors are an error too.
void load_checkpoint(const std::filesystem::path& path, nn::ParameterSet<float>& params);

}  // namespace ciml
