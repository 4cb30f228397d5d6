#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciml/config.hpp"
#include "ciml/training.hpp"

namespace ciml::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kUsage = 64 };

inline constexpr const char* kErrorPrefix = "CIML-ERR: ";

class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Parses and runs one command. Errors are reported on `err` as a single line
// starting with kErrorPrefix.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, char** argv);

struct TrainingRun {
    std::unique_ptr<train::CimlModel<float>> model;
    std::vector<std::filesystem::path> checkpoints;
    int epochs = 0;
};

// Full training run for a RunConfig: validates the dataset, trains for
// max_epoch epochs, writes <output>/train_log.jsonl and checkpoints
// (every checkpoint_every epochs and <output>/final.ckpt).
TrainingRun run_training(const RunConfig& cfg, std::ostream& log);

// Loads a model saved by run_training.
std::unique_ptr<train::CimlModel<float>> load_model(const std::filesystem::path& checkpoint);

}  // namespace ciml::cli
