#pragma once

#include <memory>
#include <string>

#include "faceaug/train.hpp"

namespace faceaug {

inline constexpr uint32_t kCheckpointVersion = 1;

// Binary bundle: JSON header (config + hash, counters, rng state, tensor
// manifest with names and shapes) followed by raw float32 payload. Loading
// validates the version, the config hash, and every tensor's name and shape
// before reading weights.
void save_checkpoint(const Trainer& trainer, const std::string& path);
std::unique_ptr<Trainer> load_checkpoint(const std::string& path);
TrainConfig checkpoint_config(const std::string& path);

}  // namespace faceaug
