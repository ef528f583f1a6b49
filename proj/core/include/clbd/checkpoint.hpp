#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "clbd/model.hpp"

namespace clbd {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "CLBD" | u32 version | u64 header length | JSON header | payload.
// The payload is little-endian f64, each trunk layer (weights row-major, then
// bias) followed by each head in the same way.
struct Checkpoint {
  MlpModel model;
  std::map<std::string, std::string> metadata;
};

void save_checkpoint(const std::filesystem::path& path, const MlpModel& model,
                     const std::map<std::string, std::string>& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const MlpModel& model, const std::map<std::string, std::string>& metadata);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace clbd
