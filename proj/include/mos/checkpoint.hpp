#pragma once

// Binary checkpoint container:
//   "MOSCKPT\0" | u32 version | u64 header length | JSON header | payload
// The header carries the config echo, counters, RNG state and a table of
// (name, rows, cols) entries; the payload stores the parameter arrays and
// then the optimizer buffers as little-endian doubles in table order.

#include "mos/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mos {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Mat value;
};

struct Checkpoint {
  std::string config_echo;
  int epoch = 0;
  long step = 0;
  std::string rng_state;
  std::vector<NamedArray> parameters;
  std::vector<Mat> momentum;  // empty or aligned with `parameters`
};

/// Writes to a temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws FormatError on a bad magic, version or truncated payload.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies stored arrays into `params` by name; every parameter must be
/// present with the same shape.
void load_parameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params);

}  // namespace mos
