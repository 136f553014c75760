#pragma once

#include <cstdint>
#include <string>

#include "ctnet/model.hpp"

namespace ctnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainStateIo {
  std::int64_t t = 0;      // optimizer step counter
  int epoch = 0;           // completed epochs
  std::uint64_t seed = 0;  // master run seed
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig config;
  ParamMap params;
  ParamMap adam_m;  // empty outside training
  ParamMap adam_v;
  TrainStateIo train_state;
  std::string build_id;
};

// Binary layout, little-endian throughout:
//   "CTNT" | u32 version | u32 json_len | json (config, train state,
//   provenance) | records | u32 crc32
// Each record is u32 name_len | name | u32 rank | u32 dims[rank] | f32
// payload. Optimizer moments are stored as records named "adam.m.<param>" /
// "adam.v.<param>". The CRC covers every preceding byte. Parameters are
// rounded to 32-bit floats on save; load reproduces them bit-exactly at that
// precision.
void save_checkpoint(const Checkpoint& ck, const std::string& path);

// Throws IoError for bad magic, unknown version or CRC mismatch (truncation
// lands there too), ConfigError when the stored parameters do not match the
// stored config.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctnet
