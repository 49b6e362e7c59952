#pragma once

#include <string>

#include "icl/params.hpp"

namespace icl::net {

// Binary layout: "ICLB", u32 version, u32 tensor count, then per tensor
// u16 name length, name bytes, u8 rank, rank x u32 dims, f32 data. All
// integers and floats little-endian.
inline constexpr uint32_t kCheckpointVersion = 1;

std::string serialize(const ParamSet<float>& params);
ParamSet<float> deserialize(const std::string& bytes);

// Writes through a temporary file and rename so readers never see a partial
// checkpoint. When config_json is non-empty it is written to <path>.json.
void save_checkpoint(const std::string& path, const ParamSet<float>& params, const std::string& config_json = "");
ParamSet<float> load_checkpoint(const std::string& path);
std::string config_echo_path(const std::string& checkpoint_path);

// Atomic whole-file write used for checkpoints and reports.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace icl::net
