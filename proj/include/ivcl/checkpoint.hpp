#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ivcl/optim.hpp"
#include "ivcl/tensor.hpp"

namespace ivcl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
  std::int64_t steps = 0;
  std::vector<Optimizer::Moments> moments;
};

/// Config text, named f32 tensors and optional optimizer moments.
struct Checkpoint {
  std::string config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::optional<OptimizerState> optimizer;
};

/// Little-endian "IVCK" file: version, config, tensor table, optimizer state,
/// then a CRC-32 of everything before it.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
/// DataError on bad magic, version, checksum, truncation or trailing bytes.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

Checkpoint make_checkpoint(const std::string& config, const ParamRefs& params, const Optimizer* optimizer = nullptr);
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> dropped;      ///< in the file, not in the model
  std::vector<std::string> initialized;  ///< in the model, not in the file
};

/// Copies matching tensors into `params` (converted to each target's dtype).
/// Shape mismatches raise DataError naming every offending tensor. Unless
/// `partial`, dropped or uninitialized tensors are errors too.
LoadReport load_parameters(const Checkpoint& checkpoint, const ParamRefs& params, bool partial = false);

}  // namespace ivcl
