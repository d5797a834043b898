#pragma once

// Binary checkpoint layout (all integers and floats little-endian):
//
//   magic        8 bytes  "DMUECKPT"
//   version      u32      1
//   kind         u32      0 = full training model, 1 = stripped target model
//   C, d         u32 x 2
//   trunk_width  u32
//   head_width   u32
//   count        u32      number of tensors
//   count times:
//     name_len u32, name bytes, rank u32, dims u64 x rank, values f64 x prod(dims)

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmue/model.hpp"

namespace dmue {

class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CheckpointKind : std::uint32_t { Full = 0, Stripped = 1 };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::Full;
  ModelConfig config;
  std::vector<NamedParam> params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);

Checkpoint to_checkpoint(const DmueModel& model);
Checkpoint to_checkpoint(const TargetModel& model);

void save_checkpoint(const std::string& path, const DmueModel& model);
void save_checkpoint(const std::string& path, const TargetModel& model);
Checkpoint load_checkpoint(const std::string& path);

/// Throws MissingHeadsError for a stripped checkpoint.
DmueModel load_full_model(const std::string& path);
/// Accepts full or stripped checkpoints.
TargetModel load_target_model(const std::string& path);

DmueModel model_from_checkpoint(const Checkpoint& ckpt);
TargetModel target_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dmue
