#include "dmue/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dmue {

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'M', 'U', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint64_t kMaxElements = 1ULL << 32;

template <class U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw CheckpointFormatError(std::string("checkpoint truncated while reading ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.kind));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.num_classes));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.feature_dim));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.trunk_width));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config.head_width));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_le<std::uint32_t>(out, 2);
    put_le<std::uint64_t>(out, p.value.rows());
    put_le<std::uint64_t>(out, p.value.cols());
    for (double v : p.value.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw CheckpointFormatError("not a checkpoint file (bad magic string)");
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto kind = get_le<std::uint32_t>(in, "kind");
  if (kind > 1) throw CheckpointFormatError("unknown checkpoint kind " + std::to_string(kind));
  ckpt.kind = static_cast<CheckpointKind>(kind);
  ckpt.config.num_classes = static_cast<int>(get_le<std::uint32_t>(in, "class count"));
  ckpt.config.feature_dim = static_cast<int>(get_le<std::uint32_t>(in, "feature dimension"));
  ckpt.config.trunk_width = static_cast<int>(get_le<std::uint32_t>(in, "trunk width"));
  ckpt.config.head_width = static_cast<int>(get_le<std::uint32_t>(in, "head width"));
  const auto count = get_le<std::uint32_t>(in, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = get_le<std::uint32_t>(in, "name length");
    if (name_len > 4096) throw CheckpointFormatError("implausible tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw CheckpointFormatError("checkpoint truncated while reading a tensor name");
    const auto rank = get_le<std::uint32_t>(in, "rank");
    if (rank != 2) throw CheckpointFormatError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    const auto rows = get_le<std::uint64_t>(in, "dims");
    const auto cols = get_le<std::uint64_t>(in, "dims");
    if (rows == 0 || cols == 0 || rows * cols > kMaxElements) {
      throw CheckpointFormatError("tensor '" + name + "' has invalid dimensions");
    }
    std::vector<double> values(rows * cols);
    for (auto& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in, "tensor values"));
    ckpt.params.push_back({name, Tensor::from({rows, cols}, std::move(values), true)});
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointFormatError("trailing bytes after checkpoint");
  return ckpt;
}

Checkpoint to_checkpoint(const DmueModel& model) {
  return Checkpoint{CheckpointKind::Full, model.branches.config(), model.parameters()};
}

Checkpoint to_checkpoint(const TargetModel& model) {
  return Checkpoint{CheckpointKind::Stripped, model.config(), model.parameters()};
}

namespace {
void save(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_checkpoint(out, ckpt);
  if (!out) throw std::runtime_error("write failed: " + path);
}
}  // namespace

void save_checkpoint(const std::string& path, const DmueModel& model) { save(path, to_checkpoint(model)); }
void save_checkpoint(const std::string& path, const TargetModel& model) { save(path, to_checkpoint(model)); }

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_checkpoint(in);
}

DmueModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind == CheckpointKind::Stripped) {
    throw MissingHeadsError("stripped checkpoint has no auxiliary heads or uncertainty module");
  }
  return DmueModel{BranchSet::from_parameters(ckpt.config, ckpt.params),
                   UncertaintyModule::from_parameters(ckpt.config.num_classes, ckpt.params)};
}

TargetModel target_from_checkpoint(const Checkpoint& ckpt) {
  return TargetModel::from_parameters(ckpt.config, ckpt.params);
}

DmueModel load_full_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }
TargetModel load_target_model(const std::string& path) { return target_from_checkpoint(load_checkpoint(path)); }

}  // namespace dmue
