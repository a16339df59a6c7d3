#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "shuffle_former/model.hpp"

namespace shuffle_former {

// Binary tensor container shared by checkpoints and tensor files.
// All integers little-endian.
//
//   magic        4 bytes  "SFTC"
//   version      u32      kCheckpointVersion
//   echo_len     u32      length of the config echo
//   echo         bytes    UTF-8 key=value text (model config, run config)
//   count        u32      number of entries
//   entries      count x { name_len u16, name bytes, dtype u8 (1 = float32,
//                2 = float64), rank u8, dims u64[rank], offset u64 }
//   payload_len  u64
//   payload      raw little-endian values; entry i starts at offset_i
//
// Entries are laid out in table order with no gaps, so a container that was
// produced by this writer re-encodes to identical bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { float32 = 1, float64 = 2 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::float32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  template <typename T>
  static CheckpointEntry from_tensor(std::string name, const Tensor<T>& t, DType dtype);
  template <typename T>
  std::vector<T> values() const;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_echo;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters then buffers of the model, stored as float32. The echo holds
// the model config followed by `extra_echo` (comment lines are fine).
template <typename T>
Checkpoint make_checkpoint(const ShuffleTransformer<T>& model, const std::string& extra_echo = {});

// Copies every entry into the model after checking that each model tensor
// appears exactly once with the expected shape and nothing else is present.
template <typename T>
void restore_checkpoint(ShuffleTransformer<T>& model, const Checkpoint& ckpt);

// Rebuilds the model from the config echo, then restores it.
template <typename T>
ShuffleTransformer<T> model_from_checkpoint(const Checkpoint& ckpt);

// Single named tensor in the same container.
template <typename T>
void save_tensor_file(const std::filesystem::path& path, const std::string& name, const Tensor<T>& t,
                      const std::string& echo = {});
template <typename T>
Tensor<T> load_tensor_file(const std::filesystem::path& path, std::string* name = nullptr,
                           std::string* echo = nullptr);

}  // namespace shuffle_former
