#pragma once

// Flat binary checkpoint container.
//
//   magic    "SAFECKPT" (8 bytes)
//   version  u32 (currently 1)
//   config   u64 n_layers, d_model, n_heads, d_ff, vocab_size, max_seq,
//            n_classes, lora_rank; f64 lora_alpha, lora_dropout
//   adapters u32 count, then per adapter: u8 status (0 active, 1 frozen),
//            i32 freeze_epoch (-1 when unset)
//   manifest u32 count, then per tensor: u32 name length, name bytes,
//            u32 rank, u64 extents..., u64 byte offset into the data section
//   data     f64 buffers, back to back
//
// All integers and floats are little-endian. A snapshot is the same container
// holding only a subset of the parameters.

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "safeft/model.hpp"

namespace safeft {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  ModelConfig config;
  std::vector<AdapterState> adapters;
  std::map<std::string, Tensor> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serializes the model. With `names` empty every parameter is written.
std::vector<unsigned char> encode_checkpoint(const Model& model, const std::vector<std::string>& names = {});
CheckpointData decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path, const std::vector<std::string>& names = {});
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Rebuilds a model from a full checkpoint.
Model load_model(const std::filesystem::path& path);

/// Overwrites the model's tensors and adapter states with the checkpoint's.
/// Rejects a checkpoint written for a different model configuration.
void apply_checkpoint(Model& model, const CheckpointData& data);

/// Bytes of one parameter as stored in a checkpoint (little-endian f64).
std::vector<unsigned char> tensor_bytes(const Tensor& t);

}  // namespace safeft
