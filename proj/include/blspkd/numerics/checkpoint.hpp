#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "blspkd/numerics/tape.hpp"

namespace blspkd::num {

// Named-tensor checkpoint container.
//
// Layout (all integers little-endian):
//   magic    8 bytes  "BLSPKDCK"
//   version  u32      kCheckpointVersion
//   count    u32      number of records
//   record × count:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u64 × rank
//     dtype    u8   (0 = f32)
//     payload  product(dims) × 4 bytes, row-major f32
//
// Records are written in the order given; names must be unique.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

std::string serialize_checkpoint(const std::vector<NamedTensor>& records);
std::vector<NamedTensor> deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& records);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Copies parameter values into records (converted to f32).
template <class T>
std::vector<NamedTensor> to_records(const std::vector<Parameter<T>*>& params);

// Loads every parameter whose name has a record. Returns how many were
// loaded; shape mismatches throw CheckpointError. With `require_all`,
// a missing record also throws.
template <class T>
std::size_t load_into(const std::vector<NamedTensor>& records,
                      const std::vector<Parameter<T>*>& params, bool require_all = true);

// 64-bit FNV-1a, rendered as 16 hex digits by hash_hex.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hash_hex(std::uint64_t h);

// Hash of parameter names, shapes and values; detects any mutation.
template <class T>
std::uint64_t checksum(const std::vector<Parameter<T>*>& params);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace blspkd::num
