#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "volt/optim.hpp"
#include "volt/params.hpp"

namespace volt {

// File layout (little-endian): magic "VOLTCKPT", u32 version, u32 record
// count, then per record: u32 name length, name bytes, u32 rank (always 2),
// u64 rows, u64 cols, rows * cols f32 values in row-major order.
struct CheckpointRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  bool operator==(const CheckpointRecord&) const = default;
};

inline constexpr std::string_view kEmaPrefix = "ema/";

void write_checkpoint(const std::vector<CheckpointRecord>& records, std::ostream& out);
std::vector<CheckpointRecord> read_checkpoint(std::istream& in);

// Parameters in registration order, followed by the EMA shadow (if any)
// under ema/-prefixed names.
template <typename T>
std::vector<CheckpointRecord> checkpoint_records(const ParamStore<T>& store, const Ema<T>* ema);

// Copies records into `store`. With `prefer_ema` the ema/ copy of each
// parameter is used when present. Missing names or shape mismatches raise
// FormatError.
template <typename T>
void restore_params(const std::vector<CheckpointRecord>& records, ParamStore<T>& store, bool prefer_ema);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store, const Ema<T>* ema);

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store, bool prefer_ema);

} // namespace volt
