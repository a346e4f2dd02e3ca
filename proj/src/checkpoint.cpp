#include "volt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "binary_io.hpp"
#include "volt/error.hpp"

namespace volt {

namespace {

constexpr char kMagic[8] = {'V', 'O', 'L', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxName = 4096;

template <typename T>
CheckpointRecord to_record(std::string name, const Matrix<T>& m) {
  CheckpointRecord r{std::move(name), m.rows, m.cols, {}};
  r.data.reserve(m.size());
  for (T v : m.data) r.data.push_back(static_cast<float>(v));
  return r;
}

} // namespace

void write_checkpoint(const std::vector<CheckpointRecord>& records, std::ostream& out) {
  detail::ByteWriter w(out);
  w.bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.data.size() != r.rows * r.cols) throw ShapeError("checkpoint record " + r.name + " payload size mismatch");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.put<std::uint32_t>(2);
    w.put<std::uint64_t>(r.rows);
    w.put<std::uint64_t>(r.cols);
    for (float v : r.data) w.put<float>(v);
  }
  if (!out) throw FormatError("failed writing checkpoint");
}

std::vector<CheckpointRecord> read_checkpoint(std::istream& in) {
  detail::ByteReader r(in, "checkpoint");
  char magic[8];
  r.bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("bad magic, not a VOLTCKPT file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("record count");
  std::vector<CheckpointRecord> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    const auto len = r.get<std::uint32_t>("name length");
    if (len == 0 || len > kMaxName) throw FormatError("bad record name length " + std::to_string(len));
    rec.name.resize(len);
    r.bytes(rec.name.data(), len, "record name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank != 2) throw FormatError("record " + rec.name + " has unsupported rank " + std::to_string(rank));
    rec.rows = r.get<std::uint64_t>("rows");
    rec.cols = r.get<std::uint64_t>("cols");
    if (rec.cols != 0 && rec.rows > (std::uint64_t{1} << 40) / rec.cols) {
      throw FormatError("record " + rec.name + " is implausibly large");
    }
    rec.data.resize(rec.rows * rec.cols);
    for (auto& v : rec.data) v = r.get<float>("payload");
    records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
  return records;
}

template <typename T>
std::vector<CheckpointRecord> checkpoint_records(const ParamStore<T>& store, const Ema<T>* ema) {
  std::vector<CheckpointRecord> out;
  for (const auto& p : store) out.push_back(to_record(p.name, p.value));
  if (ema) {
    std::size_t i = 0;
    for (const auto& p : store) out.push_back(to_record(std::string(kEmaPrefix) + p.name, ema->shadow()[i++]));
  }
  return out;
}

template <typename T>
void restore_params(const std::vector<CheckpointRecord>& records, ParamStore<T>& store, bool prefer_ema) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (auto& p : store) {
    const CheckpointRecord* rec = nullptr;
    if (prefer_ema) {
      auto it = by_name.find(std::string(kEmaPrefix) + p.name);
      if (it != by_name.end()) rec = it->second;
    }
    if (!rec) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + p.name);
      rec = it->second;
    }
    if (rec->rows != p.value.rows || rec->cols != p.value.cols) {
      throw FormatError("checkpoint shape mismatch for " + p.name + ": " + std::to_string(rec->rows) + "x" +
                        std::to_string(rec->cols) + " vs " + std::to_string(p.value.rows) + "x" +
                        std::to_string(p.value.cols));
    }
    for (std::size_t i = 0; i < rec->data.size(); ++i) p.value.data[i] = static_cast<T>(rec->data[i]);
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store, const Ema<T>* ema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(checkpoint_records(store, ema), out);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store, bool prefer_ema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  restore_params(read_checkpoint(in), store, prefer_ema);
}

#define VOLT_INSTANTIATE_CHECKPOINT(T)                                                              \
  template std::vector<CheckpointRecord> checkpoint_records<T>(const ParamStore<T>&, const Ema<T>*); \
  template void restore_params<T>(const std::vector<CheckpointRecord>&, ParamStore<T>&, bool);      \
  template void save_checkpoint<T>(const std::filesystem::path&, const ParamStore<T>&, const Ema<T>*); \
  template void load_checkpoint<T>(const std::filesystem::path&, ParamStore<T>&, bool);

VOLT_INSTANTIATE_CHECKPOINT(float)
VOLT_INSTANTIATE_CHECKPOINT(double)

} // namespace volt
