#include "blspkd/numerics/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace blspkd::num {

namespace {

constexpr char kMagic[8] = {'B', 'L', 'S', 'P', 'K', 'D', 'C', 'K'};

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const std::vector<NamedTensor>& records) {
  std::set<std::string> seen;
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (!seen.insert(r.name).second) throw CheckpointError("duplicate record name: " + r.name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.append(r.name);
    put_le<std::uint32_t>(out, 2);
    put_le<std::uint64_t>(out, r.value.rows());
    put_le<std::uint64_t>(out, r.value.cols());
    out.push_back(0);
    for (float v : r.value.storage()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> deserialize_checkpoint(std::string_view bytes) {
  Reader rd(bytes);
  if (rd.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = rd.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const auto nlen = rd.get<std::uint32_t>();
    nt.name = std::string(rd.take(nlen));
    const auto rank = rd.get<std::uint32_t>();
    if (rank == 0 || rank > 2) throw CheckpointError("unsupported rank in record " + nt.name);
    std::uint64_t rows = rd.get<std::uint64_t>();
    std::uint64_t cols = rank == 2 ? rd.get<std::uint64_t>() : rows;
    if (rank == 1) rows = 1;
    const auto dtype = rd.get<std::uint8_t>();
    if (dtype != 0) throw CheckpointError("unsupported dtype in record " + nt.name);
    std::vector<float> data(rows * cols);
    for (auto& v : data) v = std::bit_cast<float>(rd.get<std::uint32_t>());
    nt.value = Tensor<float>(rows, cols, std::move(data));
    out.push_back(std::move(nt));
  }
  if (!rd.done()) throw CheckpointError("trailing bytes after last record");
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& records) {
  write_file(path, serialize_checkpoint(records));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

template <class T>
std::vector<NamedTensor> to_records(const std::vector<Parameter<T>*>& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back({p->name, p->value.template cast<float>()});
  return out;
}

template <class T>
std::size_t load_into(const std::vector<NamedTensor>& records,
                      const std::vector<Parameter<T>*>& params, bool require_all) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  std::size_t loaded = 0;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      if (require_all) throw CheckpointError("checkpoint lacks record " + p->name);
      continue;
    }
    const auto& v = it->second->value;
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
      throw CheckpointError("shape mismatch for " + p->name + ": " + shape_str(v) + " vs " +
                            shape_str(p->value));
    }
    p->value = v.template cast<T>();
    ++loaded;
  }
  return loaded;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = kHex[h & 0xF];
    h >>= 4;
  }
  return s;
}

template <class T>
std::uint64_t checksum(const std::vector<Parameter<T>*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params) {
    h = fnv1a(p->name, h);
    const auto& v = p->value;
    const std::uint64_t dims[2] = {v.rows(), v.cols()};
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(dims), sizeof(dims)), h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T)), h);
  }
  return h;
}

template std::vector<NamedTensor> to_records(const std::vector<Parameter<float>*>&);
template std::vector<NamedTensor> to_records(const std::vector<Parameter<double>*>&);
template std::size_t load_into(const std::vector<NamedTensor>&,
                               const std::vector<Parameter<float>*>&, bool);
template std::size_t load_into(const std::vector<NamedTensor>&,
                               const std::vector<Parameter<double>*>&, bool);
template std::uint64_t checksum(const std::vector<Parameter<float>*>&);
template std::uint64_t checksum(const std::vector<Parameter<double>*>&);

}  // namespace blspkd::num
