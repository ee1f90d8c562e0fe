#include "wassalign/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>

#include "wassalign/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace wassalign::container {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr uint16_t kVersion = 1;
constexpr uint64_t kMaxRank = 8;
constexpr uint64_t kMaxBytes = uint64_t(1) << 40;  // refuse absurd payloads

[[noreturn]] void fail(const std::string& origin, uint64_t offset, const std::string& what) {
  throw IoError("container: " + origin + ": " + what + " (at byte " + std::to_string(offset) +
                ")");
}

struct Reader {
  std::istream& in;
  const std::string& origin;
  uint64_t offset = 0;
  uint64_t total = 0;  // stream length, to validate sizes before allocating

  void measure() {
    std::streampos cur = in.tellg();
    in.seekg(0, std::ios::end);
    std::streampos end = in.tellg();
    in.seekg(cur);
    total = end >= cur ? static_cast<uint64_t>(end - cur) : 0;
  }

  void claim(uint64_t n, const char* what) {
    if (offset + n > total)
      fail(origin, offset,
           std::string(what) + " claims " + std::to_string(n) + " bytes but only " +
               std::to_string(total - offset) + " remain");
  }

  void read_exact(void* dst, uint64_t n, const char* what) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<uint64_t>(in.gcount()) != n)
      fail(origin, offset, std::string("truncated while reading ") + what);
    offset += n;
  }

  uint8_t u8(const char* what) {
    uint8_t v;
    read_exact(&v, 1, what);
    return v;
  }
  uint16_t u16(const char* what) {
    uint16_t v;
    read_exact(&v, 2, what);
    return v;
  }
  uint32_t u32(const char* what) {
    uint32_t v;
    read_exact(&v, 4, what);
    return v;
  }
  uint64_t u64(const char* what) {
    uint64_t v;
    read_exact(&v, 8, what);
    return v;
  }
};

void append(std::vector<uint8_t>& out, const void* src, size_t n) {
  const auto* p = static_cast<const uint8_t*>(src);
  out.insert(out.end(), p, p + n);
}

}  // namespace

const char* entry_type_name(EntryType t) {
  switch (t) {
    case EntryType::F32: return "f32";
    case EntryType::F64: return "f64";
    case EntryType::U8: return "u8";
    case EntryType::I64: return "i64";
  }
  return "?";
}

size_t entry_type_size(EntryType t) {
  switch (t) {
    case EntryType::F32: return 4;
    case EntryType::F64: return 8;
    case EntryType::U8: return 1;
    case EntryType::I64: return 8;
  }
  return 0;
}

int64_t Entry::numel() const {
  uint64_t n = 1;
  for (uint64_t e : extents) n *= e;
  return static_cast<int64_t>(n);
}

bool File::has(const std::string& name) const {
  for (const auto& [n, e] : entries)
    if (n == name) return true;
  return false;
}

const Entry& File::get(const std::string& name) const {
  for (const auto& [n, e] : entries)
    if (n == name) return e;
  throw IoError("container: missing entry '" + name + "'");
}

void File::add(std::string name, Entry e) {
  if (name.empty()) throw ValueError("container: entry name must be non-empty");
  if (name.size() > std::numeric_limits<uint16_t>::max())
    throw ValueError("container: entry name too long");
  if (has(name)) throw ValueError("container: duplicate entry '" + name + "'");
  entries.emplace_back(std::move(name), std::move(e));
}

Entry from_tensor(const Tensor& t) {
  Entry e;
  e.type = t.dtype() == DType::Float32 ? EntryType::F32 : EntryType::F64;
  for (int64_t d : t.shape()) e.extents.push_back(static_cast<uint64_t>(d));
  if (t.dtype() == DType::Float32) {
    auto s = t.data<float>();
    e.bytes.resize(s.size() * 4);
    std::memcpy(e.bytes.data(), s.data(), e.bytes.size());
  } else {
    auto s = t.data<double>();
    e.bytes.resize(s.size() * 8);
    std::memcpy(e.bytes.data(), s.data(), e.bytes.size());
  }
  return e;
}

Tensor to_tensor(const Entry& e) {
  if (e.type != EntryType::F32 && e.type != EntryType::F64)
    throw IoError(std::string("container: entry of type ") + entry_type_name(e.type) +
                  " cannot be loaded as a float tensor");
  Shape shape;
  for (uint64_t d : e.extents) shape.push_back(static_cast<int64_t>(d));
  if (e.type == EntryType::F32) {
    std::vector<float> v(static_cast<size_t>(e.numel()));
    std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
    return Tensor::from(std::move(v), std::move(shape));
  }
  std::vector<double> v(static_cast<size_t>(e.numel()));
  std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
  return Tensor::from(std::move(v), std::move(shape));
}

Entry from_i64(const std::vector<int64_t>& v) {
  Entry e;
  e.type = EntryType::I64;
  e.extents.push_back(v.size());
  e.bytes.resize(v.size() * 8);
  std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
  return e;
}

std::vector<int64_t> to_i64(const Entry& e) {
  if (e.type != EntryType::I64)
    throw IoError(std::string("container: entry of type ") + entry_type_name(e.type) +
                  " cannot be loaded as i64");
  std::vector<int64_t> v(static_cast<size_t>(e.numel()));
  std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
  return v;
}

Entry from_u8(const std::vector<uint8_t>& v) {
  Entry e;
  e.type = EntryType::U8;
  e.extents.push_back(v.size());
  e.bytes = v;
  return e;
}

void write_file(const File& f, const std::string& path) {
  std::vector<uint8_t> out;
  append(out, kMagic, 4);
  append(out, &kVersion, 2);
  if (f.entries.size() > std::numeric_limits<uint32_t>::max())
    throw ValueError("container: too many entries");
  uint32_t count = static_cast<uint32_t>(f.entries.size());
  append(out, &count, 4);
  for (const auto& [name, e] : f.entries) {
    uint16_t nl = static_cast<uint16_t>(name.size());
    append(out, &nl, 2);
    append(out, name.data(), name.size());
    uint8_t ty = static_cast<uint8_t>(e.type);
    append(out, &ty, 1);
    if (e.extents.size() > kMaxRank) throw ValueError("container: rank > 8 unsupported");
    uint8_t rank = static_cast<uint8_t>(e.extents.size());
    append(out, &rank, 1);
    for (uint64_t d : e.extents) append(out, &d, 8);
    uint64_t want = static_cast<uint64_t>(e.numel()) * entry_type_size(e.type);
    if (want != e.bytes.size())
      throw ValueError("container: entry '" + name + "' payload size " +
                       std::to_string(e.bytes.size()) + " does not match extents (expected " +
                       std::to_string(want) + ")");
    append(out, e.bytes.data(), e.bytes.size());
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("container: cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  os.flush();
  if (!os) throw IoError("container: write to '" + path + "' failed");
}

File read_stream(std::istream& in, const std::string& origin) {
  Reader r{in, origin};
  r.measure();
  char magic[4];
  r.read_exact(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) fail(origin, 0, "bad magic (not a tensor container)");
  uint64_t ver_off = r.offset;
  uint16_t version = r.u16("version");
  if (version != kVersion)
    fail(origin, ver_off, "unsupported version " + std::to_string(version));
  uint32_t count = r.u32("entry count");
  File f;
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t name_off = r.offset;
    uint16_t nl = r.u16("name length");
    if (nl == 0) fail(origin, name_off, "empty entry name");
    std::string name(nl, '\0');
    r.read_exact(name.data(), nl, "entry name");
    uint64_t ty_off = r.offset;
    uint8_t ty = r.u8("dtype code");
    if (ty < 1 || ty > 4)
      fail(origin, ty_off, "invalid dtype code " + std::to_string(int(ty)));
    uint64_t rank_off = r.offset;
    uint8_t rank = r.u8("rank");
    if (rank > kMaxRank)
      fail(origin, rank_off, "rank " + std::to_string(int(rank)) + " exceeds limit 8");
    Entry e;
    e.type = static_cast<EntryType>(ty);
    uint64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      uint64_t ext_off = r.offset;
      uint64_t ext = r.u64("extent");
      if (ext != 0 && numel > kMaxBytes / ext)
        fail(origin, ext_off, "extents overflow a sane payload size");
      numel *= ext;
      e.extents.push_back(ext);
    }
    uint64_t payload = numel * entry_type_size(e.type);
    if (payload > kMaxBytes) fail(origin, r.offset, "payload larger than 1 TiB limit");
    r.claim(payload, ("payload of '" + name + "'").c_str());
    e.bytes.resize(payload);
    r.read_exact(e.bytes.data(), payload, ("payload of '" + name + "'").c_str());
    if (f.has(name)) fail(origin, name_off, "duplicate entry '" + name + "'");
    f.entries.emplace_back(std::move(name), std::move(e));
  }
  // Must be exactly at EOF now.
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0) fail(origin, r.offset, "trailing bytes after last entry");
  return f;
}

File read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("container: cannot open '" + path + "' for reading");
  return read_stream(is, path);
}

}  // namespace wassalign::container
