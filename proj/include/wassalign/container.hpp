#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "wassalign/tensor.hpp"

// Single-file tensor container.
//
// Layout (all integers little-endian):
//   magic "TNSR" | u16 version (=1) | u32 entry count
//   per entry:
//     u16 name length | name bytes
//     u8 dtype code (1=f32, 2=f64, 3=u8, 4=i64)
//     u8 rank | rank x u64 extents
//     raw row-major payload
// Trailing bytes after the last entry are an error. Every malformed
// input is reported as IoError with the byte offset of the problem.
namespace wassalign::container {

enum class EntryType : uint8_t { F32 = 1, F64 = 2, U8 = 3, I64 = 4 };

const char* entry_type_name(EntryType t);
size_t entry_type_size(EntryType t);

struct Entry {
  EntryType type = EntryType::F32;
  std::vector<uint64_t> extents;
  std::vector<uint8_t> bytes;

  int64_t numel() const;
};

// Insertion-ordered named entries; names are unique.
struct File {
  std::vector<std::pair<std::string, Entry>> entries;

  bool has(const std::string& name) const;
  const Entry& get(const std::string& name) const;
  void add(std::string name, Entry e);
};

Entry from_tensor(const Tensor& t);
Tensor to_tensor(const Entry& e);  // f32/f64 entries only
Entry from_i64(const std::vector<int64_t>& v);
std::vector<int64_t> to_i64(const Entry& e);
Entry from_u8(const std::vector<uint8_t>& v);

void write_file(const File& f, const std::string& path);
File read_file(const std::string& path);

// `origin` names the source in error messages (a path, or "<memory>").
File read_stream(std::istream& in, const std::string& origin);

}  // namespace wassalign::container
