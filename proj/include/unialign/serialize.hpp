#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "unialign/gradcheck.hpp"
#include "unialign/tensor.hpp"

namespace unialign {

// Tensor wire format, all integers 64-bit little-endian:
//   rank, axis lengths[rank], element width in bytes (4 or 8),
//   then numel IEEE-754 little-endian values.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

// Named tensor archive: the line "UNIALIGN-ARCHIVE 1", a 64-bit byte count,
// a UTF-8 manifest of that length, then the tensors in manifest order.
// The manifest holds one "tensor <name> <d0>x<d1>..." line per tensor plus
// any free-form "meta <key> <value>" lines supplied by the caller.
struct Archive {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
  const std::string* find_meta(const std::string& key) const;
};

void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

}  // namespace unialign
