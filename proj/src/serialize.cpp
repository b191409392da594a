#include "unialign/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace unialign {

namespace {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

constexpr const char* kMagic = "UNIALIGN-ARCHIVE 1";

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    fail(ErrorCode::kIo, "read_tensor: truncated stream");
  }
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  put_u64(os, t.rank());
  for (std::size_t n : t.shape()) put_u64(os, n);
  put_u64(os, sizeof(Real));
  const auto d = t.data();
  os.write(reinterpret_cast<const char*>(d.data()),
           static_cast<std::streamsize>(d.size() * sizeof(Real)));
  if (!os) fail(ErrorCode::kIo, "write_tensor: stream error");
}

Tensor read_tensor(std::istream& is) {
  const std::uint64_t rank = get_u64(is);
  if (rank == 0 || rank > 3) fail(ErrorCode::kIo, "read_tensor: bad rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& n : shape) n = get_u64(is);
  const std::uint64_t width = get_u64(is);
  const std::size_t count = numel(shape);
  std::vector<Real> data(count);
  if (width == 8) {
    std::vector<double> raw(count);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 8)))
      fail(ErrorCode::kIo, "read_tensor: truncated data");
    std::copy(raw.begin(), raw.end(), data.begin());
  } else if (width == 4) {
    std::vector<float> raw(count);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 4)))
      fail(ErrorCode::kIo, "read_tensor: truncated data");
    std::copy(raw.begin(), raw.end(), data.begin());
  } else {
    fail(ErrorCode::kIo, "read_tensor: unsupported element width " + std::to_string(width));
  }
  return Tensor(std::move(shape), std::move(data));
}

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

const std::string* Archive::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

void save_archive(const std::string& path, const Archive& archive) {
  std::ostringstream manifest;
  for (const auto& [k, v] : archive.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      fail(ErrorCode::kInvalidArgument, "save_archive: bad meta entry '" + k + "'");
    manifest << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& t : archive.tensors) {
    if (t.name.find_first_of(" \n") != std::string::npos)
      fail(ErrorCode::kInvalidArgument, "save_archive: bad tensor name '" + t.name + "'");
    manifest << "tensor " << t.name << ' ';
    const auto& s = t.tensor.shape();
    for (std::size_t i = 0; i < s.size(); ++i) manifest << (i ? "x" : "") << s[i];
    manifest << '\n';
  }
  const std::string text = manifest.str();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot open '" + path + "' for writing");
  os << kMagic << '\n';
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : archive.tensors) write_tensor(os, t.tensor);
  if (!os) fail(ErrorCode::kIo, "write failed for '" + path + "'");
}

Archive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open '" + path + "'");
  std::string magic;
  std::getline(is, magic);
  if (magic != kMagic) fail(ErrorCode::kIo, "'" + path + "' is not a unialign archive");
  const std::uint64_t len = get_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    fail(ErrorCode::kIo, "'" + path + "': truncated manifest");

  Archive archive;
  std::istringstream lines(text);
  std::string line;
  std::vector<std::pair<std::string, Shape>> entries;
  while (std::getline(lines, line)) {
    if (line.rfind("meta ", 0) == 0) {
      const auto sp = line.find(' ', 5);
      if (sp == std::string::npos) fail(ErrorCode::kIo, "bad manifest line: " + line);
      archive.meta.emplace_back(line.substr(5, sp - 5), line.substr(sp + 1));
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, dims;
      ls >> name >> dims;
      Shape shape;
      std::istringstream ds(dims);
      std::string tok;
      while (std::getline(ds, tok, 'x')) shape.push_back(std::stoull(tok));
      entries.emplace_back(name, shape);
    } else if (!line.empty()) {
      fail(ErrorCode::kIo, "bad manifest line: " + line);
    }
  }
  for (auto& [name, shape] : entries) {
    Tensor t = read_tensor(is);
    if (t.shape() != shape)
      fail(ErrorCode::kIo, "'" + path + "': tensor " + name + " does not match its manifest shape");
    archive.tensors.push_back({name, std::move(t)});
  }
  return archive;
}

}  // namespace unialign
