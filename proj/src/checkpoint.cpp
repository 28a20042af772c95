#include "mdml/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mdml {

namespace {

constexpr char kMagic[8] = {'M', 'D', 'M', 'L', 'C', 'K', 'P', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return v;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_raw<std::uint64_t>(os, ckpt.meta.size());
  os.write(ckpt.meta.data(), static_cast<std::streamsize>(ckpt.meta.size()));
  write_raw<std::uint64_t>(os, ckpt.entries.size());
  for (const auto& [name, t] : ckpt.entries) {
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (Eigen::Index d : t.shape) write_raw<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("checkpoint: write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: '" + path.string() + "' is not a parameter archive (bad magic)");
  }
  Checkpoint out;
  const auto meta_len = read_raw<std::uint64_t>(is);
  out.meta.resize(meta_len);
  is.read(out.meta.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw CheckpointError("checkpoint: truncated metadata");
  const auto count = read_raw<std::uint64_t>(is);
  out.entries.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = read_raw<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError("checkpoint: truncated entry name");
    const auto ndim = read_raw<std::uint32_t>(is);
    Shape shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = read_raw<std::int64_t>(is);
    const Eigen::Index n = shape_size(shape);
    Array data(n);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint: truncated payload for '" + name + "'");
    out.entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace mdml
