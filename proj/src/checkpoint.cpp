#include "mole/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mole/errors.hpp"

namespace mole {
namespace {

constexpr char kMagic[8] = {'M', 'O', 'L', 'E', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("checkpoint " + path + ": truncated file");
  return value;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t hash) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t hash_named_tensors(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::uint64_t hash = kFnvOffset;
  for (const auto& [name, tensor] : named) {
    hash = fnv1a64(name.data(), name.size(), hash);
    for (std::size_t d : tensor.shape()) hash = fnv1a64(&d, sizeof(d), hash);
    hash = fnv1a64(tensor.values().data(), tensor.values().size() * sizeof(double), hash);
  }
  return hash;
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path);
  std::uint64_t hash = kFnvOffset;
  char buffer[1 << 16];
  while (in) {
    in.read(buffer, sizeof(buffer));
    hash = fnv1a64(buffer, static_cast<std::size_t>(in.gcount()), hash);
  }
  return hash;
}

std::string hash_to_hex(std::uint64_t hash) {
  std::ostringstream out;
  out << std::hex;
  for (int shift = 60; shift >= 0; shift -= 4) out << ((hash >> shift) & 0xF);
  return out.str();
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint64_t>(out, checkpoint.metadata_json.size());
  out.write(checkpoint.metadata_json.data(),
            static_cast<std::streamsize>(checkpoint.metadata_json.size()));
  write_pod<std::uint64_t>(out, checkpoint.tensors.size());
  for (const auto& [name, tensor] : checkpoint.tensors) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(tensor.values().data()),
              static_cast<std::streamsize>(tensor.values().size() * sizeof(double)));
  }
  if (!out) throw IoError("failed while writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("checkpoint " + path + ": bad magic");
  }
  Checkpoint checkpoint;
  const auto meta_len = read_pod<std::uint64_t>(in, path);
  checkpoint.metadata_json.resize(meta_len);
  in.read(checkpoint.metadata_json.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw IoError("checkpoint " + path + ": truncated metadata");
  const auto count = read_pod<std::uint64_t>(in, path);
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = read_pod<std::uint32_t>(in, path);
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = read_pod<std::uint64_t>(in, path);
      n *= d;
    }
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw IoError("checkpoint " + path + ": truncated tensor '" + name + "'");
    checkpoint.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
  }
  return checkpoint;
}

void load_into(const std::vector<std::pair<std::string, Tensor>>& destination,
               const Checkpoint& source) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, tensor] : source.tensors) by_name.emplace(name, tensor);
  for (const auto& [name, tensor] : destination) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
    if (it->second.shape() != tensor.shape()) {
      throw IoError("checkpoint: tensor '" + name + "' has shape " +
                    shape_to_string(it->second.shape()) + ", model expects " +
                    shape_to_string(tensor.shape()));
    }
    Tensor dst = tensor;
    dst.values() = it->second.values();
  }
}

}  // namespace mole
