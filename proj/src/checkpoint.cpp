#include "ctsl/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace ctsl {
namespace {

constexpr char kMagic[8] = {'C', 'T', 'S', 'L', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
  return v;
}

}  // namespace

void save_parameters(const std::filesystem::path& path, const ParameterList& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, std::uint32_t(params.size()));
  for (const Parameter* p : params) {
    put<std::uint32_t>(os, std::uint32_t(p->name.size()));
    os.write(p->name.data(), std::streamsize(p->name.size()));
    put<std::uint32_t>(os, std::uint32_t(p->value.rank()));
    for (auto d : p->value.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p->value.data()), std::streamsize(p->value.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

void load_parameters(const std::filesystem::path& path, const ParameterList& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const auto count = get<std::uint32_t>(is);
  std::map<std::string, Tensor> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
    stored.emplace(std::move(name), std::move(t));
  }
  for (Parameter* p : params) {
    auto it = stored.find(p->name);
    if (it == stored.end()) throw std::runtime_error("checkpoint: missing parameter " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name + ": stored " +
                               shape_string(it->second.shape()) + ", expected " +
                               shape_string(p->value.shape()));
    }
    p->value = it->second;
  }
}

}  // namespace ctsl
