// ===== RLW1 weight container =====

#include "ripeloc/weights.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

#include "ripeloc/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "RLW1 io assumes a little-endian host");

namespace ripeloc {

namespace {

constexpr char kMagic[4] = {'R', 'L', 'W', '1'};
constexpr uint32_t kVersion = 1;
constexpr int kMaxRank = 8;
constexpr int64_t kMaxNumel = int64_t(1) << 31;

void put(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), std::streamsize(n));
}

void get(std::ifstream& f, void* p, size_t n, const std::string& path) {
  f.read(static_cast<char*>(p), std::streamsize(n));
  if (size_t(f.gcount()) != n)
    throw DataError("weights: truncated file " + path);
}

}  // namespace

void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("weights: cannot open for write: " + path);
  put(f, kMagic, 4);
  const uint32_t version = kVersion;
  put(f, &version, 4);
  const uint32_t count = uint32_t(tensors.size());
  put(f, &count, 4);
  std::vector<float> buf;
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<uint16_t>::max())
      throw DataError("weights: tensor name too long: " + name);
    if (!t.defined()) throw DataError("weights: undefined tensor: " + name);
    const uint16_t nlen = uint16_t(name.size());
    put(f, &nlen, 2);
    put(f, name.data(), name.size());
    const uint8_t rank = uint8_t(t.ndim());
    if (t.ndim() > kMaxRank)
      throw DataError("weights: rank too large for tensor " + name);
    put(f, &rank, 1);
    for (int d = 0; d < t.ndim(); ++d) {
      const uint32_t ext = uint32_t(t.dim(d));
      put(f, &ext, 4);
    }
    buf.resize(size_t(t.numel()));
    const double* src = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) buf[size_t(i)] = float(src[i]);
    put(f, buf.data(), buf.size() * 4);
  }
  if (!f) throw DataError("weights: write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_weights(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("weights: cannot open: " + path);
  char magic[4];
  get(f, magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("weights: bad magic in " + path);
  uint32_t version = 0, count = 0;
  get(f, &version, 4, path);
  if (version != kVersion)
    throw DataError("weights: unsupported version " + std::to_string(version) +
                    " in " + path);
  get(f, &count, 4, path);

  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  std::vector<float> buf;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = 0;
    get(f, &nlen, 2, path);
    std::string name(nlen, '\0');
    if (nlen) get(f, name.data(), nlen, path);
    uint8_t rank = 0;
    get(f, &rank, 1, path);
    if (rank > kMaxRank)
      throw DataError("weights: rank " + std::to_string(rank) +
                      " too large for tensor " + name);
    Shape shape(rank);
    int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      uint32_t ext = 0;
      get(f, &ext, 4, path);
      if (ext == 0) throw DataError("weights: zero extent in tensor " + name);
      shape[d] = int(ext);
      numel *= ext;
      if (numel > kMaxNumel)
        throw DataError("weights: tensor too large: " + name);
    }
    Tensor t = Tensor::zeros(shape);
    buf.resize(size_t(numel));
    get(f, buf.data(), size_t(numel) * 4, path);
    double* dst = t.data();
    for (int64_t j = 0; j < numel; ++j) dst[j] = double(buf[size_t(j)]);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace ripeloc
