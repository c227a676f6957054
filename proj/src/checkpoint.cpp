#include "igdh/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <vector>

namespace igdh {

namespace {

constexpr char kMagic[5] = {'I', 'G', 'D', 'H', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const uint8_t* p;
  size_t left;
  std::string path;

  void need(size_t n) const {
    if (left < n) throw std::runtime_error("checkpoint '" + path + "': truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

}  // namespace

uint64_t fnv1a64(const uint8_t* data, size_t n) {
  uint64_t h = 14695981039346656037ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void save_checkpoint(const std::string& path, const ParamStore<float>& params) {
  std::vector<uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 5);
  for (const auto& kv : params.items()) {
    const std::string& name = kv.first;
    const Shape4 s = kv.second.shape();
    if (name.empty() || name.size() > std::numeric_limits<uint32_t>::max()) {
      throw std::invalid_argument("save_checkpoint: bad parameter name '" + name + "'");
    }
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    for (int64_t dim : {s.n, s.c, s.h, s.w}) {
      if (dim < 0 || dim > std::numeric_limits<uint32_t>::max()) {
        throw std::invalid_argument("save_checkpoint: dimension " + std::to_string(dim) +
                                    " of '" + name + "' does not fit in 32 bits");
      }
      put_u32(buf, static_cast<uint32_t>(dim));
    }
    const float* d = kv.second.data();
    for (int64_t i = 0; i < s.numel(); ++i) put_f32(buf, d[i]);
  }
  put_u64(buf, fnv1a64(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

void load_checkpoint(const std::string& path, ParamStore<float>& into) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  if (buf.size() < 5 + 8 || std::memcmp(buf.data(), kMagic, 5) != 0) {
    throw std::runtime_error("load_checkpoint: '" + path + "' is not a checkpoint file");
  }
  const size_t body = buf.size() - 8;
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<uint64_t>(buf[body + i]) << (8 * i);
  if (fnv1a64(buf.data(), body) != stored) {
    throw std::runtime_error("load_checkpoint: checksum mismatch in '" + path + "'");
  }

  Reader r{buf.data() + 5, body - 5, path};
  std::vector<bool> filled(into.items().size(), false);
  while (r.left > 0) {
    const uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    Shape4 s{};
    s.n = r.u32();
    s.c = r.u32();
    s.h = r.u32();
    s.w = r.u32();
    if (!into.has(name)) {
      throw std::runtime_error("load_checkpoint: unknown parameter '" + name + "' in '" +
                               path + "'");
    }
    Tensor<float> t = into.get(name);
    if (!(t.shape() == s)) {
      throw std::runtime_error("load_checkpoint: parameter '" + name + "' has shape " +
                               s.str() + " in file, expected " + t.shape().str());
    }
    r.need(static_cast<size_t>(s.numel()) * 4);
    float* d = t.data();
    for (int64_t i = 0; i < s.numel(); ++i) d[i] = r.f32();
    for (size_t i = 0; i < into.items().size(); ++i) {
      if (into.items()[i].first == name) {
        if (filled[i]) {
          throw std::runtime_error("load_checkpoint: duplicate parameter '" + name +
                                   "' in '" + path + "'");
        }
        filled[i] = true;
      }
    }
  }
  for (size_t i = 0; i < filled.size(); ++i) {
    if (!filled[i]) {
      throw std::runtime_error("load_checkpoint: parameter '" + into.items()[i].first +
                               "' missing from '" + path + "'");
    }
  }
}

}  // namespace igdh
