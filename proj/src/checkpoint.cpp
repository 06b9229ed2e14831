#include "actdistill/checkpoint.hpp"

#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace actdistill {
namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw IntegrityError(IntegrityCode::kTruncated, "unexpected end of data");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void Checkpoint::add(std::string name, Tensor t) {
  if (contains(name)) throw ContractError("checkpoint: duplicate tensor name " + name);
  tensors.push_back({std::move(name), std::move(t)});
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw ContractError("checkpoint: missing tensor " + name);
}

const Tensor& Checkpoint::get(const std::string& name, const Shape& expected) const {
  const Tensor& t = get(name);
  if (t.shape() != expected) {
    throw ContractError("checkpoint: tensor " + name + " has shape " + to_string(t.shape()) +
                        ", expected " + to_string(expected));
  }
  return t;
}

const std::string& Checkpoint::manifest_value(const std::string& key) const {
  auto it = manifest.find(key);
  if (it == manifest.end()) {
    throw IntegrityError(IntegrityCode::kMalformed, "manifest has no key " + key);
  }
  return it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  std::string manifest;
  for (const auto& [k, v] : ck.manifest) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: manifest entry " + k + " contains a separator");
    }
    manifest += k + "=" + v + "\n";
  }
  w.put<std::uint64_t>(manifest.size());
  w.put_bytes(manifest.data(), manifest.size());
  w.put<std::uint64_t>(ck.tensors.size());
  std::set<std::string> seen;
  for (const auto& [name, t] : ck.tensors) {
    if (!seen.insert(name).second) throw ContractError("checkpoint: duplicate tensor name " + name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(kDtypeF64);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint64_t>(e);
    w.put_bytes(t.values().data(), sizeof(double) * t.size());
  }
  Fnv1a h;
  h.update(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(h.digest());
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw IntegrityError(IntegrityCode::kTruncated, "shorter than magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw IntegrityError(IntegrityCode::kBadMagic, "expected ACTD");
  }
  if (bytes.size() < 8 + sizeof(std::uint64_t)) {
    throw IntegrityError(IntegrityCode::kTruncated, "missing header or checksum");
  }
  {
    Reader hdr(bytes, bytes.size());
    hdr.get<std::uint32_t>();
    const auto version = hdr.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
      throw IntegrityError(IntegrityCode::kVersionMismatch,
                           "version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
    }
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));

  // Parse first so that a cut-off file reports truncation rather than a checksum failure.
  Reader r(bytes, body);
  Checkpoint ck;
  try {
    r.get<std::uint32_t>();
    r.get<std::uint32_t>();
    const auto mlen = r.get<std::uint64_t>();
    if (mlen > body) throw IntegrityError(IntegrityCode::kTruncated, "manifest length");
    std::string manifest(mlen, '\0');
    r.get_bytes(manifest.data(), mlen);
    std::size_t start = 0;
    while (start < manifest.size()) {
      const std::size_t nl = manifest.find('\n', start);
      if (nl == std::string::npos) throw IntegrityError(IntegrityCode::kMalformed, "manifest line");
      const std::string line = manifest.substr(start, nl - start);
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw IntegrityError(IntegrityCode::kMalformed, "manifest entry");
      ck.manifest[line.substr(0, eq)] = line.substr(eq + 1);
      start = nl + 1;
    }
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto nlen = r.get<std::uint32_t>();
      if (nlen > body) throw IntegrityError(IntegrityCode::kTruncated, "tensor name length");
      std::string name(nlen, '\0');
      r.get_bytes(name.data(), nlen);
      const auto dtype = r.get<std::uint8_t>();
      if (dtype != kDtypeF64) {
        throw IntegrityError(IntegrityCode::kMalformed, "tensor " + name + " has dtype " +
                                                            std::to_string(dtype));
      }
      const auto rank = r.get<std::uint8_t>();
      if (rank > 2) throw IntegrityError(IntegrityCode::kMalformed, "tensor " + name + " rank");
      Shape shape(rank);
      std::uint64_t count_elems = 1;
      for (auto& e : shape) {
        e = r.get<std::uint64_t>();
        if (e != 0 && count_elems > body / e) {
          throw IntegrityError(IntegrityCode::kTruncated, "tensor " + name + " extents");
        }
        count_elems *= e;
      }
      if (count_elems > body / sizeof(double)) {
        throw IntegrityError(IntegrityCode::kTruncated, "tensor " + name + " payload");
      }
      auto [rows, cols] = storage_dims(shape);
      Matrix values(rows, cols);
      r.get_bytes(values.data(), sizeof(double) * count_elems);
      if (ck.contains(name)) throw IntegrityError(IntegrityCode::kMalformed, "duplicate " + name);
      ck.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
  } catch (const IntegrityError& e) {
    // A structural error in a region that also fails the checksum is corruption, not truncation.
    Fnv1a h;
    h.update(bytes.data(), body);
    if (h.digest() != stored && e.code() != IntegrityCode::kTruncated) {
      throw IntegrityError(IntegrityCode::kChecksumMismatch, "stored checksum does not match");
    }
    throw;
  } catch (const ContractError& e) {
    throw IntegrityError(IntegrityCode::kMalformed, e.what());
  }
  if (r.pos() != body) throw IntegrityError(IntegrityCode::kMalformed, "trailing bytes");
  Fnv1a h;
  h.update(bytes.data(), body);
  if (h.digest() != stored) {
    throw IntegrityError(IntegrityCode::kChecksumMismatch, "stored checksum does not match");
  }
  return ck;
}

void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace actdistill
