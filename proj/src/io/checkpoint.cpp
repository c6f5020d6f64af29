#include "tdaf/io/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace tdaf {

namespace {

constexpr char kMagic[8] = {'T', 'D', 'A', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  buf.append(b, 4);
}

void put_u64(std::string& buf, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  buf.append(b, 8);
}

std::uint64_t fnv1a_bytes(const char* data, std::size_t len) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= std::uint8_t(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) {
    require(pos + n <= buf.size(), "checkpoint: ", path, " truncated at byte ", pos);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = buf.substr(pos, n);
    pos += n;
    return out;
  }
};

}  // namespace

std::vector<StateEntry> model_state_entries(R2dnsModel<float>& model) {
  std::vector<StateEntry> out;
  for (auto& p : model.params.items())
    out.push_back({p.name, p.tensor->shape, p.tensor->values.data()});
  for (auto& [name, bn] : model.collect_bn()) {
    const int c = bn->channels();
    for (int f = 0; f < bn->num_flows(); ++f) {
      out.push_back({name + ".running_mean.flow" + std::to_string(f), Shape(1, c, 1, 1),
                     bn->running_mean().data() + std::int64_t(f) * c});
      out.push_back({name + ".running_var.flow" + std::to_string(f), Shape(1, c, 1, 1),
                     bn->running_var().data() + std::int64_t(f) * c});
    }
  }
  return out;
}

void save_checkpoint(const std::string& path, const std::vector<StateEntry>& entries) {
  std::string payload;
  put_u32(payload, std::uint32_t(entries.size()));
  for (const auto& e : entries) {
    put_u32(payload, std::uint32_t(e.name.size()));
    payload.append(e.name);
    put_u32(payload, std::uint32_t(e.dims.n));
    put_u32(payload, std::uint32_t(e.dims.c));
    put_u32(payload, std::uint32_t(e.dims.h));
    put_u32(payload, std::uint32_t(e.dims.w));
    const std::size_t bytes = std::size_t(e.dims.numel()) * 4;
    const std::size_t at = payload.size();
    payload.resize(at + bytes);
    std::memcpy(payload.data() + at, e.data, bytes);
  }
  std::string file;
  file.append(kMagic, 8);
  put_u32(file, kVersion);
  file.append(payload);
  put_u64(file, fnv1a_bytes(payload.data(), payload.size()));

  std::ofstream out(path, std::ios::binary);
  require(out.good(), "save_checkpoint: cannot open ", path);
  out.write(file.data(), std::streamsize(file.size()));
  require(out.good(), "save_checkpoint: write failed for ", path);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "checkpoint: cannot open ", path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(buf.size() >= 20, "checkpoint: ", path, " too small (", buf.size(), " bytes)");
  require(std::memcmp(buf.data(), kMagic, 8) == 0, "checkpoint: ", path,
          " has a bad magic tag");

  ByteReader r{buf, 8, path};
  const std::uint32_t version = r.u32();
  require(version == kVersion, "checkpoint: ", path, " has unknown version ", version);

  require(buf.size() >= r.pos + 8, "checkpoint: ", path, " missing checksum");
  const std::size_t payload_begin = r.pos;
  const std::size_t payload_len = buf.size() - 8 - payload_begin;
  const std::uint64_t want = fnv1a_bytes(buf.data() + payload_begin, payload_len);
  {
    ByteReader tail{buf, buf.size() - 8, path};
    const std::uint64_t got = tail.u64();
    require(got == want, "checkpoint: ", path, " checksum mismatch");
  }

  const std::uint32_t count = r.u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = r.u32();
    e.name = r.bytes(name_len);
    const int n = int(r.u32()), c = int(r.u32()), h = int(r.u32()), w = int(r.u32());
    require(n > 0 && c > 0 && h > 0 && w > 0, "checkpoint: ", path, ": entry '", e.name,
            "' has bad dims");
    e.dims = Shape(n, c, h, w);
    const std::size_t bytes = std::size_t(e.dims.numel()) * 4;
    const std::string raw = r.bytes(bytes);
    e.values.resize(e.dims.numel());
    std::memcpy(e.values.data(), raw.data(), bytes);
    entries.push_back(std::move(e));
  }
  require(r.pos == buf.size() - 8, "checkpoint: ", path, " has trailing bytes");
  return entries;
}

void load_checkpoint(const std::string& path, const std::vector<StateEntry>& entries) {
  auto stored = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> index;
  for (const auto& e : stored) {
    require(index.find(e.name) == index.end(), "checkpoint: ", path, " has duplicate entry '",
            e.name, "'");
    index[e.name] = &e;
  }
  std::set<std::string> used;
  for (const auto& view : entries) {
    auto it = index.find(view.name);
    require(it != index.end(), "checkpoint: ", path, " is missing entry '", view.name, "'");
    require(it->second->dims == view.dims, "checkpoint: ", path, ": entry '", view.name,
            "' has dims ", it->second->dims.str(), ", model expects ", view.dims.str());
    std::memcpy(view.data, it->second->values.data(), std::size_t(view.dims.numel()) * 4);
    used.insert(view.name);
  }
  for (const auto& e : stored)
    require(used.count(e.name) > 0, "checkpoint: ", path, " has entry '", e.name,
            "' that the model does not define");
}

}  // namespace tdaf
