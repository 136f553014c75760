#include "ctnet/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ctnet/error.hpp"
#include "ctnet/runconfig.hpp"

using nlohmann::json;

namespace ctnet {

namespace {

constexpr char kMagic[4] = {'C', 'T', 'N', 'T'};

// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
std::uint32_t crc32(const unsigned char* data, std::size_t n) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float v) {
  static_assert(sizeof(float) == 4);
  char raw[4];
  std::memcpy(raw, &v, 4);
  out.append(raw, 4);  // little-endian host assumed, as elsewhere in the engine
}

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t n) : data_(data), n_(n) {}
  std::size_t remaining() const { return n_ - pos_; }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() {
    need(4);
    float v;
    std::memcpy(&v, data_ + pos_, 4);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > n_) throw IoError("checkpoint record extends past the payload");
  }
  const unsigned char* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

void append_record(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  for (std::int64_t i = 0; i < t.size(); ++i) put_f32(out, static_cast<float>(t[i]));
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json header;
  header["config"] = model_config_to_json(ck.config);
  header["train_state"] = {{"t", ck.train_state.t},
                           {"epoch", ck.train_state.epoch},
                           {"seed", ck.train_state.seed}};
  header["provenance"] = {{"build", ck.build_id}};
  const std::string header_str = header.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, ck.version);
  put_u32(out, static_cast<std::uint32_t>(header_str.size()));
  out.append(header_str);
  for (const auto& [name, t] : ck.params) append_record(out, name, t);
  for (const auto& [name, t] : ck.adam_m) append_record(out, "adam.m." + name, t);
  for (const auto& [name, t] : ck.adam_v) append_record(out, "adam.v." + name, t);
  put_u32(out, crc32(reinterpret_cast<const unsigned char*>(out.data()), out.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (blob.size() < 16) throw IoError("checkpoint too short: " + path);

  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::size_t body = blob.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (crc32(bytes, body) != stored_crc)
    throw IoError("checkpoint CRC mismatch (corrupt or truncated): " + path);

  Reader r(bytes, body);
  if (r.bytes(4) != std::string(kMagic, 4))
    throw IoError("bad checkpoint magic in " + path);
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(ck.version) +
                  " in " + path);

  json header;
  try {
    header = json::parse(r.bytes(r.u32()));
  } catch (const json::exception& e) {
    throw IoError("bad checkpoint header in " + path + ": " + e.what());
  }
  ck.config = model_config_from_json(header.at("config"));
  if (header.contains("train_state")) {
    const json& ts = header.at("train_state");
    ck.train_state.t = ts.value("t", std::int64_t{0});
    ck.train_state.epoch = ts.value("epoch", 0);
    ck.train_state.seed = ts.value("seed", std::uint64_t{0});
  }
  if (header.contains("provenance"))
    ck.build_id = header.at("provenance").value("build", "");

  while (r.remaining() > 0) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError("implausible tensor rank in checkpoint " + path);
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.u32()));
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(r.f32());

    if (starts_with(name, "adam.m."))
      ck.adam_m.emplace(name.substr(7), std::move(t));
    else if (starts_with(name, "adam.v."))
      ck.adam_v.emplace(name.substr(7), std::move(t));
    else
      ck.params.emplace(name, std::move(t));
  }

  validate_params(ck.config, ck.params);
  return ck;
}

}  // namespace ctnet
