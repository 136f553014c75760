#include <doctest.h>

#include <array>
#include <cstdint>
#include <fstream>

#include "ctnet/checkpoint.hpp"
#include "ctnet/error.hpp"
#include "ctnet/model.hpp"
#include "test_util.hpp"

using namespace ctnet;
using test::bit_equal;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// independent CRC-32 (same published polynomial) for fixture surgery
std::uint32_t ref_crc32(const std::string& s) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (unsigned char b : s) {
    crc ^= b;
    for (int k = 0; k < 8; ++k) crc = (crc & 1) ? 0xEDB88320u ^ (crc >> 1) : crc >> 1;
  }
  return crc ^ 0xFFFFFFFFu;
}

std::string refresh_crc(std::string bytes) {
  const std::string body = bytes.substr(0, bytes.size() - 4);
  const std::uint32_t crc = ref_crc32(body);
  for (int i = 0; i < 4; ++i)
    bytes[bytes.size() - 4 + static_cast<std::size_t>(i)] =
        static_cast<char>((crc >> (8 * i)) & 0xFF);
  return bytes;
}

Checkpoint sample_checkpoint(std::uint64_t seed) {
  Checkpoint ck;
  ck.config = ModelConfig::tiny(1);
  ck.params = init_params(ck.config, seed);
  AdamState st = AdamState::init(ck.params);
  ck.adam_m = st.m;
  ck.adam_v = st.v;
  ck.train_state = {42, 3, seed};
  ck.build_id = "test-build";
  return ck;
}

}  // namespace

#include "ctnet/train.hpp"

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is exact at 32-bit storage precision") {
    const std::string path = test::tmp_path("ck_roundtrip.ctnt");
    const Checkpoint ck = sample_checkpoint(17);
    save_checkpoint(ck, path);
    const Checkpoint back = load_checkpoint(path);

    CHECK(back.version == kCheckpointVersion);
    CHECK(back.config.width == ck.config.width);
    CHECK(back.config.image_channels == 1);
    CHECK(back.train_state.t == 42);
    CHECK(back.train_state.epoch == 3);
    CHECK(back.train_state.seed == 17);
    CHECK(back.build_id == "test-build");
    CHECK(back.params.size() == ck.params.size());
    CHECK(back.adam_m.size() == ck.params.size());

    for (const auto& [name, t] : ck.params) {
      Tensor narrowed = t;
      for (std::int64_t i = 0; i < narrowed.size(); ++i)
        narrowed[i] = static_cast<double>(static_cast<float>(narrowed[i]));
      CHECK(bit_equal(back.params.at(name), narrowed));
    }

    // saving the loaded checkpoint again is byte-stable
    const std::string path2 = test::tmp_path("ck_roundtrip2.ctnt");
    save_checkpoint(back, path2);
    const std::string path3 = test::tmp_path("ck_roundtrip3.ctnt");
    save_checkpoint(load_checkpoint(path2), path3);
    CHECK(read_file(path2) == read_file(path3));
  }

  TEST_CASE("identical saves produce identical bytes") {
    const std::string a = test::tmp_path("ck_a.ctnt");
    const std::string b = test::tmp_path("ck_b.ctnt");
    save_checkpoint(sample_checkpoint(23), a);
    save_checkpoint(sample_checkpoint(23), b);
    CHECK(read_file(a) == read_file(b));
  }

  TEST_CASE("corruption, truncation, bad magic, bad version") {
    const std::string path = test::tmp_path("ck_corrupt.ctnt");
    save_checkpoint(sample_checkpoint(29), path);
    const std::string good = read_file(path);

    // flipped payload byte: CRC failure
    std::string flipped = good;
    flipped[good.size() / 2] = static_cast<char>(flipped[good.size() / 2] ^ 0x5A);
    write_file(path, flipped);
    CHECK_THROWS_WITH_AS(load_checkpoint(path),
                         doctest::Contains("CRC"), IoError);

    // truncation: CRC failure
    write_file(path, good.substr(0, good.size() - 9));
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("CRC"), IoError);

    // bad magic with a recomputed CRC
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    write_file(path, refresh_crc(bad_magic));
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), IoError);

    // unsupported version with a recomputed CRC
    std::string bad_version = good;
    bad_version[4] = 9;
    write_file(path, refresh_crc(bad_version));
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), IoError);

    CHECK_THROWS_AS(load_checkpoint(test::tmp_path("no_such.ctnt")), IoError);
  }

  TEST_CASE("stored parameters must match the stored config") {
    Checkpoint ck = sample_checkpoint(31);
    ck.params.erase("rb.conv.b");
    const std::string path = test::tmp_path("ck_name_mismatch.ctnt");
    save_checkpoint(ck, path);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("rb.conv.b"),
                         ConfigError);
  }

  TEST_CASE("config mismatch reports missing and extra names") {
    const Checkpoint ck = sample_checkpoint(37);
    ModelConfig other = ck.config;
    other.disable_itm = true;  // expects fewer parameters
    try {
      validate_params(other, ck.params);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("extra") != std::string::npos);
      CHECK(msg.find("subnet3.itm1") != std::string::npos);
    }
  }
}
