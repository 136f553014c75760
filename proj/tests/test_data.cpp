#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ctnet/data.hpp"
#include "ctnet/error.hpp"
#include "test_util.hpp"

using namespace ctnet;
namespace fs = std::filesystem;

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

ImageBuffer distinct_patch(int h, int w) {
  ImageBuffer p = ImageBuffer::blank(h, w, 1);
  int k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p.at(y, x, 0) = (k++) / 255.0;
  return p;
}

bool same_values(const ImageBuffer& a, const ImageBuffer& b) {
  return a.height == b.height && a.width == b.width && a.channels == b.channels &&
         a.values == b.values;
}

}  // namespace

TEST_SUITE("image io") {
  TEST_CASE("quantization rule: x255, round half up, clamp") {
    CHECK(quantize_u8(0.0) == 0);
    CHECK(quantize_u8(1.0) == 255);
    CHECK(quantize_u8(1.5) == 255);
    CHECK(quantize_u8(-0.1) == 0);
    CHECK(quantize_u8(127.5 / 255.0) == 128);  // half rounds up
    CHECK(quantize_u8(126.49 / 255.0) == 126);
  }

  TEST_CASE("2x2 PGM fixture round-trips bit-exactly") {
    const std::string path = test::tmp_path("fixture.pgm");
    std::string bytes = "P5\n2 2\n255\n";
    bytes += '\x00';
    bytes += '\x7f';
    bytes += static_cast<char>(0xff);
    bytes += '\x10';
    write_file(path, bytes);

    ImageBuffer img = load_image(path);
    CHECK(img.channels == 1);
    CHECK(img.height == 2);
    CHECK(img.at(0, 1, 0) == doctest::Approx(127 / 255.0));

    const std::string out = test::tmp_path("fixture_out.pgm");
    save_image(img, out);
    CHECK(read_file(out) == bytes);
  }

  TEST_CASE("PPM loads three channels and round-trips") {
    const std::string path = test::tmp_path("color.ppm");
    ImageBuffer img = test::synthetic_image(5, 4, 3, 77);
    save_image(quantize(img), path);
    ImageBuffer back = load_image(path);
    CHECK(back.channels == 3);
    CHECK(back.height == 5);
    CHECK(same_values(back, quantize(img)));

    const std::string again = test::tmp_path("color2.ppm");
    save_image(back, again);
    CHECK(read_file(again) == read_file(path));
  }

  TEST_CASE("PNG round-trips quantized values for gray and color") {
    for (int channels : {1, 3}) {
      const std::string path = test::tmp_path("rt" + std::to_string(channels) + ".png");
      ImageBuffer img = quantize(test::synthetic_image(7, 9, channels, 123));
      save_image(img, path);
      ImageBuffer back = load_image(path);
      CHECK(same_values(back, img));
    }
  }

  TEST_CASE("io errors") {
    CHECK_THROWS_AS(load_image(test::tmp_path("missing.png")), IoError);

    const std::string bad = test::tmp_path("bad.dat");
    write_file(bad, "not an image at all");
    CHECK_THROWS_AS(load_image(bad), IoError);

    const std::string truncated = test::tmp_path("trunc.pgm");
    write_file(truncated, "P5\n4 4\n255\nxx");
    CHECK_THROWS_AS(load_image(truncated), IoError);

    const std::string deep = test::tmp_path("deep.pgm");
    write_file(deep, std::string("P5\n2 2\n65535\n") + std::string(8, '\0'));
    CHECK_THROWS_AS(load_image(deep), IoError);

    ImageBuffer gray = ImageBuffer::blank(2, 2, 1);
    CHECK_THROWS_AS(save_image(gray, test::tmp_path("gray.ppm")), IoError);
    CHECK_THROWS_AS(save_image(gray, test::tmp_path("gray.bmp")), IoError);
  }
}

TEST_SUITE("patch extraction") {
  TEST_CASE("corner sampling honors bounds, count, and the seed") {
    const auto corners = patch_corners(100, 100, 48, 108, 99);
    CHECK(corners.size() == 108);
    for (auto [top, left] : corners) {
      CHECK(top >= 0);
      CHECK(top <= 52);
      CHECK(left >= 0);
      CHECK(left <= 52);
    }
    CHECK(patch_corners(100, 100, 48, 108, 99) == corners);
    CHECK(patch_corners(100, 100, 48, 108, 100) != corners);
  }

  TEST_CASE("extraction yields exact patch sizes; undersized image errors") {
    ImageBuffer img = test::synthetic_image(100, 100, 1, 5);
    const auto patches = extract_patches(img, 48, 108, 3);
    CHECK(patches.size() == 108);
    for (const auto& p : patches) {
      CHECK(p.height == 48);
      CHECK(p.width == 48);
    }
    CHECK_THROWS_AS(extract_patches(img, 101, 1, 3), ShapeError);
  }
}

TEST_SUITE("augmentation") {
  TEST_CASE("way 0 is the identity; way 2 is a clockwise quarter turn") {
    ImageBuffer p = ImageBuffer::blank(2, 2, 1);
    p.at(0, 0, 0) = 1;
    p.at(0, 1, 0) = 2;
    p.at(1, 0, 0) = 3;
    p.at(1, 1, 0) = 4;

    CHECK(same_values(augment(p, 0), p));
    const ImageBuffer r = augment(p, 2);
    CHECK(r.at(0, 0, 0) == 3);
    CHECK(r.at(0, 1, 0) == 1);
    CHECK(r.at(1, 0, 0) == 4);
    CHECK(r.at(1, 1, 0) == 2);

    CHECK_THROWS_AS(augment(p, 8), ConfigError);
    CHECK_THROWS_AS(augment(p, -1), ConfigError);
  }

  TEST_CASE("the eight ways form a closed group with inverses") {
    const ImageBuffer base = distinct_patch(4, 4);
    std::vector<ImageBuffer> images;
    for (int way = 0; way < 8; ++way) images.push_back(augment(base, way));

    for (int a = 0; a < 8; ++a)
      for (int b = a + 1; b < 8; ++b) CHECK(!same_values(images[a], images[b]));

    // closure: composing any two ways equals exactly one single way
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b) {
        const ImageBuffer composed = augment(augment(base, a), b);
        int matches = 0;
        for (int c = 0; c < 8; ++c)
          if (same_values(composed, images[c])) ++matches;
        CHECK(matches == 1);
      }

    // every way has an inverse
    for (int a = 0; a < 8; ++a) {
      int inverses = 0;
      for (int b = 0; b < 8; ++b)
        if (same_values(augment(augment(base, a), b), base)) ++inverses;
      CHECK(inverses == 1);
    }

    for (int way = 0; way < 8; ++way) {
      std::multiset<double> orig(base.values.begin(), base.values.end());
      std::multiset<double> perm(images[way].values.begin(), images[way].values.end());
      CHECK(orig == perm);
    }
  }
}

TEST_SUITE("awgn") {
  TEST_CASE("sigma 0 is exact; fixed sigma is reported; streams are keyed") {
    ImageBuffer p = test::synthetic_image(8, 8, 1, 9);
    Rng rng = Rng::keyed(4, 1);
    auto [noisy0, s0] = add_awgn(p, NoiseSpec::fixed(0.0), rng);
    CHECK(s0 == 0.0);
    CHECK(same_values(noisy0, p));

    Rng a = Rng::keyed(4, 2), b = Rng::keyed(4, 2), c = Rng::keyed(4, 3);
    auto [na, sa] = add_awgn(p, NoiseSpec::fixed(25.0), a);
    auto [nb, sb] = add_awgn(p, NoiseSpec::fixed(25.0), b);
    auto [nc, sc] = add_awgn(p, NoiseSpec::fixed(25.0), c);
    CHECK(sa == 25.0);
    CHECK(sb == 25.0);
    CHECK(sc == 25.0);
    CHECK(same_values(na, nb));
    CHECK(!same_values(na, nc));
  }

  TEST_CASE("blind mode draws sigma from the range") {
    const NoiseSpec spec = NoiseSpec::blind(10.0, 20.0);
    ImageBuffer p = ImageBuffer::blank(4, 4, 1);
    for (int i = 0; i < 32; ++i) {
      Rng rng = Rng::keyed(7, static_cast<std::uint64_t>(i));
      auto [noisy, sigma] = add_awgn(p, spec, rng);
      CHECK(sigma >= 10.0);
      CHECK(sigma <= 20.0);
    }
    CHECK_THROWS_AS(NoiseSpec::blind(5.0, 1.0), ConfigError);
  }

  TEST_CASE("sample statistics approach the spec (smoke scale)") {
    ImageBuffer zero = ImageBuffer::blank(100, 100, 1);  // 1e4 samples
    Rng rng = Rng::keyed(21, 0);
    auto [noisy, sigma] = add_awgn(zero, NoiseSpec::fixed(25.0), rng);
    CHECK(sigma == 25.0);
    double mean = 0.0, ss = 0.0;
    for (double v : noisy.values) mean += v;
    mean /= static_cast<double>(noisy.values.size());
    for (double v : noisy.values) ss += (v - mean) * (v - mean);
    const double std_dev = std::sqrt(ss / static_cast<double>(noisy.values.size()));
    CHECK(std::abs(mean) < 3.0 * (25.0 / 255.0) / 100.0);  // 3 sigma of the mean
    CHECK(std_dev == doctest::Approx(25.0 / 255.0).epsilon(0.03));
  }
}

TEST_SUITE("manifest") {
  TEST_CASE("build, save, reload; deterministic bytes; errors listed") {
    const std::string dir = test::tmp_path("manifest_fixture");
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_image(quantize(test::synthetic_image(6, 5, 1, 1)), dir + "/a.pgm");
    save_image(quantize(test::synthetic_image(4, 4, 3, 2)), dir + "/b.ppm");
    save_image(quantize(test::synthetic_image(8, 3, 1, 3)), dir + "/c.png");
    write_file(dir + "/broken.png", "\x89PNG\r\n\x1a\ngarbage");

    ManifestBuild mb = build_manifest({dir});
    CHECK(mb.entries.size() == 3);
    CHECK(mb.errors.size() == 1);
    CHECK(mb.entries[0].path < mb.entries[1].path);
    CHECK(mb.entries[1].height == 4);
    CHECK(mb.entries[1].channels == 3);

    const std::string m1 = test::tmp_path("manifest1.json");
    const std::string m2 = test::tmp_path("manifest2.json");
    save_manifest(mb.entries, m1);
    save_manifest(build_manifest({dir}).entries, m2);
    CHECK(read_file(m1) == read_file(m2));

    const auto loaded = load_manifest(m1);
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[1].width == 4);
    CHECK(load_manifest_images(loaded).size() == 3);

    const std::string empty_dir = test::tmp_path("empty_fixture");
    fs::remove_all(empty_dir);
    fs::create_directories(empty_dir);
    CHECK(build_manifest({empty_dir}).entries.empty());
    CHECK_THROWS_AS(build_manifest({test::tmp_path("no_such_dir")}), IoError);
    CHECK_THROWS_AS(load_manifest(test::tmp_path("no_such_manifest.json")), IoError);
  }
}
