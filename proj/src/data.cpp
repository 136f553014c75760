#include "ctnet/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "ctnet/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctnet {

NoiseSpec NoiseSpec::fixed(double s) {
  NoiseSpec spec;
  spec.mode = Mode::Fixed;
  spec.sigma = s;
  spec.validate();
  return spec;
}

NoiseSpec NoiseSpec::blind(double lo, double hi) {
  NoiseSpec spec;
  spec.mode = Mode::Blind;
  spec.sigma_min = lo;
  spec.sigma_max = hi;
  spec.validate();
  return spec;
}

void NoiseSpec::validate() const {
  if (mode == Mode::Fixed) {
    if (sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
  } else {
    if (sigma_min < 0.0 || sigma_min > sigma_max)
      throw ConfigError("blind noise range requires 0 <= sigma_min <= sigma_max");
  }
}

std::pair<ImageBuffer, double> add_awgn(const ImageBuffer& patch, const NoiseSpec& spec,
                                        Rng& rng) {
  spec.validate();
  const double sigma = spec.mode == NoiseSpec::Mode::Fixed
                           ? spec.sigma
                           : rng.uniform(spec.sigma_min, spec.sigma_max);
  ImageBuffer noisy = patch;
  const double s = sigma / 255.0;
  if (s > 0.0)
    for (double& v : noisy.values) v += s * rng.gaussian();
  return {std::move(noisy), sigma};
}

std::vector<std::pair<int, int>> patch_corners(int img_h, int img_w, int size, int count,
                                               std::uint64_t seed) {
  if (size <= 0 || count < 0) throw ConfigError("patch_corners: bad size/count");
  if (img_h < size || img_w < size)
    throw ShapeError("image " + std::to_string(img_h) + "x" + std::to_string(img_w) +
                     " is smaller than the patch size " + std::to_string(size));
  Rng rng = Rng::keyed(seed, 0x70617463ULL /* "patc" */);
  std::vector<std::pair<int, int>> corners;
  corners.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int top = static_cast<int>(rng.uniform_below(
        static_cast<std::uint64_t>(img_h - size + 1)));
    const int left = static_cast<int>(rng.uniform_below(
        static_cast<std::uint64_t>(img_w - size + 1)));
    corners.emplace_back(top, left);
  }
  return corners;
}

ImageBuffer crop_patch(const ImageBuffer& img, int top, int left, int size) {
  if (top < 0 || left < 0 || top + size > img.height || left + size > img.width)
    throw ShapeError("crop_patch: region outside the image");
  ImageBuffer out = ImageBuffer::blank(size, size, img.channels);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < img.channels; ++c)
        out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

std::vector<ImageBuffer> extract_patches(const ImageBuffer& img, int size, int count,
                                         std::uint64_t seed) {
  std::vector<ImageBuffer> out;
  out.reserve(static_cast<std::size_t>(count));
  for (const auto& [top, left] : patch_corners(img.height, img.width, size, count, seed))
    out.push_back(crop_patch(img, top, left, size));
  return out;
}

namespace {

ImageBuffer flip_vertical(const ImageBuffer& in) {
  ImageBuffer out = ImageBuffer::blank(in.height, in.width, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < in.channels; ++c)
        out.at(y, x, c) = in.at(in.height - 1 - y, x, c);
  return out;
}

ImageBuffer rot90_cw(const ImageBuffer& in) {
  ImageBuffer out = ImageBuffer::blank(in.width, in.height, in.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < in.channels; ++c)
        out.at(y, x, c) = in.at(in.height - 1 - x, y, c);
  return out;
}

}  // namespace

ImageBuffer augment(const ImageBuffer& patch, int way) {
  if (way < 0 || way > 7) throw ConfigError("augment: way must be in [0,7]");
  ImageBuffer out = (way & 1) ? flip_vertical(patch) : patch;
  for (int k = 0; k < way / 2; ++k) out = rot90_cw(out);
  return out;
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

}  // namespace

ManifestBuild build_manifest(const std::vector<std::string>& dirs) {
  ManifestBuild out;
  std::set<std::string> paths;
  for (const std::string& dir : dirs) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
      paths.insert(entry.path().string());
    }
  }
  for (const std::string& p : paths) {
    try {
      const ImageBuffer img = load_image(p);
      out.entries.push_back({p, img.height, img.width, img.channels});
    } catch (const IoError& e) {
      out.errors.push_back(p + ": " + e.what());
    }
  }
  return out;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  json arr = json::array();
  for (const ManifestEntry& e : entries)
    arr.push_back({{"path", e.path},
                   {"height", e.height},
                   {"width", e.width},
                   {"channels", e.channels}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << arr.dump(2) << "\n";
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path);
  json arr;
  try {
    in >> arr;
  } catch (const json::exception& e) {
    throw IoError("bad manifest " + path + ": " + e.what());
  }
  if (!arr.is_array()) throw IoError("manifest must be a JSON array: " + path);
  std::vector<ManifestEntry> out;
  for (const json& j : arr) {
    ManifestEntry e;
    try {
      e.path = j.at("path").get<std::string>();
      e.height = j.at("height").get<int>();
      e.width = j.at("width").get<int>();
      e.channels = j.at("channels").get<int>();
    } catch (const json::exception& ex) {
      throw IoError("bad manifest entry in " + path + ": " + ex.what());
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ImageBuffer> load_manifest_images(const std::vector<ManifestEntry>& entries) {
  std::vector<ImageBuffer> out;
  out.reserve(entries.size());
  for (const ManifestEntry& e : entries) out.push_back(load_image(e.path));
  return out;
}

}  // namespace ctnet
