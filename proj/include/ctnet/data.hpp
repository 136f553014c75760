#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctnet/image.hpp"
#include "ctnet/rng.hpp"

namespace ctnet {

// Additive white Gaussian noise specification. Sigma is expressed in 8-bit
// units (25 means a standard deviation of 25/255 on [0,1] images); blind mode
// draws a fresh sigma per patch from [sigma_min, sigma_max].
struct NoiseSpec {
  enum class Mode { Fixed, Blind };
  Mode mode = Mode::Fixed;
  double sigma = 25.0;
  double sigma_min = 0.0;
  double sigma_max = 55.0;

  static NoiseSpec fixed(double s);
  static NoiseSpec blind(double lo, double hi);
  void validate() const;
};

// noisy = clean + N(0, (sigma/255)^2), i.i.d. per value. Returns the noisy
// patch and the sigma actually used. In blind mode the sigma draw consumes
// the stream before the noise field does. Values are not clipped.
std::pair<ImageBuffer, double> add_awgn(const ImageBuffer& patch, const NoiseSpec& spec,
                                        Rng& rng);

// Uniformly random top-left corners for `count` size x size patches;
// reproducible from the seed.
std::vector<std::pair<int, int>> patch_corners(int img_h, int img_w, int size, int count,
                                               std::uint64_t seed);
ImageBuffer crop_patch(const ImageBuffer& img, int top, int left, int size);
std::vector<ImageBuffer> extract_patches(const ImageBuffer& img, int size, int count,
                                         std::uint64_t seed);

// The eight dihedral ways, indexed to match the usual augmentation table:
// way = 2k + f applies a vertical flip first when f is 1, then k clockwise
// quarter turns. Way 0 is the identity; way 2 is a plain clockwise rot90.
ImageBuffer augment(const ImageBuffer& patch, int way);

struct ManifestEntry {
  std::string path;
  int height = 0;
  int width = 0;
  int channels = 0;
};

struct ManifestBuild {
  std::vector<ManifestEntry> entries;  // sorted by path, deduplicated
  std::vector<std::string> errors;     // unreadable files, with reasons
};

// Scans directories (recursively) for .png/.ppm/.pgm files.
ManifestBuild build_manifest(const std::vector<std::string>& dirs);

// JSON array of {path, height, width, channels}; byte-identical across runs.
void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> load_manifest(const std::string& path);

std::vector<ImageBuffer> load_manifest_images(const std::vector<ManifestEntry>& entries);

}  // namespace ctnet
