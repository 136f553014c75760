#pragma once

#include <string>
#include <vector>

#include "ctnet/tensor.hpp"

namespace ctnet {

// Image with values in [0,1] (loaded from 8-bit sources by /255), row-major
// interleaved channels. Clean images stay within range; noisy ones may not.
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<double> values;

  static ImageBuffer blank(int h, int w, int c);

  double& at(int y, int x, int c) {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::int64_t pixel_count() const { return static_cast<std::int64_t>(height) * width; }
};

// Formats: PNG (8-bit gray/RGB), binary PPM (P6) and PGM (P5). Load sniffs
// the magic bytes; save picks the format from the file extension.
ImageBuffer load_image(const std::string& path);
void save_image(const ImageBuffer& img, const std::string& path);

// The quantization rule applied whenever an image leaves the engine:
// round half up after scaling by 255, clamped to [0,255].
int quantize_u8(double v);

// Snaps every value to the 8-bit grid (k/255), same rule as saving.
ImageBuffer quantize(const ImageBuffer& img);

Tensor image_to_tensor(const ImageBuffer& img);  // -> [1,C,H,W]
ImageBuffer tensor_to_image(const Tensor& t);    // [1,C,H,W] ->

}  // namespace ctnet
