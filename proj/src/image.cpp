#include "ctnet/image.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "ctnet/error.hpp"

namespace ctnet {

ImageBuffer ImageBuffer::blank(int h, int w, int c) {
  if (h <= 0 || w <= 0 || (c != 1 && c != 3))
    throw ShapeError("ImageBuffer: bad dimensions");
  ImageBuffer img;
  img.height = h;
  img.width = w;
  img.channels = c;
  img.values.assign(static_cast<std::size_t>(h) * w * c, 0.0);
  return img;
}

int quantize_u8(double v) {
  const double scaled = std::floor(v * 255.0 + 0.5);
  if (scaled < 0.0) return 0;
  if (scaled > 255.0) return 255;
  return static_cast<int>(scaled);
}

ImageBuffer quantize(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (double& v : out.values) v = quantize_u8(v) / 255.0;
  return out;
}

Tensor image_to_tensor(const ImageBuffer& img) {
  Tensor t({1, img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t[(static_cast<std::int64_t>(c) * img.height + y) * img.width + x] =
            img.at(y, x, c);
  return t;
}

ImageBuffer tensor_to_image(const Tensor& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || (t.dim(1) != 1 && t.dim(1) != 3))
    throw ShapeError("tensor_to_image: expects [1,C,H,W] with C in {1,3}");
  ImageBuffer img = ImageBuffer::blank(t.dim(2), t.dim(3), t.dim(1));
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        img.at(y, x, c) =
            t[(static_cast<std::int64_t>(c) * img.height + y) * img.width + x];
  return img;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

bool has_suffix_ci(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  for (std::size_t i = 0; i < suffix.size(); ++i) {
    const char a = static_cast<char>(std::tolower(static_cast<unsigned char>(
        s[s.size() - suffix.size() + i])));
    if (a != suffix[i]) return false;
  }
  return true;
}

// --- PNM (binary PPM/PGM) ----------------------------------------------------

int pnm_next_int(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments
  while (true) {
    const int c = in.peek();
    if (c == EOF) throw IoError("truncated PNM header: " + path);
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int value = 0;
  if (!(in >> value)) throw IoError("bad PNM header: " + path);
  return value;
}

ImageBuffer load_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0).get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw IoError("unsupported PNM magic in " + path);
  const int channels = (m1 == '6') ? 3 : 1;
  const int w = pnm_next_int(in, path);
  const int h = pnm_next_int(in, path);
  const int maxval = pnm_next_int(in, path);
  if (w <= 0 || h <= 0) throw IoError("bad PNM dimensions in " + path);
  if (maxval != 255)
    throw IoError("unsupported PNM maxval " + std::to_string(maxval) + " in " + path);
  in.get();  // the single whitespace byte after maxval

  const std::size_t n = static_cast<std::size_t>(w) * h * channels;
  std::vector<unsigned char> raw(n);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw IoError("truncated PNM payload in " + path);

  ImageBuffer img = ImageBuffer::blank(h, w, channels);
  for (std::size_t i = 0; i < n; ++i) img.values[i] = raw[i] / 255.0;
  return img;
}

void save_pnm(const ImageBuffer& img, const std::string& path) {
  const bool color = img.channels == 3;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (color ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.values.size());
  for (std::size_t i = 0; i < img.values.size(); ++i)
    raw[i] = static_cast<unsigned char>(quantize_u8(img.values[i]));
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path);
}

// --- PNG ----------------------------------------------------------------------

ImageBuffer load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<unsigned char> raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt or truncated PNG: " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const png_byte color_type = png_get_color_type(png, info);
  const png_byte bit_depth = png_get_bit_depth(png, info);

  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG channel layout in " + path);
  }

  raw.assign(static_cast<std::size_t>(w) * h * channels, 0);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = raw.data() + static_cast<std::size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  ImageBuffer img = ImageBuffer::blank(static_cast<int>(h), static_cast<int>(w), channels);
  for (std::size_t i = 0; i < raw.size(); ++i) img.values[i] = raw[i] / 255.0;
  return img;
}

void save_png(const ImageBuffer& img, const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path);
  }

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> raw(img.values.size());
  for (std::size_t i = 0; i < img.values.size(); ++i)
    raw[i] = static_cast<unsigned char>(quantize_u8(img.values[i]));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] =
        raw.data() + static_cast<std::size_t>(y) * img.width * img.channels;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

ImageBuffer load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  unsigned char magic[8] = {};
  probe.read(reinterpret_cast<char*>(magic), 8);
  probe.close();

  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (std::memcmp(magic, png_sig, 8) == 0) return load_png(path);
  if (magic[0] == 'P' && (magic[1] == '5' || magic[1] == '6')) return load_pnm(path);
  throw IoError("unsupported image format: " + path);
}

void save_image(const ImageBuffer& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("save_image: channels must be 1 or 3");
  if (has_suffix_ci(path, ".png")) {
    save_png(img, path);
  } else if (has_suffix_ci(path, ".ppm")) {
    if (img.channels != 3) throw IoError("PPM requires 3 channels: " + path);
    save_pnm(img, path);
  } else if (has_suffix_ci(path, ".pgm")) {
    if (img.channels != 1) throw IoError("PGM requires 1 channel: " + path);
    save_pnm(img, path);
  } else {
    throw IoError("unsupported output extension: " + path);
  }
}

}  // namespace ctnet
