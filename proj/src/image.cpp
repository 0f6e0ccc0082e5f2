#include "evp/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "evp/error.hpp"

namespace evp {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t quantize(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

// interleaved 8-bit rows from a png file, forced to gray or rgb
struct PngPixels {
  int height = 0, width = 0, channels = 0;
  std::vector<uint8_t> bytes;  // row-major, interleaved
};

PngPixels read_png_bytes(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IntegrityError("cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IntegrityError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IntegrityError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IntegrityError("failed to decode " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  color = png_get_color_type(png, info);
  const int ch = (color == PNG_COLOR_TYPE_GRAY) ? 1 : 3;

  PngPixels out;
  out.height = static_cast<int>(h);
  out.width = static_cast<int>(w);
  out.channels = ch;
  out.bytes.resize(static_cast<size_t>(h) * w * ch);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) {
    rows[y] = out.bytes.data() + static_cast<size_t>(y) * w * ch;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png_bytes(const std::string& path, const std::vector<uint8_t>& bytes,
                     int h, int w, int ch) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IntegrityError("cannot write " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IntegrityError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IntegrityError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IntegrityError("failed to encode " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) {
    rows[y] = const_cast<png_bytep>(bytes.data() + static_cast<size_t>(y) * w * ch);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image load_png(const std::string& path) {
  PngPixels px = read_png_bytes(path);
  Image img(px.channels, px.height, px.width);
  for (int y = 0; y < px.height; ++y) {
    for (int x = 0; x < px.width; ++x) {
      for (int c = 0; c < px.channels; ++c) {
        img.at(c, y, x) =
            px.bytes[(static_cast<size_t>(y) * px.width + x) * px.channels + c] / 255.0;
      }
    }
  }
  return img;
}

void save_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw DomainError("save_png: only 1- or 3-channel images are supported");
  }
  std::vector<uint8_t> bytes(static_cast<size_t>(img.height) * img.width * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        bytes[(static_cast<size_t>(y) * img.width + x) * img.channels + c] =
            quantize(img.at(c, y, x));
      }
    }
  }
  write_png_bytes(path, bytes, img.height, img.width, img.channels);
}

void save_png_mask(const std::string& path, std::span<const uint8_t> mask, int h, int w) {
  if (mask.size() != static_cast<size_t>(h) * w) {
    throw ShapeError("save_png_mask: mask size does not match extents");
  }
  std::vector<uint8_t> bytes(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  write_png_bytes(path, bytes, h, w, 1);
}

std::vector<uint8_t> load_png_mask(const std::string& path, int* h, int* w) {
  PngPixels px = read_png_bytes(path);
  if (px.channels != 1) throw IntegrityError("mask " + path + " is not grayscale");
  std::vector<uint8_t> mask(px.bytes.size());
  for (size_t i = 0; i < px.bytes.size(); ++i) {
    if (px.bytes[i] == 0) {
      mask[i] = 0;
    } else if (px.bytes[i] == 255) {
      mask[i] = 1;
    } else {
      throw IntegrityError("mask " + path + " has a value other than 0/255");
    }
  }
  *h = px.height;
  *w = px.width;
  return mask;
}

namespace {
constexpr char kF64Magic[7] = {'E', 'V', 'P', 'F', '6', '4', '\n'};
}

void save_f64(const std::string& path, const Image& img) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IntegrityError("cannot write " + path);
  std::fwrite(kF64Magic, 1, sizeof(kF64Magic), f.get());
  const uint32_t dims[3] = {static_cast<uint32_t>(img.channels),
                            static_cast<uint32_t>(img.height),
                            static_cast<uint32_t>(img.width)};
  std::fwrite(dims, sizeof(uint32_t), 3, f.get());
  std::fwrite(img.data.data(), sizeof(double), img.data.size(), f.get());
}

Image load_f64(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IntegrityError("cannot open " + path);
  char magic[sizeof(kF64Magic)];
  if (std::fread(magic, 1, sizeof(magic), f.get()) != sizeof(magic) ||
      std::memcmp(magic, kF64Magic, sizeof(magic)) != 0) {
    throw IntegrityError(path + " is not an EVPF64 sidecar");
  }
  uint32_t dims[3];
  if (std::fread(dims, sizeof(uint32_t), 3, f.get()) != 3) {
    throw IntegrityError(path + ": truncated header");
  }
  Image img(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
            static_cast<int>(dims[2]));
  if (std::fread(img.data.data(), sizeof(double), img.data.size(), f.get()) !=
      img.data.size()) {
    throw IntegrityError(path + ": truncated payload");
  }
  return img;
}

Image min_max_normalized(const Image& img) {
  double lo = img.data.empty() ? 0.0 : img.data[0];
  double hi = lo;
  for (double v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Image out(img.channels, img.height, img.width);
  const double span = hi - lo;
  if (span > 0) {
    for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = (img.data[i] - lo) / span;
  }
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
      }
    }
  }
  return out;
}

std::vector<uint8_t> flip_mask_horizontal(std::span<const uint8_t> mask, int h, int w) {
  std::vector<uint8_t> out(mask.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out[static_cast<size_t>(y) * w + x] = mask[static_cast<size_t>(y) * w + (w - 1 - x)];
    }
  }
  return out;
}

Image avg_pool(const Image& img, int factor) {
  if (factor <= 0 || img.height % factor != 0 || img.width % factor != 0) {
    throw ShapeError("avg_pool: factor must divide both extents");
  }
  if (factor == 1) return img;
  const int oh = img.height / factor, ow = img.width / factor;
  Image out(img.channels, oh, ow);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = 0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) {
            acc += img.at(c, y * factor + dy, x * factor + dx);
          }
        }
        out.at(c, y, x) = acc * inv;
      }
    }
  }
  return out;
}

Image luminance(const Image& img) {
  Image out(1, img.height, img.width);
  const double inv = 1.0 / img.channels;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        out.at(0, y, x) += img.at(c, y, x) * inv;
      }
    }
  }
  return out;
}

}  // namespace evp
