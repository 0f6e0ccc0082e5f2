#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace evp {

// Planar C x H x W image, doubles in [0,1] by convention.
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int h, int w)
      : channels(c),
        height(h),
        width(w),
        data(static_cast<size_t>(c) * h * w, 0.0) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  std::span<const double> channel(int c) const {
    return {data.data() + static_cast<size_t>(c) * height * width,
            static_cast<size_t>(height) * width};
  }
  std::span<double> channel(int c) {
    return {data.data() + static_cast<size_t>(c) * height * width,
            static_cast<size_t>(height) * width};
  }
  int64_t pixels() const { return static_cast<int64_t>(height) * width; }
};

// 8-bit PNG I/O. Grayscale files load as one channel, color as three
// (alpha is stripped); values are scaled to [0,1]. Saving quantizes with
// round(clamp(v,0,1)*255).
Image load_png(const std::string& path);
void save_png(const std::string& path, const Image& img);

// binary masks as 8-bit gray {0,255}; loaders reject intermediate values
void save_png_mask(const std::string& path, std::span<const uint8_t> mask, int h, int w);
std::vector<uint8_t> load_png_mask(const std::string& path, int* h, int* w);

// Raw float sidecar: magic "EVPF64\n", then u32 channels/height/width,
// then channel-major little-endian doubles. Lossless round trip.
void save_f64(const std::string& path, const Image& img);
Image load_f64(const std::string& path);

Image min_max_normalized(const Image& img);
Image flip_horizontal(const Image& img);
std::vector<uint8_t> flip_mask_horizontal(std::span<const uint8_t> mask, int h, int w);
// block mean over factor x factor cells; extents must divide evenly
Image avg_pool(const Image& img, int factor);
// channel mean as a single-channel image
Image luminance(const Image& img);

}  // namespace evp
