#pragma once

#include <span>
#include <vector>

namespace evp {

// Complex H x W spectrum, row-major. Holds z, the frequency-domain image.
struct ComplexGrid {
  int height = 0, width = 0;
  std::vector<double> re, im;

  ComplexGrid() = default;
  ComplexGrid(int h, int w)
      : height(h),
        width(w),
        re(static_cast<size_t>(h) * w, 0.0),
        im(static_cast<size_t>(h) * w, 0.0) {}

  size_t idx(int y, int x) const { return static_cast<size_t>(y) * width + x; }
};

// Unnormalized forward 2-D DFT. Non-power-of-two extents use a direct
// transform; powers of two take the radix-2 path. ifft2 carries the whole
// 1/(H*W) normalization so that ifft2(fft2(I)) == I.
ComplexGrid fft2(std::span<const double> grid, int height, int width);
ComplexGrid ifft2(const ComplexGrid& z);
// real part of ifft2; the imaginary residue is discarded
std::vector<double> ifft2_real(const ComplexGrid& z);

// Relocates the DC bin to (floor(H/2), floor(W/2)); ifftshift is the exact
// inverse (the two coincide for even extents).
ComplexGrid fftshift(const ComplexGrid& z);
ComplexGrid ifftshift(const ComplexGrid& z);

}  // namespace evp
