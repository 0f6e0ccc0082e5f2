#include "evp/fft.hpp"

#include <cmath>
#include <complex>
#include <numbers>

#include "evp/error.hpp"

namespace evp {

namespace {

using cplx = std::complex<double>;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// in-place iterative radix-2 Cooley-Tukey
void fft_pow2(std::vector<cplx>& v, bool inverse) {
  const int n = static_cast<int>(v.size());
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(v[i], v[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / len * (inverse ? 1.0 : -1.0);
    const cplx wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      cplx w(1.0);
      for (int k = 0; k < len / 2; ++k) {
        const cplx u = v[i + k];
        const cplx t = v[i + k + len / 2] * w;
        v[i + k] = u + t;
        v[i + k + len / 2] = u - t;
        w *= wl;
      }
    }
  }
}

// direct O(n^2) transform for awkward extents (desk-scale grids are tiny)
void dft_naive(std::vector<cplx>& v, bool inverse) {
  const int n = static_cast<int>(v.size());
  std::vector<cplx> out(static_cast<size_t>(n));
  const double sign = inverse ? 1.0 : -1.0;
  for (int k = 0; k < n; ++k) {
    cplx acc(0.0);
    for (int j = 0; j < n; ++j) {
      const double ang = sign * 2.0 * std::numbers::pi * j * k / n;
      acc += v[j] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  v = std::move(out);
}

void fft1(std::vector<cplx>& v, bool inverse) {
  if (v.size() <= 1) return;
  if (is_pow2(static_cast<int>(v.size()))) {
    fft_pow2(v, inverse);
  } else {
    dft_naive(v, inverse);
  }
}

ComplexGrid transform2(const ComplexGrid& z, bool inverse) {
  const int h = z.height, w = z.width;
  ComplexGrid out(h, w);
  std::vector<cplx> buf;

  // rows
  buf.resize(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) buf[x] = cplx(z.re[z.idx(y, x)], z.im[z.idx(y, x)]);
    fft1(buf, inverse);
    for (int x = 0; x < w; ++x) {
      out.re[out.idx(y, x)] = buf[x].real();
      out.im[out.idx(y, x)] = buf[x].imag();
    }
  }
  // columns
  buf.resize(static_cast<size_t>(h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) buf[y] = cplx(out.re[out.idx(y, x)], out.im[out.idx(y, x)]);
    fft1(buf, inverse);
    for (int y = 0; y < h; ++y) {
      out.re[out.idx(y, x)] = buf[y].real();
      out.im[out.idx(y, x)] = buf[y].imag();
    }
  }
  return out;
}

ComplexGrid roll(const ComplexGrid& z, int dy, int dx) {
  ComplexGrid out(z.height, z.width);
  for (int y = 0; y < z.height; ++y) {
    const int ny = (y + dy) % z.height;
    for (int x = 0; x < z.width; ++x) {
      const int nx = (x + dx) % z.width;
      out.re[out.idx(ny, nx)] = z.re[z.idx(y, x)];
      out.im[out.idx(ny, nx)] = z.im[z.idx(y, x)];
    }
  }
  return out;
}

}  // namespace

ComplexGrid fft2(std::span<const double> grid, int height, int width) {
  if (height < 1 || width < 1) throw ShapeError("fft2: extents must be >= 1");
  if (grid.size() != static_cast<size_t>(height) * width) {
    throw ShapeError("fft2: grid size does not match extents");
  }
  ComplexGrid z(height, width);
  std::copy(grid.begin(), grid.end(), z.re.begin());
  return transform2(z, false);
}

ComplexGrid ifft2(const ComplexGrid& z) {
  ComplexGrid out = transform2(z, true);
  const double norm = 1.0 / (static_cast<double>(z.height) * z.width);
  for (auto& v : out.re) v *= norm;
  for (auto& v : out.im) v *= norm;
  return out;
}

std::vector<double> ifft2_real(const ComplexGrid& z) {
  return ifft2(z).re;
}

ComplexGrid fftshift(const ComplexGrid& z) {
  return roll(z, z.height / 2, z.width / 2);
}

ComplexGrid ifftshift(const ComplexGrid& z) {
  return roll(z, (z.height + 1) / 2, (z.width + 1) / 2);
}

}  // namespace evp
