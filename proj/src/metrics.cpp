#include "posefield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace posefield {

namespace {

void check_shapes(const Image& a, const Image& b, const char* where) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw std::invalid_argument(std::string(where) + ": image shapes differ");
  if (a.width <= 0 || a.height <= 0 || a.channels <= 0)
    throw std::invalid_argument(std::string(where) + ": empty image");
}

}  // namespace

double psnr(const Image& a, const Image& b, double cap_db) {
  check_shapes(a, b, "psnr");
  double se = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return cap_db;
  return std::min(cap_db, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
  check_shapes(a, b, "ssim");
  constexpr int kWin = 8;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  double total = 0.0;
  long windows = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y0 = 0; y0 < a.height; y0 += kWin)
      for (int x0 = 0; x0 < a.width; x0 += kWin) {
        const int x1 = std::min(a.width, x0 + kWin);
        const int y1 = std::min(a.height, y0 + kWin);
        const double n = static_cast<double>((x1 - x0) * (y1 - y0));
        double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) {
            const double va = a.at(x, y, c);
            const double vb = b.at(x, y, c);
            sx += va;
            sy += vb;
            sxx += va * va;
            syy += vb * vb;
            sxy += va * vb;
          }
        const double mx = sx / n, my = sy / n;
        const double vx = sxx / n - mx * mx;
        const double vy = syy / n - my * my;
        const double cov = sxy / n - mx * my;
        total += ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) /
                 ((mx * mx + my * my + kC1) * (vx + vy + kC2));
        ++windows;
      }
  return total / static_cast<double>(windows);
}

}  // namespace posefield
