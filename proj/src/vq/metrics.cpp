#include "mmt/vq/metrics.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmt::vq {

namespace {

void check_same(const MediaClip& a, const MediaClip& b, const char* what) {
  a.validate();
  b.validate();
  if (a.t != b.t || a.c != b.c || a.h != b.h || a.w != b.w)
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> w{};
  double total = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - kSsimWindow / 2;
    w[i] = std::exp(-x * x / (2 * 1.5 * 1.5));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Separable valid-mode filter of one plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::array<double, kSsimWindow>& k) {
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * src[static_cast<size_t>(y) * w + x + i];
      tmp[static_cast<size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int i = 0; i < kSsimWindow; ++i) s += k[i] * tmp[static_cast<size_t>(y + i) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace

double psnr(const MediaClip& a, const MediaClip& b) {
  check_same(a, b, "psnr");
  double se = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const MediaClip& a, const MediaClip& b) {
  check_same(a, b, "ssim");
  if (a.h < kSsimWindow || a.w < kSsimWindow)
    throw std::invalid_argument("ssim: frames of " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                                " are smaller than the " + std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto k = gaussian_window();
  const size_t plane = static_cast<size_t>(a.h) * a.w;
  double total = 0;
  int planes = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int t = 0; t < a.t; ++t)
    for (int c = 0; c < a.c; ++c, ++planes) {
      const size_t off = (static_cast<size_t>(t) * a.c + c) * plane;
      for (size_t i = 0; i < plane; ++i) {
        x[i] = a.pixels[off + i];
        y[i] = b.pixels[off + i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
      }
      const auto mx = filter_valid(x, a.h, a.w, k), my = filter_valid(y, a.h, a.w, k);
      const auto sxx = filter_valid(xx, a.h, a.w, k), syy = filter_valid(yy, a.h, a.w, k), sxy = filter_valid(xy, a.h, a.w, k);
      double acc = 0;
      for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
        acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += acc / static_cast<double>(mx.size());
    }
  return total / planes;
}

}  // namespace mmt::vq
