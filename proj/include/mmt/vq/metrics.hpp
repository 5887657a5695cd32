#pragma once

#include "mmt/vq/media.hpp"

namespace mmt::vq {

inline constexpr double kPsnrCap = 99.0;

// 10 log10(1 / MSE) for pixels in [0, 1]; identical inputs give kPsnrCap.
double psnr(const MediaClip& a, const MediaClip& b);

// Mean SSIM over 11x11 Gaussian windows (sigma 1.5, valid positions only),
// averaged over channels and frames. C1 = 0.01^2, C2 = 0.03^2.
double ssim(const MediaClip& a, const MediaClip& b);

inline constexpr int kSsimWindow = 11;

}  // namespace mmt::vq
