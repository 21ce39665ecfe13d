#pragma once

#include "posefield/io.hpp"

namespace posefield {

// 10 log10(peak^2 / MSE) over all channels for unit-range images, capped at
// cap_db (the identical-image sentinel). Throws on shape mismatch.
double psnr(const Image& a, const Image& b, double cap_db = 99.0);

// Mean SSIM over non-overlapping 8x8 windows (partial tiles kept at borders),
// averaged across channels; constants C1=(0.01)^2, C2=(0.03)^2 for unit range.
double ssim(const Image& a, const Image& b);

}  // namespace posefield
