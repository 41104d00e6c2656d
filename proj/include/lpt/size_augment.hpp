#pragma once

#include "lpt/image.hpp"
#include "lpt/rng.hpp"

namespace lpt {

enum class Interp : int { Nearest = 0, Linear, Cubic, Area };

struct SizeAugConfig {
    int tgt = 224;     // target size in px
    double t1 = 0.3;   // crop-branch probability threshold
    double t2 = 0.3;   // small-crop threshold
    bool enabled = true;
};

/// Resample to w x h. All modes use half-pixel centers:
/// src = (dst + 0.5) * scale - 0.5.
///   Nearest: floor(src + 0.5), clamped.
///   Linear:  bilinear.
///   Cubic:   Catmull-Rom (a = -0.5), replicated borders, clamped output.
///   Area:    average of the covered source box with fractional edge weights.
Image resize(const Image& img, int w, int h, Interp mode);

/// Random crop / downscale augmentation. Draw order: r_c, r_r always; then
/// the crop branch draws r, H_new, W_new, top, left; the resize branch
/// draws the interpolation mode. Crop sizes below the target come from the
/// image origin (top = left = 0 via randint(0,0)).
Image random_crop_resize(const Image& img, const SizeAugConfig& cfg, Rng& rng);

}  // namespace lpt
