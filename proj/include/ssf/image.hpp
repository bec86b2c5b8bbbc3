#pragma once

#include <cstdint>
#include <vector>

#include "ssf/errors.hpp"
#include "ssf/rng.hpp"

namespace ssf {

// Channel-major float image with values in [0, 1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;  // [c][y][x] row-major

    Image() = default;
    Image(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w),
          data(static_cast<size_t>(c) * h * w, fill) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
};

// Pixel-area bilinear resample; exact copy when sizes match.
Image bilinear_resize(const Image& src, int out_h, int out_w);

// Axis-aligned crop of [y0,y1) x [x0,x1); bounds must lie inside the image.
Image crop(const Image& src, int y0, int x0, int y1, int x1);

Image hflip(const Image& src);

// Multiplies all values by factor and clamps back to [0, 1].
Image adjust_brightness(const Image& src, double factor);

// Zero-pads by `pad` on each side, then crops back to the original size at
// offset (dy, dx) in [0, 2*pad].
Image shifted_crop(const Image& src, int pad, int dy, int dx);

void clamp01(Image& img);

}  // namespace ssf
