#include "ssf/image.hpp"

#include <algorithm>
#include <cmath>

namespace ssf {

Image bilinear_resize(const Image& src, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: output size must be positive");
    if (out_h == src.height && out_w == src.width) return src;
    Image dst(src.channels, out_h, out_w);
    double sy = static_cast<double>(src.height) / out_h;
    double sx = static_cast<double>(src.width) / out_w;
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < out_h; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            int y0 = static_cast<int>(std::floor(fy));
            double wy = fy - y0;
            int ya = std::clamp(y0, 0, src.height - 1);
            int yb = std::clamp(y0 + 1, 0, src.height - 1);
            for (int x = 0; x < out_w; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                int x0 = static_cast<int>(std::floor(fx));
                double wx = fx - x0;
                int xa = std::clamp(x0, 0, src.width - 1);
                int xb = std::clamp(x0 + 1, 0, src.width - 1);
                double top = (1 - wx) * src.at(c, ya, xa) + wx * src.at(c, ya, xb);
                double bot = (1 - wx) * src.at(c, yb, xa) + wx * src.at(c, yb, xb);
                dst.at(c, y, x) = (1 - wy) * top + wy * bot;
            }
        }
    return dst;
}

Image crop(const Image& src, int y0, int x0, int y1, int x1) {
    if (y0 < 0 || x0 < 0 || y1 > src.height || x1 > src.width || y0 >= y1 || x0 >= x1)
        throw ContractError("crop: window out of bounds");
    Image dst(src.channels, y1 - y0, x1 - x0);
    for (int c = 0; c < src.channels; ++c)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) dst.at(c, y - y0, x - x0) = src.at(c, y, x);
    return dst;
}

Image hflip(const Image& src) {
    Image dst(src.channels, src.height, src.width);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x)
                dst.at(c, y, x) = src.at(c, y, src.width - 1 - x);
    return dst;
}

Image adjust_brightness(const Image& src, double factor) {
    Image dst = src;
    for (auto& v : dst.data) v = std::clamp(v * factor, 0.0, 1.0);
    return dst;
}

Image shifted_crop(const Image& src, int pad, int dy, int dx) {
    if (pad < 0 || dy < 0 || dx < 0 || dy > 2 * pad || dx > 2 * pad)
        throw ContractError("shifted_crop: offset outside padded range");
    Image dst(src.channels, src.height, src.width);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                int sy = y + dy - pad;
                int sx = x + dx - pad;
                dst.at(c, y, x) = (sy >= 0 && sy < src.height && sx >= 0 && sx < src.width)
                                      ? src.at(c, sy, sx)
                                      : 0.0;
            }
    return dst;
}

void clamp01(Image& img) {
    for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace ssf
