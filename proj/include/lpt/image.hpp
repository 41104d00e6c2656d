#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lpt {

/// H x W x 3 raster, row-major, interleaved channels. Storage files are
/// 8-bit; in compute the channels are unit-interval doubles.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<double> pix;  // h*w*3

    Image() = default;
    Image(int height, int width, double fill = 0.0)
        : h(height), w(width), pix(static_cast<std::size_t>(height) * width * 3, fill) {}

    double& at(int y, int x, int c) { return pix[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
    double at(int y, int x, int c) const {
        return pix[(static_cast<std::size_t>(y) * w + x) * 3 + c];
    }
    std::size_t size() const { return pix.size(); }
    bool empty() const { return pix.empty(); }
};

/// Clamps every channel into [0, 1] in place.
void clamp01(Image& img);

/// True if every channel is finite and within [0, 1].
bool image_valid(const Image& img);

/// 8-bit round trip: what the raster becomes after being written to disk
/// and read back. round(v*255)/255 per channel.
Image quantize8(const Image& img);

std::vector<std::uint8_t> to_bytes(const Image& img);
Image from_bytes(int h, int w, const std::vector<std::uint8_t>& bytes);

// PPM (P6, 8-bit, maxval 255). Writing then reading is bit-exact.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

/// 8-bit RGB/RGBA PNG (alpha dropped, palette/gray expanded).
Image read_png(const std::string& path);

/// Dispatches on extension (.ppm / .png).
Image read_image(const std::string& path);

/// Mean squared error over all channels.
double image_mse(const Image& a, const Image& b);

/// PSNR in dB against a unit peak; returns +inf for identical images.
double image_psnr(const Image& a, const Image& b);

}  // namespace lpt
