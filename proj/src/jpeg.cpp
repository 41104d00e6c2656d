#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "lpt/distortion.hpp"

namespace lpt {

namespace {

// Baseline luminance / chrominance quantization tables.
constexpr int kLumaQ[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99,
};

constexpr int kChromaQ[64] = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,
};

std::array<double, 64> scaled_table(const int* base, int quality) {
    const int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> out{};
    for (int i = 0; i < 64; ++i) {
        int q = (base[i] * s + 50) / 100;
        out[i] = static_cast<double>(std::clamp(q, 1, 255));
    }
    return out;
}

// Orthonormal 8-point DCT-II basis: c[u][x] = alpha(u) cos((2x+1)u pi / 16).
const std::array<std::array<double, 8>, 8>& dct_basis() {
    static const auto basis = [] {
        std::array<std::array<double, 8>, 8> c{};
        for (int u = 0; u < 8; ++u) {
            const double alpha = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int x = 0; x < 8; ++x)
                c[u][x] = alpha * std::cos((2 * x + 1) * u * 3.14159265358979323846 / 16.0);
        }
        return c;
    }();
    return basis;
}

// block = C * block * C^T (forward) or C^T * block * C (inverse)
void dct_2d(double* block, bool inverse) {
    const auto& c = dct_basis();
    double tmp[64];
    for (int u = 0; u < 8; ++u)
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int k = 0; k < 8; ++k) s += (inverse ? c[k][u] : c[u][k]) * block[k * 8 + x];
            tmp[u * 8 + x] = s;
        }
    for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int k = 0; k < 8; ++k) s += tmp[u * 8 + k] * (inverse ? c[k][v] : c[v][k]);
            block[u * 8 + v] = s;
        }
}

void code_plane(std::vector<double>& plane, int h, int w, const std::array<double, 64>& q) {
    // Edge blocks padded by replication.
    double block[64];
    for (int by = 0; by < h; by += 8)
        for (int bx = 0; bx < w; bx += 8) {
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    const int sy = std::min(by + y, h - 1);
                    const int sx = std::min(bx + x, w - 1);
                    block[y * 8 + x] = plane[static_cast<std::size_t>(sy) * w + sx];
                }
            dct_2d(block, false);
            for (int i = 0; i < 64; ++i) block[i] = std::round(block[i] / q[i]) * q[i];
            dct_2d(block, true);
            for (int y = 0; y < 8 && by + y < h; ++y)
                for (int x = 0; x < 8 && bx + x < w; ++x)
                    plane[static_cast<std::size_t>(by + y) * w + bx + x] = block[y * 8 + x];
        }
}

}  // namespace

Image jpeg_compress(const Image& img, int quality) {
    if (quality < 1 || quality > 100)
        throw std::invalid_argument("jpeg_compress: quality must be in [1,100]");
    const int h = img.h, w = img.w;
    const std::size_t n = static_cast<std::size_t>(h) * w;
    // BT.601 full-range RGB -> YCbCr in the 0..255 domain, level-shifted
    // by 128 so blocks are centered like a baseline encoder's.
    std::vector<double> yp(n), cb(n), cr(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double r = img.pix[i * 3 + 0] * 255.0;
        const double g = img.pix[i * 3 + 1] * 255.0;
        const double b = img.pix[i * 3 + 2] * 255.0;
        yp[i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        cb[i] = -0.168735892 * r - 0.331264108 * g + 0.5 * b;
        cr[i] = 0.5 * r - 0.418687589 * g - 0.081312411 * b;
    }
    const auto lq = scaled_table(kLumaQ, quality);
    const auto cq = scaled_table(kChromaQ, quality);
    code_plane(yp, h, w, lq);
    code_plane(cb, h, w, cq);
    code_plane(cr, h, w, cq);

    Image out(h, w);
    for (std::size_t i = 0; i < n; ++i) {
        const double y = yp[i] + 128.0;
        out.pix[i * 3 + 0] = (y + 1.402 * cr[i]) / 255.0;
        out.pix[i * 3 + 1] = (y - 0.344136286 * cb[i] - 0.714136286 * cr[i]) / 255.0;
        out.pix[i * 3 + 2] = (y + 1.772 * cb[i]) / 255.0;
    }
    clamp01(out);
    return out;
}

}  // namespace lpt
