#include "lpt/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "lpt/errors.hpp"

namespace lpt {

void clamp01(Image& img) {
    for (double& v : img.pix) v = std::clamp(v, 0.0, 1.0);
}

bool image_valid(const Image& img) {
    if (img.empty() || img.h <= 0 || img.w <= 0) return false;
    if (img.pix.size() != static_cast<std::size_t>(img.h) * img.w * 3) return false;
    for (double v : img.pix)
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) return false;
    return true;
}

std::vector<std::uint8_t> to_bytes(const Image& img) {
    std::vector<std::uint8_t> out(img.pix.size());
    for (std::size_t i = 0; i < img.pix.size(); ++i) {
        const double v = std::clamp(img.pix[i], 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

Image from_bytes(int h, int w, const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() != static_cast<std::size_t>(h) * w * 3)
        throw DataError("from_bytes: byte count does not match dimensions");
    Image img(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pix[i] = bytes[i] / 255.0;
    return img;
}

Image quantize8(const Image& img) {
    return from_bytes(img.h, img.w, to_bytes(img));
}

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_ppm: cannot open " + path);
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    const auto bytes = to_bytes(img);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("write_ppm: short write to " + path);
}

namespace {

int next_ppm_int(std::istream& is, const std::string& path) {
    // Skips whitespace and '#' comments between header tokens.
    int ch = is.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = is.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = is.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw DataError("read_ppm: malformed header in " + path);
    int v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        ch = is.get();
    }
    return v;
}

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_ppm: cannot open " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '6') throw DataError("read_ppm: not a P6 file: " + path);
    const int w = next_ppm_int(is, path);
    const int h = next_ppm_int(is, path);
    const int maxval = next_ppm_int(is, path);
    if (w <= 0 || h <= 0 || maxval != 255)
        throw DataError("read_ppm: unsupported dimensions or maxval in " + path);
    // next_ppm_int consumed the single whitespace after maxval, so the
    // stream now sits on the first payload byte
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h) * w * 3);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw DataError("read_ppm: truncated payload in " + path);
    return from_bytes(h, w, bytes);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw DataError("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw DataError("read_png: libpng init failed");
    }
    std::vector<std::uint8_t> data;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError("read_png: decode failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    data.assign(stride * h, 0);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * stride;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    if (stride < static_cast<std::size_t>(w) * 3)
        throw DataError("read_png: unexpected row stride in " + path);
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(static_cast<int>(y), static_cast<int>(x), c) =
                    data[y * stride + x * 3 + c] / 255.0;
    return img;
}

Image read_image(const std::string& path) {
    const auto dot = path.find_last_of('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == "ppm") return read_ppm(path);
    if (ext == "png") return read_png(path);
    throw DataError("read_image: unsupported extension ." + ext + " for " + path);
}

double image_mse(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("image_mse: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.pix.size(); ++i) {
        const double d = a.pix[i] - b.pix[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pix.size());
}

double image_psnr(const Image& a, const Image& b) {
    const double m = image_mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(m);
}

}  // namespace lpt
