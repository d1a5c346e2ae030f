#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "llgs/core.hpp"

namespace llgs::io {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& p, const char* mode) {
    FilePtr f(std::fopen(p.string().c_str(), mode));
    if (!f) throw IoError("cannot open " + p.string());
    return f;
}

}  // namespace detail

/// Quantizes a [0,1] value to an integer level, clamping out-of-range input.
inline unsigned quantize(double v, unsigned max_level) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned>(std::lround(c * max_level));
}

/// Reads an 8- or 16-bit PNG as an RGB image in [0,1]. Gray is expanded to RGB;
/// alpha is dropped.
inline Image read_png(const std::filesystem::path& path) {
    auto file = detail::open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError(path.string() + ": not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<unsigned char> buffer;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path.string() + ": corrupt PNG");
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color_type = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    if (depth == 16) png_set_swap(png);  // little-endian 16-bit samples
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    buffer.resize(row_bytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buffer.data() + y * row_bytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(static_cast<int>(w), static_cast<int>(h), 3);
    const std::size_t n = img.data.size();
    if (depth == 16) {
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned v = buffer[2 * i] | (static_cast<unsigned>(buffer[2 * i + 1]) << 8);
            img.data[i] = v / 65535.0;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) img.data[i] = buffer[i] / 255.0;
    }
    return img;
}

/// Writes an RGB (or single-channel, written as gray) image; values are
/// clamped to [0,1] and quantized to `bit_depth` (8 or 16).
inline void write_png(const std::filesystem::path& path, const Image& img, int bit_depth = 8) {
    if (bit_depth != 8 && bit_depth != 16) throw InvalidParameter("write_png: bit depth must be 8 or 16");
    if (img.channels != 3 && img.channels != 1) throw InvalidParameter("write_png: expects 1 or 3 channels");
    if (img.width <= 0 || img.height <= 0) throw InvalidParameter("write_png: empty image");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto file = detail::open_file(path, "wb");

    const unsigned max_level = bit_depth == 16 ? 65535u : 255u;
    const std::size_t bytes = bit_depth / 8;
    const std::size_t row_bytes = static_cast<std::size_t>(img.width) * img.channels * bytes;
    std::vector<unsigned char> buffer(row_bytes * img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const unsigned q = quantize(img.data[i], max_level);
        if (bytes == 2) {
            buffer[2 * i] = static_cast<unsigned char>(q >> 8);  // PNG is big-endian
            buffer[2 * i + 1] = static_cast<unsigned char>(q & 0xFF);
        } else {
            buffer[i] = static_cast<unsigned char>(q);
        }
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * row_bytes;

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path.string() + ": PNG write failed");
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, img.width, img.height, bit_depth,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Rounds every value to the nearest level of a `bit_depth` PNG, so in-memory
/// images match what a write/read cycle would produce.
inline Image quantized(const Image& img, int bit_depth = 8) {
    const unsigned max_level = bit_depth == 16 ? 65535u : 255u;
    Image out = img;
    for (double& v : out.data) v = quantize(v, max_level) / static_cast<double>(max_level);
    return out;
}

}  // namespace llgs::io
