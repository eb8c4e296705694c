#pragma once

// Small RGB raster type with PNG I/O and the drawing / filtering primitives
// the synthetic corpus needs. Pixels are doubles in [0,1], row-major, 3
// channels interleaved.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <png.h>

#include "pedgen/common.hpp"
#include "pedgen/tensor.hpp"

namespace pedgen::img {

struct Image {
    int h = 0, w = 0;
    std::vector<double> pix;  // h*w*3, rgb interleaved

    Image() = default;
    Image(int hh, int ww) : h(hh), w(ww), pix(size_t(hh) * size_t(ww) * 3, 0.0) {}

    double& at(int y, int x, int c) { return pix[(size_t(y) * size_t(w) + size_t(x)) * 3 + size_t(c)]; }
    double at(int y, int x, int c) const {
        return pix[(size_t(y) * size_t(w) + size_t(x)) * 3 + size_t(c)];
    }
    bool inside(int y, int x) const { return y >= 0 && y < h && x >= 0 && x < w; }

    void fill(double r, double g, double b) {
        for (size_t i = 0; i < pix.size(); i += 3) {
            pix[i] = r;
            pix[i + 1] = g;
            pix[i + 2] = b;
        }
    }

    void clip() {
        for (double& v : pix) v = std::min(1.0, std::max(0.0, v));
    }
};

// --- PNG I/O -----------------------------------------------------------------

inline void save_png(const Image& im, const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw IoError("png write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(im.w), png_uint_32(im.h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(size_t(im.w) * 3);
    for (int y = 0; y < im.h; ++y) {
        for (int x = 0; x < im.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::min(1.0, std::max(0.0, im.at(y, x, c)));
                row[size_t(x) * 3 + size_t(c)] = png_byte(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Image load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open for reading: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw IoError("png read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    int w = int(png_get_image_width(png, info));
    int h = int(png_get_image_height(png, info));
    Image im(h, w);
    std::vector<png_byte> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                im.at(y, x, c) = double(row[size_t(x) * 3 + size_t(c)]) / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return im;
}

// --- drawing -------------------------------------------------------------------

inline void draw_disc(Image& im, double cy, double cx, double radius, const double rgb[3]) {
    int y0 = int(std::floor(cy - radius)), y1 = int(std::ceil(cy + radius));
    int x0 = int(std::floor(cx - radius)), x1 = int(std::ceil(cx + radius));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            if (!im.inside(y, x)) continue;
            double dy = y - cy, dx = x - cx;
            if (dy * dy + dx * dx <= radius * radius)
                for (int c = 0; c < 3; ++c) im.at(y, x, c) = rgb[c];
        }
}

// thick segment: every pixel within half_width of the segment
inline void draw_segment(Image& im, double y0, double x0, double y1, double x1, double half_width,
                         const double rgb[3]) {
    double lo_y = std::min(y0, y1) - half_width, hi_y = std::max(y0, y1) + half_width;
    double lo_x = std::min(x0, x1) - half_width, hi_x = std::max(x0, x1) + half_width;
    double dy = y1 - y0, dx = x1 - x0;
    double len2 = dy * dy + dx * dx;
    for (int y = int(std::floor(lo_y)); y <= int(std::ceil(hi_y)); ++y)
        for (int x = int(std::floor(lo_x)); x <= int(std::ceil(hi_x)); ++x) {
            if (!im.inside(y, x)) continue;
            double t = len2 > 0 ? ((y - y0) * dy + (x - x0) * dx) / len2 : 0.0;
            t = std::min(1.0, std::max(0.0, t));
            double py = y0 + t * dy, px = x0 + t * dx;
            double d2 = (y - py) * (y - py) + (x - px) * (x - px);
            if (d2 <= half_width * half_width)
                for (int c = 0; c < 3; ++c) im.at(y, x, c) = rgb[c];
        }
}

inline void draw_rect(Image& im, double y0, double x0, double y1, double x1, const double rgb[3]) {
    for (int y = int(std::floor(y0)); y <= int(std::ceil(y1)); ++y)
        for (int x = int(std::floor(x0)); x <= int(std::ceil(x1)); ++x) {
            if (!im.inside(y, x)) continue;
            for (int c = 0; c < 3; ++c) im.at(y, x, c) = rgb[c];
        }
}

// --- filters ---------------------------------------------------------------------

inline std::vector<double> to_gray(const Image& im) {
    std::vector<double> g(size_t(im.h) * size_t(im.w));
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x)
            g[size_t(y) * size_t(im.w) + size_t(x)] =
                0.299 * im.at(y, x, 0) + 0.587 * im.at(y, x, 1) + 0.114 * im.at(y, x, 2);
    return g;
}

// variance of the 4-neighbour Laplacian on the 0..255 gray scale; the classic
// cheap sharpness score (blurry images score low)
inline double laplacian_variance(const Image& im) {
    auto g = to_gray(im);
    int h = im.h, w = im.w;
    auto at = [&](int y, int x) { return g[size_t(y) * size_t(w) + size_t(x)] * 255.0; };
    std::vector<double> lap;
    lap.reserve(size_t(h) * size_t(w));
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x)
            lap.push_back(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) -
                          4.0 * at(y, x));
    if (lap.empty()) return 0.0;
    double mean = 0;
    for (double v : lap) mean += v;
    mean /= double(lap.size());
    double var = 0;
    for (double v : lap) var += (v - mean) * (v - mean);
    return var / double(lap.size());
}

inline Image box_blur(const Image& im, int radius) {
    if (radius <= 0) return im;
    Image out(im.h, im.w);
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) {
            double acc[3] = {0, 0, 0};
            int n = 0;
            for (int yy = y - radius; yy <= y + radius; ++yy)
                for (int xx = x - radius; xx <= x + radius; ++xx) {
                    if (!im.inside(yy, xx)) continue;
                    for (int c = 0; c < 3; ++c) acc[c] += im.at(yy, xx, c);
                    ++n;
                }
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = acc[c] / double(n);
        }
    return out;
}

inline Image resize_bilinear(const Image& im, int nh, int nw) {
    if (nh < 1 || nw < 1) throw InvalidArgument("resize: target too small");
    Image out(nh, nw);
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
            double sy = (y + 0.5) * double(im.h) / double(nh) - 0.5;
            double sx = (x + 0.5) * double(im.w) / double(nw) - 0.5;
            int y0 = int(std::floor(sy)), x0 = int(std::floor(sx));
            double fy = sy - y0, fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                auto sample = [&](int yy, int xx) {
                    yy = std::min(im.h - 1, std::max(0, yy));
                    xx = std::min(im.w - 1, std::max(0, xx));
                    return im.at(yy, xx, c);
                };
                out.at(y, x, c) = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                                  fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
            }
        }
    return out;
}

// --- tensor bridge ----------------------------------------------------------------

// [3,H,W] tensor from the image
inline Tensor to_tensor(const Image& im) {
    Tensor t({3, im.h, im.w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < im.h; ++y)
            for (int x = 0; x < im.w; ++x) t.at(c, y, x) = im.at(y, x, c);
    return t;
}

inline Image from_tensor(const Tensor& t) {
    if (t.ndim() != 3 || t.shape[0] != 3) throw InvalidArgument("from_tensor: expected [3,H,W]");
    Image im(int(t.shape[1]), int(t.shape[2]));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < im.h; ++y)
            for (int x = 0; x < im.w; ++x) im.at(y, x, c) = t.at(c, y, x);
    return im;
}

}  // namespace pedgen::img
