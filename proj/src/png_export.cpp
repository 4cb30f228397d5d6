#include "ciml/png_export.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "ciml/io.hpp"

namespace ciml::png {

Rgb ramp(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const double stops[3][3] = {{8, 29, 88}, {100, 190, 230}, {250, 230, 40}};
    const int seg = t < 0.5 ? 0 : 1;
    const double u = t < 0.5 ? t * 2.0 : (t - 0.5) * 2.0;
    auto mix = [&](int ch) {
        return static_cast<uint8_t>(stops[seg][ch] + u * (stops[seg + 1][ch] - stops[seg][ch]) + 0.5);
    };
    return {mix(0), mix(1), mix(2)};
}

Canvas::Canvas(int width, int height, Rgb background) : width_(width), height_(height) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("canvas size must be positive");
    rgb_.resize(static_cast<size_t>(width) * static_cast<size_t>(height) * 3);
    fill_rect(0, 0, width, height, background);
}

void Canvas::put(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
    const size_t i = (static_cast<size_t>(y) * static_cast<size_t>(width_) + static_cast<size_t>(x)) * 3;
    rgb_[i] = c.r;
    rgb_[i + 1] = c.g;
    rgb_[i + 2] = c.b;
}

Rgb Canvas::at(int x, int y) const {
    const size_t i = (static_cast<size_t>(y) * static_cast<size_t>(width_) + static_cast<size_t>(x)) * 3;
    return {rgb_.at(i), rgb_.at(i + 1), rgb_.at(i + 2)};
}

void Canvas::fill_rect(int x0, int y0, int w, int h, Rgb c) {
    for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) put(x, y, c);
    }
}

namespace {

template <typename F>
void blit(Canvas& cv, const Tensor<float>& img, int x0, int y0, double lo, double hi, int zoom, F color) {
    if (img.rank() != 2) throw std::invalid_argument("blit expects a [H, W] image, got " + shape_str(img.shape()));
    const double span = hi > lo ? hi - lo : 1.0;
    const int64_t H = img.dim(0), W = img.dim(1);
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            const Rgb c = color((img[y * W + x] - lo) / span);
            for (int dy = 0; dy < zoom; ++dy) {
                for (int dx = 0; dx < zoom; ++dx) {
                    cv.put(x0 + static_cast<int>(x) * zoom + dx, y0 + static_cast<int>(y) * zoom + dy, c);
                }
            }
        }
    }
}

}  // namespace

void Canvas::blit_gray(const Tensor<float>& img, int x0, int y0, double lo, double hi, int zoom) {
    blit(*this, img, x0, y0, lo, hi, zoom, [](double t) {
        const auto v = static_cast<uint8_t>(std::clamp(t, 0.0, 1.0) * 255.0 + 0.5);
        return Rgb{v, v, v};
    });
}

void Canvas::blit_ramp(const Tensor<float>& img, int x0, int y0, double lo, double hi, int zoom) {
    blit(*this, img, x0, y0, lo, hi, zoom, ramp);
}

void Canvas::save(const std::filesystem::path& path) const {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width_);
    image.height = static_cast<png_uint_32>(height_);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb_.data(), 0, nullptr)) {
        throw io::IoError(path.string() + ": " + image.message);
    }
    std::string bytes(size, '\0');
    if (!png_image_write_to_memory(&image, bytes.data(), &size, 0, rgb_.data(), 0, nullptr)) {
        throw io::IoError(path.string() + ": " + image.message);
    }
    bytes.resize(size);
    io::atomic_write(path, bytes);
}

Tensor<float> mid_slice(const Tensor<float>& volume) {
    if (volume.rank() == 2) return volume;
    if (volume.rank() != 3) throw std::invalid_argument("mid_slice expects 2 or 3 axes, got " + shape_str(volume.shape()));
    const int64_t D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
    Tensor<float> out({H, W});
    std::copy_n(volume.data() + (D / 2) * H * W, H * W, out.data());
    return out;
}

}  // namespace ciml::png
