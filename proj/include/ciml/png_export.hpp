#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ciml/tensor.hpp"

namespace ciml::png {

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
};

// Dark blue (t = 0) through light blue to yellow (t = 1).
Rgb ramp(double t);

class Canvas {
public:
    Canvas(int width, int height, Rgb background = {255, 255, 255});

    int width() const { return width_; }
    int height() const { return height_; }
    void put(int x, int y, Rgb c);
    Rgb at(int x, int y) const;
    void fill_rect(int x0, int y0, int w, int h, Rgb c);
    // Draws a [H, W] tensor, mapping [lo, hi] to black..white or onto the ramp.
    void blit_gray(const Tensor<float>& img, int x0, int y0, double lo, double hi, int zoom = 1);
    void blit_ramp(const Tensor<float>& img, int x0, int y0, double lo, double hi, int zoom = 1);
    void save(const std::filesystem::path& path) const;

private:
    int width_, height_;
    std::vector<uint8_t> rgb_;
};

// Central slice along the first axis of a [D, H, W] volume; [H, W] passes through.
Tensor<float> mid_slice(const Tensor<float>& volume);

}  // namespace ciml::png
