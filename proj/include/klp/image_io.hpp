#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "klp/synthgen.hpp"
#include "klp/tensor.hpp"

namespace klp {

/// 8-bit binary PGM (P5); values clamped to [0,1] then rounded to 0..255.
void write_pgm(const std::string& path, const Tensor& grid);

struct RgbImage {
    std::size_t w = 0, h = 0;
    std::vector<std::uint8_t> data; // rgb rows

    void set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    void line(double x0, double y0, double x1, double y1, std::uint8_t r, std::uint8_t g,
              std::uint8_t b);
};

void write_ppm(const std::string& path, const RgbImage& image);

/// Scene poster: keypoints as colored squares, skeleton links as lines.
RgbImage render_scene_overlay(const Scene& scene);

} // namespace klp
