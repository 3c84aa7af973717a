#include "klp/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "klp/tensor_io.hpp"

namespace klp {

void write_pgm(const std::string& path, const Tensor& grid) {
    if (grid.rank() != 2) throw std::invalid_argument("write_pgm expects a rank-2 grid");
    const std::size_t h = grid.extent(0), w = grid.extent(1);
    std::ostringstream os;
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double v = std::clamp(grid[i], 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    atomic_write_file(path, os.str());
}

void RgbImage::set(std::size_t x, std::size_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x >= w || y >= h) return;
    const std::size_t at = 3 * (y * w + x);
    data[at] = r;
    data[at + 1] = g;
    data[at + 2] = b;
}

void RgbImage::line(double x0, double y0, double x1, double y1, std::uint8_t r, std::uint8_t g,
                    std::uint8_t b) {
    const double len = std::max(std::fabs(x1 - x0), std::fabs(y1 - y0));
    const int steps = std::max(1, static_cast<int>(std::ceil(len)));
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const double x = x0 + t * (x1 - x0);
        const double y = y0 + t * (y1 - y0);
        if (x < 0 || y < 0) continue;
        set(static_cast<std::size_t>(std::lround(x)), static_cast<std::size_t>(std::lround(y)), r,
            g, b);
    }
}

void write_ppm(const std::string& path, const RgbImage& image) {
    std::ostringstream os;
    os << "P6\n" << image.w << ' ' << image.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(image.data.data()),
             static_cast<std::streamsize>(image.data.size()));
    atomic_write_file(path, os.str());
}

RgbImage render_scene_overlay(const Scene& scene) {
    RgbImage img;
    img.w = scene.image_w;
    img.h = scene.image_h;
    img.data.assign(3 * img.w * img.h, 16);

    const std::uint8_t palette[3][3] = {{80, 200, 120}, {90, 140, 255}, {255, 170, 60}};
    for (const Edge& e : scene.links) {
        const Keypoint& a = scene.keypoints[e.first];
        const Keypoint& b = scene.keypoints[e.second];
        const auto& c = palette[a.category % 3];
        img.line(a.x, a.y, b.x, b.y, c[0], c[1], c[2]);
    }
    for (const Keypoint& kp : scene.keypoints) {
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const double x = kp.x + dx, y = kp.y + dy;
                if (x < 0 || y < 0) continue;
                img.set(static_cast<std::size_t>(std::lround(x)),
                        static_cast<std::size_t>(std::lround(y)), 255, 255, 255);
            }
    }
    return img;
}

} // namespace klp
