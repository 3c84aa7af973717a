#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace klp {

struct BBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max; }
    bool contains(double x, double y) const {
        return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
    }
};

double iou(const BBox& a, const BBox& b);

struct CiouResult {
    double loss = 0.0;
    // d(loss)/d(pred.x_min, pred.y_min, pred.x_max, pred.y_max)
    std::array<double, 4> grad{};
};

/// 1 - IoU + center-distance/enclosing-diagonal penalty + aspect term.
/// The gradient is the exact derivative of the evaluated expression
/// (including the alpha coupling); it is undefined only where box edges
/// coincide exactly.
CiouResult ciou_loss(const BBox& pred, const BBox& gt);

enum class NmsMode { Ciou, PlainIou };

/// Greedy descending-score suppression. In Ciou mode a candidate is dropped
/// when (IoU - center_dist^2 / enclosing_diag^2) against a kept box exceeds
/// the threshold; PlainIou uses bare IoU. Ties resolve toward the lower index.
std::vector<std::size_t> ciou_nms(std::span<const BBox> boxes, std::span<const double> scores,
                                  double threshold, NmsMode mode = NmsMode::Ciou);

} // namespace klp
