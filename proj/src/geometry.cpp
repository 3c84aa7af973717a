#include "klp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace klp {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_box(const BBox& b, const char* which) {
    if (!b.valid())
        throw std::invalid_argument(std::string(which) + " box has non-positive extent");
}

// IoU and its derivative w.r.t. the pred corners at the evaluation point.
struct IouParts {
    double value = 0.0;
    std::array<double, 4> grad{};
};

IouParts iou_with_grad(const BBox& p, const BBox& g) {
    const double ix0 = std::max(p.x_min, g.x_min);
    const double iy0 = std::max(p.y_min, g.y_min);
    const double ix1 = std::min(p.x_max, g.x_max);
    const double iy1 = std::min(p.y_max, g.y_max);
    const double iw = std::max(0.0, ix1 - ix0);
    const double ih = std::max(0.0, iy1 - iy0);
    const double inter = iw * ih;
    const double uni = p.area() + g.area() - inter;

    IouParts out;
    out.value = inter / uni;

    // d(inter)/d(pred corner): active only when the corner is the binding
    // edge of a non-empty intersection
    std::array<double, 4> dI{};
    if (inter > 0.0) {
        if (p.x_min > g.x_min) dI[0] = -ih;
        if (p.y_min > g.y_min) dI[1] = -iw;
        if (p.x_max < g.x_max) dI[2] = ih;
        if (p.y_max < g.y_max) dI[3] = iw;
    }
    const std::array<double, 4> dA = {-p.height(), -p.width(), p.height(), p.width()};
    for (int i = 0; i < 4; ++i) {
        const double dU = dA[i] - dI[i];
        out.grad[i] = (dI[i] * uni - inter * dU) / (uni * uni);
    }
    return out;
}

} // namespace

double iou(const BBox& a, const BBox& b) {
    check_box(a, "first");
    check_box(b, "second");
    return iou_with_grad(a, b).value;
}

CiouResult ciou_loss(const BBox& pred, const BBox& gt) {
    check_box(pred, "pred");
    check_box(gt, "gt");

    const IouParts i = iou_with_grad(pred, gt);

    // squared center distance
    const double dx = pred.cx() - gt.cx();
    const double dy = pred.cy() - gt.cy();
    const double rho2 = dx * dx + dy * dy;
    const std::array<double, 4> drho2 = {dx, dy, dx, dy};

    // squared diagonal of the smallest enclosing box
    const double ex = std::max(pred.x_max, gt.x_max) - std::min(pred.x_min, gt.x_min);
    const double ey = std::max(pred.y_max, gt.y_max) - std::min(pred.y_min, gt.y_min);
    const double c2 = ex * ex + ey * ey;
    std::array<double, 4> dc2{};
    if (pred.x_min < gt.x_min) dc2[0] = -2.0 * ex;
    if (pred.y_min < gt.y_min) dc2[1] = -2.0 * ey;
    if (pred.x_max > gt.x_max) dc2[2] = 2.0 * ex;
    if (pred.y_max > gt.y_max) dc2[3] = 2.0 * ey;

    // aspect-ratio consistency
    const double wp = pred.width(), hp = pred.height();
    const double diff_atan = std::atan2(gt.width(), gt.height()) - std::atan2(wp, hp);
    const double k = 4.0 / (kPi * kPi);
    const double v = k * diff_atan * diff_atan;
    // d(atan(wp/hp)) via u = wp/hp
    const double u = wp / hp;
    const double datan_du = 1.0 / (1.0 + u * u);
    const std::array<double, 4> du = {-1.0 / hp, wp / (hp * hp), 1.0 / hp, -wp / (hp * hp)};
    std::array<double, 4> dv{};
    for (int t = 0; t < 4; ++t) dv[t] = -2.0 * k * diff_atan * datan_du * du[t];

    const double denom = (1.0 - i.value) + v;
    const double alpha = v == 0.0 ? 0.0 : v / denom;

    CiouResult out;
    out.loss = 1.0 - i.value + rho2 / c2 + alpha * v;
    for (int t = 0; t < 4; ++t) {
        const double d_ratio = (drho2[t] * c2 - rho2 * dc2[t]) / (c2 * c2);
        // d(alpha*v) = d(v^2/denom), with denom depending on both v and IoU
        double d_av = 0.0;
        if (v != 0.0) {
            d_av = (2.0 * v * dv[t] * denom - v * v * (dv[t] - i.grad[t])) / (denom * denom);
        }
        out.grad[t] = -i.grad[t] + d_ratio + d_av;
    }
    return out;
}

std::vector<std::size_t> ciou_nms(std::span<const BBox> boxes, std::span<const double> scores,
                                  double threshold, NmsMode mode) {
    if (boxes.size() != scores.size())
        throw std::invalid_argument("ciou_nms: boxes and scores length mismatch");
    for (const BBox& b : boxes) check_box(b, "nms");

    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });

    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (std::size_t k : kept) {
            double overlap = iou(boxes[idx], boxes[k]);
            if (mode == NmsMode::Ciou) {
                const double dx = boxes[idx].cx() - boxes[k].cx();
                const double dy = boxes[idx].cy() - boxes[k].cy();
                const double ex = std::max(boxes[idx].x_max, boxes[k].x_max) -
                                  std::min(boxes[idx].x_min, boxes[k].x_min);
                const double ey = std::max(boxes[idx].y_max, boxes[k].y_max) -
                                  std::min(boxes[idx].y_min, boxes[k].y_min);
                overlap -= (dx * dx + dy * dy) / (ex * ex + ey * ey);
            }
            if (overlap > threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(idx);
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

} // namespace klp
