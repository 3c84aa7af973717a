#include "klp/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace klp {

namespace {

constexpr double kClampEps = 1e-7;

struct CellKp {
    long long cx;
    long long cy;
    double fx; // position in cell units
    double fy;
};

std::vector<CellKp> to_cells(std::span<const Keypoint> keypoints, std::size_t grid_w,
                             std::size_t grid_h, double stride) {
    std::vector<CellKp> cells;
    cells.reserve(keypoints.size());
    for (const Keypoint& kp : keypoints) {
        const double fx = kp.x / stride;
        const double fy = kp.y / stride;
        const long long cx = static_cast<long long>(std::floor(fx));
        const long long cy = static_cast<long long>(std::floor(fy));
        if (cx < 0 || cy < 0 || cx >= static_cast<long long>(grid_w) ||
            cy >= static_cast<long long>(grid_h))
            throw std::out_of_range("keypoint outside grid after stride division");
        cells.push_back({cx, cy, fx, fy});
    }
    return cells;
}

double smooth_l1(double d) {
    const double a = std::fabs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double smooth_l1_grad(double d) {
    if (d > 1.0) return 1.0;
    if (d < -1.0) return -1.0;
    return d;
}

// Gather formulation: candidate keypoints are bucketed per cell first
// (index order preserved), then each cell reduces its own bucket. No write
// races, so the cell loop parallelizes and stays bit-equal to the serial
// scatter formulation below.
HeatmapStack render_gather(std::span<const Keypoint> keypoints, std::size_t grid_w,
                           std::size_t grid_h, double stride, int kernel) {
    const auto cells = to_cells(keypoints, grid_w, grid_h, stride);
    const long long r = (kernel - 1) / 2;
    const double sigma = kernel / 6.0;
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);

    HeatmapStack out;
    out.h = Tensor({grid_h, grid_w});
    out.ox = Tensor({grid_h, grid_w});
    out.oy = Tensor({grid_h, grid_w});
    out.stride = stride;

    std::vector<std::vector<std::uint32_t>> buckets(grid_h * grid_w);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const CellKp& c = cells[i];
        for (long long vy = std::max(0LL, c.cy - r);
             vy <= std::min(static_cast<long long>(grid_h) - 1, c.cy + r); ++vy)
            for (long long vx = std::max(0LL, c.cx - r);
                 vx <= std::min(static_cast<long long>(grid_w) - 1, c.cx + r); ++vx)
                buckets[static_cast<std::size_t>(vy) * grid_w + static_cast<std::size_t>(vx)]
                    .push_back(static_cast<std::uint32_t>(i));
    }

    double* ph = out.h.data();
    double* pox = out.ox.data();
    double* poy = out.oy.data();
    const std::size_t n = keypoints.size();

#pragma omp parallel for schedule(static) if (grid_h * grid_w > 1024 && n > 0)
    for (long long vy = 0; vy < static_cast<long long>(grid_h); ++vy) {
        for (long long vx = 0; vx < static_cast<long long>(grid_w); ++vx) {
            const std::size_t at = static_cast<std::size_t>(vy) * grid_w +
                                   static_cast<std::size_t>(vx);
            double best_h = 0.0;
            double best_d2 = 0.0;
            std::size_t nearest = n; // n = none
            for (std::uint32_t i : buckets[at]) {
                const CellKp& c = cells[i];
                const double ddx = static_cast<double>(vx - c.cx);
                const double ddy = static_cast<double>(vy - c.cy);
                best_h = std::max(best_h, std::exp(-(ddx * ddx + ddy * ddy) * inv_two_sigma2));
                const double ox = c.fx - (static_cast<double>(vx) + 0.5);
                const double oy = c.fy - (static_cast<double>(vy) + 0.5);
                const double d2 = ox * ox + oy * oy;
                if (nearest == n || d2 < best_d2) {
                    best_d2 = d2;
                    nearest = i;
                }
            }
            ph[at] = best_h;
            if (nearest != n) {
                pox[at] = cells[nearest].fx - (static_cast<double>(vx) + 0.5);
                poy[at] = cells[nearest].fy - (static_cast<double>(vy) + 0.5);
            }
        }
    }
    return out;
}

// Scatter formulation: loop keypoints, stamp windows.
HeatmapStack render_scatter(std::span<const Keypoint> keypoints, std::size_t grid_w,
                            std::size_t grid_h, double stride, int kernel) {
    const auto cells = to_cells(keypoints, grid_w, grid_h, stride);
    const long long r = (kernel - 1) / 2;
    const double sigma = kernel / 6.0;
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);

    HeatmapStack out;
    out.h = Tensor({grid_h, grid_w});
    out.ox = Tensor({grid_h, grid_w});
    out.oy = Tensor({grid_h, grid_w});
    out.stride = stride;
    Tensor owner_d2 = Tensor::full({grid_h, grid_w}, -1.0);

    for (std::size_t i = 0; i < cells.size(); ++i) {
        const CellKp& c = cells[i];
        for (long long vy = std::max(0LL, c.cy - r);
             vy <= std::min(static_cast<long long>(grid_h) - 1, c.cy + r); ++vy) {
            for (long long vx = std::max(0LL, c.cx - r);
                 vx <= std::min(static_cast<long long>(grid_w) - 1, c.cx + r); ++vx) {
                const double ddx = static_cast<double>(vx - c.cx);
                const double ddy = static_cast<double>(vy - c.cy);
                const double g = std::exp(-(ddx * ddx + ddy * ddy) * inv_two_sigma2);
                const std::size_t at = static_cast<std::size_t>(vy) * grid_w +
                                       static_cast<std::size_t>(vx);
                out.h[at] = std::max(out.h[at], g);
                const double ox = c.fx - (static_cast<double>(vx) + 0.5);
                const double oy = c.fy - (static_cast<double>(vy) + 0.5);
                const double d2 = ox * ox + oy * oy;
                if (owner_d2[at] < 0.0 || d2 < owner_d2[at]) {
                    owner_d2[at] = d2;
                    out.ox[at] = ox;
                    out.oy[at] = oy;
                }
            }
        }
    }
    return out;
}

} // namespace

KernelSchedule::KernelSchedule(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.empty()) throw std::invalid_argument("kernel schedule must be nonempty");
    for (std::size_t i = 0; i < sizes_.size(); ++i) {
        if (sizes_[i] <= 0 || sizes_[i] % 2 == 0)
            throw std::invalid_argument("kernel sizes must be odd and positive");
        if (i > 0 && sizes_[i] > sizes_[i - 1])
            throw std::invalid_argument("kernel sizes must be non-increasing across stages");
    }
}

HeatmapStack render_gt(std::span<const Keypoint> keypoints, std::size_t grid_w,
                       std::size_t grid_h, double stride, int kernel) {
    if (kernel <= 0 || kernel % 2 == 0)
        throw std::invalid_argument("kernel size must be odd and positive");
    return render_gather(keypoints, grid_w, grid_h, stride, kernel);
}

namespace serial {
HeatmapStack render_gt(std::span<const Keypoint> keypoints, std::size_t grid_w,
                       std::size_t grid_h, double stride, int kernel) {
    if (kernel <= 0 || kernel % 2 == 0)
        throw std::invalid_argument("kernel size must be odd and positive");
    return render_scatter(keypoints, grid_w, grid_h, stride, kernel);
}
} // namespace serial

KdLossResult kd_loss(const HeatmapStack& pred, const HeatmapStack& gt, double theta,
                     double upsilon) {
    if (!pred.h.same_shape(gt.h) || !pred.ox.same_shape(gt.ox) || !pred.oy.same_shape(gt.oy))
        throw std::invalid_argument("shape error: pred/gt heatmap extents disagree");

    const std::size_t n = pred.h.size();
    KdLossResult out;
    out.dh = Tensor(pred.h.shape());
    out.dox = Tensor(pred.ox.shape());
    out.doy = Tensor(pred.oy.shape());

    double bce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double target = gt.h[i];
        const double p = std::clamp(pred.h[i], kClampEps, 1.0 - kClampEps);
        bce += -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
        const bool clamped = pred.h[i] < kClampEps || pred.h[i] > 1.0 - kClampEps;
        out.dh[i] = clamped ? 0.0 : theta / static_cast<double>(n) *
                                        (-target / p + (1.0 - target) / (1.0 - p));
    }
    bce /= static_cast<double>(n);

    // offsets are supervised only where the gt kernel support is nonzero
    std::size_t m = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (gt.h[i] > 0.0) ++m;
    double off = 0.0;
    if (m > 0) {
        for (std::size_t i = 0; i < n; ++i) {
            if (gt.h[i] <= 0.0) continue;
            const double dx = pred.ox[i] - gt.ox[i];
            const double dy = pred.oy[i] - gt.oy[i];
            off += smooth_l1(dx) + smooth_l1(dy);
            out.dox[i] = upsilon / static_cast<double>(m) * smooth_l1_grad(dx);
            out.doy[i] = upsilon / static_cast<double>(m) * smooth_l1_grad(dy);
        }
        off /= static_cast<double>(m);
    }

    out.value = theta * bce + upsilon * off;
    return out;
}

std::vector<Peak> decode(const HeatmapStack& stack, double threshold, std::size_t max_peaks,
                         bool use_offsets) {
    const std::size_t gh = stack.grid_h(), gw = stack.grid_w();
    std::vector<Peak> peaks;
    for (std::size_t y = 0; y < gh; ++y) {
        for (std::size_t x = 0; x < gw; ++x) {
            const double v = stack.h.at(y, x);
            if (!(v > threshold)) continue;
            bool is_peak = true;
            for (int dy = -1; dy <= 1 && is_peak; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const long long ny = static_cast<long long>(y) + dy;
                    const long long nx = static_cast<long long>(x) + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<long long>(gh) ||
                        nx >= static_cast<long long>(gw))
                        continue;
                    if (stack.h.at(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)) >=
                        v) {
                        is_peak = false;
                        break;
                    }
                }
            }
            if (!is_peak) continue;
            Peak p;
            p.cell_x = x;
            p.cell_y = y;
            p.score = v;
            const double off_x = use_offsets ? stack.ox.at(y, x) : 0.0;
            const double off_y = use_offsets ? stack.oy.at(y, x) : 0.0;
            p.x = (static_cast<double>(x) + 0.5 + off_x) * stack.stride;
            p.y = (static_cast<double>(y) + 0.5 + off_y) * stack.stride;
            peaks.push_back(p);
        }
    }
    // stable: equal scores keep row-major order
    std::stable_sort(peaks.begin(), peaks.end(),
                     [](const Peak& a, const Peak& b) { return a.score > b.score; });
    if (peaks.size() > max_peaks) peaks.resize(max_peaks);
    return peaks;
}

} // namespace klp
