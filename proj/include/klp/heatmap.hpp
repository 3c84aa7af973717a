#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "klp/tensor.hpp"

namespace klp {

struct Keypoint {
    double x = 0.0; // image pixels
    double y = 0.0;
    int category = 0;
    int instance = -1;
    int slot = -1;
};

/// Confidence grid plus per-cell sub-cell offsets, all {H',W'} row-major,
/// at a fixed stride of image pixels per cell.
struct HeatmapStack {
    Tensor h;  // values in [0,1]
    Tensor ox; // fractional cells
    Tensor oy;
    double stride = 4.0;

    std::size_t grid_h() const { return h.extent(0); }
    std::size_t grid_w() const { return h.extent(1); }
};

/// Per-stage Gaussian window sizes; odd, positive, non-increasing.
class KernelSchedule {
public:
    explicit KernelSchedule(std::vector<int> sizes);
    static KernelSchedule coarse_to_fine() { return KernelSchedule({7, 5, 3}); }

    const std::vector<int>& sizes() const { return sizes_; }
    int at(std::size_t stage) const { return sizes_.at(stage); }
    std::size_t stages() const { return sizes_.size(); }

private:
    std::vector<int> sizes_;
};

/// Truncated Gaussian (sigma = k/6, peak 1 at the keypoint's cell) on the
/// k x k window, max-combined across keypoints. Offsets hold each cell's
/// residual toward the nearest covering keypoint, in cell units.
HeatmapStack render_gt(std::span<const Keypoint> keypoints, std::size_t grid_w,
                       std::size_t grid_h, double stride, int kernel);

namespace serial {
HeatmapStack render_gt(std::span<const Keypoint> keypoints, std::size_t grid_w,
                       std::size_t grid_h, double stride, int kernel);
}

struct KdLossResult {
    double value = 0.0;
    Tensor dh;
    Tensor dox;
    Tensor doy;
};

/// theta * mean-cell BCE on confidence + upsilon * mean Smooth-L1 on offsets
/// over cells with nonzero gt kernel support. Gradients are w.r.t. pred.
KdLossResult kd_loss(const HeatmapStack& pred, const HeatmapStack& gt, double theta,
                     double upsilon);

struct Peak {
    double x = 0.0; // image pixels
    double y = 0.0;
    double score = 0.0;
    std::size_t cell_x = 0;
    std::size_t cell_y = 0;
};

/// Strict 3x3 local maxima of H above threshold, best max_peaks by score
/// (ties resolve in row-major cell order). Sub-pixel position is
/// (cell + 0.5 + offset) * stride; with use_offsets=false the offset is 0.
std::vector<Peak> decode(const HeatmapStack& stack, double threshold, std::size_t max_peaks,
                         bool use_offsets = true);

} // namespace klp
