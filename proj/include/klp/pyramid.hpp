#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "klp/heatmap.hpp"
#include "klp/tensor.hpp"

namespace klp {

/// One pyramid level: tensor is {H, W, C}, extents halve from level l to l+1.
struct FeatureMap {
    int level = 0;
    Tensor t;

    std::size_t h() const { return t.extent(0); }
    std::size_t w() const { return t.extent(1); }
    std::size_t c() const { return t.extent(2); }
};

struct PyramidConfig {
    int level_lo = 3;
    int level_hi = 7;
    std::size_t base_h = 64; // extent at level_lo
    std::size_t base_w = 64;
    std::vector<std::size_t> p_channels; // backbone channels per level
    std::size_t g_width = 8;             // output channels of every 1x1 g
    bool extend = false;                 // append two down-sampled levels

    std::size_t levels() const { return static_cast<std::size_t>(level_hi - level_lo) + 1; }
    void validate() const;
};

/// Named 1x1 mixing matrices (C_in x C_out) for the g and T sites.
struct MixParams {
    std::map<std::string, Tensor> mats;

    const Tensor& at(const std::string& site) const;
};

/// Flatten {H,W,C_in} over cells, multiply by W {C_in,C_out}.
Tensor mix1x1(const Tensor& t, const Tensor& w);
/// Gradients of a scalar through mix1x1: returns d(input); accumulates the
/// weight gradient into dw.
Tensor mix1x1_backward(const Tensor& t, const Tensor& w, const Tensor& upstream, Tensor& dw);
Tensor resample2x_backward(const Tensor& upstream, ResampleDir forward_dir);

std::string topdown_site(int level);
std::string bottomup_site(int level);

/// Top level passes through g alone; below, C_l = Concat(U(C_{l+1}), g(P_l)).
std::vector<FeatureMap> fpn_topdown(std::span<const FeatureMap> p_maps, const MixParams& params);

/// Bottom level passes through g alone; above, N_l = Concat(D(N_{l-1}), g(C_l)).
std::vector<FeatureMap> bottomup_aggregate(std::span<const FeatureMap> c_maps,
                                           const MixParams& params);

/// Appends two extra levels, each a 2x down-sample of the one below it.
std::vector<FeatureMap> extend_levels(std::span<const FeatureMap> c_maps);

/// T(Concat(coarse, prev_out)); extents must agree.
FeatureMap csfa_fine(const FeatureMap& coarse, const FeatureMap& prev_out, const Tensor& t_mix);

/// T(Concat(D(fine), U(prev_fine))); fine must sit at 4x the extent of
/// prev_fine so both operands meet in the middle.
FeatureMap csfa_out(const FeatureMap& fine, const FeatureMap& prev_fine, const Tensor& t_mix);

struct SiteCost {
    std::string site;
    int level = 0;
    std::size_t h = 0, w = 0, c_in = 0, c_out = 0;
    std::uint64_t macs = 0;
    std::uint64_t params = 0;
    std::uint64_t resample_reads = 0;
};

struct FlopsReport {
    std::vector<SiteCost> sites;
    std::uint64_t total_macs = 0;
    std::uint64_t total_params = 0;
    std::uint64_t total_resample_reads = 0;

    std::string to_table() const;
};

/// Exact cost model under the documented convention: a 1x1 mix over HxW
/// from C_in to C_out costs H*W*C_in*C_out multiply-accumulates (MACs, not
/// 2x) and C_in*C_out parameters; a 2x resample touches every cell of its
/// finer side once. Channel plans follow the concat semantics of the ops
/// above, so planned extents equal the tensors the ops actually produce.
FlopsReport flops_estimate(const PyramidConfig& config);

/// Planned {H,W,C} of each C map (and N map) for shape cross-checks.
std::vector<std::array<std::size_t, 3>> plan_topdown_shapes(const PyramidConfig& config);
std::vector<std::array<std::size_t, 3>> plan_bottomup_shapes(const PyramidConfig& config);

MixParams make_topology_params(const PyramidConfig& config, Rng& rng);

struct LocalizerConfig {
    std::size_t grid = 16;
    double stride = 4.0;
    std::size_t width = 4;            // working channels
    std::size_t steps = 300;
    double learning_rate = 8.0;       // losses are cell means, so grads are small
    double theta = 1.0;
    double upsilon = 0.2;
    double holdout_fraction = 0.25;
    // per-stage input texture: blur sigma (cells) and additive noise
    std::vector<double> blur = {3.0, 1.5, 0.75};
    std::vector<double> noise = {0.10, 0.05, 0.02};
};

struct LocalizerResult {
    std::vector<double> stage_error;  // held-out mean localization error, px
    std::vector<double> loss_curve;   // total training loss per step
};

/// Trains per-stage linear heads on CSFA-aggregated toy features against
/// stage-specific gt heatmaps (kernel per schedule) by plain gradient
/// descent on kd_loss; reports held-out mean decode error per stage.
/// Deterministic for a fixed seed; throws if the loss diverges.
LocalizerResult train_toy_localizer(std::size_t stages, const KernelSchedule& schedule,
                                    const std::vector<std::vector<Keypoint>>& scenes,
                                    std::uint64_t seed, const LocalizerConfig& config = {});

} // namespace klp
