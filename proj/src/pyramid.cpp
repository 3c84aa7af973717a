#include "klp/pyramid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace klp {

void PyramidConfig::validate() const {
    if (level_hi < level_lo) throw std::invalid_argument("pyramid level range is empty");
    if (p_channels.size() != levels())
        throw std::invalid_argument("p_channels must list one width per level");
    for (std::size_t c : p_channels)
        if (c == 0) throw std::invalid_argument("channel widths must be positive");
    if (g_width == 0) throw std::invalid_argument("g width must be positive");
    const std::size_t shift = levels() - 1 + (extend ? 2 : 0);
    if ((base_h >> shift) << shift != base_h || (base_w >> shift) << shift != base_w)
        throw std::invalid_argument("base extents must halve exactly across all levels");
}

const Tensor& MixParams::at(const std::string& site) const {
    auto it = mats.find(site);
    if (it == mats.end()) throw std::invalid_argument("missing mix matrix for site " + site);
    return it->second;
}

Tensor mix1x1(const Tensor& t, const Tensor& w) {
    if (t.rank() != 3) throw std::invalid_argument("shape error: mix1x1 expects {H,W,C}");
    if (w.rank() != 2 || w.extent(0) != t.extent(2))
        throw std::invalid_argument("shape error: mix matrix is " + w.shape_str() +
                                    " against channels " + t.shape_str());
    const std::size_t cells = t.extent(0) * t.extent(1);
    Tensor flat({cells, t.extent(2)}, t.values());
    Tensor mixed = matmul(flat, w);
    return Tensor({t.extent(0), t.extent(1), w.extent(1)}, std::move(mixed.values()));
}

Tensor mix1x1_backward(const Tensor& t, const Tensor& w, const Tensor& upstream, Tensor& dw) {
    const std::size_t cells = t.extent(0) * t.extent(1);
    Tensor flat({cells, t.extent(2)}, t.values());
    Tensor up_flat({cells, w.extent(1)}, upstream.values());
    dw = dw.size() == 0 ? matmul(transpose(flat), up_flat)
                        : add(dw, matmul(transpose(flat), up_flat));
    Tensor din_flat = matmul(up_flat, transpose(w));
    return Tensor(t.shape(), std::move(din_flat.values()));
}

Tensor resample2x_backward(const Tensor& upstream, ResampleDir forward_dir) {
    if (forward_dir == ResampleDir::Down) {
        // each input cell contributed 1/4 of one output cell
        return scale(resample2x(upstream, ResampleDir::Up), 0.25);
    }
    // nearest-up duplicated each input cell into a 2x2 block: sum-pool
    return scale(resample2x(upstream, ResampleDir::Down), 4.0);
}

std::string topdown_site(int level) { return "td_g_l" + std::to_string(level); }
std::string bottomup_site(int level) { return "bu_g_l" + std::to_string(level); }

namespace {

void check_level_chain(std::span<const FeatureMap> maps, const char* what) {
    if (maps.empty()) throw std::invalid_argument(std::string(what) + ": no levels");
    for (std::size_t i = 1; i < maps.size(); ++i) {
        if (maps[i].level != maps[i - 1].level + 1)
            throw std::invalid_argument(std::string(what) + ": levels must be contiguous");
        if (maps[i].h() * 2 != maps[i - 1].h() || maps[i].w() * 2 != maps[i - 1].w())
            throw std::invalid_argument(std::string(what) + ": extents must halve per level");
    }
}

} // namespace

std::vector<FeatureMap> fpn_topdown(std::span<const FeatureMap> p_maps, const MixParams& params) {
    check_level_chain(p_maps, "fpn_topdown");
    std::vector<FeatureMap> c_maps(p_maps.size());
    const std::size_t top = p_maps.size() - 1;
    c_maps[top] = {p_maps[top].level, mix1x1(p_maps[top].t, params.at(topdown_site(p_maps[top].level)))};
    for (std::size_t i = top; i-- > 0;) {
        Tensor up = resample2x(c_maps[i + 1].t, ResampleDir::Up);
        Tensor g = mix1x1(p_maps[i].t, params.at(topdown_site(p_maps[i].level)));
        c_maps[i] = {p_maps[i].level, concat(up, g, 2)};
    }
    return c_maps;
}

std::vector<FeatureMap> bottomup_aggregate(std::span<const FeatureMap> c_maps,
                                           const MixParams& params) {
    check_level_chain(c_maps, "bottomup_aggregate");
    std::vector<FeatureMap> n_maps(c_maps.size());
    n_maps[0] = {c_maps[0].level, mix1x1(c_maps[0].t, params.at(bottomup_site(c_maps[0].level)))};
    for (std::size_t i = 1; i < c_maps.size(); ++i) {
        Tensor down = resample2x(n_maps[i - 1].t, ResampleDir::Down);
        Tensor g = mix1x1(c_maps[i].t, params.at(bottomup_site(c_maps[i].level)));
        n_maps[i] = {c_maps[i].level, concat(down, g, 2)};
    }
    return n_maps;
}

std::vector<FeatureMap> extend_levels(std::span<const FeatureMap> c_maps) {
    check_level_chain(c_maps, "extend_levels");
    const FeatureMap& top = c_maps.back();
    if (top.h() % 4 != 0 || top.w() % 4 != 0)
        throw std::invalid_argument("shape error: top level must halve twice for extension");
    std::vector<FeatureMap> out(c_maps.begin(), c_maps.end());
    FeatureMap c8{top.level + 1, resample2x(top.t, ResampleDir::Down)};
    FeatureMap c9{top.level + 2, resample2x(c8.t, ResampleDir::Down)};
    out.push_back(std::move(c8));
    out.push_back(std::move(c9));
    return out;
}

FeatureMap csfa_fine(const FeatureMap& coarse, const FeatureMap& prev_out, const Tensor& t_mix) {
    if (coarse.h() != prev_out.h() || coarse.w() != prev_out.w())
        throw std::invalid_argument("shape error: csfa_fine operands must share extents");
    return {coarse.level, mix1x1(concat(coarse.t, prev_out.t, 2), t_mix)};
}

FeatureMap csfa_out(const FeatureMap& fine, const FeatureMap& prev_fine, const Tensor& t_mix) {
    if (fine.h() != 4 * prev_fine.h() || fine.w() != 4 * prev_fine.w())
        throw std::invalid_argument(
            "shape error: csfa_out needs the fine map at 4x the previous extent");
    Tensor down = resample2x(fine.t, ResampleDir::Down);
    Tensor up = resample2x(prev_fine.t, ResampleDir::Up);
    return {prev_fine.level, mix1x1(concat(down, up, 2), t_mix)};
}

namespace {

struct Plan {
    std::vector<std::array<std::size_t, 3>> c_shapes; // including extension
    std::vector<std::array<std::size_t, 3>> n_shapes;
    std::vector<SiteCost> sites;
};

Plan build_plan(const PyramidConfig& config) {
    config.validate();
    Plan plan;
    const std::size_t n_levels = config.levels();

    auto extent_at = [&](std::size_t i) {
        return std::array<std::size_t, 2>{config.base_h >> i, config.base_w >> i};
    };
    auto add_mix = [&](const std::string& site, int level, std::size_t h, std::size_t w,
                       std::size_t cin, std::size_t cout) {
        SiteCost s;
        s.site = site;
        s.level = level;
        s.h = h;
        s.w = w;
        s.c_in = cin;
        s.c_out = cout;
        s.macs = static_cast<std::uint64_t>(h) * w * cin * cout;
        s.params = static_cast<std::uint64_t>(cin) * cout;
        plan.sites.push_back(s);
    };
    auto add_resample = [&](const std::string& site, int level, std::size_t fine_h,
                            std::size_t fine_w, std::size_t c) {
        SiteCost s;
        s.site = site;
        s.level = level;
        s.h = fine_h;
        s.w = fine_w;
        s.c_in = c;
        s.c_out = c;
        s.resample_reads = static_cast<std::uint64_t>(fine_h) * fine_w * c;
        plan.sites.push_back(s);
    };

    // top-down: C channels accumulate by g_width per level below the top
    std::vector<std::size_t> c_channels(n_levels);
    for (std::size_t i = n_levels; i-- > 0;) {
        const int level = config.level_lo + static_cast<int>(i);
        const auto [h, w] = extent_at(i);
        add_mix(topdown_site(level), level, h, w, config.p_channels[i], config.g_width);
        if (i == n_levels - 1) {
            c_channels[i] = config.g_width;
        } else {
            add_resample("U_to_l" + std::to_string(level), level, h, w, c_channels[i + 1]);
            c_channels[i] = c_channels[i + 1] + config.g_width;
        }
    }
    for (std::size_t i = 0; i < n_levels; ++i) {
        const auto [h, w] = extent_at(i);
        plan.c_shapes.push_back({h, w, c_channels[i]});
    }

    // extension: two down-samples of the top C map
    std::size_t total_levels = n_levels;
    if (config.extend) {
        for (int e = 0; e < 2; ++e) {
            const std::size_t i = n_levels + static_cast<std::size_t>(e);
            const int level = config.level_lo + static_cast<int>(i);
            const auto [ph, pw] = extent_at(i - 1); // finer side of the down-sample
            add_resample("D_ext_l" + std::to_string(level), level, ph, pw,
                         c_channels[n_levels - 1]);
            plan.c_shapes.push_back({ph / 2, pw / 2, c_channels[n_levels - 1]});
        }
        total_levels += 2;
    }

    // bottom-up over all C maps
    std::vector<std::size_t> n_channels(total_levels);
    for (std::size_t i = 0; i < total_levels; ++i) {
        const int level = config.level_lo + static_cast<int>(i);
        const auto& cs = plan.c_shapes[i];
        add_mix(bottomup_site(level), level, cs[0], cs[1], cs[2], config.g_width);
        if (i == 0) {
            n_channels[i] = config.g_width;
        } else {
            add_resample("D_to_l" + std::to_string(level), level, plan.c_shapes[i - 1][0],
                         plan.c_shapes[i - 1][1], n_channels[i - 1]);
            n_channels[i] = n_channels[i - 1] + config.g_width;
        }
        plan.n_shapes.push_back({cs[0], cs[1], n_channels[i]});
    }
    return plan;
}

} // namespace

std::vector<std::array<std::size_t, 3>> plan_topdown_shapes(const PyramidConfig& config) {
    return build_plan(config).c_shapes;
}

std::vector<std::array<std::size_t, 3>> plan_bottomup_shapes(const PyramidConfig& config) {
    return build_plan(config).n_shapes;
}

FlopsReport flops_estimate(const PyramidConfig& config) {
    FlopsReport report;
    report.sites = build_plan(config).sites;
    for (const SiteCost& s : report.sites) {
        report.total_macs += s.macs;
        report.total_params += s.params;
        report.total_resample_reads += s.resample_reads;
    }
    return report;
}

std::string FlopsReport::to_table() const {
    std::ostringstream os;
    os << "site             level extent      cin  cout  macs        params    reads\n";
    auto pad = [](std::string s, std::size_t w) {
        if (s.size() < w) s.append(w - s.size(), ' ');
        return s;
    };
    for (const SiteCost& s : sites) {
        os << pad(s.site, 17) << pad(std::to_string(s.level), 6)
           << pad(std::to_string(s.h) + "x" + std::to_string(s.w), 12)
           << pad(std::to_string(s.c_in), 5) << pad(std::to_string(s.c_out), 6)
           << pad(std::to_string(s.macs), 12) << pad(std::to_string(s.params), 10)
           << std::to_string(s.resample_reads) << '\n';
    }
    os << "total macs=" << total_macs << " params=" << total_params
       << " resample_reads=" << total_resample_reads << '\n';
    return os.str();
}

MixParams make_topology_params(const PyramidConfig& config, Rng& rng) {
    config.validate();
    MixParams params;
    const Plan plan = build_plan(config);
    for (const SiteCost& s : plan.sites) {
        if (s.params == 0) continue; // resample sites carry no weights
        params.mats[s.site] =
            Tensor::randn({s.c_in, s.c_out}, rng, 1.0 / std::sqrt(static_cast<double>(s.c_in)));
    }
    return params;
}

// ---------------------------------------------------------------------------
// toy cascade localizer

namespace {

struct StageParams {
    Tensor g;      // {1, width}
    Tensor t_fine; // {2*width, width}, stages > 0
    Tensor t_out;  // {2*width, width}, stages < last
    Tensor head;   // {width, 3}
    std::array<double, 3> bias{};
};

struct StageTrace {
    Tensor input;      // {G,G,1}
    Tensor coarse;     // g(input)
    Tensor fine_cat;   // concat input of csfa_fine
    Tensor fine;       // stage feature
    Tensor out_cat;    // concat input of csfa_out
    Tensor out_up;     // up2(fine)
    Tensor out_down;   // down2(fine)
    Tensor prev_out;   // csfa_out result fed to the next stage
    Tensor head_in;    // == fine
    Tensor logits;     // {G,G,3}
    HeatmapStack pred;
};

// three channels per stage: blurred keypoint indicator plus the sub-cell
// displacement toward the nearest keypoint, masked to the stage's kernel
// window; all perturbed by seeded noise
Tensor stage_input(const std::vector<Keypoint>& kps, std::size_t grid, double stride, int kernel,
                   double blur, double noise, Rng& rng) {
    Tensor t({grid, grid, 3});
    const double radius = (kernel - 1) / 2 + 0.5;
    for (std::size_t y = 0; y < grid; ++y)
        for (std::size_t x = 0; x < grid; ++x) {
            double v = 0.0, best_d2 = 0.0, off_x = 0.0, off_y = 0.0;
            bool found = false;
            for (const Keypoint& kp : kps) {
                const double dx = kp.x / stride - (static_cast<double>(x) + 0.5);
                const double dy = kp.y / stride - (static_cast<double>(y) + 0.5);
                const double d2 = dx * dx + dy * dy;
                v = std::max(v, std::exp(-d2 / (2.0 * blur * blur)));
                if ((!found || d2 < best_d2) && std::fabs(dx) <= radius &&
                    std::fabs(dy) <= radius) {
                    found = true;
                    best_d2 = d2;
                    off_x = dx;
                    off_y = dy;
                }
            }
            t.at(y, x, 0) = v + noise * rng.next_normal();
            t.at(y, x, 1) = off_x + noise * rng.next_normal();
            t.at(y, x, 2) = off_y + noise * rng.next_normal();
        }
    return t;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

} // namespace

LocalizerResult train_toy_localizer(std::size_t stages, const KernelSchedule& schedule,
                                    const std::vector<std::vector<Keypoint>>& scenes,
                                    std::uint64_t seed, const LocalizerConfig& config) {
    if (stages < 1) throw std::invalid_argument("localizer needs at least one stage");
    if (schedule.stages() != stages)
        throw std::invalid_argument("schedule length must equal stage count");
    if (config.blur.size() < stages || config.noise.size() < stages)
        throw std::invalid_argument("localizer config must cover every stage");
    if (scenes.size() < 4) throw std::invalid_argument("localizer needs a few scenes");

    const std::size_t grid = config.grid;
    const std::size_t width = config.width;
    const std::size_t n_hold = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(config.holdout_fraction *
                                               static_cast<double>(scenes.size()))));
    const std::size_t n_train = scenes.size() - n_hold;

    Rng rng(seed);

    // precompute per-scene stage inputs and gt stacks
    std::vector<std::vector<Tensor>> inputs(scenes.size());
    std::vector<std::vector<HeatmapStack>> gts(scenes.size());
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        Rng scene_rng = rng.fork(s + 1);
        for (std::size_t st = 0; st < stages; ++st) {
            inputs[s].push_back(stage_input(scenes[s], grid, config.stride, schedule.at(st),
                                            config.blur[st], config.noise[st], scene_rng));
            gts[s].push_back(
                render_gt(scenes[s], grid, grid, config.stride, schedule.at(st)));
        }
    }

    std::vector<StageParams> params(stages);
    for (std::size_t st = 0; st < stages; ++st) {
        params[st].g = Tensor::randn({3, width}, rng, 0.5);
        if (st > 0) params[st].t_fine = Tensor::randn({2 * width, width}, rng, 0.3);
        if (st + 1 < stages) params[st].t_out = Tensor::randn({2 * width, width}, rng, 0.3);
        params[st].head = Tensor::randn({width, 3}, rng, 0.3);
        params[st].bias = {-2.0, 0.0, 0.0};
    }

    auto forward = [&](std::size_t scene_idx, std::vector<StageTrace>& traces) {
        traces.assign(stages, StageTrace{});
        double loss = 0.0;
        for (std::size_t st = 0; st < stages; ++st) {
            StageTrace& tr = traces[st];
            tr.input = inputs[scene_idx][st];
            tr.coarse = mix1x1(tr.input, params[st].g);
            if (st == 0) {
                tr.fine = tr.coarse;
            } else {
                tr.fine_cat = concat(tr.coarse, traces[st - 1].prev_out, 2);
                tr.fine = csfa_fine({0, tr.coarse}, {0, traces[st - 1].prev_out},
                                    params[st].t_fine)
                              .t;
            }
            if (st + 1 < stages) {
                // the stage's fine feature enters the aggregation from both
                // hourglass paths: once up-sampled, once down-sampled
                tr.out_up = resample2x(tr.fine, ResampleDir::Up);
                tr.out_down = resample2x(tr.fine, ResampleDir::Down);
                tr.prev_out = csfa_out({1, tr.out_up}, {0, tr.out_down}, params[st].t_out).t;
                tr.out_cat = concat(resample2x(tr.out_up, ResampleDir::Down),
                                    resample2x(tr.out_down, ResampleDir::Up), 2);
            }
            tr.logits = mix1x1(tr.fine, params[st].head);
            tr.pred.h = Tensor({grid, grid});
            tr.pred.ox = Tensor({grid, grid});
            tr.pred.oy = Tensor({grid, grid});
            tr.pred.stride = config.stride;
            for (std::size_t i = 0; i < grid * grid; ++i) {
                tr.pred.h[i] = sigmoid(tr.logits[3 * i + 0] + params[st].bias[0]);
                tr.pred.ox[i] = tr.logits[3 * i + 1] + params[st].bias[1];
                tr.pred.oy[i] = tr.logits[3 * i + 2] + params[st].bias[2];
            }
            loss += kd_loss(tr.pred, gts[scene_idx][st], config.theta, config.upsilon).value;
        }
        return loss;
    };

    LocalizerResult result;
    for (std::size_t step = 0; step < config.steps; ++step) {
        double total_loss = 0.0;
        // gradient accumulators
        std::vector<StageParams> grads(stages);
        for (std::size_t st = 0; st < stages; ++st) {
            grads[st].g = Tensor(params[st].g.shape());
            if (st > 0) grads[st].t_fine = Tensor(params[st].t_fine.shape());
            if (st + 1 < stages) grads[st].t_out = Tensor(params[st].t_out.shape());
            grads[st].head = Tensor(params[st].head.shape());
        }

        for (std::size_t s = 0; s < n_train; ++s) {
            std::vector<StageTrace> traces;
            total_loss += forward(s, traces);

            // backprop stages in reverse; dfine accumulates the head path
            // and the next stage's aggregation path
            std::vector<Tensor> dfine(stages);
            for (std::size_t st = stages; st-- > 0;) {
                const StageTrace& tr = traces[st];
                const KdLossResult kd =
                    kd_loss(tr.pred, gts[s][st], config.theta, config.upsilon);
                Tensor dlogits({grid, grid, 3});
                for (std::size_t i = 0; i < grid * grid; ++i) {
                    const double h = tr.pred.h[i];
                    dlogits[3 * i + 0] = kd.dh[i] * h * (1.0 - h);
                    dlogits[3 * i + 1] = kd.dox[i];
                    dlogits[3 * i + 2] = kd.doy[i];
                }
                Tensor d = mix1x1_backward(tr.fine, params[st].head, dlogits, grads[st].head);
                if (dfine[st].size() == 0)
                    dfine[st] = std::move(d);
                else
                    dfine[st] = add(dfine[st], d);

                if (st + 1 < stages) {
                    // path: next stage's fine_cat -> prev_out -> csfa_out chain
                    const StageTrace& nx = traces[st + 1];
                    Tensor dnx_fine_pre = mix1x1_backward(
                        nx.fine_cat, params[st + 1].t_fine, dfine[st + 1], grads[st + 1].t_fine);
                    // split concat: [coarse | prev_out]
                    Tensor dcoarse_nx = slice(dnx_fine_pre, 2, 0, width);
                    Tensor dprev = slice(dnx_fine_pre, 2, width, width);
                    mix1x1_backward(nx.input, params[st + 1].g, dcoarse_nx, grads[st + 1].g);

                    Tensor dout_cat =
                        mix1x1_backward(tr.out_cat, params[st].t_out, dprev, grads[st].t_out);
                    Tensor d_down_path = slice(dout_cat, 2, 0, width);
                    Tensor d_up_path = slice(dout_cat, 2, width, width);
                    // down(up(fine)) branch
                    Tensor d_up = resample2x_backward(d_down_path, ResampleDir::Down);
                    Tensor d1 = resample2x_backward(d_up, ResampleDir::Up);
                    // up(down(fine)) branch
                    Tensor d_down = resample2x_backward(d_up_path, ResampleDir::Up);
                    Tensor d2 = resample2x_backward(d_down, ResampleDir::Down);
                    dfine[st] = add(dfine[st], add(d1, d2));
                }

                if (st == 0) {
                    mix1x1_backward(tr.input, params[st].g, dfine[st], grads[st].g);
                }
                // bias gradients
                for (std::size_t i = 0; i < grid * grid; ++i) {
                    const double h = tr.pred.h[i];
                    grads[st].bias[0] += kd.dh[i] * h * (1.0 - h);
                    grads[st].bias[1] += kd.dox[i];
                    grads[st].bias[2] += kd.doy[i];
                }
            }
        }

        total_loss /= static_cast<double>(n_train);
        if (!std::isfinite(total_loss))
            throw std::runtime_error("toy localizer diverged at step " + std::to_string(step));
        result.loss_curve.push_back(total_loss);

        const double lr = config.learning_rate / static_cast<double>(n_train);
        for (std::size_t st = 0; st < stages; ++st) {
            auto apply = [&](Tensor& w, const Tensor& g) {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
            };
            apply(params[st].g, grads[st].g);
            if (st > 0) apply(params[st].t_fine, grads[st].t_fine);
            if (st + 1 < stages) apply(params[st].t_out, grads[st].t_out);
            apply(params[st].head, grads[st].head);
            for (int b = 0; b < 3; ++b) params[st].bias[b] -= lr * grads[st].bias[b];
        }
    }

    // held-out evaluation: mean distance from each gt keypoint to the
    // nearest decoded peak, missing peaks cost the grid diagonal
    result.stage_error.assign(stages, 0.0);
    std::size_t n_kps = 0;
    const double miss = config.stride * static_cast<double>(grid) * std::sqrt(2.0);
    for (std::size_t s = n_train; s < scenes.size(); ++s) {
        std::vector<StageTrace> traces;
        forward(s, traces);
        for (std::size_t st = 0; st < stages; ++st) {
            const auto peaks = decode(traces[st].pred, 0.25, scenes[s].size() + 4);
            for (const Keypoint& kp : scenes[s]) {
                double best = miss;
                for (const Peak& p : peaks) {
                    const double d = std::hypot(p.x - kp.x, p.y - kp.y);
                    best = std::min(best, d);
                }
                result.stage_error[st] += best;
            }
        }
        n_kps += scenes[s].size();
    }
    for (double& e : result.stage_error) e /= static_cast<double>(n_kps);
    return result;
}

} // namespace klp
