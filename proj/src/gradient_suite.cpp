#include "klp/gradient_suite.hpp"

#include <cmath>

#include "klp/clpg.hpp"
#include "klp/geometry.hpp"
#include "klp/gradcheck.hpp"
#include "klp/heatmap.hpp"
#include "klp/pyramid.hpp"

namespace klp {

namespace {

constexpr double kEps = 1e-5;

BBox random_box(Rng& rng, double shift) {
    const double x0 = shift + 3.0 * rng.next_uniform();
    const double y0 = shift + 3.0 * rng.next_uniform();
    return {x0, y0, x0 + 0.5 + 2.5 * rng.next_uniform(), y0 + 0.5 + 2.5 * rng.next_uniform()};
}

// keep every pred edge at least `margin` away from the matching gt edge so
// the finite-difference probe cannot cross a min/max switch
bool well_separated(const BBox& a, const BBox& b, double margin) {
    return std::fabs(a.x_min - b.x_min) > margin && std::fabs(a.y_min - b.y_min) > margin &&
           std::fabs(a.x_max - b.x_max) > margin && std::fabs(a.y_max - b.y_max) > margin &&
           std::fabs(a.x_min - b.x_max) > margin && std::fabs(a.x_max - b.x_min) > margin &&
           std::fabs(a.y_min - b.y_max) > margin && std::fabs(a.y_max - b.y_min) > margin;
}

std::pair<BBox, BBox> random_box_pair(std::uint64_t seed) {
    Rng rng(seed);
    for (int attempt = 0; attempt < 100; ++attempt) {
        const BBox pred = random_box(rng, 0.0);
        const BBox gt = random_box(rng, 0.7 * rng.next_uniform());
        if (well_separated(pred, gt, 1e-3)) return {pred, gt};
    }
    return {{0.0, 0.0, 1.0, 1.0}, {0.4, 0.3, 2.1, 1.7}};
}

double check_ciou(std::uint64_t seed) {
    const auto [pred, gt] = random_box_pair(seed);
    const CiouResult res = ciou_loss(pred, gt);
    const Tensor x({4}, {pred.x_min, pred.y_min, pred.x_max, pred.y_max});
    const Tensor analytic({4}, {res.grad[0], res.grad[1], res.grad[2], res.grad[3]});
    auto f = [&gt](const Tensor& t) {
        return ciou_loss({t[0], t[1], t[2], t[3]}, gt).loss;
    };
    return grad_check(f, x, analytic, kEps);
}

struct KdInstance {
    HeatmapStack pred;
    HeatmapStack gt;
};

KdInstance random_kd_instance(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t grid = 8;
    std::vector<Keypoint> kps;
    for (int i = 0; i < 3; ++i)
        kps.push_back({2.0 + 27.0 * rng.next_uniform(), 2.0 + 27.0 * rng.next_uniform(), 0, 0, 0});
    KdInstance inst;
    inst.gt = render_gt(kps, grid, grid, 4.0, 5);
    inst.pred.stride = 4.0;
    inst.pred.h = Tensor({grid, grid});
    inst.pred.ox = Tensor({grid, grid});
    inst.pred.oy = Tensor({grid, grid});
    for (std::size_t i = 0; i < grid * grid; ++i) {
        inst.pred.h[i] = 0.05 + 0.9 * rng.next_uniform();
        inst.pred.ox[i] = 2.0 * rng.next_uniform() - 1.0;
        inst.pred.oy[i] = 2.0 * rng.next_uniform() - 1.0;
    }
    return inst;
}

double check_kd_confidence(std::uint64_t seed) {
    KdInstance inst = random_kd_instance(seed);
    const KdLossResult res = kd_loss(inst.pred, inst.gt, 1.0, 1.0);
    auto f = [&inst](const Tensor& h) {
        HeatmapStack p = inst.pred;
        p.h = h;
        return kd_loss(p, inst.gt, 1.0, 1.0).value;
    };
    return grad_check(f, inst.pred.h, res.dh, kEps);
}

double check_kd_offsets(std::uint64_t seed) {
    KdInstance inst = random_kd_instance(seed);
    const KdLossResult res = kd_loss(inst.pred, inst.gt, 1.0, 1.0);
    auto fx = [&inst](const Tensor& ox) {
        HeatmapStack p = inst.pred;
        p.ox = ox;
        return kd_loss(p, inst.gt, 1.0, 1.0).value;
    };
    const double ex = grad_check(fx, inst.pred.ox, res.dox, kEps);
    auto fy = [&inst](const Tensor& oy) {
        HeatmapStack p = inst.pred;
        p.oy = oy;
        return kd_loss(p, inst.gt, 1.0, 1.0).value;
    };
    return std::max(ex, grad_check(fy, inst.pred.oy, res.doy, kEps));
}

double check_kl(std::uint64_t seed) {
    Rng rng(seed);
    Posterior post;
    post.mu = Tensor::randn({4, 3}, rng);
    post.logvar = Tensor::randn({4, 3}, rng, 0.5);

    Tensor dmu(post.mu.shape()), dlogvar(post.logvar.shape());
    for (std::size_t i = 0; i < post.mu.size(); ++i) {
        dmu[i] = post.mu[i];
        dlogvar[i] = 0.5 * (std::exp(post.logvar[i]) - 1.0);
    }
    auto fmu = [&post](const Tensor& mu) { return kl_term({mu, post.logvar}); };
    auto flv = [&post](const Tensor& lv) { return kl_term({post.mu, lv}); };
    return std::max(grad_check(fmu, post.mu, dmu, kEps),
                    grad_check(flv, post.logvar, dlogvar, kEps));
}

// random two-instance graph for the matched link loss
Graph random_graph(Rng& rng) {
    const std::size_t n = 5;
    Graph g;
    g.a = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) g.a.at(i, i) = 1.0;
    auto edge = [&](std::size_t i, std::size_t j) {
        g.a.at(i, j) = 1.0;
        g.a.at(j, i) = 1.0;
    };
    edge(0, 1);
    edge(1, 2);
    edge(3, 4);
    g.x = Tensor::randn({n, 6}, rng);
    g.cat = {0, 0, 0, 1, 1};
    g.inst = {0, 0, 0, 1, 1};
    return g;
}

// f(W_site) with every other matrix and the sampling noise held fixed
double check_clpg_param(std::uint64_t seed, int which) {
    Rng rng(seed);
    const Graph g = random_graph(rng);
    ClpgParams params = ClpgParams::init(6, 2, 5, 3, 1.0, rng);
    Rng noise_rng = rng.fork(7);
    const Tensor eps = Tensor::randn({g.n(), 3}, noise_rng);

    const ClpgGrads grads = matched_loss_gradients(g, params, eps);
    const Tensor* mats[6] = {&params.w1, &params.w2, &params.w3,
                             &params.w4, &params.w_mu, &params.w_s};
    const Tensor* gs[6] = {&grads.w1, &grads.w2, &grads.w3, &grads.w4, &grads.w_mu, &grads.w_s};

    auto f = [&](const Tensor& w) {
        ClpgParams probe = params;
        Tensor* slots[6] = {&probe.w1, &probe.w2, &probe.w3, &probe.w4, &probe.w_mu, &probe.w_s};
        *slots[which] = w;
        return matched_loss_gradients(g, probe, eps).loss;
    };
    return grad_check(f, *mats[which], *gs[which], kEps);
}

// CSFA chain: loss = 0.5 * sum(csfa_out(up(fine), down(fine))^2) where
// fine = csfa_fine(g(P), prev)
struct CsfaInstance {
    Tensor p;    // {8,8,2}
    Tensor prev; // {8,8,3}
    Tensor g_mix, t_fine, t_out;
};

CsfaInstance random_csfa(std::uint64_t seed) {
    Rng rng(seed);
    CsfaInstance inst;
    inst.p = Tensor::randn({8, 8, 2}, rng);
    inst.prev = Tensor::randn({8, 8, 3}, rng);
    inst.g_mix = Tensor::randn({2, 3}, rng, 0.5);
    inst.t_fine = Tensor::randn({6, 3}, rng, 0.5);
    inst.t_out = Tensor::randn({6, 3}, rng, 0.5);
    return inst;
}

double csfa_forward(const CsfaInstance& inst, const Tensor& g_mix, const Tensor& t_fine,
                    const Tensor& t_out) {
    const FeatureMap coarse{0, mix1x1(inst.p, g_mix)};
    const FeatureMap fine = csfa_fine(coarse, {0, inst.prev}, t_fine);
    const FeatureMap up{1, resample2x(fine.t, ResampleDir::Up)};
    const FeatureMap down{0, resample2x(fine.t, ResampleDir::Down)};
    const FeatureMap out = csfa_out(up, down, t_out);
    double loss = 0.0;
    for (std::size_t i = 0; i < out.t.size(); ++i) loss += 0.5 * out.t[i] * out.t[i];
    return loss;
}

double check_csfa(std::uint64_t seed, int which) {
    const CsfaInstance inst = random_csfa(seed);

    // analytic gradients by the shared backward helpers
    const Tensor coarse = mix1x1(inst.p, inst.g_mix);
    const Tensor fine_cat = concat(coarse, inst.prev, 2);
    const Tensor fine = mix1x1(fine_cat, inst.t_fine);
    const Tensor up = resample2x(fine, ResampleDir::Up);
    const Tensor down = resample2x(fine, ResampleDir::Down);
    const Tensor out_cat = concat(resample2x(up, ResampleDir::Down),
                                  resample2x(down, ResampleDir::Up), 2);
    const Tensor out = mix1x1(out_cat, inst.t_out);

    Tensor dout(out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) dout[i] = out[i];

    Tensor d_t_out;
    Tensor dout_cat = mix1x1_backward(out_cat, inst.t_out, dout, d_t_out);
    const std::size_t w = fine.extent(2);
    Tensor d_down_path = slice(dout_cat, 2, 0, w);
    Tensor d_up_path = slice(dout_cat, 2, w, w);
    Tensor dfine = add(resample2x_backward(resample2x_backward(d_down_path, ResampleDir::Down),
                                           ResampleDir::Up),
                       resample2x_backward(resample2x_backward(d_up_path, ResampleDir::Up),
                                           ResampleDir::Down));
    Tensor d_t_fine;
    Tensor dfine_cat = mix1x1_backward(fine_cat, inst.t_fine, dfine, d_t_fine);
    Tensor dcoarse = slice(dfine_cat, 2, 0, coarse.extent(2));
    Tensor d_g;
    mix1x1_backward(inst.p, inst.g_mix, dcoarse, d_g);

    const Tensor* mats[3] = {&inst.g_mix, &inst.t_fine, &inst.t_out};
    const Tensor* grads[3] = {&d_g, &d_t_fine, &d_t_out};
    auto f = [&](const Tensor& m) {
        const Tensor& g = which == 0 ? m : inst.g_mix;
        const Tensor& tf = which == 1 ? m : inst.t_fine;
        const Tensor& to = which == 2 ? m : inst.t_out;
        return csfa_forward(inst, g, tf, to);
    };
    return grad_check(f, *mats[which], *grads[which], kEps);
}

} // namespace

const std::vector<GradCheckCase>& gradient_suite() {
    static const std::vector<GradCheckCase> cases = [] {
        std::vector<GradCheckCase> v;
        v.push_back({"ciou_loss/pred_corners", check_ciou});
        v.push_back({"kd_loss/confidence", check_kd_confidence});
        v.push_back({"kd_loss/offsets", check_kd_offsets});
        v.push_back({"kl_term/mu_logvar", check_kl});
        const char* clpg_names[6] = {"link_loss/encoder_W1", "link_loss/encoder_W2",
                                     "link_loss/encoder_W3", "link_loss/encoder_W4",
                                     "link_loss/head_W_mu",  "link_loss/head_W_s"};
        for (int i = 0; i < 6; ++i)
            v.push_back({clpg_names[i],
                         [i](std::uint64_t seed) { return check_clpg_param(seed, i); }});
        const char* csfa_names[3] = {"csfa/g_mix", "csfa/t_fine", "csfa/t_out"};
        for (int i = 0; i < 3; ++i)
            v.push_back(
                {csfa_names[i], [i](std::uint64_t seed) { return check_csfa(seed, i); }});
        return v;
    }();
    return cases;
}

double run_fault_injection(std::uint64_t seed) {
    const auto [pred, gt] = random_box_pair(seed);
    const CiouResult res = ciou_loss(pred, gt);
    const Tensor x({4}, {pred.x_min, pred.y_min, pred.x_max, pred.y_max});
    // wrong on purpose: doubled gradient
    const Tensor bad({4}, {2.0 * res.grad[0], 2.0 * res.grad[1], 2.0 * res.grad[2],
                           2.0 * res.grad[3]});
    auto f = [&gt](const Tensor& t) {
        return ciou_loss({t[0], t[1], t[2], t[3]}, gt).loss;
    };
    return grad_check(f, x, bad, kEps);
}

} // namespace klp
