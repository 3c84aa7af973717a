#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "klp/gradient_suite.hpp"
#include "klp/pyramid.hpp"
#include "klp/rng.hpp"

using namespace klp;

namespace {

PyramidConfig small_config() {
    PyramidConfig c;
    c.level_lo = 3;
    c.level_hi = 5;
    c.base_h = 16;
    c.base_w = 16;
    c.p_channels = {2, 2, 2};
    c.g_width = 3;
    return c;
}

std::vector<FeatureMap> random_p_maps(const PyramidConfig& c, Rng& rng) {
    std::vector<FeatureMap> maps;
    for (std::size_t i = 0; i < c.levels(); ++i)
        maps.push_back({c.level_lo + static_cast<int>(i),
                        Tensor::randn({c.base_h >> i, c.base_w >> i, c.p_channels[i]}, rng)});
    return maps;
}

} // namespace

TEST_CASE("fpn_topdown shapes follow the concat plan") {
    Rng rng(3);
    const PyramidConfig c = small_config();
    const MixParams params = make_topology_params(c, rng);
    const auto cs = fpn_topdown(random_p_maps(c, rng), params);
    const auto planned = plan_topdown_shapes(c);
    REQUIRE(cs.size() == planned.size());
    for (std::size_t i = 0; i < cs.size(); ++i) {
        CHECK(cs[i].h() == planned[i][0]);
        CHECK(cs[i].w() == planned[i][1]);
        CHECK(cs[i].c() == planned[i][2]);
    }
    // lowest level stacks the upsampled higher map on g, by channel count
    CHECK(cs[0].c() == cs[1].c() + c.g_width);
}

TEST_CASE("constant inputs stay constant per channel through the topology") {
    PyramidConfig c = small_config();
    Rng rng(5);
    MixParams params = make_topology_params(c, rng);
    std::vector<FeatureMap> p_maps;
    for (std::size_t i = 0; i < c.levels(); ++i)
        p_maps.push_back({c.level_lo + static_cast<int>(i),
                          Tensor::full({c.base_h >> i, c.base_w >> i, c.p_channels[i]}, 2.0)});
    const auto cs = fpn_topdown(p_maps, params);
    for (const FeatureMap& m : cs)
        for (std::size_t ch = 0; ch < m.c(); ++ch) {
            const double v0 = m.t.at(0, 0, ch);
            for (std::size_t y = 0; y < m.h(); ++y)
                for (std::size_t x = 0; x < m.w(); ++x)
                    CHECK(m.t.at(y, x, ch) == doctest::Approx(v0));
        }
}

TEST_CASE("fpn_topdown hand-set weights on a tiny pyramid") {
    // two levels, 1 channel each, g = [[2]] at both levels
    PyramidConfig c;
    c.level_lo = 3;
    c.level_hi = 4;
    c.base_h = 2;
    c.base_w = 2;
    c.p_channels = {1, 1};
    c.g_width = 1;
    MixParams params;
    params.mats[topdown_site(3)] = Tensor({1, 1}, {2.0});
    params.mats[topdown_site(4)] = Tensor({1, 1}, {2.0});
    std::vector<FeatureMap> p = {{3, Tensor({2, 2, 1}, {1, 2, 3, 4})},
                                 {4, Tensor({1, 1, 1}, {5})}};
    const auto cs = fpn_topdown(p, params);
    // top: g(P4) = 10; bottom: channel 0 = U(10), channel 1 = 2*P3
    CHECK(cs[1].t[0] == 10.0);
    CHECK(cs[0].t.at(0, 0, 0) == 10.0);
    CHECK(cs[0].t.at(0, 0, 1) == 2.0);
    CHECK(cs[0].t.at(1, 1, 1) == 8.0);
}

TEST_CASE("bottomup_aggregate mirrors the topdown plan") {
    Rng rng(7);
    const PyramidConfig c = small_config();
    const MixParams params = make_topology_params(c, rng);
    const auto cs = fpn_topdown(random_p_maps(c, rng), params);
    const auto ns = bottomup_aggregate(cs, params);
    const auto planned = plan_bottomup_shapes(c);
    REQUIRE(ns.size() == planned.size());
    for (std::size_t i = 0; i < ns.size(); ++i) {
        CHECK(ns[i].h() == planned[i][0]);
        CHECK(ns[i].w() == planned[i][1]);
        CHECK(ns[i].c() == planned[i][2]);
    }
}

TEST_CASE("extend_levels down-samples twice") {
    Rng rng(9);
    std::vector<FeatureMap> cs = {{7, Tensor::randn({8, 8, 2}, rng)}};
    const auto extended = extend_levels(cs);
    REQUIRE(extended.size() == 3);
    CHECK(extended[1].level == 8);
    CHECK(extended[1].h() == 4);
    CHECK(extended[2].level == 9);
    CHECK(extended[2].h() == 2);

    // constant map stays constant
    std::vector<FeatureMap> flat = {{7, Tensor::full({8, 8, 1}, 3.0)}};
    const auto ext2 = extend_levels(flat);
    for (std::size_t i = 0; i < ext2[2].t.size(); ++i) CHECK(ext2[2].t[i] == 3.0);

    // 2x2 mean oracle
    std::vector<FeatureMap> tiny = {{7, Tensor({4, 4, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12,
                                                           13, 14, 15, 16})}};
    const auto ext3 = extend_levels(tiny);
    CHECK(ext3[1].t.at(0, 0, 0) == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
    CHECK(ext3[2].t.at(0, 0, 0) == doctest::Approx(8.5));

    std::vector<FeatureMap> odd = {{7, Tensor::randn({6, 6, 1}, rng)}};
    CHECK_THROWS_AS(extend_levels(odd), std::invalid_argument);
}

TEST_CASE("csfa_fine concatenates then mixes") {
    Rng rng(11);
    const FeatureMap coarse{2, Tensor::randn({4, 4, 2}, rng)};
    const FeatureMap prev{2, Tensor::randn({4, 4, 2}, rng)};
    // zero weights -> zero output
    const FeatureMap zero = csfa_fine(coarse, prev, Tensor::zeros({4, 3}));
    for (std::size_t i = 0; i < zero.t.size(); ++i) CHECK(zero.t[i] == 0.0);

    // hand oracle on a single cell
    const FeatureMap a{0, Tensor({1, 1, 1}, {2.0})};
    const FeatureMap b{0, Tensor({1, 1, 1}, {3.0})};
    const Tensor mix({2, 1}, {10.0, 100.0});
    CHECK(csfa_fine(a, b, mix).t[0] == doctest::Approx(320.0));

    const FeatureMap wrong{2, Tensor::randn({8, 8, 2}, rng)};
    CHECK_THROWS_AS(csfa_fine(coarse, wrong, Tensor::zeros({4, 3})), std::invalid_argument);
}

TEST_CASE("csfa_out enforces the 4x extent contract") {
    Rng rng(13);
    const FeatureMap fine{1, Tensor::randn({8, 8, 2}, rng)};
    const FeatureMap prev{0, Tensor::randn({2, 2, 2}, rng)};
    const FeatureMap out = csfa_out(fine, prev, Tensor::randn({4, 3}, rng));
    CHECK(out.h() == 4);
    CHECK(out.w() == 4);
    CHECK(out.c() == 3);
    CHECK_THROWS_AS(csfa_out(fine, fine, Tensor::randn({4, 3}, rng)), std::invalid_argument);
}

TEST_CASE("flops_estimate counting oracle") {
    // single 1x1 site: 4x4x2 -> 3 channels = 96 MACs, 6 params
    PyramidConfig c;
    c.level_lo = 3;
    c.level_hi = 3;
    c.base_h = 4;
    c.base_w = 4;
    c.p_channels = {2};
    c.g_width = 3;
    const FlopsReport r = flops_estimate(c);
    // one topdown g site and one bottomup g site
    REQUIRE(r.sites.size() == 2);
    CHECK(r.sites[0].macs == 96);
    CHECK(r.sites[0].params == 6);
    CHECK(r.total_macs == 96 + 4 * 4 * 3 * 3);
    CHECK(r.total_params == 6 + 9);
    CHECK(r.total_resample_reads == 0);
}

TEST_CASE("flops_estimate hand totals for a two-level pyramid") {
    PyramidConfig c;
    c.level_lo = 3;
    c.level_hi = 4;
    c.base_h = 8;
    c.base_w = 8;
    c.p_channels = {2, 2};
    c.g_width = 2;
    const FlopsReport r = flops_estimate(c);
    // topdown: g@l3 8x8x2->2 (256), g@l4 4x4x2->2 (64), U read 8*8*2 = 128
    // C3 channels = 4, C4 (top) = 2
    // bottomup: g@l3 8x8x4->2 (512), g@l4 4x4x2->2 (64), D read 8*8*2 = 128
    CHECK(r.total_macs == 256 + 64 + 512 + 64);
    CHECK(r.total_params == 4 + 4 + 8 + 4);
    CHECK(r.total_resample_reads == 128 + 128);
}

TEST_CASE("flops_estimate is monotone in depth and width") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        PyramidConfig c;
        c.level_lo = 3;
        c.level_hi = 3 + static_cast<int>(rng.next_u64() % 3);
        c.base_h = c.base_w = 64;
        const std::size_t width = 1 + rng.next_u64() % 6;
        c.p_channels.assign(c.levels(), width);
        c.g_width = 1 + rng.next_u64() % 6;

        const FlopsReport base = flops_estimate(c);

        PyramidConfig deeper = c;
        deeper.extend = true;
        CHECK(flops_estimate(deeper).total_macs > base.total_macs);
        CHECK(flops_estimate(deeper).total_params > base.total_params);

        PyramidConfig wider = c;
        wider.g_width = c.g_width + 1;
        CHECK(flops_estimate(wider).total_macs > base.total_macs);
        CHECK(flops_estimate(wider).total_params > base.total_params);

        PyramidConfig taller = c;
        taller.level_hi = c.level_hi + 1;
        taller.p_channels.push_back(width);
        CHECK(flops_estimate(taller).total_macs > base.total_macs);
    }
}

TEST_CASE("flops_estimate is additive over disjoint sub-topologies") {
    PyramidConfig a = small_config();
    const auto whole = flops_estimate(a);
    std::uint64_t sum = 0;
    for (const SiteCost& s : whole.sites) sum += s.macs;
    CHECK(sum == whole.total_macs);
}

TEST_CASE("extended topology shapes match the ops") {
    Rng rng(19);
    PyramidConfig c = small_config();
    c.extend = true;
    const MixParams params = make_topology_params(c, rng);
    const auto cs = fpn_topdown(random_p_maps(c, rng), params);
    const auto ext = extend_levels(cs);
    const auto ns = bottomup_aggregate(ext, params);
    const auto planned_c = plan_topdown_shapes(c);
    const auto planned_n = plan_bottomup_shapes(c);
    REQUIRE(ext.size() == planned_c.size());
    REQUIRE(ns.size() == planned_n.size());
    for (std::size_t i = 0; i < ext.size(); ++i) {
        CHECK(ext[i].h() == planned_c[i][0]);
        CHECK(ext[i].c() == planned_c[i][2]);
        CHECK(ns[i].c() == planned_n[i][2]);
    }
}

TEST_CASE("csfa gradients pass grad_check") {
    for (const GradCheckCase& c : gradient_suite()) {
        if (c.name.rfind("csfa/", 0) != 0) continue;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) CHECK(c.run(seed) <= 1e-4);
    }
}

TEST_CASE("toy localizer rejects bad setups") {
    const std::vector<std::vector<Keypoint>> scenes(8, {{10.0, 10.0, 0, 0, 0}});
    CHECK_THROWS_AS(train_toy_localizer(0, KernelSchedule({3}), scenes, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(train_toy_localizer(2, KernelSchedule({3}), scenes, 1),
                    std::invalid_argument);
}

TEST_CASE("toy localizer learns a single noiseless stage") {
    Rng rng(23);
    std::vector<std::vector<Keypoint>> scenes;
    for (int s = 0; s < 16; ++s) {
        std::vector<Keypoint> kps;
        for (int k = 0; k < 2; ++k)
            kps.push_back({6.0 + 52.0 * rng.next_uniform(), 6.0 + 52.0 * rng.next_uniform(),
                           0, 0, 0});
        scenes.push_back(kps);
    }
    LocalizerConfig cfg;
    cfg.steps = 250;
    cfg.blur = {0.8};
    cfg.noise = {0.0};
    const LocalizerResult res = train_toy_localizer(1, KernelSchedule({3}), scenes, 3, cfg);
    REQUIRE(res.stage_error.size() == 1);
    CHECK(res.stage_error[0] <= 2.5);
    CHECK(res.loss_curve.front() > res.loss_curve.back());
}
