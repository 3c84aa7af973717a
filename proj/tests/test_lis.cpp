#include <doctest.h>

#include <stdexcept>

#include <algorithm>
#include <cmath>
#include <limits>

#include "klp/lis.hpp"
#include "klp/rng.hpp"
#include "klp/synthgen.hpp"

using namespace klp;

namespace {

// independent exhaustive search over injective vacancy assignments,
// organized differently from resolve's node-order DFS
struct BruteForce {
    struct Vac {
        std::size_t instance;
        std::size_t slot;
    };
    std::vector<Vac> vacancies;
    std::vector<std::vector<double>> score; // [node][vacancy] or NaN

    double best_score = -1e300;
    std::size_t best_filled = 0;

    void search(std::size_t vac_idx, std::vector<bool>& node_used, std::size_t filled,
                double total) {
        if (vac_idx == vacancies.size()) {
            if (filled > best_filled || (filled == best_filled && total > best_score)) {
                best_filled = filled;
                best_score = total;
            }
            return;
        }
        search(vac_idx + 1, node_used, filled, total); // leave this vacancy open
        for (std::size_t n = 0; n < node_used.size(); ++n) {
            if (node_used[n] || std::isnan(score[n][vac_idx])) continue;
            node_used[n] = true;
            search(vac_idx + 1, node_used, filled + 1, total + score[n][vac_idx]);
            node_used[n] = false;
        }
    }
};

double brute_force_best(const SceneNodes& scene, std::span<const InstanceBox> instances,
                        std::span<const InstanceTemplate> templates, const LisWeights& weights,
                        std::size_t* out_filled = nullptr) {
    BruteForce bf;
    for (std::size_t ins = 0; ins < instances.size(); ++ins) {
        const InstanceTemplate& tpl = template_for(templates, instances[ins].category);
        std::vector<bool> taken(tpl.k, false);
        for (const FixedNode& f : scene.fixed)
            if (f.instance == ins && f.slot >= 0) taken[static_cast<std::size_t>(f.slot)] = true;
        for (std::size_t s = 0; s < tpl.k; ++s)
            if (!taken[s]) bf.vacancies.push_back({ins, s});
    }
    bf.score.assign(scene.debatable.size(),
                    std::vector<double>(bf.vacancies.size(),
                                        std::numeric_limits<double>::quiet_NaN()));
    for (std::size_t n = 0; n < scene.debatable.size(); ++n)
        for (std::size_t v = 0; v < bf.vacancies.size(); ++v) {
            const auto& node = scene.debatable[n];
            if (std::find(node.candidate_instances.begin(), node.candidate_instances.end(),
                          bf.vacancies[v].instance) == node.candidate_instances.end())
                continue;
            bf.score[n][v] = candidate_score(node, bf.vacancies[v].instance,
                                             bf.vacancies[v].slot, scene, instances, templates,
                                             weights);
        }
    std::vector<bool> used(scene.debatable.size(), false);
    bf.search(0, used, 0, 0.0);
    if (out_filled) *out_filled = bf.best_filled;
    return bf.best_score;
}

std::vector<double> noisy_code(int cat, int slot, Rng& rng, double sigma) {
    std::vector<double> code = slot_code(cat, slot);
    for (double& v : code) v += sigma * rng.next_normal();
    return code;
}

} // namespace

TEST_CASE("template validation") {
    for (const InstanceTemplate& t : builtin_templates()) CHECK_NOTHROW(t.validate());
    InstanceTemplate bad = builtin_templates()[0];
    bad.skeleton.at(0, 0) = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("classify_nodes splits fixed, debatable, outliers") {
    const auto& templates = builtin_templates();
    std::vector<InstanceBox> boxes = {{{0, 0, 10, 10}, 0}, {{8, 0, 18, 10}, 0}};

    std::vector<DetectedNode> dets(3);
    dets[0].kp = {2.0, 2.0, 0, -1, 0};
    dets[0].feature = slot_code(0, 0);
    dets[1].kp = {9.0, 5.0, 0, -1, 1}; // inside both boxes
    dets[1].feature = slot_code(0, 1);
    dets[2].kp = {40.0, 40.0, 0, -1, 2}; // inside none
    dets[2].feature = slot_code(0, 2);

    const SceneNodes nodes = classify_nodes(dets, boxes, templates);
    REQUIRE(nodes.fixed.size() == 1);
    CHECK(nodes.fixed[0].det_index == 0);
    CHECK(nodes.fixed[0].slot == 0);
    REQUIRE(nodes.debatable.size() == 1);
    CHECK(nodes.debatable[0].det_index == 1);
    CHECK(nodes.debatable[0].candidate_instances == std::vector<std::size_t>{0, 1});
    REQUIRE(nodes.outliers.size() == 1);
    CHECK(nodes.outliers[0] == 2);
}

TEST_CASE("different-category boxes never make a node debatable") {
    const auto& templates = builtin_templates();
    std::vector<InstanceBox> boxes = {{{0, 0, 10, 10}, 0}, {{2, 0, 12, 10}, 1}};
    std::vector<DetectedNode> dets(1);
    dets[0].kp = {5.0, 5.0, 0, -1, 3};
    dets[0].feature = slot_code(0, 3);
    const SceneNodes nodes = classify_nodes(dets, boxes, templates);
    CHECK(nodes.fixed.size() == 1);
    CHECK(nodes.debatable.empty());
    CHECK(nodes.fixed[0].instance == 0);
}

TEST_CASE("disjoint instances produce no debatable nodes") {
    Rng rng(3);
    SceneSpec spec;
    spec.image_w = spec.image_h = 160;
    spec.objects = {{0, 40, 40, 36, 0.2}, {0, 115, 115, 36, -0.4}};
    const Scene scene = generate(spec, 5);
    std::vector<DetectedNode> dets;
    for (std::size_t i = 0; i < scene.keypoints.size(); ++i) {
        DetectedNode d;
        d.kp = scene.keypoints[i];
        d.feature.resize(kFeatureWidth);
        for (std::size_t f = 0; f < kFeatureWidth; ++f) d.feature[f] = scene.features.at(i, f);
        dets.push_back(d);
    }
    const SceneNodes nodes = classify_nodes(dets, scene.boxes, builtin_templates());
    CHECK(nodes.fixed.size() == scene.keypoints.size());
    CHECK(nodes.debatable.empty());
}

TEST_CASE("candidate_score closed forms") {
    const auto& templates = builtin_templates();
    const InstanceTemplate& monitor = templates[0];
    std::vector<InstanceBox> boxes = {{{0, 0, 10, 7.5}, 0}, {{20, 0, 30, 7.5}, 0}};

    // instance 0 fully fixed except slot 2; one same-slot reference in
    // instance 1 carrying the exact code
    SceneNodes scene;
    for (int s : {0, 1, 3}) {
        FixedNode f;
        f.x = monitor.layout[static_cast<std::size_t>(s)].first * 10.0;
        f.y = monitor.layout[static_cast<std::size_t>(s)].second * 10.0;
        f.feature = slot_code(0, s);
        f.slot = s;
        f.instance = 0;
        f.det_index = static_cast<std::size_t>(s);
        scene.fixed.push_back(f);
    }
    FixedNode ref;
    ref.x = 30.0;
    ref.y = 7.5;
    ref.feature = slot_code(0, 2);
    ref.slot = 2;
    ref.instance = 1;
    ref.det_index = 3;
    scene.fixed.push_back(ref);

    DebatableNode node;
    node.x = monitor.layout[2].first * 10.0; // exactly on the missing slot
    node.y = monitor.layout[2].second * 10.0;
    node.feature = slot_code(0, 2);
    node.candidate_instances = {0};
    node.det_index = 4;
    scene.debatable.push_back(node);

    // template position + template feature: score = lambda_f exactly
    // (box spans the layout, both distance normalizers are the diagonal)
    const double s = candidate_score(node, 0, 2, scene, boxes, templates, {2.0, 1.0});
    CHECK(s == doctest::Approx(2.0).epsilon(1e-9));

    // orthogonal feature, correct position: cosine ~ 0 for near-orthogonal
    DebatableNode ortho = node;
    ortho.feature = slot_code(1, 0); // different category's code
    const double s2 = candidate_score(ortho, 0, 2, scene, boxes, templates, {1.0, 1.0});
    const std::vector<double> a = slot_code(0, 2), b = slot_code(1, 0);
    double cos_ab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) cos_ab += a[i] * b[i];
    CHECK(s2 == doctest::Approx(cos_ab).epsilon(1e-9));
}

TEST_CASE("resolve: trivial and forced cases") {
    const auto& templates = builtin_templates();
    std::vector<InstanceBox> boxes = {{{0, 0, 10, 7.5}, 0}};

    SceneNodes empty_scene;
    for (int s : {0, 1, 2, 3}) {
        FixedNode f;
        f.x = 1.0 + s;
        f.y = 1.0;
        f.feature = slot_code(0, s);
        f.slot = s;
        f.instance = 0;
        f.det_index = static_cast<std::size_t>(s);
        empty_scene.fixed.push_back(f);
    }
    const Assignment a = resolve(empty_scene, boxes, templates);
    CHECK(a.nodes.empty());
    CHECK(a.score == 0.0);

    // one debatable node, one vacancy with positive score: assigned
    SceneNodes one = empty_scene;
    one.fixed.pop_back(); // slot 3 open
    DebatableNode node;
    node.x = 0.0;
    node.y = 7.5;
    node.feature = slot_code(0, 3);
    node.candidate_instances = {0};
    node.det_index = 9;
    one.debatable.push_back(node);
    const Assignment b = resolve(one, boxes, templates);
    REQUIRE(b.nodes.size() == 1);
    CHECK(b.nodes[0].instance == 0);
    CHECK(b.nodes[0].slot == 3);
}

TEST_CASE("resolve flags infeasible instances") {
    const auto& templates = builtin_templates();
    std::vector<InstanceBox> boxes = {{{0, 0, 10, 7.5}, 0}};
    SceneNodes scene;
    for (int i = 0; i < 5; ++i) { // five fixed nodes on a k=4 template
        FixedNode f;
        f.x = 1.0 + i;
        f.y = 1.0;
        f.feature = slot_code(0, i % 4);
        f.slot = i % 4;
        f.instance = 0;
        f.det_index = static_cast<std::size_t>(i);
        scene.fixed.push_back(f);
    }
    CHECK_THROWS_WITH_AS(resolve(scene, boxes, templates),
                         doctest::Contains("instance 0"), std::runtime_error);
}

TEST_CASE("resolve equals brute force on 200 random occlusion scenes") {
    const auto& templates = builtin_templates();
    const LisWeights weights;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed * 131 + 7);
        const std::size_t n_inst = 2 + rng.next_u64() % 2; // 2..3 instances
        const int cat = static_cast<int>(rng.next_u64() % 3);
        const InstanceTemplate& tpl = template_for(templates, cat);

        std::vector<InstanceBox> boxes;
        for (std::size_t i = 0; i < n_inst; ++i) {
            const double x0 = 10.0 + 18.0 * static_cast<double>(i);
            boxes.push_back({{x0, 10.0, x0 + 24.0, 10.0 + 24.0 * 0.75 + 6.0}, cat});
        }

        SceneNodes scene;
        std::size_t det = 0;
        std::size_t total_vac = 0;
        // per instance: a random subset of slots fixed
        for (std::size_t i = 0; i < n_inst; ++i) {
            for (std::size_t s = 0; s < tpl.k; ++s) {
                if (rng.next_uniform() < 0.55) {
                    FixedNode f;
                    f.x = boxes[i].box.x_min + tpl.layout[s].first * 24.0;
                    f.y = boxes[i].box.y_min + tpl.layout[s].second * 24.0 * 0.75;
                    f.feature = noisy_code(cat, static_cast<int>(s), rng, 0.05);
                    f.slot = static_cast<int>(s);
                    f.instance = i;
                    f.det_index = det++;
                    scene.fixed.push_back(f);
                } else {
                    ++total_vac;
                }
            }
        }
        if (total_vac > 8) continue;
        const std::size_t n_deb = std::min<std::size_t>(6, total_vac + rng.next_u64() % 2);
        for (std::size_t d = 0; d < n_deb; ++d) {
            DebatableNode node;
            const std::size_t owner = rng.next_u64() % n_inst;
            const std::size_t s = rng.next_u64() % tpl.k;
            node.x = boxes[owner].box.x_min + tpl.layout[s].first * 24.0 +
                     2.0 * rng.next_normal();
            node.y = boxes[owner].box.y_min + tpl.layout[s].second * 24.0 * 0.75 +
                     2.0 * rng.next_normal();
            node.feature = noisy_code(cat, static_cast<int>(s), rng, 0.05);
            for (std::size_t i = 0; i < n_inst; ++i) node.candidate_instances.push_back(i);
            node.det_index = det++;
            scene.debatable.push_back(node);
        }

        const Assignment got = resolve(scene, boxes, templates, weights);
        std::size_t bf_filled = 0;
        const double best = brute_force_best(scene, boxes, templates, weights, &bf_filled);
        std::size_t got_filled = 0;
        for (const auto& e : got.nodes)
            if (e.instance != kOutlier) ++got_filled;
        CHECK(got_filled == bf_filled);
        CHECK(got.score == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("resolve is invariant under translation and uniform scaling") {
    const auto& templates = builtin_templates();
    Rng rng(77);
    std::vector<InstanceBox> boxes = {{{0, 0, 12, 9}, 0}, {{8, 0, 20, 9}, 0}};
    SceneNodes scene;
    std::size_t det = 0;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t s = 0; s + 1 < 4; ++s) {
            FixedNode f;
            f.x = boxes[i].box.x_min + builtin_templates()[0].layout[s].first * 12.0;
            f.y = builtin_templates()[0].layout[s].second * 9.0;
            f.feature = noisy_code(0, static_cast<int>(s), rng, 0.02);
            f.slot = static_cast<int>(s);
            f.instance = i;
            f.det_index = det++;
            scene.fixed.push_back(f);
        }
    for (int d = 0; d < 2; ++d) {
        DebatableNode node;
        node.x = 9.0 + d;
        node.y = 7.0;
        node.feature = noisy_code(0, 3, rng, 0.02);
        node.candidate_instances = {0, 1};
        node.det_index = det++;
        scene.debatable.push_back(node);
    }
    const Assignment base = resolve(scene, boxes, templates);

    const double t = 37.0, s = 3.0;
    std::vector<InstanceBox> boxes2 = boxes;
    SceneNodes scene2 = scene;
    for (InstanceBox& b : boxes2) {
        b.box = {b.box.x_min * s + t, b.box.y_min * s + t, b.box.x_max * s + t,
                 b.box.y_max * s + t};
    }
    for (FixedNode& f : scene2.fixed) {
        f.x = f.x * s + t;
        f.y = f.y * s + t;
    }
    for (DebatableNode& n : scene2.debatable) {
        n.x = n.x * s + t;
        n.y = n.y * s + t;
    }
    const Assignment moved = resolve(scene2, boxes2, templates);
    REQUIRE(base.nodes.size() == moved.nodes.size());
    for (std::size_t i = 0; i < base.nodes.size(); ++i) {
        CHECK(base.nodes[i].instance == moved.nodes[i].instance);
        CHECK(base.nodes[i].slot == moved.nodes[i].slot);
    }
    CHECK(base.score == doctest::Approx(moved.score).epsilon(1e-9));
}

TEST_CASE("prune_links drops cross-instance, outlier, and off-skeleton edges") {
    const auto& templates = builtin_templates();
    std::vector<InstanceBox> boxes = {{{0, 0, 10, 7.5}, 0}, {{20, 0, 30, 7.5}, 0}};
    // detections 0..3 = instance 0 slots 0..3; 4..7 = instance 1; 8 outlier
    std::vector<NodeResolution> table(9);
    for (int s = 0; s < 4; ++s) {
        table[static_cast<std::size_t>(s)] = {0, s};
        table[static_cast<std::size_t>(4 + s)] = {1, s};
    }
    table[8] = {kOutlier, -1};

    const std::vector<Edge> links = {
        {0, 1}, // in skeleton (monitor cycle)
        {0, 2}, // diagonal: not in skeleton
        {0, 5}, // cross instance
        {4, 5}, // in skeleton, instance 1
        {3, 8}, // touches outlier
    };
    const auto kept = prune_links(links, table, boxes, templates);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0] == Edge{0, 1});
    CHECK(kept[1] == Edge{4, 5});

    // pruned sets are always subsets of mapped skeletons: re-check bound
    for (const Edge& e : kept) {
        const auto& a = table[e.first];
        const auto& b = table[e.second];
        CHECK(a.instance == b.instance);
        const InstanceTemplate& tpl =
            template_for(templates, boxes[static_cast<std::size_t>(a.instance)].category);
        CHECK(tpl.skeleton.at(static_cast<std::size_t>(a.slot),
                              static_cast<std::size_t>(b.slot)) == 1.0);
    }
}
