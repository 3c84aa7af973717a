#include "klp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace klp {

namespace {

constexpr double kBoxMargin = 2.0; // matches the generator's box margin

struct Detection {
    DetectedNode node;
    double score = 0.0;
    long long gt_node = -1; // matched scene node, -1 if none
};

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return (na == 0.0 || nb == 0.0) ? 0.0 : dot / std::sqrt(na * nb);
}

int slot_hypothesis(int category, std::span<const double> feature) {
    const InstanceTemplate& tpl = template_for(builtin_templates(), category);
    int best = 0;
    double best_sim = -2.0;
    for (std::size_t s = 0; s < tpl.k; ++s) {
        const std::vector<double> code = slot_code(category, static_cast<int>(s));
        const double sim = cosine(feature, code);
        if (sim > best_sim) {
            best_sim = sim;
            best = static_cast<int>(s);
        }
    }
    return best;
}

} // namespace

SceneEval evaluate_scene(const Scene& scene, const ClpgParams& params,
                         const PipelineConfig& config) {
    SceneEval eval;

    const std::size_t grid_w =
        static_cast<std::size_t>(std::ceil(static_cast<double>(scene.image_w) / config.stride));
    const std::size_t grid_h =
        static_cast<std::size_t>(std::ceil(static_cast<double>(scene.image_h) / config.stride));

    // per-category heatmaps, decoded back into detections
    std::set<int> categories;
    for (const Keypoint& kp : scene.keypoints) categories.insert(kp.category);

    std::vector<Detection> detections;
    for (int cat : categories) {
        std::vector<Keypoint> kps;
        for (const Keypoint& kp : scene.keypoints)
            if (kp.category == cat) kps.push_back(kp);
        const HeatmapStack stack = render_gt(kps, grid_w, grid_h, config.stride, config.kernel);
        for (const Peak& p : decode(stack, config.peak_threshold, kps.size() + 8)) {
            Detection d;
            d.node.kp.x = p.x;
            d.node.kp.y = p.y;
            d.node.kp.category = cat;
            d.score = p.score;
            detections.push_back(d);
        }
    }

    // unique nearest match detection <-> scene node (same category)
    struct Cand {
        double dist;
        std::size_t det;
        std::size_t node;
    };
    std::vector<Cand> cands;
    for (std::size_t d = 0; d < detections.size(); ++d)
        for (std::size_t n = 0; n < scene.keypoints.size(); ++n) {
            if (scene.keypoints[n].category != detections[d].node.kp.category) continue;
            const double dist = std::hypot(detections[d].node.kp.x - scene.keypoints[n].x,
                                           detections[d].node.kp.y - scene.keypoints[n].y);
            cands.push_back({dist, d, n});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.det != b.det) return a.det < b.det;
        return a.node < b.node;
    });
    std::vector<bool> det_used(detections.size(), false), node_used(scene.keypoints.size(), false);
    for (const Cand& c : cands) {
        if (det_used[c.det] || node_used[c.node]) continue;
        det_used[c.det] = true;
        node_used[c.node] = true;
        detections[c.det].gt_node = static_cast<long long>(c.node);
    }

    // attach features and slot hypotheses; drop spurious unmatched peaks
    std::vector<Detection> kept;
    for (Detection& d : detections) {
        if (d.gt_node < 0) continue;
        const std::size_t n = static_cast<std::size_t>(d.gt_node);
        d.node.feature.resize(kFeatureWidth);
        for (std::size_t i = 0; i < kFeatureWidth; ++i)
            d.node.feature[i] = scene.features.at(n, i);
        d.node.kp.slot = slot_hypothesis(d.node.kp.category, d.node.feature);
        kept.push_back(std::move(d));
    }
    detections = std::move(kept);

    // LIS: classify against the gt instance boxes, then resolve
    std::vector<DetectedNode> det_nodes;
    for (const Detection& d : detections) det_nodes.push_back(d.node);
    const auto& templates = builtin_templates();
    const SceneNodes nodes = classify_nodes(det_nodes, scene.boxes, templates);
    const Assignment assignment = resolve(nodes, scene.boxes, templates, config.lis);
    const std::vector<NodeResolution> table =
        resolution_table(detections.size(), nodes, assignment);

    // graph over resolved detections with the LIS-proposed skeleton
    Graph g;
    const std::size_t n_det = detections.size();
    g.a = Tensor({n_det, n_det});
    g.x = Tensor({n_det, kFeatureWidth});
    g.cat.resize(n_det);
    g.inst.resize(n_det, -1);
    for (std::size_t i = 0; i < n_det; ++i) {
        g.a.at(i, i) = 1.0;
        for (std::size_t f = 0; f < kFeatureWidth; ++f)
            g.x.at(i, f) = detections[i].node.feature[f];
        g.cat[i] = detections[i].node.kp.category;
        g.inst[i] = table[i].instance;
    }
    for (std::size_t i = 0; i < n_det; ++i)
        for (std::size_t j = i + 1; j < n_det; ++j) {
            const NodeResolution &a = table[i], &b = table[j];
            if (a.instance == kOutlier || a.instance != b.instance) continue;
            if (a.slot < 0 || b.slot < 0) continue;
            const InstanceTemplate& tpl = template_for(
                templates, scene.boxes[static_cast<std::size_t>(a.instance)].category);
            if (tpl.skeleton.at(static_cast<std::size_t>(a.slot),
                                static_cast<std::size_t>(b.slot)) == 1.0) {
                g.a.at(i, j) = 1.0;
                g.a.at(j, i) = 1.0;
            }
        }

    const std::vector<Edge> raw_links = predict_links(params, g, config.link_threshold);
    eval.pred_links = prune_links(raw_links, table, scene.boxes, templates);

    // gt links mapped onto detection indices
    std::vector<long long> node_to_det(scene.keypoints.size(), -1);
    for (std::size_t d = 0; d < n_det; ++d)
        node_to_det[static_cast<std::size_t>(detections[d].gt_node)] = static_cast<long long>(d);
    for (const Edge& e : scene.links) {
        const long long a = node_to_det[e.first], b = node_to_det[e.second];
        if (a >= 0 && b >= 0)
            eval.gt_links.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
    }

    // PCK items: one per gt keypoint, matched through (instance, slot)
    std::map<std::pair<int, int>, std::size_t> resolved; // (instance, slot) -> det
    for (std::size_t d = 0; d < n_det; ++d)
        if (table[d].instance != kOutlier && table[d].slot >= 0)
            resolved[{table[d].instance, table[d].slot}] = d;
    for (const Keypoint& kp : scene.keypoints) {
        PckItem item;
        item.gt_x = kp.x;
        item.gt_y = kp.y;
        const BBox& box = scene.boxes[static_cast<std::size_t>(kp.instance)].box;
        item.norm = std::max(box.width(), box.height());
        const auto it = resolved.find({kp.instance, kp.slot});
        if (it != resolved.end()) {
            item.has_pred = true;
            item.pred_x = detections[it->second].node.kp.x;
            item.pred_y = detections[it->second].node.kp.y;
        }
        eval.pck_items.push_back(item);
    }

    // instance boxes from resolved keypoints
    for (std::size_t ins = 0; ins < scene.boxes.size(); ++ins) {
        double x0 = 0, y0 = 0, x1 = 0, y1 = 0, score = 0;
        std::size_t count = 0;
        for (std::size_t d = 0; d < n_det; ++d) {
            if (table[d].instance != static_cast<int>(ins)) continue;
            const double x = detections[d].node.kp.x, y = detections[d].node.kp.y;
            if (count == 0) {
                x0 = x1 = x;
                y0 = y1 = y;
            } else {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
            score += detections[d].score;
            ++count;
        }
        if (count >= 2) {
            eval.pred_boxes.push_back(
                {{x0 - kBoxMargin, y0 - kBoxMargin, x1 + kBoxMargin, y1 + kBoxMargin},
                 score / static_cast<double>(count)});
        }
        eval.gt_boxes.push_back(scene.boxes[ins].box);
    }

    // AUC of the rejuvenated scores against the gt adjacency over detections
    if (n_det >= 2) {
        const Posterior post = encode(g, params);
        const Tensor scores = rejuvenate(post.mu, g.cat);
        Tensor gt_a({n_det, n_det});
        for (std::size_t i = 0; i < n_det; ++i) gt_a.at(i, i) = 1.0;
        for (const Edge& e : eval.gt_links) {
            gt_a.at(e.first, e.second) = 1.0;
            gt_a.at(e.second, e.first) = 1.0;
        }
        eval.auc = link_auc(scores, gt_a, g.cat);
    }
    return eval;
}

EvalReport evaluate_dataset(const std::vector<Scene>& scenes, const ClpgParams& params,
                            const PipelineConfig& config) {
    if (scenes.empty()) throw std::invalid_argument("evaluate_dataset: empty dataset");

    std::vector<PckItem> pck_items;
    std::vector<ScoredBox> pred_boxes;
    std::vector<BBox> gt_boxes;
    std::size_t link_tp = 0, link_pred = 0, link_gt = 0;
    double auc_sum = 0.0;
    std::size_t auc_count = 0;

    for (std::size_t s = 0; s < scenes.size(); ++s) {
        SceneEval ev = evaluate_scene(scenes[s], params, config);
        pck_items.insert(pck_items.end(), ev.pck_items.begin(), ev.pck_items.end());

        // shift boxes per scene so pooled AP never matches across scenes
        const double shift = static_cast<double>(s) * 1e6;
        for (ScoredBox b : ev.pred_boxes) {
            b.box.x_min += shift;
            b.box.x_max += shift;
            pred_boxes.push_back(b);
        }
        for (BBox b : ev.gt_boxes) {
            b.x_min += shift;
            b.x_max += shift;
            gt_boxes.push_back(b);
        }

        std::set<Edge> gt_set;
        for (Edge e : ev.gt_links)
            gt_set.insert(e.first < e.second ? e : Edge{e.second, e.first});
        for (Edge e : ev.pred_links) {
            if (e.first > e.second) std::swap(e.first, e.second);
            if (gt_set.count(e)) ++link_tp;
        }
        link_pred += ev.pred_links.size();
        link_gt += gt_set.size();

        if (ev.auc) {
            auc_sum += *ev.auc;
            ++auc_count;
        }
    }

    EvalReport report;
    report.pck = pck(pck_items, config.pck_alpha);
    const double thresholds[2] = {0.5, 0.75};
    const ApResult ap = ap_iou(pred_boxes, gt_boxes, thresholds);
    report.ap50 = ap.per_threshold[0];
    report.ap75 = ap.per_threshold[1];
    report.ap = ap.mean;
    report.link_precision =
        link_pred == 0 ? 1.0 : static_cast<double>(link_tp) / static_cast<double>(link_pred);
    report.link_recall =
        link_gt == 0 ? 1.0 : static_cast<double>(link_tp) / static_cast<double>(link_gt);
    report.link_f1 = (report.link_precision + report.link_recall) == 0.0
                         ? 0.0
                         : 2.0 * report.link_precision * report.link_recall /
                               (report.link_precision + report.link_recall);
    report.auc = auc_count == 0 ? 0.0 : auc_sum / static_cast<double>(auc_count);
    return report;
}

} // namespace klp
