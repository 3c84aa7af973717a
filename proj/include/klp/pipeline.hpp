#pragma once

#include <vector>

#include "klp/clpg.hpp"
#include "klp/lis.hpp"
#include "klp/metrics.hpp"
#include "klp/synthgen.hpp"

namespace klp {

struct PipelineConfig {
    int kernel = 3; // final-stage kernel for the codec pass
    double stride = 4.0;
    double peak_threshold = 0.25;
    double link_threshold = 0.5;
    double pck_alpha = 0.1;
    LisWeights lis;
};

struct SceneEval {
    std::vector<PckItem> pck_items;
    std::vector<ScoredBox> pred_boxes;
    std::vector<BBox> gt_boxes;
    std::vector<Edge> pred_links; // pruned, over detection indices
    std::vector<Edge> gt_links;   // over the same detection indices
    std::optional<double> auc;
};

/// Codec + grouping pass over one scene: per-category heatmaps are
/// rendered from the scene keypoints and decoded back, detections pick up
/// the nearest same-category node's features and a slot hypothesis from
/// the published slot codes, LIS resolves instances, and the trained CLPG
/// scores the LIS-proposed skeleton graph before pruning.
SceneEval evaluate_scene(const Scene& scene, const ClpgParams& params,
                         const PipelineConfig& config);

EvalReport evaluate_dataset(const std::vector<Scene>& scenes, const ClpgParams& params,
                            const PipelineConfig& config);

} // namespace klp
