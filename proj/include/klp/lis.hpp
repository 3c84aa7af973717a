#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "klp/geometry.hpp"
#include "klp/heatmap.hpp"
#include "klp/tensor.hpp"

namespace klp {

/// Per-category keypoint blueprint: canonical layout (unit-normalized) and
/// skeleton adjacency. Scene instances are similarity transforms of this.
struct InstanceTemplate {
    int category = 0;
    std::size_t k = 0;
    std::vector<std::pair<double, double>> layout; // canonical positions
    Tensor skeleton;                               // k x k 0/1, zero diagonal

    void validate() const;
    /// Pairwise slot distance normalized by the layout's own bounding-box
    /// diagonal, so it is comparable to scene distances divided by the
    /// instance box diagonal.
    double layout_dist(std::size_t slot_a, std::size_t slot_b) const;
    double layout_diag() const;
};

struct DetectedNode {
    Keypoint kp; // position, category, optional slot hypothesis
    std::vector<double> feature;
};

struct InstanceBox {
    BBox box;
    int category = 0;
};

struct FixedNode {
    double x = 0.0;
    double y = 0.0;
    std::vector<double> feature;
    int slot = -1;
    std::size_t instance = 0;  // index into the instance box list
    std::size_t det_index = 0; // index into the detections
};

struct DebatableNode {
    double x = 0.0;
    double y = 0.0;
    std::vector<double> feature;
    std::vector<std::size_t> candidate_instances;
    std::size_t det_index = 0;
};

struct SceneNodes {
    std::vector<FixedNode> fixed;
    std::vector<DebatableNode> debatable;
    std::vector<std::size_t> outliers; // detection indices inside no box
};

/// Membership-based split: a detection inside exactly one box of its
/// category is fixed, inside several is debatable, inside none an outlier.
/// Fixed slots come from the detection's hypothesis when valid; conflicts
/// and missing hypotheses fall back to layout-nearest assignment, with
/// unbreakable conflicts demoted to debatable.
SceneNodes classify_nodes(std::span<const DetectedNode> detections,
                          std::span<const InstanceBox> instances,
                          std::span<const InstanceTemplate> templates);

struct LisWeights {
    double lambda_f = 1.0;
    double lambda_d = 1.0;
};

/// lambda_f * cosine against the mean same-slot fixed feature across
/// same-category instances, minus lambda_d * mean pairwise-distance
/// deviation from the template layout over the instance's fixed nodes
/// (scene distances normalized by the instance box diagonal).
double candidate_score(const DebatableNode& node, std::size_t instance, std::size_t slot,
                       const SceneNodes& scene, std::span<const InstanceBox> instances,
                       std::span<const InstanceTemplate> templates, const LisWeights& weights);

constexpr int kOutlier = -1;

struct Assignment {
    struct Entry {
        int instance = kOutlier; // kOutlier marks an outlier node
        int slot = -1;
    };
    std::vector<Entry> nodes; // one per debatable node
    double score = 0.0;
};

/// Fill template vacancies with debatable nodes, maximizing total
/// candidate_score; assignments of maximal cardinality are preferred, so
/// every instance ends at its template count whenever the scene allows it.
/// Exhaustive when #debatable <= 6 and vacancies <= 8, greedy otherwise;
/// ties resolve by (node, instance, slot) index.
Assignment resolve(const SceneNodes& scene, std::span<const InstanceBox> instances,
                   std::span<const InstanceTemplate> templates, const LisWeights& weights = {});

struct NodeResolution {
    int instance = kOutlier;
    int slot = -1;
};

/// Per-detection (instance, slot) table combining fixed nodes, the
/// assignment of debatable nodes, and outliers.
std::vector<NodeResolution> resolution_table(std::size_t n_detections, const SceneNodes& scene,
                                             const Assignment& assignment);

using Edge = std::pair<std::size_t, std::size_t>;

/// Drop edges that cross instances, touch outliers, or are absent from the
/// instance's template skeleton.
std::vector<Edge> prune_links(std::span<const Edge> links,
                              std::span<const NodeResolution> table,
                              std::span<const InstanceBox> instances,
                              std::span<const InstanceTemplate> templates);

const InstanceTemplate& template_for(std::span<const InstanceTemplate> templates, int category);

} // namespace klp
