#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "klp/geometry.hpp"
#include "klp/tensor.hpp"

namespace klp {

struct EvalReport {
    double pck = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ap = 0.0;
    double link_precision = 0.0;
    double link_recall = 0.0;
    double link_f1 = 0.0;
    double auc = 0.0;

    std::string to_json() const;
    std::string to_table() const;
};

/// One gt keypoint with its matched prediction, if any. `norm` is the
/// instance's gt box max side.
struct PckItem {
    bool has_pred = false;
    double pred_x = 0.0;
    double pred_y = 0.0;
    double gt_x = 0.0;
    double gt_y = 0.0;
    double norm = 1.0;
};

/// Fraction of gt keypoints whose match lies within alpha * norm.
double pck(std::span<const PckItem> items, double alpha = 0.1);

struct ScoredBox {
    BBox box;
    double score = 0.0;
};

struct ApResult {
    std::vector<double> per_threshold;
    double mean = 0.0; // over 0.50:0.05:0.95
};

/// Greedy per-threshold matching, all-point interpolated AP. The returned
/// per_threshold aligns with `thresholds`; mean always uses 0.50:0.05:0.95.
ApResult ap_iou(std::span<const ScoredBox> preds, std::span<const BBox> gts,
                std::span<const double> thresholds);

struct LinkPrf {
    double precision = 1.0;
    double recall = 1.0;
    double f1 = 1.0;
};

using EdgePair = std::pair<std::size_t, std::size_t>;

/// Set-overlap precision/recall/F1. Empty pred and gt scores (1,1,1);
/// empty pred alone scores precision 1, recall 0, F1 0.
LinkPrf link_prf(std::span<const EdgePair> pred, std::span<const EdgePair> gt);

/// Rank AUC over (edge, non-edge) same-category off-diagonal pairs; ties
/// count one half. Absent when either class of pairs is empty.
std::optional<double> link_auc(const Tensor& scores, const Tensor& gt_adjacency,
                               std::span<const int> cat);

} // namespace klp
