#include "klp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace klp {

double pck(std::span<const PckItem> items, double alpha) {
    if (items.empty()) return 0.0;
    std::size_t hits = 0;
    for (const PckItem& it : items) {
        if (!it.has_pred) continue;
        const double dx = it.pred_x - it.gt_x;
        const double dy = it.pred_y - it.gt_y;
        if (std::sqrt(dx * dx + dy * dy) <= alpha * it.norm) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(items.size());
}

namespace {

double ap_single(std::span<const ScoredBox> preds, std::span<const BBox> gts, double threshold) {
    if (gts.empty()) return 0.0;
    std::vector<std::size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return preds[a].score > preds[b].score;
    });

    std::vector<bool> gt_matched(gts.size(), false);
    std::vector<bool> tp;
    tp.reserve(preds.size());
    for (std::size_t idx : order) {
        double best = threshold;
        std::size_t best_gt = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gt_matched[g]) continue;
            const double v = iou(preds[idx].box, gts[g]);
            if (v >= best && (best_gt == gts.size() || v > best)) {
                best = v;
                best_gt = g;
            }
        }
        if (best_gt != gts.size()) {
            gt_matched[best_gt] = true;
            tp.push_back(true);
        } else {
            tp.push_back(false);
        }
    }

    // all-point interpolation: integrate the precision envelope over recall
    const double n_gt = static_cast<double>(gts.size());
    std::vector<double> recall, precision;
    std::size_t tps = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (tp[i]) ++tps;
        recall.push_back(static_cast<double>(tps) / n_gt);
        precision.push_back(static_cast<double>(tps) / static_cast<double>(i + 1));
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] <= prev_recall) continue;
        double envelope = 0.0;
        for (std::size_t j = i; j < precision.size(); ++j)
            envelope = std::max(envelope, precision[j]);
        ap += (recall[i] - prev_recall) * envelope;
        prev_recall = recall[i];
    }
    return ap;
}

} // namespace

ApResult ap_iou(std::span<const ScoredBox> preds, std::span<const BBox> gts,
                std::span<const double> thresholds) {
    ApResult out;
    for (double t : thresholds) out.per_threshold.push_back(ap_single(preds, gts, t));
    double sum = 0.0;
    int count = 0;
    for (int i = 0; i < 10; ++i) {
        sum += ap_single(preds, gts, 0.5 + 0.05 * i);
        ++count;
    }
    out.mean = sum / count;
    return out;
}

namespace {
EdgePair canonical(const EdgePair& e) {
    return e.first <= e.second ? e : EdgePair{e.second, e.first};
}
} // namespace

LinkPrf link_prf(std::span<const EdgePair> pred, std::span<const EdgePair> gt) {
    std::set<EdgePair> ps, gs;
    for (const EdgePair& e : pred) ps.insert(canonical(e));
    for (const EdgePair& e : gt) gs.insert(canonical(e));

    LinkPrf out;
    if (ps.empty() && gs.empty()) return out; // all 1 by convention
    std::size_t tp = 0;
    for (const EdgePair& e : ps)
        if (gs.count(e)) ++tp;
    out.precision = ps.empty() ? 1.0 : static_cast<double>(tp) / static_cast<double>(ps.size());
    out.recall = gs.empty() ? 1.0 : static_cast<double>(tp) / static_cast<double>(gs.size());
    out.f1 = (out.precision + out.recall) == 0.0
                 ? 0.0
                 : 2.0 * out.precision * out.recall / (out.precision + out.recall);
    return out;
}

std::optional<double> link_auc(const Tensor& scores, const Tensor& gt_adjacency,
                               std::span<const int> cat) {
    const std::size_t n = cat.size();
    if (scores.rank() != 2 || scores.extent(0) != n || scores.extent(1) != n ||
        !gt_adjacency.same_shape(scores))
        throw std::invalid_argument("shape error: link_auc expects n x n score and gt matrices");

    // collect (score, is_edge) for same-category pairs i<j, then rank
    struct Item {
        double s;
        bool edge;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (cat[i] != cat[j]) continue;
            items.push_back({scores.at(i, j), gt_adjacency.at(i, j) > 0.5});
        }
    std::size_t pos = 0;
    for (const Item& it : items)
        if (it.edge) ++pos;
    const std::size_t neg = items.size() - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.s < b.s; });
    // average ranks over tie groups
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < items.size()) {
        std::size_t j = i;
        while (j < items.size() && items[j].s == items[i].s) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t q = i; q < j; ++q)
            if (items[q].edge) rank_sum_pos += avg_rank;
        i = j;
    }
    const double p = static_cast<double>(pos), m = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * m);
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["pck"] = pck;
    j["ap50"] = ap50;
    j["ap75"] = ap75;
    j["ap"] = ap;
    j["link_precision"] = link_precision;
    j["link_recall"] = link_recall;
    j["link_f1"] = link_f1;
    j["auc"] = auc;
    return j.dump(2) + "\n";
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    auto row = [&os](const char* name, double v) {
        os << name;
        for (std::size_t i = std::string(name).size(); i < 16; ++i) os << ' ';
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        os << buf << '\n';
    };
    row("pck", pck);
    row("ap50", ap50);
    row("ap75", ap75);
    row("ap", ap);
    row("link_precision", link_precision);
    row("link_recall", link_recall);
    row("link_f1", link_f1);
    row("auc", auc);
    return os.str();
}

} // namespace klp
