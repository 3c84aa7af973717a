#include "klp/lis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace klp {

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("feature widths disagree in cosine similarity");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double box_diag(const BBox& b) {
    return std::sqrt(b.width() * b.width() + b.height() * b.height());
}

// vacancy = an unoccupied (instance, slot)
struct Vacancy {
    std::size_t instance;
    std::size_t slot;
};

std::vector<Vacancy> open_vacancies(const SceneNodes& scene,
                                    std::span<const InstanceBox> instances,
                                    std::span<const InstanceTemplate> templates) {
    std::vector<Vacancy> vacancies;
    for (std::size_t ins = 0; ins < instances.size(); ++ins) {
        const InstanceTemplate& tpl = template_for(templates, instances[ins].category);
        std::vector<bool> occupied(tpl.k, false);
        std::size_t n_fixed = 0;
        for (const FixedNode& f : scene.fixed) {
            if (f.instance != ins) continue;
            ++n_fixed;
            if (f.slot >= 0 && static_cast<std::size_t>(f.slot) < tpl.k)
                occupied[static_cast<std::size_t>(f.slot)] = true;
        }
        if (n_fixed > tpl.k)
            throw std::runtime_error("instance " + std::to_string(ins) +
                                     " holds more fixed nodes than its template allows");
        for (std::size_t s = 0; s < tpl.k; ++s)
            if (!occupied[s]) vacancies.push_back({ins, s});
    }
    return vacancies;
}

} // namespace

void InstanceTemplate::validate() const {
    if (k < 2) throw std::invalid_argument("template needs k >= 2");
    if (layout.size() != k) throw std::invalid_argument("template layout size must equal k");
    if (skeleton.rank() != 2 || skeleton.extent(0) != k || skeleton.extent(1) != k)
        throw std::invalid_argument("template skeleton must be k x k");
    for (std::size_t i = 0; i < k; ++i) {
        if (skeleton.at(i, i) != 0.0)
            throw std::invalid_argument("template skeleton diagonal must be zero");
        for (std::size_t j = 0; j < k; ++j) {
            const double v = skeleton.at(i, j);
            if (v != 0.0 && v != 1.0) throw std::invalid_argument("skeleton must be 0/1");
            if (v != skeleton.at(j, i))
                throw std::invalid_argument("skeleton must be symmetric");
        }
    }
}

double InstanceTemplate::layout_diag() const {
    double x0 = layout[0].first, x1 = x0, y0 = layout[0].second, y1 = y0;
    for (const auto& [x, y] : layout) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
    }
    return std::sqrt((x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0));
}

double InstanceTemplate::layout_dist(std::size_t slot_a, std::size_t slot_b) const {
    const double dx = layout[slot_a].first - layout[slot_b].first;
    const double dy = layout[slot_a].second - layout[slot_b].second;
    return std::sqrt(dx * dx + dy * dy) / layout_diag();
}

const InstanceTemplate& template_for(std::span<const InstanceTemplate> templates, int category) {
    for (const InstanceTemplate& t : templates)
        if (t.category == category) return t;
    throw std::invalid_argument("no template for category " + std::to_string(category));
}

SceneNodes classify_nodes(std::span<const DetectedNode> detections,
                          std::span<const InstanceBox> instances,
                          std::span<const InstanceTemplate> templates) {
    SceneNodes out;
    for (std::size_t d = 0; d < detections.size(); ++d) {
        const DetectedNode& det = detections[d];
        std::vector<std::size_t> containing;
        for (std::size_t ins = 0; ins < instances.size(); ++ins) {
            if (instances[ins].category != det.kp.category) continue;
            if (instances[ins].box.contains(det.kp.x, det.kp.y)) containing.push_back(ins);
        }
        if (containing.empty()) {
            out.outliers.push_back(d);
        } else if (containing.size() == 1) {
            FixedNode f;
            f.x = det.kp.x;
            f.y = det.kp.y;
            f.feature = det.feature;
            f.instance = containing.front();
            f.slot = det.kp.slot;
            f.det_index = d;
            out.fixed.push_back(f);
        } else {
            DebatableNode n;
            n.x = det.kp.x;
            n.y = det.kp.y;
            n.feature = det.feature;
            n.candidate_instances = containing;
            n.det_index = d;
            out.debatable.push_back(n);
        }
    }

    // settle fixed slots per instance: keep valid non-conflicting
    // hypotheses, fill the rest by nearest box-frame layout position
    for (std::size_t ins = 0; ins < instances.size(); ++ins) {
        const InstanceTemplate& tpl = template_for(templates, instances[ins].category);
        std::vector<bool> taken(tpl.k, false);
        std::vector<FixedNode*> pending;
        for (FixedNode& f : out.fixed) {
            if (f.instance != ins) continue;
            if (f.slot >= 0 && static_cast<std::size_t>(f.slot) < tpl.k &&
                !taken[static_cast<std::size_t>(f.slot)]) {
                taken[static_cast<std::size_t>(f.slot)] = true;
            } else {
                f.slot = -1;
                pending.push_back(&f);
            }
        }
        const BBox& box = instances[ins].box;
        for (FixedNode* f : pending) {
            double best = std::numeric_limits<double>::max();
            int best_slot = -1;
            for (std::size_t s = 0; s < tpl.k; ++s) {
                if (taken[s]) continue;
                const double lx = box.x_min + tpl.layout[s].first * box.width();
                const double ly = box.y_min + tpl.layout[s].second * box.height();
                const double d2 = (f->x - lx) * (f->x - lx) + (f->y - ly) * (f->y - ly);
                if (d2 < best) {
                    best = d2;
                    best_slot = static_cast<int>(s);
                }
            }
            if (best_slot < 0) {
                // more fixed nodes than slots: demote to debatable
                DebatableNode n;
                n.x = f->x;
                n.y = f->y;
                n.feature = f->feature;
                n.candidate_instances = {ins};
                n.det_index = f->det_index;
                out.debatable.push_back(n);
                f->slot = -2; // marked for removal below
            } else {
                f->slot = best_slot;
                taken[static_cast<std::size_t>(best_slot)] = true;
            }
        }
    }
    std::erase_if(out.fixed, [](const FixedNode& f) { return f.slot == -2; });
    return out;
}

double candidate_score(const DebatableNode& node, std::size_t instance, std::size_t slot,
                       const SceneNodes& scene, std::span<const InstanceBox> instances,
                       std::span<const InstanceTemplate> templates, const LisWeights& weights) {
    const int category = instances[instance].category;
    const InstanceTemplate& tpl = template_for(templates, category);
    if (slot >= tpl.k) throw std::invalid_argument("slot out of range for template");

    // feature term: mean feature of same-slot fixed nodes across
    // same-category instances
    std::vector<double> mean_feature(node.feature.size(), 0.0);
    std::size_t refs = 0;
    for (const FixedNode& f : scene.fixed) {
        if (f.slot != static_cast<int>(slot)) continue;
        if (instances[f.instance].category != category) continue;
        for (std::size_t i = 0; i < mean_feature.size(); ++i) mean_feature[i] += f.feature[i];
        ++refs;
    }
    double feature_term = 0.0;
    if (refs > 0) {
        for (double& v : mean_feature) v /= static_cast<double>(refs);
        feature_term = cosine(node.feature, mean_feature);
    }

    // distance-stability term against this instance's fixed nodes
    double dist_term = 0.0;
    std::size_t anchors = 0;
    const double scale = box_diag(instances[instance].box);
    for (const FixedNode& f : scene.fixed) {
        if (f.instance != instance || f.slot < 0) continue;
        const double d =
            std::sqrt((node.x - f.x) * (node.x - f.x) + (node.y - f.y) * (node.y - f.y)) / scale;
        dist_term += std::fabs(d - tpl.layout_dist(slot, static_cast<std::size_t>(f.slot)));
        ++anchors;
    }
    if (anchors > 0) dist_term /= static_cast<double>(anchors);

    return weights.lambda_f * feature_term - weights.lambda_d * dist_term;
}

namespace {

struct SearchState {
    const std::vector<std::vector<double>>* score; // [node][vacancy], NaN = not a candidate
    const std::vector<Vacancy>* vacancies;
    std::size_t n_nodes;
    std::vector<int> choice; // per node: vacancy index or -1
    std::vector<bool> used;
    std::vector<int> best_choice;
    std::size_t best_filled = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    bool has_best = false;

    void consider(std::size_t filled, double total) {
        // strict improvement only: the first assignment visited in
        // (node, instance, slot) order wins ties
        if (has_best && (filled < best_filled || (filled == best_filled && total <= best_score)))
            return;
        has_best = true;
        best_filled = filled;
        best_score = total;
        best_choice = choice;
    }

    void dfs(std::size_t node, std::size_t filled, double total) {
        if (node == n_nodes) {
            consider(filled, total);
            return;
        }
        const auto& row = (*score)[node];
        for (std::size_t v = 0; v < row.size(); ++v) {
            if (used[v] || std::isnan(row[v])) continue;
            used[v] = true;
            choice[node] = static_cast<int>(v);
            dfs(node + 1, filled + 1, total + row[v]);
            used[v] = false;
        }
        choice[node] = -1;
        dfs(node + 1, filled, total);
    }
};

} // namespace

Assignment resolve(const SceneNodes& scene, std::span<const InstanceBox> instances,
                   std::span<const InstanceTemplate> templates, const LisWeights& weights) {
    const std::vector<Vacancy> vacancies = open_vacancies(scene, instances, templates);
    const std::size_t n = scene.debatable.size();

    Assignment out;
    out.nodes.resize(n);
    if (n == 0) return out;

    // vacancies are already ordered by (instance, slot)
    std::vector<std::vector<double>> score(n, std::vector<double>(vacancies.size(),
                                           std::numeric_limits<double>::quiet_NaN()));
    for (std::size_t i = 0; i < n; ++i) {
        const DebatableNode& node = scene.debatable[i];
        for (std::size_t v = 0; v < vacancies.size(); ++v) {
            const auto& [ins, slot] = vacancies[v];
            if (std::find(node.candidate_instances.begin(), node.candidate_instances.end(),
                          ins) == node.candidate_instances.end())
                continue;
            score[i][v] = candidate_score(node, ins, slot, scene, instances, templates, weights);
        }
    }

    std::vector<int> choice(n, -1);
    if (n <= 6 && vacancies.size() <= 8) {
        SearchState st;
        st.score = &score;
        st.vacancies = &vacancies;
        st.n_nodes = n;
        st.choice.assign(n, -1);
        st.used.assign(vacancies.size(), false);
        st.dfs(0, 0, 0.0);
        choice = st.best_choice;
    } else {
        // greedy best-score-first under the same constraints
        struct Cand {
            double s;
            std::size_t node;
            std::size_t vac;
        };
        std::vector<Cand> cands;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t v = 0; v < vacancies.size(); ++v)
                if (!std::isnan(score[i][v])) cands.push_back({score[i][v], i, v});
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.s != b.s) return a.s > b.s;
            if (a.node != b.node) return a.node < b.node;
            return a.vac < b.vac;
        });
        std::vector<bool> node_done(n, false), vac_done(vacancies.size(), false);
        for (const Cand& c : cands) {
            if (node_done[c.node] || vac_done[c.vac]) continue;
            node_done[c.node] = true;
            vac_done[c.vac] = true;
            choice[c.node] = static_cast<int>(c.vac);
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (choice[i] < 0) continue;
        const auto& [ins, slot] = vacancies[static_cast<std::size_t>(choice[i])];
        out.nodes[i].instance = static_cast<int>(ins);
        out.nodes[i].slot = static_cast<int>(slot);
        out.score += score[i][static_cast<std::size_t>(choice[i])];
    }
    return out;
}

std::vector<NodeResolution> resolution_table(std::size_t n_detections, const SceneNodes& scene,
                                             const Assignment& assignment) {
    std::vector<NodeResolution> table(n_detections);
    for (const FixedNode& f : scene.fixed)
        table[f.det_index] = {static_cast<int>(f.instance), f.slot};
    for (std::size_t i = 0; i < scene.debatable.size(); ++i)
        table[scene.debatable[i].det_index] = {assignment.nodes[i].instance,
                                               assignment.nodes[i].slot};
    return table;
}

std::vector<Edge> prune_links(std::span<const Edge> links, std::span<const NodeResolution> table,
                              std::span<const InstanceBox> instances,
                              std::span<const InstanceTemplate> templates) {
    std::vector<Edge> kept;
    for (const Edge& e : links) {
        if (e.first >= table.size() || e.second >= table.size())
            throw std::invalid_argument("link references a node outside the resolution table");
        const NodeResolution& a = table[e.first];
        const NodeResolution& b = table[e.second];
        if (a.instance == kOutlier || b.instance == kOutlier) continue;
        if (a.instance != b.instance) continue;
        const InstanceTemplate& tpl =
            template_for(templates, instances[static_cast<std::size_t>(a.instance)].category);
        if (a.slot < 0 || b.slot < 0) continue;
        if (tpl.skeleton.at(static_cast<std::size_t>(a.slot), static_cast<std::size_t>(b.slot)) !=
            1.0)
            continue;
        kept.push_back(e);
    }
    return kept;
}

} // namespace klp
