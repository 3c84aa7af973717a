#include "klp/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "klp/tensor_io.hpp"

namespace klp {

namespace {

constexpr double kBoxMargin = 2.0; // pixels around the keypoint bbox
constexpr std::uint64_t kCodeSeed = 0x4B4C50C0DE16ULL;

InstanceTemplate make_template(int category, std::vector<std::pair<double, double>> layout,
                               const std::vector<Edge>& edges) {
    InstanceTemplate t;
    t.category = category;
    t.k = layout.size();
    t.layout = std::move(layout);
    t.skeleton = Tensor({t.k, t.k});
    for (const Edge& e : edges) {
        t.skeleton.at(e.first, e.second) = 1.0;
        t.skeleton.at(e.second, e.first) = 1.0;
    }
    t.validate();
    return t;
}

} // namespace

const std::vector<InstanceTemplate>& builtin_templates() {
    static const std::vector<InstanceTemplate> templates = [] {
        std::vector<InstanceTemplate> v;
        // monitor: 4:3 screen outline
        v.push_back(make_template(
            0, {{0.0, 0.0}, {1.0, 0.0}, {1.0, 0.75}, {0.0, 0.75}},
            {{0, 1}, {1, 2}, {2, 3}, {3, 0}}));
        // chair: back top corners, seat corners, front leg bottoms
        v.push_back(make_template(
            1,
            {{0.1, 0.0}, {0.9, 0.0}, {0.0, 0.5}, {1.0, 0.5}, {0.1, 1.0}, {0.9, 1.0}},
            {{0, 1}, {0, 2}, {1, 3}, {2, 3}, {2, 4}, {3, 5}}));
        // table: slightly irregular top quad plus four leg bottoms
        v.push_back(make_template(
            2,
            {{0.0, 0.1},
             {1.0, 0.0},
             {0.95, 0.3},
             {0.05, 0.35},
             {0.1, 1.0},
             {0.9, 0.95},
             {0.8, 0.7},
             {0.2, 0.75}},
            {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {3, 4}, {2, 5}, {1, 6}, {0, 7}}));
        return v;
    }();
    return templates;
}

const char* category_name(int category) {
    switch (category) {
        case 0: return "monitor";
        case 1: return "chair";
        case 2: return "table";
        default: throw std::invalid_argument("unknown category id " + std::to_string(category));
    }
}

int category_id(const std::string& name) {
    if (name == "monitor") return 0;
    if (name == "chair") return 1;
    if (name == "table") return 2;
    throw std::invalid_argument("unknown category name '" + name + "'");
}

std::vector<double> slot_code(int category, int slot) {
    const InstanceTemplate& tpl = template_for(builtin_templates(), category);
    if (slot < 0 || static_cast<std::size_t>(slot) >= tpl.k)
        throw std::invalid_argument("slot out of range for category");
    Rng rng = Rng(kCodeSeed).fork(static_cast<std::uint64_t>(category) * 64 +
                                  static_cast<std::uint64_t>(slot));
    std::vector<double> code(kFeatureWidth);
    double norm = 0.0;
    for (double& v : code) {
        v = rng.next_normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : code) v /= norm;
    return code;
}

void SceneSpec::validate() const {
    if (image_w == 0 || image_h == 0) throw std::invalid_argument("spec field 'image' must be positive");
    if (objects.empty()) throw std::invalid_argument("spec field 'objects' must be nonempty");
    for (const ObjectSpec& o : objects) {
        template_for(builtin_templates(), o.category); // throws on bad category
        if (!(o.scale > 0.0)) throw std::invalid_argument("spec field 'scale' must be positive");
    }
    if (feature_noise < 0.0) throw std::invalid_argument("spec field 'feature_noise' must be >= 0");
    if (position_jitter < 0.0)
        throw std::invalid_argument("spec field 'position_jitter' must be >= 0");
    if (overlap < 0.0 || overlap >= 1.0)
        throw std::invalid_argument("spec field 'overlap' must lie in [0, 1)");
}

void Scene::validate() const {
    std::vector<std::size_t> counts(boxes.size(), 0);
    for (const Keypoint& kp : keypoints) {
        if (kp.instance < 0 || static_cast<std::size_t>(kp.instance) >= boxes.size())
            throw std::invalid_argument("scene keypoint references a missing instance");
        ++counts[static_cast<std::size_t>(kp.instance)];
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const InstanceTemplate& tpl = template_for(builtin_templates(), boxes[i].category);
        if (counts[i] != tpl.k)
            throw std::invalid_argument("instance keypoint count differs from its template");
    }
    for (const Edge& e : links) {
        const Keypoint& a = keypoints.at(e.first);
        const Keypoint& b = keypoints.at(e.second);
        if (a.instance != b.instance)
            throw std::invalid_argument("scene link crosses instances");
        const InstanceTemplate& tpl =
            template_for(builtin_templates(), boxes[static_cast<std::size_t>(a.instance)].category);
        if (tpl.skeleton.at(static_cast<std::size_t>(a.slot), static_cast<std::size_t>(b.slot)) !=
            1.0)
            throw std::invalid_argument("scene link missing from template skeleton");
    }
    if (features.extent(0) != keypoints.size() || features.extent(1) != kFeatureWidth)
        throw std::invalid_argument("scene feature matrix extents disagree with keypoints");
}

namespace {

struct PlacedObject {
    std::vector<double> xs, ys; // keypoint positions
    BBox box;
};

// layout centroid
std::pair<double, double> layout_centroid(const InstanceTemplate& tpl) {
    double cx = 0.0, cy = 0.0;
    for (const auto& [x, y] : tpl.layout) {
        cx += x;
        cy += y;
    }
    return {cx / static_cast<double>(tpl.k), cy / static_cast<double>(tpl.k)};
}

PlacedObject place(const InstanceTemplate& tpl, const ObjectSpec& obj, double tx, double ty,
                   const std::vector<std::pair<double, double>>& jitter) {
    PlacedObject p;
    const auto [cx, cy] = layout_centroid(tpl);
    const double cr = std::cos(obj.rotation), sr = std::sin(obj.rotation);
    for (std::size_t s = 0; s < tpl.k; ++s) {
        const double lx = tpl.layout[s].first - cx;
        const double ly = tpl.layout[s].second - cy;
        const double x = tx + obj.scale * (cr * lx - sr * ly) + jitter[s].first;
        const double y = ty + obj.scale * (sr * lx + cr * ly) + jitter[s].second;
        p.xs.push_back(x);
        p.ys.push_back(y);
    }
    p.box.x_min = *std::min_element(p.xs.begin(), p.xs.end()) - kBoxMargin;
    p.box.x_max = *std::max_element(p.xs.begin(), p.xs.end()) + kBoxMargin;
    p.box.y_min = *std::min_element(p.ys.begin(), p.ys.end()) - kBoxMargin;
    p.box.y_max = *std::max_element(p.ys.begin(), p.ys.end()) + kBoxMargin;
    return p;
}

} // namespace

Scene generate(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);

    // draw all randomness up front so overlap search does not disturb it
    std::vector<std::vector<std::pair<double, double>>> jitter(spec.objects.size());
    std::vector<std::vector<double>> noise(spec.objects.size());
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const InstanceTemplate& tpl = template_for(builtin_templates(), spec.objects[i].category);
        for (std::size_t s = 0; s < tpl.k; ++s)
            jitter[i].emplace_back(spec.position_jitter * rng.next_normal(),
                                   spec.position_jitter * rng.next_normal());
        for (std::size_t s = 0; s < tpl.k * kFeatureWidth; ++s)
            noise[i].push_back(spec.feature_noise * rng.next_normal());
    }

    std::vector<PlacedObject> placed;
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const ObjectSpec& obj = spec.objects[i];
        const InstanceTemplate& tpl = template_for(builtin_templates(), obj.category);
        PlacedObject p = place(tpl, obj, obj.tx, obj.ty, jitter[i]);

        if (spec.overlap > 0.0 && i > 0) {
            // slide toward the previous object's center until the box IoU
            // meets the target; IoU grows monotonically along the slide
            const BBox& anchor = placed[i - 1].box;
            const double ax = anchor.cx(), ay = anchor.cy();
            auto at = [&](double t) {
                const double tx = obj.tx + t * (ax - obj.tx);
                const double ty = obj.ty + t * (ay - obj.ty);
                return place(tpl, obj, tx, ty, jitter[i]);
            };
            auto overlap_at = [&](double t) { return iou(at(t).box, anchor); };
            if (overlap_at(0.0) >= spec.overlap) {
                // already overlapping at the spec pose; leave it there
            } else if (overlap_at(1.0) < spec.overlap) {
                throw std::runtime_error("requested overlap unreachable for object " +
                                         std::to_string(i));
            } else {
                double lo = 0.0, hi = 1.0;
                for (int it = 0; it < 60; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    (overlap_at(mid) < spec.overlap ? lo : hi) = mid;
                }
                p = at(hi);
            }
        }
        placed.push_back(std::move(p));
    }

    Scene scene;
    scene.image_w = spec.image_w;
    scene.image_h = spec.image_h;
    std::size_t total = 0;
    for (std::size_t i = 0; i < spec.objects.size(); ++i)
        total += template_for(builtin_templates(), spec.objects[i].category).k;
    scene.features = Tensor({total, kFeatureWidth});

    std::size_t node = 0;
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const ObjectSpec& obj = spec.objects[i];
        const InstanceTemplate& tpl = template_for(builtin_templates(), obj.category);
        const PlacedObject& p = placed[i];
        const std::size_t base = node;
        for (std::size_t s = 0; s < tpl.k; ++s, ++node) {
            if (p.xs[s] < 0.0 || p.ys[s] < 0.0 || p.xs[s] >= static_cast<double>(spec.image_w) ||
                p.ys[s] >= static_cast<double>(spec.image_h))
                throw std::runtime_error("object " + std::to_string(i) +
                                         " falls outside the image after transform");
            Keypoint kp;
            kp.x = p.xs[s];
            kp.y = p.ys[s];
            kp.category = obj.category;
            kp.instance = static_cast<int>(i);
            kp.slot = static_cast<int>(s);
            scene.keypoints.push_back(kp);

            const std::vector<double> code = slot_code(obj.category, static_cast<int>(s));
            for (std::size_t d = 0; d < kFeatureWidth; ++d)
                scene.features.at(node, d) = code[d] + noise[i][s * kFeatureWidth + d];
        }
        for (std::size_t a = 0; a < tpl.k; ++a)
            for (std::size_t b = a + 1; b < tpl.k; ++b)
                if (tpl.skeleton.at(a, b) == 1.0) scene.links.emplace_back(base + a, base + b);
        scene.boxes.push_back({p.box, obj.category});
    }
    scene.validate();
    return scene;
}

Graph to_graph(const Scene& scene) {
    const std::size_t n = scene.keypoints.size();
    Graph g;
    g.a = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) g.a.at(i, i) = 1.0;
    for (const Edge& e : scene.links) {
        g.a.at(e.first, e.second) = 1.0;
        g.a.at(e.second, e.first) = 1.0;
    }
    g.x = scene.features;
    for (const Keypoint& kp : scene.keypoints) {
        g.cat.push_back(kp.category);
        g.inst.push_back(kp.instance);
    }
    g.validate();
    return g;
}

std::string spec_to_json(const SceneSpec& spec) {
    nlohmann::json j;
    j["image"] = {spec.image_w, spec.image_h};
    j["objects"] = nlohmann::json::array();
    for (const ObjectSpec& o : spec.objects)
        j["objects"].push_back({{"category", category_name(o.category)},
                                {"translation", {o.tx, o.ty}},
                                {"scale", o.scale},
                                {"rotation", o.rotation}});
    j["feature_noise"] = spec.feature_noise;
    j["position_jitter"] = spec.position_jitter;
    j["overlap"] = spec.overlap;
    return j.dump();
}

SceneSpec spec_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    static const std::set<std::string> known = {"image",         "objects", "feature_noise",
                                                "position_jitter", "overlap"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key))
            throw std::invalid_argument("unknown spec field '" + key + "'");

    SceneSpec spec;
    if (j.contains("image")) {
        spec.image_w = j["image"].at(0).get<std::size_t>();
        spec.image_h = j["image"].at(1).get<std::size_t>();
    }
    if (!j.contains("objects"))
        throw std::invalid_argument("spec field 'objects' is required");
    for (const auto& obj : j["objects"]) {
        static const std::set<std::string> obj_known = {"category", "translation", "scale",
                                                        "rotation"};
        for (const auto& [key, value] : obj.items())
            if (!obj_known.count(key))
                throw std::invalid_argument("unknown spec field 'objects." + key + "'");
        ObjectSpec o;
        if (obj.at("category").is_string())
            o.category = category_id(obj["category"].get<std::string>());
        else
            o.category = obj["category"].get<int>();
        o.tx = obj.at("translation").at(0).get<double>();
        o.ty = obj.at("translation").at(1).get<double>();
        o.scale = obj.value("scale", 1.0);
        o.rotation = obj.value("rotation", 0.0);
        spec.objects.push_back(o);
    }
    spec.feature_noise = j.value("feature_noise", 0.0);
    spec.position_jitter = j.value("position_jitter", 0.0);
    spec.overlap = j.value("overlap", 0.0);
    spec.validate();
    return spec;
}

std::string scene_to_json(const Scene& scene) {
    nlohmann::json j;
    j["image"] = {scene.image_w, scene.image_h};
    nlohmann::json objects = nlohmann::json::array();

    // per-object blocks; keypoint/link indices are local to the object
    std::size_t node = 0;
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        const InstanceTemplate& tpl =
            template_for(builtin_templates(), scene.boxes[i].category);
        nlohmann::json obj;
        obj["category"] = category_name(scene.boxes[i].category);
        obj["bbox"] = {scene.boxes[i].box.x_min, scene.boxes[i].box.y_min,
                       scene.boxes[i].box.x_max, scene.boxes[i].box.y_max};
        nlohmann::json kps = nlohmann::json::array();
        for (std::size_t s = 0; s < tpl.k; ++s) {
            const Keypoint& kp = scene.keypoints[node + s];
            kps.push_back({kp.x, kp.y, kp.slot});
        }
        obj["keypoints"] = kps;
        nlohmann::json links = nlohmann::json::array();
        for (const Edge& e : scene.links)
            if (e.first >= node && e.first < node + tpl.k)
                links.push_back({e.first - node, e.second - node});
        obj["links"] = links;
        objects.push_back(obj);
        node += tpl.k;
    }
    j["objects"] = objects;

    nlohmann::json feats = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.features.extent(0); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t d = 0; d < scene.features.extent(1); ++d)
            row.push_back(scene.features.at(i, d));
        feats.push_back(row);
    }
    j["features"] = feats;
    return j.dump();
}

Scene scene_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    Scene scene;
    scene.image_w = j.at("image").at(0).get<std::size_t>();
    scene.image_h = j.at("image").at(1).get<std::size_t>();

    std::size_t node = 0;
    for (const auto& obj : j.at("objects")) {
        const int cat = obj.at("category").is_string()
                            ? category_id(obj["category"].get<std::string>())
                            : obj["category"].get<int>();
        const auto& bbox = obj.at("bbox");
        InstanceBox ib;
        ib.category = cat;
        ib.box = {bbox.at(0).get<double>(), bbox.at(1).get<double>(), bbox.at(2).get<double>(),
                  bbox.at(3).get<double>()};
        const int instance = static_cast<int>(scene.boxes.size());
        scene.boxes.push_back(ib);

        const std::size_t base = node;
        for (const auto& kp_json : obj.at("keypoints")) {
            Keypoint kp;
            kp.x = kp_json.at(0).get<double>();
            kp.y = kp_json.at(1).get<double>();
            kp.slot = kp_json.at(2).get<int>();
            kp.category = cat;
            kp.instance = instance;
            scene.keypoints.push_back(kp);
            ++node;
        }
        for (const auto& link : obj.at("links"))
            scene.links.emplace_back(base + link.at(0).get<std::size_t>(),
                                     base + link.at(1).get<std::size_t>());
    }

    const auto& feats = j.at("features");
    scene.features = Tensor({feats.size(), kFeatureWidth});
    for (std::size_t i = 0; i < feats.size(); ++i)
        for (std::size_t d = 0; d < kFeatureWidth; ++d)
            scene.features.at(i, d) = feats.at(i).at(d).get<double>();
    scene.validate();
    return scene;
}

void emit_dataset(std::size_t n, const SceneSpec& spec, std::uint64_t seed,
                  const std::string& path) {
    spec.validate();
    std::ostringstream out;
    nlohmann::json header;
    header["version"] = 1;
    header["seed"] = seed;
    header["spec"] = nlohmann::json::parse(spec_to_json(spec));
    out << header.dump() << '\n';
    for (std::size_t i = 0; i < n; ++i) {
        const Scene scene = generate(spec, seed ^ static_cast<std::uint64_t>(i));
        out << scene_to_json(scene) << '\n';
    }
    atomic_write_file(path, out.str());
}

std::vector<Scene> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset missing header line");
    nlohmann::json header = nlohmann::json::parse(line);
    if (!header.contains("version")) throw std::runtime_error("dataset header missing version");

    std::vector<Scene> scenes;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        scenes.push_back(scene_from_json(line));
    }
    return scenes;
}

} // namespace klp
