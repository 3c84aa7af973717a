#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "klp/clpg.hpp"
#include "klp/lis.hpp"

namespace klp {

inline constexpr std::size_t kFeatureWidth = 16;

/// Built-in categories: 0 = monitor (k=4), 1 = chair (k=6), 2 = table (k=8).
const std::vector<InstanceTemplate>& builtin_templates();
const char* category_name(int category);
int category_id(const std::string& name);

/// Fixed near-orthogonal unit code vector for (category, slot); the
/// noiseless node feature. Stable across runs and versions.
std::vector<double> slot_code(int category, int slot);

struct ObjectSpec {
    int category = 0;
    double tx = 0.0; // translation of the layout centroid, image pixels
    double ty = 0.0;
    double scale = 1.0; // layout units to pixels
    double rotation = 0.0;
};

struct SceneSpec {
    std::size_t image_w = 128;
    std::size_t image_h = 128;
    std::vector<ObjectSpec> objects;
    double feature_noise = 0.0;   // sigma_n
    double position_jitter = 0.0; // sigma_p, pixels
    double overlap = 0.0;         // target pairwise box IoU, [0, 1)

    void validate() const;
};

struct Scene {
    std::size_t image_w = 0;
    std::size_t image_h = 0;
    std::vector<Keypoint> keypoints; // global enumeration, instance/slot set
    std::vector<Edge> links;         // global node indices
    Tensor features;                 // n x kFeatureWidth
    std::vector<InstanceBox> boxes;  // one per object, in object order

    void validate() const;
};

/// Pure function of (spec, seed): similarity-transformed template layouts
/// with jittered positions and noisy slot-code features. When an overlap
/// target is set, each object after the first slides along the axis toward
/// its predecessor until the pairwise box IoU lands within 1e-3 of target.
Scene generate(const SceneSpec& spec, std::uint64_t seed);

Graph to_graph(const Scene& scene);

/// JSON-lines: header {version, seed, spec}, then one scene object per line.
void emit_dataset(std::size_t n, const SceneSpec& spec, std::uint64_t seed,
                  const std::string& path);
std::vector<Scene> load_dataset(const std::string& path);

SceneSpec spec_from_json(const std::string& json_text);
std::string spec_to_json(const SceneSpec& spec);
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& json_text);

} // namespace klp
