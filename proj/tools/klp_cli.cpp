#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "klp/clpg.hpp"
#include "klp/gradient_suite.hpp"
#include "klp/image_io.hpp"
#include "klp/pipeline.hpp"
#include "klp/pyramid.hpp"
#include "klp/synthgen.hpp"
#include "klp/tensor_io.hpp"

namespace {

using nlohmann::json;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CLI::ValidationError("--config", "cannot open file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// flat JSON object -> CLI11 config items; unknown keys are rejected by
// allow_config_extras(false) on each subcommand
class ConfigJson : public CLI::Config {
public:
    std::string to_config(const CLI::App* app, bool, bool, std::string) const override {
        json j;
        for (const CLI::Option* opt : app->get_options())
            if (opt->get_configurable() && opt->count() > 0)
                j[opt->get_single_name()] = opt->results().back();
        return j.dump(2);
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        input >> j;
        if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            CLI::ConfigItem item;
            item.name = key;
            if (value.is_boolean()) {
                item.inputs = {value.get<bool>() ? "true" : "false"};
            } else if (value.is_string()) {
                item.inputs = {value.get<std::string>()};
            } else if (value.is_number_integer()) {
                item.inputs = {std::to_string(value.get<long long>())};
            } else if (value.is_number()) {
                std::ostringstream os;
                os << value.get<double>();
                item.inputs = {os.str()};
            } else {
                throw CLI::ConversionError("config key '" + key + "' must be a scalar");
            }
            items.push_back(std::move(item));
        }
        return items;
    }
};

struct SeedFlag {
    std::uint64_t value = 1;
    CLI::Option* opt = nullptr;

    std::uint64_t resolve() const {
        if (opt && opt->count() > 0) return value;
        if (const char* env = std::getenv("KLP_SEED")) return std::strtoull(env, nullptr, 10);
        return 1;
    }
};

bool g_quiet = false;

void log_config(const std::string& name, const json& resolved) {
    if (g_quiet) return;
    json line;
    line["command"] = name;
    line["config"] = resolved;
    std::cerr << line.dump() << '\n';
}

klp::SceneSpec default_spec() {
    klp::SceneSpec spec;
    spec.image_w = 128;
    spec.image_h = 128;
    spec.objects.push_back({0, 38.0, 34.0, 44.0, 0.15});
    spec.objects.push_back({1, 88.0, 84.0, 40.0, -0.3});
    return spec;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KLP toolkit: synthetic keypoint scenes, graph link prediction, LIS"};
    app.require_subcommand(1);
    app.config_formatter(std::make_shared<ConfigJson>());

    auto add_common = [](CLI::App* cmd, SeedFlag& seed) {
        cmd->set_config("--config", "", "JSON config file; CLI flags override")
            ->configurable(false);
        cmd->allow_config_extras(false);
        seed.opt = cmd->add_option("--seed", seed.value,
                                   "PRNG seed (falls back to KLP_SEED, then 1)");
        cmd->add_flag("--quiet", g_quiet, "suppress the resolved-config log line")
            ->configurable(false);
    };

    // synth
    auto* synth = app.add_subcommand("synth", "generate a scene dataset");
    std::size_t synth_n = 10;
    std::string synth_spec, synth_out;
    SeedFlag synth_seed;
    synth->add_option("--n", synth_n, "number of scenes");
    synth->add_option("--spec", synth_spec, "scene spec JSON file");
    synth->add_option("--out", synth_out, "output dataset path");
    add_common(synth, synth_seed);

    // train
    auto* train = app.add_subcommand("train", "train the link prediction model");
    std::string train_dataset, train_out;
    klp::ClpgHyper hyper;
    SeedFlag train_seed;
    train->add_option("--dataset", train_dataset, "dataset path");
    train->add_option("--out", train_out, "model archive path");
    train->add_option("--hidden", hyper.hidden, "encoder width");
    train->add_option("--latent", hyper.latent, "embedding width");
    train->add_option("--tau", hyper.tau, "node weight scale");
    train->add_option("--lr", hyper.learning_rate, "learning rate");
    train->add_option("--steps", hyper.steps, "gradient steps");
    train->add_option("--batch", hyper.batch, "instances per step");
    add_common(train, train_seed);

    // eval
    auto* eval = app.add_subcommand("eval", "run the full pipeline and report metrics");
    std::string eval_dataset, eval_model, eval_out;
    klp::PipelineConfig pipe;
    SeedFlag eval_seed;
    eval->add_option("--dataset", eval_dataset, "dataset path");
    eval->add_option("--model", eval_model, "model archive path");
    eval->add_option("--out", eval_out, "report JSON path");
    eval->add_option("--kernel", pipe.kernel, "codec kernel size");
    eval->add_option("--stride", pipe.stride, "heatmap stride");
    eval->add_option("--link-threshold", pipe.link_threshold, "link score threshold");
    add_common(eval, eval_seed);

    // render
    auto* render = app.add_subcommand("render", "export heatmap/overlay images");
    std::string render_dataset, render_dir;
    std::size_t render_index = 0;
    int render_kernel = 7;
    double render_stride = 4.0;
    SeedFlag render_seed;
    render->add_option("--dataset", render_dataset, "dataset path");
    render->add_option("--index", render_index, "scene index");
    render->add_option("--out-dir", render_dir, "output directory");
    render->add_option("--kernel", render_kernel, "gaussian kernel size");
    render->add_option("--stride", render_stride, "heatmap stride");
    add_common(render, render_seed);

    // flops
    auto* flops = app.add_subcommand("flops", "pyramid cost report");
    int flops_lo = 3, flops_hi = 7;
    std::size_t flops_base = 64, flops_g = 8;
    std::string flops_channels = "8,8,8,8,8";
    bool flops_extend = false;
    SeedFlag flops_seed;
    flops->add_option("--level-lo", flops_lo, "lowest level");
    flops->add_option("--level-hi", flops_hi, "highest level");
    flops->add_option("--base", flops_base, "extent at the lowest level");
    flops->add_option("--channels", flops_channels, "comma-separated input widths per level");
    flops->add_option("--g-width", flops_g, "1x1 mix output width");
    flops->add_flag("--extend", flops_extend, "append two down-sampled levels");
    add_common(flops, flops_seed);

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "verify every registered gradient");
    std::size_t grad_trials = 20;
    bool grad_fault = false;
    SeedFlag grad_seed;
    gradcheck->add_option("--trials", grad_trials, "seeds per gradient");
    gradcheck->add_flag("--inject-fault", grad_fault, "also run a corrupted gradient");
    add_common(gradcheck, grad_seed);

    // lis
    auto* lis = app.add_subcommand("lis", "occlusion disambiguation demo");
    std::string lis_scene, lis_out, lis_overlay;
    SeedFlag lis_seed;
    lis->add_option("--scene", lis_scene, "scene JSON file (one dataset line)");
    lis->add_option("--out", lis_out, "assignment JSON path (stdout when omitted)");
    lis->add_option("--overlay", lis_overlay, "overlay PPM path");
    add_common(lis, lis_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 1;
    }

    using namespace klp;
    try {
        if (synth->parsed()) {
            if (synth_out.empty()) throw std::invalid_argument("synth requires --out");
            SceneSpec spec =
                synth_spec.empty() ? default_spec() : spec_from_json(read_file(synth_spec));
            const std::uint64_t seed = synth_seed.resolve();
            log_config("synth", {{"n", synth_n},
                                 {"spec", json::parse(spec_to_json(spec))},
                                 {"seed", seed},
                                 {"out", synth_out}});
            emit_dataset(synth_n, spec, seed, synth_out);
            std::printf("scenes=%zu checksum=%016llx\n", synth_n,
                        static_cast<unsigned long long>(fnv1a(read_file(synth_out))));
            return 0;
        }

        if (train->parsed()) {
            if (train_dataset.empty() || train_out.empty())
                throw std::invalid_argument("train requires --dataset and --out");
            hyper.seed = train_seed.resolve();
            log_config("train", {{"dataset", train_dataset},
                                 {"out", train_out},
                                 {"hidden", hyper.hidden},
                                 {"latent", hyper.latent},
                                 {"tau", hyper.tau},
                                 {"lr", hyper.learning_rate},
                                 {"steps", hyper.steps},
                                 {"batch", hyper.batch},
                                 {"seed", hyper.seed}});
            std::vector<Graph> graphs;
            for (const Scene& scene : load_dataset(train_dataset))
                graphs.push_back(to_graph(scene));
            const TrainResult result = train_clpg(graphs, hyper);
            save_params(result.params, train_out);
            std::ostringstream curve;
            curve << "step,loss,kl\n";
            for (const TrainStepLog& log : result.curve) {
                char buf[96];
                std::snprintf(buf, sizeof(buf), "%zu,%.12g,%.12g\n", log.step, log.loss, log.kl);
                curve << buf;
            }
            atomic_write_file(train_out + ".curve.csv", curve.str());
            std::printf("steps=%zu final_loss=%.6f\n", result.curve.size(),
                        result.curve.empty() ? 0.0 : result.curve.back().loss);
            return 0;
        }

        if (eval->parsed()) {
            if (eval_dataset.empty() || eval_model.empty())
                throw std::invalid_argument("eval requires --dataset and --model");
            log_config("eval", {{"dataset", eval_dataset},
                                {"model", eval_model},
                                {"out", eval_out},
                                {"kernel", pipe.kernel},
                                {"stride", pipe.stride},
                                {"link_threshold", pipe.link_threshold}});
            const std::vector<Scene> scenes = load_dataset(eval_dataset);
            if (scenes.empty()) throw std::invalid_argument("dataset holds no scenes");
            const ClpgParams params = load_params(eval_model);
            if (params.feature_width != kFeatureWidth)
                throw std::invalid_argument("model feature width does not match dataset");
            const EvalReport report = evaluate_dataset(scenes, params, pipe);
            std::fputs(report.to_table().c_str(), stdout);
            if (!eval_out.empty()) atomic_write_file(eval_out, report.to_json());
            return 0;
        }

        if (render->parsed()) {
            if (render_dataset.empty() || render_dir.empty())
                throw std::invalid_argument("render requires --dataset and --out-dir");
            log_config("render", {{"dataset", render_dataset},
                                  {"index", render_index},
                                  {"out_dir", render_dir},
                                  {"kernel", render_kernel},
                                  {"stride", render_stride}});
            const std::vector<Scene> scenes = load_dataset(render_dataset);
            if (render_index >= scenes.size())
                throw std::invalid_argument("scene index out of range");
            const Scene& scene = scenes[render_index];
            const auto grid_w = static_cast<std::size_t>(
                std::ceil(static_cast<double>(scene.image_w) / render_stride));
            const auto grid_h = static_cast<std::size_t>(
                std::ceil(static_cast<double>(scene.image_h) / render_stride));
            const HeatmapStack stack =
                render_gt(scene.keypoints, grid_w, grid_h, render_stride, render_kernel);
            write_pgm(render_dir + "/heatmap.pgm", stack.h);
            write_ppm(render_dir + "/overlay.ppm", render_scene_overlay(scene));
            std::printf("wrote %s/heatmap.pgm and %s/overlay.ppm\n", render_dir.c_str(),
                        render_dir.c_str());
            return 0;
        }

        if (flops->parsed()) {
            PyramidConfig config;
            config.level_lo = flops_lo;
            config.level_hi = flops_hi;
            config.base_h = flops_base;
            config.base_w = flops_base;
            config.g_width = flops_g;
            config.extend = flops_extend;
            std::stringstream ss(flops_channels);
            std::string item;
            while (std::getline(ss, item, ','))
                config.p_channels.push_back(static_cast<std::size_t>(std::stoul(item)));
            log_config("flops", {{"level_lo", flops_lo},
                                 {"level_hi", flops_hi},
                                 {"base", flops_base},
                                 {"channels", flops_channels},
                                 {"g_width", flops_g},
                                 {"extend", flops_extend}});
            config.validate();
            std::fputs(flops_estimate(config).to_table().c_str(), stdout);
            return 0;
        }

        if (gradcheck->parsed()) {
            const std::uint64_t seed = grad_seed.resolve();
            log_config("gradcheck",
                       {{"seed", seed}, {"trials", grad_trials}, {"inject_fault", grad_fault}});
            bool all_pass = true;
            std::printf("%-28s %-8s %s\n", "gradient", "status", "max_rel_err");
            for (const GradCheckCase& c : gradient_suite()) {
                double worst = 0.0;
                for (std::size_t t = 0; t < grad_trials; ++t)
                    worst = std::max(worst, c.run(seed + t));
                const bool pass = worst <= 1e-4;
                all_pass = all_pass && pass;
                std::printf("%-28s %-8s %.3e\n", c.name.c_str(), pass ? "PASS" : "FAIL", worst);
            }
            if (grad_fault) {
                const double err = run_fault_injection(seed);
                const bool detected = err > 0.1;
                std::printf("%-28s %-8s %.3e\n", "injected_fault",
                            detected ? "DETECTED" : "MISSED", err);
                all_pass = all_pass && detected;
            }
            if (!all_pass) throw std::runtime_error("gradient check failed");
            return 0;
        }

        if (lis->parsed()) {
            if (lis_scene.empty()) throw std::invalid_argument("lis requires --scene");
            log_config("lis",
                       {{"scene", lis_scene}, {"out", lis_out}, {"overlay", lis_overlay}});
            const Scene scene = scene_from_json(read_file(lis_scene));

            // slots re-derived from the published codes, not ground truth
            std::vector<DetectedNode> detections;
            for (std::size_t i = 0; i < scene.keypoints.size(); ++i) {
                DetectedNode d;
                d.kp = scene.keypoints[i];
                d.kp.instance = -1;
                d.kp.slot = -1;
                d.feature.resize(kFeatureWidth);
                for (std::size_t f = 0; f < kFeatureWidth; ++f)
                    d.feature[f] = scene.features.at(i, f);
                const InstanceTemplate& tpl = template_for(builtin_templates(), d.kp.category);
                double best = -2.0;
                for (std::size_t s = 0; s < tpl.k; ++s) {
                    const auto code = slot_code(d.kp.category, static_cast<int>(s));
                    double dot = 0.0, na = 0.0;
                    for (std::size_t f = 0; f < kFeatureWidth; ++f) {
                        dot += d.feature[f] * code[f];
                        na += d.feature[f] * d.feature[f];
                    }
                    const double sim = na == 0.0 ? 0.0 : dot / std::sqrt(na);
                    if (sim > best) {
                        best = sim;
                        d.kp.slot = static_cast<int>(s);
                    }
                }
                detections.push_back(std::move(d));
            }

            const auto& templates = builtin_templates();
            const SceneNodes nodes = classify_nodes(detections, scene.boxes, templates);
            const Assignment assignment = resolve(nodes, scene.boxes, templates);
            const auto table = resolution_table(detections.size(), nodes, assignment);

            json result;
            result["score"] = assignment.score;
            result["fixed"] = nodes.fixed.size();
            result["debatable"] = nodes.debatable.size();
            result["outliers_immediate"] = nodes.outliers.size();
            json per_node = json::array();
            for (std::size_t d = 0; d < table.size(); ++d) {
                json entry;
                entry["detection"] = d;
                if (table[d].instance == kOutlier) {
                    entry["assignment"] = "outlier";
                } else {
                    entry["instance"] = table[d].instance;
                    entry["slot"] = table[d].slot;
                }
                per_node.push_back(entry);
            }
            result["nodes"] = per_node;
            const std::string text = result.dump(2) + "\n";
            if (lis_out.empty())
                std::fputs(text.c_str(), stdout);
            else
                atomic_write_file(lis_out, text);
            if (!lis_overlay.empty()) write_ppm(lis_overlay, render_scene_overlay(scene));
            return 0;
        }

        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
