#include "klp/clpg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "klp/tensor_io.hpp"

namespace klp {

namespace {

constexpr double kLogvarClamp = 30.0;

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor one_hot_augment(const Tensor& x, std::span<const int> cat, std::size_t n_categories) {
    const std::size_t n = x.extent(0), d = x.extent(1);
    Tensor out({n, d + n_categories});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j);
        const int c = cat[i];
        if (c < 0 || static_cast<std::size_t>(c) >= n_categories)
            throw std::invalid_argument("node category out of range for model");
        out.at(i, d + static_cast<std::size_t>(c)) = 1.0;
    }
    return out;
}

Tensor tanh_backward(const Tensor& activated, const Tensor& upstream) {
    Tensor out(activated.shape());
    for (std::size_t i = 0; i < activated.size(); ++i)
        out[i] = upstream[i] * (1.0 - activated[i] * activated[i]);
    return out;
}

struct EncodeTrace {
    Tensor a_norm;
    Tensor m0, h1, m1, h2, m2, h3, m3, h4, m4;
    Tensor mu, logvar_raw, logvar;
};

EncodeTrace encode_trace(const Graph& g, const ClpgParams& p) {
    g.validate();
    if (g.x.extent(1) != p.feature_width)
        throw std::invalid_argument("graph feature width does not match model");
    EncodeTrace t;
    t.a_norm = normalize_adjacency(g.a);
    const Tensor x_in = one_hot_augment(g.x, g.cat, p.n_categories);
    t.m0 = matmul(t.a_norm, x_in);
    t.h1 = elementwise(matmul(t.m0, p.w1), ScalarMap::Tanh);
    t.m1 = matmul(t.a_norm, t.h1);
    t.h2 = elementwise(matmul(t.m1, p.w2), ScalarMap::Tanh);
    t.m2 = matmul(t.a_norm, t.h2);
    t.h3 = elementwise(matmul(t.m2, p.w3), ScalarMap::Tanh);
    t.m3 = matmul(t.a_norm, t.h3);
    t.h4 = elementwise(matmul(t.m3, p.w4), ScalarMap::Tanh);
    t.m4 = matmul(t.a_norm, t.h4);
    t.mu = matmul(t.m4, p.w_mu);
    t.logvar_raw = matmul(t.m4, p.w_s);
    t.logvar = t.logvar_raw;
    for (std::size_t i = 0; i < t.logvar.size(); ++i)
        t.logvar[i] = std::clamp(t.logvar[i], -kLogvarClamp, kLogvarClamp);
    return t;
}

// pairs (i<j, same category), their BCE pos-weight, and per-pair weights
struct PairSet {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<double> weight;
    double pos_weight = 1.0;
};

PairSet same_category_pairs(const Graph& g, std::span<const double> f_weights) {
    PairSet ps;
    std::size_t edges = 0, non_edges = 0;
    for (std::size_t i = 0; i < g.n(); ++i)
        for (std::size_t j = i + 1; j < g.n(); ++j) {
            if (g.cat[i] != g.cat[j]) continue;
            ps.pairs.emplace_back(i, j);
            ps.weight.push_back(0.5 * (f_weights[i] + f_weights[j]));
            if (g.a.at(i, j) > 0.5)
                ++edges;
            else
                ++non_edges;
        }
    // class balance; degenerate all-edge or all-gap pair sets fall back to 1
    ps.pos_weight = (edges > 0 && non_edges > 0)
                        ? static_cast<double>(non_edges) / static_cast<double>(edges)
                        : 1.0;
    return ps;
}

double recon_bce(const Graph& g, const Tensor& z, const PairSet& ps, Tensor* dz) {
    if (ps.pairs.empty()) return 0.0;
    const std::size_t f = z.extent(1);
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(ps.pairs.size());
    for (std::size_t q = 0; q < ps.pairs.size(); ++q) {
        const auto [i, j] = ps.pairs[q];
        double s = 0.0;
        for (std::size_t k = 0; k < f; ++k) s += z.at(i, k) * z.at(j, k);
        const double p = logistic(s);
        const bool edge = g.a.at(i, j) > 0.5;
        const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
        total += ps.weight[q] * (edge ? -ps.pos_weight * std::log(pc) : -std::log(1.0 - pc));
        if (dz) {
            const double ds = ps.weight[q] * inv_n *
                              (edge ? -ps.pos_weight * (1.0 - p) : p);
            for (std::size_t k = 0; k < f; ++k) {
                dz->at(i, k) += ds * z.at(j, k);
                dz->at(j, k) += ds * z.at(i, k);
            }
        }
    }
    return total * inv_n;
}

} // namespace

void Graph::validate() const {
    const std::size_t nn = n();
    if (a.rank() != 2 || a.extent(0) != nn || a.extent(1) != nn)
        throw std::invalid_argument("graph adjacency must be n x n");
    if (x.rank() != 2 || x.extent(0) != nn)
        throw std::invalid_argument("graph features must have n rows");
    if (inst.size() != nn) throw std::invalid_argument("graph instance labels must have n entries");
    if (!x.all_finite()) throw std::invalid_argument("graph features must be finite");
    for (std::size_t i = 0; i < nn; ++i) {
        if (a.at(i, i) != 1.0)
            throw std::invalid_argument("adjacency diagonal must be 1");
        for (std::size_t j = 0; j < nn; ++j) {
            const double v = a.at(i, j);
            if (v != 0.0 && v != 1.0)
                throw std::invalid_argument("adjacency must be 0/1");
            if (v != a.at(j, i)) throw std::invalid_argument("adjacency must be symmetric");
        }
    }
}

ClpgParams ClpgParams::init(std::size_t feature_width, std::size_t n_categories,
                            std::size_t hidden, std::size_t latent, double tau, Rng& rng) {
    ClpgParams p;
    p.feature_width = feature_width;
    p.n_categories = n_categories;
    p.tau = tau;
    const std::size_t d = feature_width + n_categories;
    auto xavier = [&rng](std::size_t in, std::size_t out) {
        return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    p.w1 = xavier(d, hidden);
    p.w2 = xavier(hidden, hidden);
    p.w3 = xavier(hidden, hidden);
    p.w4 = xavier(hidden, hidden);
    p.w_mu = xavier(hidden, latent);
    p.w_s = xavier(hidden, latent);
    return p;
}

Tensor normalize_adjacency(const Tensor& a) {
    if (a.rank() != 2 || a.extent(0) != a.extent(1))
        throw std::invalid_argument("shape error: adjacency must be square");
    const std::size_t n = a.extent(0);
    std::vector<double> inv_sqrt_deg(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += a.at(i, j);
        if (deg <= 0.0) throw std::invalid_argument("adjacency row with zero degree");
        inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
    }
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = inv_sqrt_deg[i] * a.at(i, j) * inv_sqrt_deg[j];
    return out;
}

Posterior encode(const Graph& g, const ClpgParams& p) {
    EncodeTrace t = encode_trace(g, p);
    return Posterior{std::move(t.mu), std::move(t.logvar)};
}

Embedding sample(const Posterior& post, std::uint64_t seed) {
    Rng rng(seed);
    Tensor z(post.mu.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double lv = std::clamp(post.logvar[i], -kLogvarClamp, kLogvarClamp);
        z[i] = post.mu[i] + std::exp(0.5 * lv) * rng.next_normal();
    }
    return Embedding{std::move(z)};
}

std::vector<double> node_weights(const Tensor& x, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
    const std::size_t n = x.extent(0), d = x.extent(1);
    std::vector<double> f(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += x.at(i, j);
        f[i] = s / static_cast<double>(d);
    }
    const double mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(n);
    double max_abs = 0.0;
    for (double& v : f) {
        v -= mean;
        max_abs = std::max(max_abs, std::fabs(v));
    }
    if (max_abs == 0.0) return std::vector<double>(n, 1.0);
    bool any_positive = false;
    for (double& v : f) {
        v = tau * std::max(v / max_abs, 0.0);
        any_positive = any_positive || v > 0.0;
    }
    if (!any_positive) return std::vector<double>(n, 1.0);
    return f;
}

Tensor rejuvenate(const Tensor& z, std::span<const int> cat) {
    const std::size_t n = z.extent(0), f = z.extent(1);
    if (cat.size() != n) throw std::invalid_argument("category labels must match node count");
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (cat[i] != cat[j]) continue;
            double s = 0.0;
            for (std::size_t k = 0; k < f; ++k) s += z.at(i, k) * z.at(j, k);
            out.at(i, j) = logistic(s);
        }
    return out;
}

double kl_term(const Posterior& post) {
    if (!post.mu.same_shape(post.logvar))
        throw std::invalid_argument("shape error: posterior mu/logvar extents disagree");
    double kl = 0.0;
    for (std::size_t i = 0; i < post.mu.size(); ++i) {
        const double mu = post.mu[i];
        const double lv = post.logvar[i];
        kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    return kl;
}

LinkLossResult link_loss(const Graph& g, const Posterior& post, const Embedding& z, int c_pred,
                         int c_true, std::span<const double> f_weights) {
    LinkLossResult out;
    if (c_pred != c_true) {
        const double d = static_cast<double>(c_pred - c_true);
        out.value = d * d;
        return out;
    }
    if (f_weights.size() != g.n())
        throw std::invalid_argument("node weight vector must match node count");
    out.matched = true;
    const PairSet ps = same_category_pairs(g, f_weights);
    out.recon = recon_bce(g, z.z, ps, nullptr);
    out.kl = kl_term(post);
    out.value = out.recon + out.kl;
    return out;
}

double total_loss(double kd, double link, double alpha, double beta) {
    if (!std::isfinite(kd) || !std::isfinite(link))
        throw std::invalid_argument("total_loss requires finite inputs");
    return alpha * kd + beta * link;
}

ClpgGrads matched_loss_gradients(const Graph& g, const ClpgParams& p, const Tensor& eps_noise) {
    EncodeTrace t = encode_trace(g, p);
    if (!eps_noise.same_shape(t.mu))
        throw std::invalid_argument("shape error: sampling noise must be n x f");

    // z with the provided noise held fixed
    Tensor z(t.mu.shape());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = t.mu[i] + std::exp(0.5 * t.logvar[i]) * eps_noise[i];

    const std::vector<double> f_weights = node_weights(g.x, p.tau);
    const PairSet ps = same_category_pairs(g, f_weights);

    Tensor dz(z.shape());
    const double recon = recon_bce(g, z, ps, &dz);
    const double kl = kl_term(Posterior{t.mu, t.logvar});

    // d(loss)/dmu and /dlogvar: KL term plus the path through z
    Tensor dmu(t.mu.shape());
    Tensor dlogvar(t.logvar.shape());
    for (std::size_t i = 0; i < dmu.size(); ++i) {
        dmu[i] = t.mu[i] + dz[i];
        dlogvar[i] = 0.5 * (std::exp(t.logvar[i]) - 1.0) +
                     dz[i] * eps_noise[i] * 0.5 * std::exp(0.5 * t.logvar[i]);
        if (t.logvar_raw[i] <= -kLogvarClamp || t.logvar_raw[i] >= kLogvarClamp) dlogvar[i] = 0.0;
    }

    ClpgGrads grads;
    grads.loss = recon + kl;
    grads.kl = kl;
    grads.w_mu = matmul(transpose(t.m4), dmu);
    grads.w_s = matmul(transpose(t.m4), dlogvar);

    Tensor dm4 = add(matmul(dmu, transpose(p.w_mu)), matmul(dlogvar, transpose(p.w_s)));
    Tensor dh4 = matmul(t.a_norm, dm4);
    Tensor dp4 = tanh_backward(t.h4, dh4);
    grads.w4 = matmul(transpose(t.m3), dp4);

    Tensor dm3 = matmul(dp4, transpose(p.w4));
    Tensor dh3 = matmul(t.a_norm, dm3);
    Tensor dp3 = tanh_backward(t.h3, dh3);
    grads.w3 = matmul(transpose(t.m2), dp3);

    Tensor dm2 = matmul(dp3, transpose(p.w3));
    Tensor dh2 = matmul(t.a_norm, dm2);
    Tensor dp2 = tanh_backward(t.h2, dh2);
    grads.w2 = matmul(transpose(t.m1), dp2);

    Tensor dm1 = matmul(dp2, transpose(p.w2));
    Tensor dh1 = matmul(t.a_norm, dm1);
    Tensor dp1 = tanh_backward(t.h1, dh1);
    grads.w1 = matmul(transpose(t.m0), dp1);

    return grads;
}

std::vector<Graph> instance_subgraphs(const Graph& g) {
    std::vector<int> order;
    for (int id : g.inst)
        if (id >= 0 && std::find(order.begin(), order.end(), id) == order.end())
            order.push_back(id);

    std::vector<Graph> out;
    for (int id : order) {
        std::vector<std::size_t> nodes;
        for (std::size_t i = 0; i < g.n(); ++i)
            if (g.inst[i] == id) nodes.push_back(i);
        Graph sub;
        sub.a = Tensor({nodes.size(), nodes.size()});
        sub.x = Tensor({nodes.size(), g.x.extent(1)});
        sub.cat.resize(nodes.size());
        sub.inst.resize(nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            for (std::size_t j = 0; j < nodes.size(); ++j)
                sub.a.at(i, j) = g.a.at(nodes[i], nodes[j]);
            for (std::size_t j = 0; j < g.x.extent(1); ++j)
                sub.x.at(i, j) = g.x.at(nodes[i], j);
            sub.cat[i] = g.cat[nodes[i]];
            sub.inst[i] = g.inst[nodes[i]];
        }
        out.push_back(std::move(sub));
    }
    return out;
}

TrainResult train_clpg(const std::vector<Graph>& dataset, const ClpgHyper& hyper) {
    if (dataset.empty()) throw std::invalid_argument("train_clpg: empty dataset");
    const std::size_t feature_width = dataset.front().x.extent(1);
    int max_cat = 0;
    std::vector<Graph> pool;
    for (const Graph& g : dataset) {
        if (g.x.extent(1) != feature_width)
            throw std::invalid_argument("train_clpg: graphs disagree on feature width");
        for (int c : g.cat) max_cat = std::max(max_cat, c);
        for (Graph& sub : instance_subgraphs(g)) pool.push_back(std::move(sub));
    }
    if (pool.empty()) throw std::invalid_argument("train_clpg: dataset has no instances");
    const std::size_t n_categories = static_cast<std::size_t>(max_cat) + 1;

    Rng rng(hyper.seed);
    TrainResult result;
    result.params = ClpgParams::init(feature_width, n_categories, hyper.hidden, hyper.latent,
                                     hyper.tau, rng);
    ClpgParams& p = result.params;

    // seeded instance order, reshuffled per epoch
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = pool.size(); // trigger shuffle on first use
    Rng shuffle_rng = rng.fork(0x5275FFULL);

    auto next_instance = [&]() -> const Graph& {
        if (cursor >= order.size()) {
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);
            cursor = 0;
        }
        return pool[order[cursor++]];
    };

    const std::size_t batch = std::max<std::size_t>(1, hyper.batch);
    Tensor* mats[6] = {&p.w1, &p.w2, &p.w3, &p.w4, &p.w_mu, &p.w_s};

    for (std::size_t step = 0; step < hyper.steps; ++step) {
        ClpgGrads acc;
        double loss = 0.0, kl = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const Graph& g = next_instance();
            Rng noise_rng = rng.fork((step << 8) + b + 1);
            Tensor eps = Tensor::randn({g.n(), hyper.latent}, noise_rng);
            ClpgGrads grad = matched_loss_gradients(g, p, eps);
            loss += grad.loss;
            kl += grad.kl;
            if (b == 0) {
                acc = std::move(grad);
            } else {
                Tensor* dst[6] = {&acc.w1, &acc.w2, &acc.w3, &acc.w4, &acc.w_mu, &acc.w_s};
                const Tensor* src[6] = {&grad.w1, &grad.w2, &grad.w3,
                                        &grad.w4, &grad.w_mu, &grad.w_s};
                for (int m = 0; m < 6; ++m) *dst[m] = add(*dst[m], *src[m]);
            }
        }
        const double inv_b = 1.0 / static_cast<double>(batch);
        loss *= inv_b;
        kl *= inv_b;
        if (!std::isfinite(loss))
            throw std::runtime_error("train_clpg diverged at step " + std::to_string(step));

        Tensor* gs[6] = {&acc.w1, &acc.w2, &acc.w3, &acc.w4, &acc.w_mu, &acc.w_s};
        for (int m = 0; m < 6; ++m)
            for (std::size_t i = 0; i < mats[m]->size(); ++i)
                (*mats[m])[i] -= hyper.learning_rate * inv_b * (*gs[m])[i];

        result.curve.push_back({step, loss, kl});
    }
    return result;
}

std::vector<std::pair<std::size_t, std::size_t>> predict_links(const ClpgParams& p,
                                                               const Graph& g, double threshold) {
    const Posterior post = encode(g, p);
    const Tensor scores = rejuvenate(post.mu, g.cat);
    std::vector<std::pair<std::size_t, std::size_t>> links;
    for (std::size_t i = 0; i < g.n(); ++i)
        for (std::size_t j = i + 1; j < g.n(); ++j)
            if (g.cat[i] == g.cat[j] && scores.at(i, j) >= threshold) links.emplace_back(i, j);
    return links;
}

void save_params(const ClpgParams& p, const std::string& path) {
    save_archive(path, {{"W_1", p.w1},
                        {"W_2", p.w2},
                        {"W_3", p.w3},
                        {"W_4", p.w4},
                        {"W_mu", p.w_mu},
                        {"W_s", p.w_s}});
    nlohmann::json hyper;
    hyper["feature_width"] = p.feature_width;
    hyper["n_categories"] = p.n_categories;
    hyper["hidden"] = p.hidden();
    hyper["latent"] = p.latent();
    hyper["tau"] = p.tau;
    atomic_write_file(path + ".hyper.json", hyper.dump(2) + "\n");
}

ClpgParams load_params(const std::string& path) {
    auto entries = load_archive(path);
    std::ifstream in(path + ".hyper.json");
    if (!in) throw std::runtime_error("cannot open " + path + ".hyper.json");
    nlohmann::json hyper = nlohmann::json::parse(in);

    ClpgParams p;
    p.w1 = entries.at("W_1");
    p.w2 = entries.at("W_2");
    p.w3 = entries.at("W_3");
    p.w4 = entries.at("W_4");
    p.w_mu = entries.at("W_mu");
    p.w_s = entries.at("W_s");
    p.feature_width = hyper.at("feature_width").get<std::size_t>();
    p.n_categories = hyper.at("n_categories").get<std::size_t>();
    p.tau = hyper.at("tau").get<double>();
    return p;
}

} // namespace klp
