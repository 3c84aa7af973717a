#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "klp/tensor.hpp"

namespace klp {

/// Keypoint graph: symmetric 0/1 adjacency with unit diagonal, dense node
/// features, and per-node category labels. Instance ids are ground-truth
/// metadata used when carving per-instance subgraphs for training.
struct Graph {
    Tensor a;              // n x n
    Tensor x;              // n x d
    std::vector<int> cat;  // n
    std::vector<int> inst; // n, -1 when unknown

    std::size_t n() const { return cat.size(); }
    void validate() const;
};

struct ClpgParams {
    Tensor w1, w2, w3, w4; // d -> h -> h -> h -> h
    Tensor w_mu, w_s;      // h -> f
    std::size_t feature_width = 0; // d before the one-hot code
    std::size_t n_categories = 0;
    double tau = 1.0;

    std::size_t input_width() const { return feature_width + n_categories; }
    std::size_t hidden() const { return w1.extent(1); }
    std::size_t latent() const { return w_mu.extent(1); }

    static ClpgParams init(std::size_t feature_width, std::size_t n_categories,
                           std::size_t hidden, std::size_t latent, double tau, Rng& rng);
};

struct Posterior {
    Tensor mu;     // n x f
    Tensor logvar; // n x f, clamped to [-30, 30]
};

struct Embedding {
    Tensor z; // n x f
};

/// Symmetric normalization D^{-1/2} A D^{-1/2}; self-loops keep every
/// degree positive.
Tensor normalize_adjacency(const Tensor& a);

/// Four tanh(A~ X W_i) layers over [features | one-hot category], then
/// linear mu / logvar heads with one more A~ propagation each.
Posterior encode(const Graph& g, const ClpgParams& p);

/// Reparameterized draw Z = mu + exp(logvar/2) * eps; deterministic per seed.
Embedding sample(const Posterior& post, std::uint64_t seed);

/// Per-node likelihood weights tau * max(f_x, 0) from row-mean responses
/// normalized to zero mean / unit max-abs; uniform 1s when degenerate.
std::vector<double> node_weights(const Tensor& x, double tau);

/// Decoded adjacency scores: logistic(z_i . z_j) where categories match,
/// 0 elsewhere. Diagonal is reported but never used for loss or links.
Tensor rejuvenate(const Tensor& z, std::span<const int> cat);

double kl_term(const Posterior& post);

struct LinkLossResult {
    double value = 0.0;
    double recon = 0.0; // matched branch only
    double kl = 0.0;    // matched branch only
    bool matched = false;
};

/// Piecewise loss: squared label difference when the predicted category
/// disagrees, otherwise weighted reconstruction BCE over same-category
/// off-diagonal pairs (positive pairs reweighted by #non-edges/#edges)
/// plus the KL term.
LinkLossResult link_loss(const Graph& g, const Posterior& post, const Embedding& z, int c_pred,
                         int c_true, std::span<const double> f_weights);

double total_loss(double kd, double link, double alpha = 0.3, double beta = 0.7);

struct ClpgHyper {
    std::size_t hidden = 16;
    std::size_t latent = 8;
    double tau = 1.0;
    double learning_rate = 1e-2;
    std::size_t steps = 2000;
    std::size_t batch = 2;
    std::uint64_t seed = 1;
};

struct TrainStepLog {
    std::size_t step = 0;
    double loss = 0.0;
    double kl = 0.0;
};

struct TrainResult {
    ClpgParams params;
    std::vector<TrainStepLog> curve;
};

/// Plain gradient descent on the mean matched-branch link loss over
/// mini-batches of per-instance subgraphs, cycling a seeded permutation of
/// the instance pool. Bit-reproducible for a fixed seed; throws on
/// divergence with the offending step index.
TrainResult train_clpg(const std::vector<Graph>& dataset, const ClpgHyper& hyper);

/// Edges with rejuvenated score >= threshold (i < j, same category), using
/// the posterior mean without sampling.
std::vector<std::pair<std::size_t, std::size_t>> predict_links(const ClpgParams& p,
                                                               const Graph& g,
                                                               double threshold = 0.5);

std::vector<Graph> instance_subgraphs(const Graph& g);

// Parameter gradients of the matched-branch loss for one graph, with the
// sampling noise held fixed; shared by the trainer and the gradient suite.
struct ClpgGrads {
    Tensor w1, w2, w3, w4, w_mu, w_s;
    double loss = 0.0;
    double kl = 0.0;
};
ClpgGrads matched_loss_gradients(const Graph& g, const ClpgParams& p, const Tensor& eps_noise);

void save_params(const ClpgParams& p, const std::string& path);
ClpgParams load_params(const std::string& path);

} // namespace klp
