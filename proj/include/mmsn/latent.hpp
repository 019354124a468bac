// mmsn/latent.hpp — shared latent graph: initialization, soft assignment,
// projection, fusion, and patient readout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/rng.hpp"
#include "mmsn/sheaf.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

// Instantiated once and shared across all patients; topology frozen at init.
struct LatentGraph {
    StalkGraph topology;     // N_l nodes, stalk dim d
    Tensor features{1, 1};   // N_l x d initial learnable node features
    Tensor edge_init{1, 1};  // |E_l| x d, mean of endpoint features at init

    int n_nodes() const { return topology.n; }
    int n_edges() const { return topology.n_edges(); }
};

namespace detail {
inline double cosine_sim(const Tensor& x, int i, int j) {
    double dotp = 0.0, ni = 0.0, nj = 0.0;
    for (int c = 0; c < x.cols(); ++c) {
        dotp += x.at(i, c) * x.at(j, c);
        ni += x.at(i, c) * x.at(i, c);
        nj += x.at(j, c) * x.at(j, c);
    }
    double denom = std::sqrt(ni) * std::sqrt(nj);
    return denom > 0.0 ? dotp / denom : 0.0;
}
}  // namespace detail

// Node features ~ Normal(0, 1/d); edge (i,j) iff cosine similarity >= tau;
// any degree-0 node is connected to its most similar neighbor.
inline LatentGraph init_latent_graph(int n_latent, int d, double tau, Rng& rng) {
    if (n_latent < 2) throw ConfigError("init_latent_graph: need at least 2 latent nodes");
    if (d < 1) throw ConfigError("init_latent_graph: d must be >= 1");
    Tensor features = Tensor::normal(n_latent, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);

    std::set<std::pair<int, int>> edge_set;
    for (int i = 0; i < n_latent; ++i)
        for (int j = i + 1; j < n_latent; ++j)
            if (detail::cosine_sim(features, i, j) >= tau) edge_set.insert({i, j});

    std::vector<int> degree(n_latent, 0);
    for (const auto& [u, v] : edge_set) {
        ++degree[u];
        ++degree[v];
    }
    for (int i = 0; i < n_latent; ++i) {
        if (degree[i] > 0) continue;
        int best = -1;
        double best_sim = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n_latent; ++j) {
            if (j == i) continue;
            double s = detail::cosine_sim(features, i, j);
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        int lo = std::min(i, best), hi = std::max(i, best);
        if (edge_set.insert({lo, hi}).second) {
            ++degree[i];
            ++degree[best];
        }
    }

    LatentGraph g;
    g.topology = StalkGraph(n_latent, d,
                            std::vector<std::pair<int, int>>(edge_set.begin(), edge_set.end()));
    g.features = features;
    g.edge_init = Tensor(std::max(g.n_edges(), 1), d);
    for (int e = 0; e < g.n_edges(); ++e) {
        auto [u, v] = g.topology.edges[e];
        for (int c = 0; c < d; ++c) g.edge_init.at(e, c) = 0.5 * (features.at(u, c) + features.at(v, c));
    }
    return g;
}

// Order-sensitive hash of (n, d, edge list); constant across patients/epochs.
inline std::uint64_t topology_hash(const StalkGraph& g) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t x) {
        h ^= x;
        h *= 1099511628211ull;
    };
    mix(static_cast<std::uint64_t>(g.n));
    mix(static_cast<std::uint64_t>(g.d));
    for (const auto& [u, v] : g.edges) {
        mix(static_cast<std::uint64_t>(u) + 0x9e3779b97f4a7c15ull);
        mix(static_cast<std::uint64_t>(v) + 0x7f4a7c159e3779b9ull);
    }
    return h;
}

// Two-layer projection MLP (d -> d relu -> N_l) followed by row softmax.
struct AssignParams {
    Var w1, b1, w2, b2;
};

inline Var soft_assign(const Var& x, const AssignParams& p) {
    Var hidden = relu(add_rowvec(matmul(x, p.w1), p.b1));
    return softmax_rows(add_rowvec(matmul(hidden, p.w2), p.b2));
}

// X_hat = P^T x.
inline Var project_to_latent(const Var& p, const Var& x) {
    if (p.rows() != x.rows()) throw ContractError("project_to_latent: row counts differ");
    return matmul(transpose(p), x);
}

// Elementwise sum of the base latent features and both modality projections.
inline Var fuse_modalities(const Var& base, const Var& x1, const Var& x2) {
    return add(add(base, x1), x2);
}

// h_patient = CONCAT(sum_v h_v, sum_e e), a 1 x 2d row.
inline Var readout(const Var& node_features, const Var& edge_features) {
    return concat_cols(sum_rows(node_features), sum_rows(edge_features));
}

}  // namespace mmsn
