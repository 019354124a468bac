// mmsn/modality.hpp — per-modality encoder: patient graph -> hypergraph ->
// region-level graph -> region embeddings.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

struct ModalityGraph {
    std::string modality;                    // "mri" | "histo"
    Tensor features{1, 1};                   // n x d_m
    std::vector<std::string> regions;        // label per node
    std::vector<std::pair<int, int>> edges;  // undirected

    int n_nodes() const { return features.rows(); }
    int feature_dim() const { return features.cols(); }

    void validate() const {
        if (static_cast<int>(regions.size()) != n_nodes())
            throw ValidationError("regions: need one label per node");
        for (const std::string& r : regions)
            if (r.empty()) throw ValidationError("regions: empty label");
        for (const auto& [u, v] : edges)
            if (u < 0 || v < 0 || u >= n_nodes() || v >= n_nodes())
                throw ValidationError("edge.endpoint: out of range");
    }
};

// One hyperedge per distinct region label, sorted lexicographically.
struct Hypergraph {
    int n_nodes = 0;
    std::vector<std::string> labels;        // per hyperedge
    std::vector<std::vector<int>> members;  // per hyperedge, ascending node ids

    int n_hyperedges() const { return static_cast<int>(labels.size()); }

    Tensor incidence() const {
        Tensor h(n_nodes, n_hyperedges());
        for (int j = 0; j < n_hyperedges(); ++j)
            for (int v : members[j]) h.at(v, j) = 1.0;
        return h;
    }
};

inline Hypergraph build_hypergraph(const ModalityGraph& g) {
    if (g.n_nodes() == 0) throw ContractError("build_hypergraph: empty graph");
    std::map<std::string, std::vector<int>> groups;  // sorted by label
    for (int v = 0; v < g.n_nodes(); ++v) groups[g.regions[v]].push_back(v);
    Hypergraph h;
    h.n_nodes = g.n_nodes();
    for (auto& [label, nodes] : groups) {
        h.labels.push_back(label);
        h.members.push_back(std::move(nodes));
    }
    return h;
}

// Row j = mean feature of hyperedge j's members.
inline Tensor aggregate_hyperedges(const Hypergraph& h, const Tensor& node_features) {
    if (node_features.rows() != h.n_nodes)
        throw ContractError("aggregate_hyperedges: feature rows must match node count");
    Tensor out(h.n_hyperedges(), node_features.cols());
    for (int j = 0; j < h.n_hyperedges(); ++j) {
        const auto& mem = h.members[j];
        for (int v : mem)
            for (int c = 0; c < node_features.cols(); ++c) out.at(j, c) += node_features.at(v, c);
        for (int c = 0; c < node_features.cols(); ++c) out.at(j, c) /= mem.size();
    }
    return out;
}

// One node per hyperedge; regions connected iff some original edge crosses.
struct RegionGraph {
    std::vector<std::string> labels;
    Tensor embeddings{1, 1};                 // K x d_m, from aggregate_hyperedges
    std::vector<std::pair<int, int>> edges;  // u < v, unique, no self-loops

    int n_regions() const { return static_cast<int>(labels.size()); }
};

inline RegionGraph build_region_graph(const Hypergraph& h, const ModalityGraph& g) {
    std::map<std::string, int> region_of_label;
    for (int j = 0; j < h.n_hyperedges(); ++j) region_of_label[h.labels[j]] = j;
    RegionGraph rg;
    rg.labels = h.labels;
    rg.embeddings = aggregate_hyperedges(h, g.features);
    std::set<std::pair<int, int>> cross;
    for (const auto& [u, v] : g.edges) {
        int ru = region_of_label.at(g.regions[u]);
        int rv = region_of_label.at(g.regions[v]);
        if (ru != rv) cross.insert({std::min(ru, rv), std::max(ru, rv)});
    }
    rg.edges.assign(cross.begin(), cross.end());
    return rg;
}

// S = D~^{-1/2} (A + I) D~^{-1/2} for the region graph.
inline Tensor region_propagation_matrix(const RegionGraph& rg) {
    int k = rg.n_regions();
    Tensor a = Tensor::eye(k);
    for (const auto& [u, v] : rg.edges) {
        a.at(u, v) = 1.0;
        a.at(v, u) = 1.0;
    }
    std::vector<double> dinv(k);
    for (int i = 0; i < k; ++i) {
        double deg = 0.0;
        for (int j = 0; j < k; ++j) deg += a.at(i, j);
        dinv[i] = 1.0 / std::sqrt(deg);
    }
    Tensor s(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) s.at(i, j) = dinv[i] * a.at(i, j) * dinv[j];
    return s;
}

// sigma(S X W), plain path (W fixed).
inline Tensor region_gnn_layer(const RegionGraph& rg, const Tensor& w, Activation act) {
    if (w.rows() != rg.embeddings.cols())
        throw ContractError("region_gnn_layer: weight rows must match feature dim");
    Tensor s = region_propagation_matrix(rg);
    Tensor y = matmul(matmul(s, rg.embeddings), w);
    for (int i = 0; i < y.size(); ++i) {
        switch (act) {
            case Activation::identity: break;
            case Activation::relu: y[i] = std::max(y[i], 0.0); break;
            case Activation::sigmoid:
                y[i] = y[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-y[i]))
                                   : std::exp(y[i]) / (1.0 + std::exp(y[i]));
                break;
        }
    }
    return y;
}

// Everything about one modality of one patient that does not depend on
// parameters: computed once, reused every epoch.
struct EncodedModality {
    RegionGraph region_graph;
    Tensor propagated{1, 1};  // S * X, K x d_m; encoder output is relu(S X W)
};

inline EncodedModality encode_modality(const ModalityGraph& g) {
    g.validate();
    Hypergraph h = build_hypergraph(g);
    EncodedModality enc;
    enc.region_graph = build_region_graph(h, g);
    Tensor s = region_propagation_matrix(enc.region_graph);
    enc.propagated = matmul(s, enc.region_graph.embeddings);
    return enc;
}

// Tape-side encoder layer: relu(S X W) with S X precomputed per patient.
inline Var encoder_layer(Tape& t, const EncodedModality& enc, const Var& w) {
    if (w.rows() != enc.propagated.cols())
        throw ContractError("encoder_layer: weight rows must match feature dim");
    return relu(matmul(t.constant(enc.propagated), w));
}

}  // namespace mmsn
