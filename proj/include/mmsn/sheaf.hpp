// mmsn/sheaf.hpp — cellular sheaves on graphs: Laplacian assembly,
// normalization, transport, Dirichlet energy, and the sheaf GCN layer.
//
// Two parallel implementations live here. The plain BlockMatrix path works on
// fixed restriction maps and backs the spectrum diagnostics. The tape path
// (LatentSheafOps) builds the same operators from a stacked restriction-map
// parameter so gradients reach the maps.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/linalg.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

// Undirected graph with equal stalk dimension d on every node and edge.
struct StalkGraph {
    int n = 0;
    int d = 0;
    std::vector<std::pair<int, int>> edges;  // u < v, unique, no self-loops

    StalkGraph() = default;
    StalkGraph(int n_, int d_, std::vector<std::pair<int, int>> edges_)
        : n(n_), d(d_), edges(std::move(edges_)) {
        if (n < 1) throw ContractError("StalkGraph: need at least one node");
        if (d < 1) throw ContractError("StalkGraph: stalk dimension must be >= 1");
        std::vector<std::pair<int, int>> seen;
        for (auto& [u, v] : edges) {
            if (u < 0 || v < 0 || u >= n || v >= n)
                throw ContractError("StalkGraph: edge endpoint out of range");
            if (u == v) throw ContractError("StalkGraph: self-loop");
            if (u > v) std::swap(u, v);
            seen.push_back({u, v});
        }
        std::sort(seen.begin(), seen.end());
        if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
            throw ContractError("StalkGraph: duplicate edge");
    }

    int n_edges() const { return static_cast<int>(edges.size()); }
};

// Restriction maps stored per incidence: maps[2e] is F_{u <| e}, maps[2e+1]
// is F_{v <| e} for edge e=(u,v).
struct CellularSheaf {
    StalkGraph graph;
    std::vector<Tensor> maps;

    CellularSheaf() = default;
    CellularSheaf(StalkGraph g, std::vector<Tensor> m) : graph(std::move(g)), maps(std::move(m)) {
        if (static_cast<int>(maps.size()) != 2 * graph.n_edges())
            throw ContractError("CellularSheaf: need exactly two maps per edge");
        for (const Tensor& f : maps)
            if (f.rows() != graph.d || f.cols() != graph.d)
                throw ContractError("CellularSheaf: restriction maps must be d x d");
    }

    const Tensor& map_u(int e) const { return maps[2 * e]; }
    const Tensor& map_v(int e) const { return maps[2 * e + 1]; }
};

inline CellularSheaf identity_sheaf(StalkGraph g) {
    std::vector<Tensor> maps(2 * g.n_edges(), Tensor::eye(g.d));
    return CellularSheaf(std::move(g), std::move(maps));
}

// Builds a sheaf from the stacked parameter layout used by the latent graph:
// rho has 2E blocks of d rows; block 2e is the u side of edge e.
inline CellularSheaf sheaf_from_stack(StalkGraph g, const Tensor& rho) {
    int d = g.d;
    if (rho.cols() != d || rho.rows() != 2 * g.n_edges() * d)
        throw ContractError("sheaf_from_stack: expected (2E*d) x d stack");
    std::vector<Tensor> maps;
    maps.reserve(2 * g.n_edges());
    for (int i = 0; i < 2 * g.n_edges(); ++i) {
        Tensor f(d, d);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) f.at(r, c) = rho.at(i * d + r, c);
        maps.push_back(std::move(f));
    }
    return CellularSheaf(std::move(g), std::move(maps));
}

// Symmetric block-sparse n*d x n*d matrix keyed by node pair.
class BlockMatrix {
public:
    BlockMatrix(int n, int d) : n_(n), d_(d) {
        if (n < 1 || d < 1) throw ContractError("BlockMatrix: bad dimensions");
    }

    int n() const { return n_; }
    int d() const { return d_; }

    bool has_block(int u, int v) const { return blocks_.count({u, v}) > 0; }

    Tensor block(int u, int v) const {
        check_index(u, v);
        auto it = blocks_.find({u, v});
        return it == blocks_.end() ? Tensor::zeros(d_, d_) : it->second;
    }

    void add_to_block(int u, int v, const Tensor& t) {
        check_index(u, v);
        if (t.rows() != d_ || t.cols() != d_) throw ContractError("BlockMatrix: block must be d x d");
        auto it = blocks_.find({u, v});
        if (it == blocks_.end())
            blocks_.insert({{u, v}, t});
        else
            it->second = add(it->second, t);
    }

    void set_block(int u, int v, Tensor t) {
        check_index(u, v);
        if (t.rows() != d_ || t.cols() != d_) throw ContractError("BlockMatrix: block must be d x d");
        blocks_[{u, v}] = std::move(t);
    }

    const std::map<std::pair<int, int>, Tensor>& blocks() const { return blocks_; }

    // Largest asymmetry max |B(u,v) - B(v,u)^T| over stored blocks.
    double max_asymmetry() const {
        double m = 0.0;
        for (const auto& [key, b] : blocks_) {
            Tensor other = block(key.second, key.first);
            m = std::max(m, max_abs_diff(b, transpose(other)));
        }
        return m;
    }

    Tensor to_dense() const {
        Tensor a(n_ * d_, n_ * d_);
        for (const auto& [key, b] : blocks_)
            for (int i = 0; i < d_; ++i)
                for (int j = 0; j < d_; ++j) a.at(key.first * d_ + i, key.second * d_ + j) = b.at(i, j);
        return a;
    }

    // Applies the matrix to stacked stalk vectors: X is n x d with row v the
    // stalk vector of node v; returns n x d.
    Tensor apply(const Tensor& x) const {
        if (x.rows() != n_ || x.cols() != d_) throw ContractError("BlockMatrix::apply: X must be n x d");
        Tensor y(n_, d_);
        for (const auto& [key, b] : blocks_) {
            auto [u, v] = key;
            // y_u += B x_v on column vectors; rows: y_u += x_v B^T
            for (int i = 0; i < d_; ++i) {
                double s = 0.0;
                for (int j = 0; j < d_; ++j) s += b.at(i, j) * x.at(v, j);
                y.at(u, i) += s;
            }
        }
        return y;
    }

    // vec(X)^T M vec(X) with the same stacked-stalk layout as apply().
    double quadratic_form(const Tensor& x) const {
        Tensor y = apply(x);
        return dot(x, y);
    }

private:
    void check_index(int u, int v) const {
        if (u < 0 || v < 0 || u >= n_ || v >= n_) throw ContractError("BlockMatrix: index out of range");
    }

    int n_, d_;
    std::map<std::pair<int, int>, Tensor> blocks_;
};

// L_vv = sum_e F_{v<|e}^T F_{v<|e};  L_vu = -F_{v<|e}^T F_{u<|e}.
inline BlockMatrix assemble_sheaf_laplacian(const CellularSheaf& sheaf) {
    const StalkGraph& g = sheaf.graph;
    BlockMatrix l(g.n, g.d);
    for (int v = 0; v < g.n; ++v) l.set_block(v, v, Tensor::zeros(g.d, g.d));
    for (int e = 0; e < g.n_edges(); ++e) {
        auto [u, v] = g.edges[e];
        const Tensor& fu = sheaf.map_u(e);
        const Tensor& fv = sheaf.map_v(e);
        l.add_to_block(u, u, matmul_tn(fu, fu));
        l.add_to_block(v, v, matmul_tn(fv, fv));
        l.add_to_block(u, v, scale(matmul_tn(fu, fv), -1.0));
        l.add_to_block(v, u, scale(matmul_tn(fv, fu), -1.0));
    }
    return l;
}

// Delta = D^{-1/2} L D^{-1/2}, D the block diagonal of L; eigenvalues of each
// diagonal block are clamped to >= eps before the inverse square root, which
// also covers isolated nodes (zero diagonal block).
inline BlockMatrix normalize_laplacian(const BlockMatrix& l, double eps) {
    if (eps <= 0.0) throw ContractError("normalize_laplacian: eps must be positive");
    int n = l.n(), d = l.d();
    std::vector<Tensor> dinv;
    dinv.reserve(n);
    for (int v = 0; v < n; ++v) dinv.push_back(sym_invsqrt(l.block(v, v), eps));
    BlockMatrix delta(n, d);
    for (const auto& [key, b] : l.blocks()) {
        auto [u, v] = key;
        delta.set_block(u, v, matmul(dinv[u], matmul(b, dinv[v])));
    }
    return delta;
}

// F_{to<|e}^T F_{from<|e} x, i.e. node -> edge stalk -> node. x is a single
// stalk vector given as a 1 x d row (or d x 1 column); same shape returned.
inline Tensor transport(const Tensor& x, int e, int from, int to, const CellularSheaf& sheaf) {
    const StalkGraph& g = sheaf.graph;
    if (e < 0 || e >= g.n_edges()) throw ContractError("transport: edge index out of range");
    auto [u, v] = g.edges[e];
    if ((from != u && from != v) || (to != u && to != v))
        throw ContractError("transport: node not incident to edge");
    const Tensor& f_from = from == u ? sheaf.map_u(e) : sheaf.map_v(e);
    const Tensor& f_to = to == u ? sheaf.map_u(e) : sheaf.map_v(e);
    bool row = x.rows() == 1 && x.cols() == g.d;
    if (!row && !(x.cols() == 1 && x.rows() == g.d))
        throw ContractError("transport: x must be a d-vector");
    Tensor col = row ? transpose(x) : x;
    Tensor y = matmul_tn(f_to, matmul(f_from, col));
    return row ? transpose(y) : y;
}

// sum_e || F_u x_u - F_v x_v ||^2 over edge stalks; X is n x d, row per node.
inline double dirichlet_energy(const CellularSheaf& sheaf, const Tensor& x) {
    const StalkGraph& g = sheaf.graph;
    if (x.rows() != g.n || x.cols() != g.d) throw ContractError("dirichlet_energy: X must be n x d");
    double total = 0.0;
    for (int e = 0; e < g.n_edges(); ++e) {
        auto [u, v] = g.edges[e];
        const Tensor& fu = sheaf.map_u(e);
        const Tensor& fv = sheaf.map_v(e);
        for (int i = 0; i < g.d; ++i) {
            double s = 0.0;
            for (int j = 0; j < g.d; ++j) s += fu.at(i, j) * x.at(u, j) - fv.at(i, j) * x.at(v, j);
            total += s * s;
        }
    }
    return total;
}

// sigma((I - Delta) X W) with Delta precomputed; plain (non-tape) path.
inline Tensor sheaf_gcn_layer(const Tensor& x, const BlockMatrix& delta, const Tensor& w,
                              Activation act) {
    if (x.rows() != delta.n() || x.cols() != delta.d())
        throw ContractError("sheaf_gcn_layer: X must be n x d");
    if (w.rows() != x.cols()) throw ContractError("sheaf_gcn_layer: weight rows must match d");
    Tensor propagated = sub(x, delta.apply(x));
    Tensor y = matmul(propagated, w);
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

// Ascending eigenvalues of the dense materialization.
inline std::vector<double> spectrum(const BlockMatrix& m) {
    return sym_eigenvalues(m.to_dense());
}

// ---- tape path: operators built from a stacked restriction-map variable ----
//
// rho is (2E*d) x d; block 2e maps the u endpoint of edge e into the edge
// stalk, block 2e+1 the v endpoint. The normalized maps G_i = F_i D_i^{-1/2}
// give Delta blocks G_u^T G_u (diagonal sums) and -G_u^T G_v (off-diagonal).

struct LatentSheafOps {
    int n = 0, d = 0, n_edges = 0;
    std::vector<int> endpoints;       // incidence i -> node id
    std::vector<int> interleave;      // incidence i -> row in [plus; minus] stack
    Var rho;                          // raw maps, (2E*d) x d
    Var g;                            // normalized maps, (2E*d) x d
    Var dinv;                         // D^{-1/2} per node, (n*d) x d
};

inline LatentSheafOps make_latent_sheaf_ops(Tape& t, const Var& rho, const StalkGraph& graph,
                                            double eps) {
    int d = graph.d, n = graph.n, ne = graph.n_edges();
    if (ne == 0) throw ContractError("make_latent_sheaf_ops: graph has no edges");
    const Tensor& rv = t.val(rho);
    if (rv.cols() != d || rv.rows() != 2 * ne * d)
        throw ContractError("make_latent_sheaf_ops: rho must be (2E*d) x d");

    LatentSheafOps ops;
    ops.n = n;
    ops.d = d;
    ops.n_edges = ne;
    for (int e = 0; e < ne; ++e) {
        ops.endpoints.push_back(graph.edges[e].first);
        ops.endpoints.push_back(graph.edges[e].second);
    }
    for (int e = 0; e < ne; ++e) {
        ops.interleave.push_back(e);       // +(p_u - p_v) row
        ops.interleave.push_back(ne + e);  // -(p_u - p_v) row
    }
    ops.rho = rho;

    // Diagonal blocks D_v = sum over incidences of F^T F, scattered blockwise.
    Var ftf = block_matmul(rho, rho, d, d, true, false);  // (2E*d) x d
    std::vector<int> block_rows(2 * ne * d);
    for (int i = 0; i < 2 * ne; ++i)
        for (int r = 0; r < d; ++r) block_rows[i * d + r] = ops.endpoints[i] * d + r;
    Var diag = scatter_add_rows(ftf, block_rows, n * d);
    ops.dinv = sym_invsqrt_blocks(diag, d, eps);

    // G_i = F_i * Dinv_{node(i)}
    std::vector<int> dinv_rows(2 * ne * d);
    for (int i = 0; i < 2 * ne; ++i)
        for (int r = 0; r < d; ++r) dinv_rows[i * d + r] = ops.endpoints[i] * d + r;
    Var dinv_per_inc = gather_rows(ops.dinv, dinv_rows);
    ops.g = block_matmul(rho, dinv_per_inc, d, d, false, false);
    return ops;
}

namespace detail {
// Row i of the result is x_{node(i)} * op(M_i)^T for the stacked maps M.
inline Var map_rows(const LatentSheafOps& ops, const Var& maps, const Var& x) {
    Var xe = gather_rows(x, ops.endpoints);
    return block_matmul(xe, maps, 1, ops.d, false, true);
}
inline std::vector<int> even_rows(int ne) {
    std::vector<int> r(ne);
    for (int e = 0; e < ne; ++e) r[e] = 2 * e;
    return r;
}
inline std::vector<int> odd_rows(int ne) {
    std::vector<int> r(ne);
    for (int e = 0; e < ne; ++e) r[e] = 2 * e + 1;
    return r;
}
}  // namespace detail

// Delta X for stacked stalk rows X (n x d), differentiable through rho and X.
inline Var apply_delta(const LatentSheafOps& ops, const Var& x) {
    Var p = detail::map_rows(ops, ops.g, x);  // G_i x_{node(i)}, (2E) x d
    Var pu = gather_rows(p, detail::even_rows(ops.n_edges));
    Var pv = gather_rows(p, detail::odd_rows(ops.n_edges));
    Var diff = sub(pu, pv);
    Var signed_stack = concat_rows({diff, scale(diff, -1.0)});
    Var c = gather_rows(signed_stack, ops.interleave);  // per incidence, sign toward its node
    // contribution to node(i): c_i G_i  (rows; equals G_i^T c_i on columns)
    Var q = block_matmul(c, ops.g, 1, ops.d, false, false);
    return scatter_add_rows(q, ops.endpoints, ops.n);
}

// One sheaf GCN layer: act((X - Delta X) W).
inline Var sheaf_gcn(const LatentSheafOps& ops, const Var& x, const Var& w, Activation act) {
    Var propagated = sub(x, apply_delta(ops, x));
    return activate(matmul(propagated, w), act);
}

// Edge features e = (rho_u h_u + rho_v h_v) / 2, one row per edge.
inline Var edge_features(const LatentSheafOps& ops, const Var& x) {
    Var r = detail::map_rows(ops, ops.rho, x);
    Var ru = gather_rows(r, detail::even_rows(ops.n_edges));
    Var rv = gather_rows(r, detail::odd_rows(ops.n_edges));
    return scale(add(ru, rv), 0.5);
}

// e_v = sum over incident edges of rho_{e,v} h_v, one row per node.
inline Var own_edge_aggregate(const LatentSheafOps& ops, const Var& x) {
    Var r = detail::map_rows(ops, ops.rho, x);
    return scatter_add_rows(r, ops.endpoints, ops.n);
}

// Dirichlet energy sum_e ||rho_u h_u - rho_v h_v||^2 as a tape scalar.
inline Var dirichlet(const LatentSheafOps& ops, const Var& x) {
    Var r = detail::map_rows(ops, ops.rho, x);
    Var ru = gather_rows(r, detail::even_rows(ops.n_edges));
    Var rv = gather_rows(r, detail::odd_rows(ops.n_edges));
    return sum_sq_diff(ru, rv);
}

}  // namespace mmsn
