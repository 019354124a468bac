// mmsn/autodiff.hpp — tape-based reverse-mode differentiation over Tensor.
//
// A Tape owns a DAG of nodes in creation order, so reverse creation order is
// a valid reverse-topological order and backward() visits each node exactly
// once. Node values double as the saved activations for the backward
// closures. Every op validates shapes (ContractError) and results
// (NumericError on NaN/Inf).
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mmsn/errors.hpp"
#include "mmsn/linalg.hpp"
#include "mmsn/param_store.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool defined() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    int rows() const { return value().rows(); }
    int cols() const { return value().cols(); }
    double scalar() const;
};

class Tape {
public:
    Var constant(Tensor value) { return make(std::move(value), {}, false, nullptr, "constant"); }

    Var leaf(Tensor value) { return make(std::move(value), {}, true, nullptr, "leaf"); }

    // Leaf mirroring a trainable parameter; backward() accumulates its
    // gradient into the store's slot.
    Var param(ParamStore& store, const std::string& name) {
        Var v = leaf(store.value(name));
        bindings_.push_back({&store, name, v.id});
        return v;
    }

    const Tensor& val(int id) const { return nodes_[id].value; }
    const Tensor& val(const Var& v) const { return nodes_[v.id].value; }

    // Gradient of a node after backward(); zeros if the node was not reached.
    Tensor grad(const Var& v) const {
        const Node& n = nodes_[v.id];
        if (n.grad.empty()) return Tensor::zeros(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(const Var& loss) {
        if (loss.tape != this) throw ContractError("backward: loss from another tape");
        if (consumed_) throw ContractError("backward: tape already consumed; reset() first");
        const Node& ln = nodes_[loss.id];
        if (ln.value.rows() != 1 || ln.value.cols() != 1)
            throw ContractError("backward: loss must be scalar, got " + ln.value.shape_str());
        consumed_ = true;
        accum(loss.id, Tensor::full(1, 1, 1.0));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty() || !n.back) continue;
            n.back(*this, id);
        }
        for (const Binding& b : bindings_) {
            const Node& n = nodes_[b.node];
            if (n.grad.empty()) continue;
            Tensor& g = b.store->grad(b.name);
            for (int i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    }

    void reset() {
        nodes_.clear();
        bindings_.clear();
        consumed_ = false;
        min_relu_preact_ = std::numeric_limits<double>::infinity();
        min_clamp_margin_ = std::numeric_limits<double>::infinity();
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Smallest |pre-activation| seen by any relu this tape; finite-difference
    // checks reject runs that pass too close to the kink.
    double min_relu_preact() const { return min_relu_preact_; }
    // Smallest |eigenvalue - eps| seen by any clamped inverse sqrt.
    double min_clamp_margin() const { return min_clamp_margin_; }

    // ---- internals shared with the op implementations ----

    using BackwardFn = std::function<void(Tape&, int)>;

    Var make(Tensor value, std::vector<int> inputs, bool requires_grad, BackwardFn back,
             const char* op_name) {
        if (!value.is_finite())
            throw NumericError(std::string(op_name) + ": non-finite result");
        Node n;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.requires_grad = requires_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    bool needs(int id) const { return nodes_[id].requires_grad; }

    void accum(int id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.empty()) {
            n.grad = g;
        } else {
            for (int i = 0; i < n.grad.size(); ++i) n.grad[i] += g[i];
        }
    }

    // Zero-initialized gradient buffer for ops that scatter row-wise.
    Tensor& grad_buffer(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.rows(), n.value.cols());
        return n.grad;
    }

    const Tensor& out_grad(int id) const { return nodes_[id].grad; }

    void note_relu_preact(double m) { min_relu_preact_ = std::min(min_relu_preact_, m); }
    void note_clamp_margin(double m) { min_clamp_margin_ = std::min(min_clamp_margin_, m); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<int> inputs;
        BackwardFn back;
        bool requires_grad = false;
    };
    struct Binding {
        ParamStore* store;
        std::string name;
        int node;
    };

    std::vector<Node> nodes_;
    std::vector<Binding> bindings_;
    bool consumed_ = false;
    double min_relu_preact_ = std::numeric_limits<double>::infinity();
    double min_clamp_margin_ = std::numeric_limits<double>::infinity();
};

inline const Tensor& Var::value() const { return tape->val(id); }

inline double Var::scalar() const {
    const Tensor& v = value();
    if (v.rows() != 1 || v.cols() != 1)
        throw ContractError("Var::scalar: not a scalar, shape " + v.shape_str());
    return v.at(0, 0);
}

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
    if (!a.defined() || !b.defined() || a.tape != b.tape)
        throw ContractError(std::string(op) + ": vars from different tapes");
    return *a.tape;
}
}  // namespace detail

// ---- elementwise and linear primitives ----

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "add");
    check_same_shape(t.val(a), t.val(b), "add");
    int aid = a.id, bid = b.id;
    return t.make(mmsn::add(t.val(a), t.val(b)), {aid, bid},
                  t.needs(aid) || t.needs(bid),
                  [aid, bid](Tape& t, int self) {
                      t.accum(aid, t.out_grad(self));
                      t.accum(bid, t.out_grad(self));
                  },
                  "add");
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "sub");
    check_same_shape(t.val(a), t.val(b), "sub");
    int aid = a.id, bid = b.id;
    return t.make(mmsn::sub(t.val(a), t.val(b)), {aid, bid},
                  t.needs(aid) || t.needs(bid),
                  [aid, bid](Tape& t, int self) {
                      t.accum(aid, t.out_grad(self));
                      t.accum(bid, mmsn::scale(t.out_grad(self), -1.0));
                  },
                  "sub");
}

inline Var scale(const Var& a, double s) {
    Tape& t = *a.tape;
    int aid = a.id;
    return t.make(mmsn::scale(t.val(a), s), {aid}, t.needs(aid),
                  [aid, s](Tape& t, int self) { t.accum(aid, mmsn::scale(t.out_grad(self), s)); },
                  "scale");
}

inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "matmul");
    int aid = a.id, bid = b.id;
    return t.make(mmsn::matmul(t.val(a), t.val(b)), {aid, bid},
                  t.needs(aid) || t.needs(bid),
                  [aid, bid](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      if (t.needs(aid)) t.accum(aid, matmul_nt(g, t.val(bid)));
                      if (t.needs(bid)) t.accum(bid, matmul_tn(t.val(aid), g));
                  },
                  "matmul");
}

inline Var transpose(const Var& a) {
    Tape& t = *a.tape;
    int aid = a.id;
    return t.make(mmsn::transpose(t.val(a)), {aid}, t.needs(aid),
                  [aid](Tape& t, int self) { t.accum(aid, mmsn::transpose(t.out_grad(self))); },
                  "transpose");
}

inline Var relu(const Var& a) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    Tensor y = x;
    double min_abs = std::numeric_limits<double>::infinity();
    for (int i = 0; i < y.size(); ++i) {
        min_abs = std::min(min_abs, std::abs(y[i]));
        if (y[i] < 0.0) y[i] = 0.0;
    }
    if (x.size() > 0) t.note_relu_preact(min_abs);
    int aid = a.id;
    // subgradient at 0 is 0
    return t.make(std::move(y), {aid}, t.needs(aid),
                  [aid](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      const Tensor& x = t.val(aid);
                      Tensor d = g;
                      for (int i = 0; i < d.size(); ++i)
                          if (x[i] <= 0.0) d[i] = 0.0;
                      t.accum(aid, d);
                  },
                  "relu");
}

inline Var sigmoid(const Var& a) {
    Tape& t = *a.tape;
    Tensor y = t.val(a);
    for (int i = 0; i < y.size(); ++i) {
        double z = y[i];
        y[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    int aid = a.id;
    return t.make(std::move(y), {aid}, t.needs(aid),
                  [aid](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      const Tensor& y = t.val(self);
                      Tensor d = g;
                      for (int i = 0; i < d.size(); ++i) d[i] *= y[i] * (1.0 - y[i]);
                      t.accum(aid, d);
                  },
                  "sigmoid");
}

inline Var softmax_rows(const Var& a) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    Tensor y(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < x.cols(); ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < x.cols(); ++j) {
            double e = std::exp(x.at(i, j) - mx);
            y.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < x.cols(); ++j) y.at(i, j) /= sum;
    }
    int aid = a.id;
    return t.make(std::move(y), {aid}, t.needs(aid),
                  [aid](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      const Tensor& y = t.val(self);
                      Tensor d(g.rows(), g.cols());
                      for (int i = 0; i < g.rows(); ++i) {
                          double s = 0.0;
                          for (int j = 0; j < g.cols(); ++j) s += g.at(i, j) * y.at(i, j);
                          for (int j = 0; j < g.cols(); ++j)
                              d.at(i, j) = y.at(i, j) * (g.at(i, j) - s);
                      }
                      t.accum(aid, d);
                  },
                  "softmax_rows");
}

// ---- reductions ----

// n x m -> 1 x m, summing over the row index.
inline Var sum_rows(const Var& a) {
    Tape& t = *a.tape;
    int aid = a.id;
    return t.make(mmsn::sum_rows(t.val(a)), {aid}, t.needs(aid),
                  [aid](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      const Tensor& x = t.val(aid);
                      Tensor d(x.rows(), x.cols());
                      for (int i = 0; i < x.rows(); ++i)
                          for (int j = 0; j < x.cols(); ++j) d.at(i, j) = g.at(0, j);
                      t.accum(aid, d);
                  },
                  "sum_rows");
}

inline Var sum_all(const Var& a) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    double s = 0.0;
    for (int i = 0; i < x.size(); ++i) s += x[i];
    int aid = a.id;
    return t.make(Tensor::full(1, 1, s), {aid}, t.needs(aid),
                  [aid](Tape& t, int self) {
                      double g = t.out_grad(self).at(0, 0);
                      const Tensor& x = t.val(aid);
                      t.accum(aid, Tensor::full(x.rows(), x.cols(), g));
                  },
                  "sum_all");
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a.value().size()); }

// Sum of squared differences, reduced to a scalar.
inline Var sum_sq_diff(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "sum_sq_diff");
    check_same_shape(t.val(a), t.val(b), "sum_sq_diff");
    const Tensor& x = t.val(a);
    const Tensor& y = t.val(b);
    double s = 0.0;
    for (int i = 0; i < x.size(); ++i) {
        double d = x[i] - y[i];
        s += d * d;
    }
    int aid = a.id, bid = b.id;
    return t.make(Tensor::full(1, 1, s), {aid, bid}, t.needs(aid) || t.needs(bid),
                  [aid, bid](Tape& t, int self) {
                      double g = t.out_grad(self).at(0, 0);
                      const Tensor& x = t.val(aid);
                      const Tensor& y = t.val(bid);
                      Tensor d(x.rows(), x.cols());
                      for (int i = 0; i < d.size(); ++i) d[i] = 2.0 * g * (x[i] - y[i]);
                      if (t.needs(aid)) t.accum(aid, d);
                      if (t.needs(bid)) t.accum(bid, mmsn::scale(d, -1.0));
                  },
                  "sum_sq_diff");
}

// Numerically stable binary cross-entropy with logits, mean over all entries.
inline Var bce_with_logits(const Var& logits, const Tensor& targets) {
    Tape& t = *logits.tape;
    const Tensor& z = t.val(logits);
    check_same_shape(z, targets, "bce_with_logits");
    double s = 0.0;
    for (int i = 0; i < z.size(); ++i) {
        double zi = z[i], yi = targets[i];
        s += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    }
    s /= z.size();
    int aid = logits.id;
    Tensor y = targets;
    return t.make(Tensor::full(1, 1, s), {aid}, t.needs(aid),
                  [aid, y](Tape& t, int self) {
                      double g = t.out_grad(self).at(0, 0) / t.val(aid).size();
                      const Tensor& z = t.val(aid);
                      Tensor d(z.rows(), z.cols());
                      for (int i = 0; i < d.size(); ++i) {
                          double zi = z[i];
                          double sig = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi))
                                                 : std::exp(zi) / (1.0 + std::exp(zi));
                          d[i] = g * (sig - y[i]);
                      }
                      t.accum(aid, d);
                  },
                  "bce_with_logits");
}

// ---- shape and indexing ops ----

inline Var concat_cols(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "concat_cols");
    const Tensor& x = t.val(a);
    const Tensor& y = t.val(b);
    if (x.rows() != y.rows()) throw ContractError("concat_cols: row count mismatch");
    Tensor c(x.rows(), x.cols() + y.cols());
    for (int i = 0; i < x.rows(); ++i) {
        for (int j = 0; j < x.cols(); ++j) c.at(i, j) = x.at(i, j);
        for (int j = 0; j < y.cols(); ++j) c.at(i, x.cols() + j) = y.at(i, j);
    }
    int aid = a.id, bid = b.id, ac = x.cols(), bc = y.cols();
    return t.make(std::move(c), {aid, bid}, t.needs(aid) || t.needs(bid),
                  [aid, bid, ac, bc](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      Tensor ga(g.rows(), ac), gb(g.rows(), bc);
                      for (int i = 0; i < g.rows(); ++i) {
                          for (int j = 0; j < ac; ++j) ga.at(i, j) = g.at(i, j);
                          for (int j = 0; j < bc; ++j) gb.at(i, j) = g.at(i, ac + j);
                      }
                      t.accum(aid, ga);
                      t.accum(bid, gb);
                  },
                  "concat_cols");
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    Tape& t = *parts[0].tape;
    int cols = t.val(parts[0]).cols();
    int rows = 0;
    bool rg = false;
    std::vector<int> ids;
    for (const Var& p : parts) {
        if (p.tape != &t) throw ContractError("concat_rows: vars from different tapes");
        if (t.val(p).cols() != cols) throw ContractError("concat_rows: column count mismatch");
        rows += t.val(p).rows();
        rg = rg || t.needs(p.id);
        ids.push_back(p.id);
    }
    Tensor c(rows, cols);
    int r = 0;
    for (const Var& p : parts) {
        const Tensor& x = t.val(p);
        for (int i = 0; i < x.rows(); ++i, ++r)
            for (int j = 0; j < cols; ++j) c.at(r, j) = x.at(i, j);
    }
    return t.make(std::move(c), ids, rg,
                  [ids](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      int r = 0;
                      for (int id : ids) {
                          const Tensor& x = t.val(id);
                          if (t.needs(id)) {
                              Tensor gi(x.rows(), x.cols());
                              for (int i = 0; i < x.rows(); ++i)
                                  for (int j = 0; j < x.cols(); ++j) gi.at(i, j) = g.at(r + i, j);
                              t.accum(id, gi);
                          }
                          r += x.rows();
                      }
                  },
                  "concat_rows");
}

// Contiguous row range [r0, r1).
inline Var row_slice(const Var& a, int r0, int r1) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (r0 < 0 || r1 <= r0 || r1 > x.rows()) throw ContractError("row_slice: bad range");
    Tensor c(r1 - r0, x.cols());
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < x.cols(); ++j) c.at(i - r0, j) = x.at(i, j);
    int aid = a.id;
    return t.make(std::move(c), {aid}, t.needs(aid),
                  [aid, r0](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      Tensor& ga = t.grad_buffer(aid);
                      for (int i = 0; i < g.rows(); ++i)
                          for (int j = 0; j < g.cols(); ++j) ga.at(r0 + i, j) += g.at(i, j);
                  },
                  "row_slice");
}

inline Var gather_rows(const Var& a, std::vector<int> idx) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (idx.empty()) throw ContractError("gather_rows: empty index list");
    for (int i : idx)
        if (i < 0 || i >= x.rows()) throw ContractError("gather_rows: index out of range");
    Tensor c(static_cast<int>(idx.size()), x.cols());
    for (int i = 0; i < c.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) c.at(i, j) = x.at(idx[i], j);
    int aid = a.id;
    return t.make(std::move(c), {aid}, t.needs(aid),
                  [aid, idx = std::move(idx)](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      Tensor& ga = t.grad_buffer(aid);
                      for (int i = 0; i < g.rows(); ++i)
                          for (int j = 0; j < g.cols(); ++j) ga.at(idx[i], j) += g.at(i, j);
                  },
                  "gather_rows");
}

// Row i of the input is added into row idx[i] of an n_out-row zero output.
inline Var scatter_add_rows(const Var& a, std::vector<int> idx, int n_out) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (static_cast<int>(idx.size()) != x.rows())
        throw ContractError("scatter_add_rows: index count must equal row count");
    for (int i : idx)
        if (i < 0 || i >= n_out) throw ContractError("scatter_add_rows: index out of range");
    Tensor c(n_out, x.cols());
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) c.at(idx[i], j) += x.at(i, j);
    int aid = a.id;
    return t.make(std::move(c), {aid}, t.needs(aid),
                  [aid, idx = std::move(idx)](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      const Tensor& x = t.val(aid);
                      Tensor d(x.rows(), x.cols());
                      for (int i = 0; i < x.rows(); ++i)
                          for (int j = 0; j < x.cols(); ++j) d.at(i, j) = g.at(idx[i], j);
                      t.accum(aid, d);
                  },
                  "scatter_add_rows");
}

// Broadcast add of a 1 x c row vector to every row.
inline Var add_rowvec(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "add_rowvec");
    const Tensor& x = t.val(a);
    const Tensor& r = t.val(b);
    if (r.rows() != 1 || r.cols() != x.cols())
        throw ContractError("add_rowvec: expected 1x" + std::to_string(x.cols()) + " row vector");
    Tensor c = x;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) c.at(i, j) += r.at(0, j);
    int aid = a.id, bid = b.id;
    return t.make(std::move(c), {aid, bid}, t.needs(aid) || t.needs(bid),
                  [aid, bid](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      if (t.needs(aid)) t.accum(aid, g);
                      if (t.needs(bid)) t.accum(bid, mmsn::sum_rows(g));
                  },
                  "add_rowvec");
}

// ---- stacked-block primitives for per-edge restriction maps ----

namespace detail {
inline Tensor extract_block(const Tensor& a, int row0, int nrows) {
    Tensor b(nrows, a.cols());
    for (int i = 0; i < nrows; ++i)
        for (int j = 0; j < a.cols(); ++j) b.at(i, j) = a.at(row0 + i, j);
    return b;
}
inline void add_block(Tensor& a, int row0, const Tensor& b) {
    for (int i = 0; i < b.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) a.at(row0 + i, j) += b.at(i, j);
}
inline Tensor op_mat(const Tensor& m, bool t) { return t ? mmsn::transpose(m) : m; }
}  // namespace detail

// Per-block matmul of two vertically stacked block sequences:
//   out_k = op(A_k) * op(B_k),  A_k = rows [k*bra, (k+1)*bra) of a, etc.
// Both inputs must stack the same number of blocks.
inline Var block_matmul(const Var& a, const Var& b, int block_rows_a, int block_rows_b,
                        bool trans_a, bool trans_b) {
    Tape& t = detail::same_tape(a, b, "block_matmul");
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    if (block_rows_a <= 0 || block_rows_b <= 0 || av.rows() % block_rows_a != 0 ||
        bv.rows() % block_rows_b != 0)
        throw ContractError("block_matmul: block rows must evenly divide input rows");
    int k = av.rows() / block_rows_a;
    if (bv.rows() / block_rows_b != k) throw ContractError("block_matmul: block count mismatch");
    int ma = trans_a ? av.cols() : block_rows_a;
    int na = trans_a ? block_rows_a : av.cols();
    int mb = trans_b ? bv.cols() : block_rows_b;
    int nb = trans_b ? block_rows_b : bv.cols();
    if (na != mb) throw ContractError("block_matmul: inner block dims differ");

    Tensor c(k * ma, nb);
    for (int blk = 0; blk < k; ++blk) {
        Tensor pa = detail::op_mat(detail::extract_block(av, blk * block_rows_a, block_rows_a),
                                   trans_a);
        Tensor pb = detail::op_mat(detail::extract_block(bv, blk * block_rows_b, block_rows_b),
                                   trans_b);
        detail::add_block(c, blk * ma, mmsn::matmul(pa, pb));
    }
    int aid = a.id, bid = b.id;
    return t.make(std::move(c), {aid, bid}, t.needs(aid) || t.needs(bid),
                  [aid, bid, block_rows_a, block_rows_b, trans_a, trans_b, k, ma](Tape& t,
                                                                                  int self) {
                      const Tensor& g = t.out_grad(self);
                      const Tensor& av = t.val(aid);
                      const Tensor& bv = t.val(bid);
                      Tensor ga(av.rows(), av.cols()), gb(bv.rows(), bv.cols());
                      for (int blk = 0; blk < k; ++blk) {
                          Tensor pa = detail::op_mat(
                              detail::extract_block(av, blk * block_rows_a, block_rows_a), trans_a);
                          Tensor pb = detail::op_mat(
                              detail::extract_block(bv, blk * block_rows_b, block_rows_b), trans_b);
                          Tensor gk = detail::extract_block(g, blk * ma, ma);
                          Tensor dp = matmul_nt(gk, pb);  // d/d op(A)
                          Tensor dq = matmul_tn(pa, gk);  // d/d op(B)
                          detail::add_block(ga, blk * block_rows_a,
                                            trans_a ? mmsn::transpose(dp) : dp);
                          detail::add_block(gb, blk * block_rows_b,
                                            trans_b ? mmsn::transpose(dq) : dq);
                      }
                      if (t.needs(aid)) t.accum(aid, ga);
                      if (t.needs(bid)) t.accum(bid, gb);
                  },
                  "block_matmul");
}

// Per-block clamped inverse square root of symmetric d x d blocks stacked
// vertically. Forward diagonalizes each block; backward applies the standard
// spectral (Daleckii-Krein) formula with divided differences of
// g(l) = max(l, eps)^{-1/2}, which is exact through the clamp.
inline Var sym_invsqrt_blocks(const Var& a, int d, double eps) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (eps <= 0.0) throw ContractError("sym_invsqrt_blocks: eps must be positive");
    if (d <= 0 || av.cols() != d || av.rows() % d != 0)
        throw ContractError("sym_invsqrt_blocks: expected stacked d x d blocks");
    int k = av.rows() / d;
    auto eigs = std::make_shared<std::vector<SymEig>>();
    eigs->reserve(k);
    Tensor c(av.rows(), d);
    for (int blk = 0; blk < k; ++blk) {
        SymEig e = sym_eig(detail::extract_block(av, blk * d, d));
        for (double lam : e.values) t.note_clamp_margin(std::abs(lam - eps));
        Tensor s(d, d);
        for (int q = 0; q < d; ++q) {
            double f = 1.0 / std::sqrt(std::max(e.values[q], eps));
            for (int i = 0; i < d; ++i) {
                double w = e.vectors.at(i, q) * f;
                for (int j = 0; j < d; ++j) s.at(i, j) += w * e.vectors.at(j, q);
            }
        }
        detail::add_block(c, blk * d, s);
        eigs->push_back(std::move(e));
    }
    int aid = a.id;
    return t.make(std::move(c), {aid}, t.needs(aid),
                  [aid, d, eps, k, eigs](Tape& t, int self) {
                      const Tensor& g = t.out_grad(self);
                      Tensor ga(k * d, d);
                      auto gfun = [eps](double lam) {
                          return 1.0 / std::sqrt(std::max(lam, eps));
                      };
                      auto gderiv = [eps](double lam) {
                          return lam > eps ? -0.5 * std::pow(lam, -1.5) : 0.0;
                      };
                      for (int blk = 0; blk < k; ++blk) {
                          const SymEig& e = (*eigs)[blk];
                          Tensor gk = detail::extract_block(g, blk * d, d);
                          // gradients against symmetric perturbations only
                          Tensor gs(d, d);
                          for (int i = 0; i < d; ++i)
                              for (int j = 0; j < d; ++j)
                                  gs.at(i, j) = 0.5 * (gk.at(i, j) + gk.at(j, i));
                          Tensor m = matmul_tn(e.vectors, mmsn::matmul(gs, e.vectors));
                          for (int i = 0; i < d; ++i)
                              for (int j = 0; j < d; ++j) {
                                  double li = e.values[i], lj = e.values[j];
                                  double p;
                                  if (std::abs(li - lj) >
                                      1e-8 * std::max({1.0, std::abs(li), std::abs(lj)}))
                                      p = (gfun(li) - gfun(lj)) / (li - lj);
                                  else
                                      p = gderiv(0.5 * (li + lj));
                                  m.at(i, j) *= p;
                              }
                          detail::add_block(ga, blk * d,
                                            mmsn::matmul(e.vectors, matmul_nt(m, e.vectors)));
                      }
                      t.accum(aid, ga);
                  },
                  "sym_invsqrt_blocks");
}

// ---- small conveniences ----

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

inline Var mean_of(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("mean_of: no inputs");
    Var acc = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

enum class Activation { identity, relu, sigmoid };

inline Var activate(const Var& x, Activation act) {
    switch (act) {
        case Activation::identity: return x;
        case Activation::relu: return relu(x);
        case Activation::sigmoid: return sigmoid(x);
    }
    throw ContractError("activate: unknown activation");
}

}  // namespace mmsn
