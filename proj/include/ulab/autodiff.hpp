#pragma once

// Reverse-mode automatic differentiation over a flat tape.
//
// The primitive set is deliberately small so that the finite-difference
// oracle in finite_difference_gradient() can exercise every backward rule:
// elementwise add/sub/mul, matmul, transpose, exp, log, sigmoid, log1p,
// row-wise log-softmax, row gather, full sum/mean and scalar scale.
// Losses and the model forward pass compose exclusively from these.
//
// Lifecycle: one tape per forward pass. backward() may be called once, on a
// scalar, and consumes the tape. No higher-order gradients.

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "ulab/common.hpp"
#include "ulab/tensor.hpp"

namespace ulab {

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    matmul,
    transpose,
    exp,
    log,
    sigmoid,
    log1p,
    log_softmax_rows,
    gather_rows,
    sum,
    mean,
    scale,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::log1p: return "log1p";
        case OpKind::log_softmax_rows: return "log_softmax_rows";
        case OpKind::gather_rows: return "gather_rows";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::scale: return "scale";
    }
    return "?";
}

struct OpAttrs {
    double scalar{0.0};                  // scale factor
    std::vector<std::size_t> rows;       // gather_rows indices
};

// Gradients keyed by the node id of each requires_grad leaf. The
// finite-difference oracle keys by parameter position instead; callers line
// the two up through the leaf registration order.
template <typename Real>
class GradMap {
public:
    void insert(int node_id, Tensor<Real> grad) { grads_[node_id] = std::move(grad); }

    const Tensor<Real>& at(int node_id) const {
        auto it = grads_.find(node_id);
        if (it == grads_.end()) throw tape_error("no gradient recorded for node");
        return it->second;
    }

    bool contains(int node_id) const { return grads_.count(node_id) > 0; }
    std::size_t size() const { return grads_.size(); }

    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    std::map<int, Tensor<Real>> grads_;
};

template <typename Real>
class Tape {
public:
    Tape() : id_(next_tape_id()++) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    // Registers a leaf. requires_grad leaves are the entries backward reports.
    Tensor<Real> leaf(Tensor<Real> t, bool requires_grad) {
        if (!all_finite(t.values)) throw nonfinite_error("leaf tensor has non-finite values");
        t.requires_grad = requires_grad;
        t.node_id = static_cast<int>(nodes_.size());
        t.tape_id = id_;
        nodes_.push_back(Node{OpKind::leaf, {}, t, {}, requires_grad});
        return t;
    }

    Tensor<Real> constant(Tensor<Real> t) { return leaf(std::move(t), false); }

    Tensor<Real> apply(OpKind op, const std::vector<Tensor<Real>>& inputs, OpAttrs attrs = {}) {
        std::vector<int> ids;
        ids.reserve(inputs.size());
        bool any_grad = false;
        for (const Tensor<Real>& in : inputs) {
            ids.push_back(intern(in));
            any_grad = any_grad || nodes_[ids.back()].requires_grad;
        }
        Tensor<Real> out = forward(op, ids, attrs);
        if (!all_finite(out.values)) {
            throw nonfinite_error(std::string(op_name(op)) + " produced a non-finite value");
        }
        out.requires_grad = any_grad;
        out.node_id = static_cast<int>(nodes_.size());
        out.tape_id = id_;
        nodes_.push_back(Node{op, std::move(ids), out, std::move(attrs), any_grad});
        return out;
    }

    Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) { return apply(OpKind::add, {a, b}); }
    Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) { return apply(OpKind::sub, {a, b}); }
    Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) { return apply(OpKind::mul, {a, b}); }
    Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) { return apply(OpKind::matmul, {a, b}); }
    Tensor<Real> transpose(const Tensor<Real>& a) { return apply(OpKind::transpose, {a}); }
    Tensor<Real> exp(const Tensor<Real>& a) { return apply(OpKind::exp, {a}); }
    Tensor<Real> log(const Tensor<Real>& a) { return apply(OpKind::log, {a}); }
    Tensor<Real> sigmoid(const Tensor<Real>& a) { return apply(OpKind::sigmoid, {a}); }
    Tensor<Real> log1p(const Tensor<Real>& a) { return apply(OpKind::log1p, {a}); }
    Tensor<Real> log_softmax_rows(const Tensor<Real>& a) { return apply(OpKind::log_softmax_rows, {a}); }
    Tensor<Real> sum(const Tensor<Real>& a) { return apply(OpKind::sum, {a}); }
    Tensor<Real> mean(const Tensor<Real>& a) { return apply(OpKind::mean, {a}); }

    Tensor<Real> gather_rows(const Tensor<Real>& a, std::vector<std::size_t> rows) {
        OpAttrs attrs;
        attrs.rows = std::move(rows);
        return apply(OpKind::gather_rows, {a}, std::move(attrs));
    }

    Tensor<Real> scale(const Tensor<Real>& a, double factor) {
        OpAttrs attrs;
        attrs.scalar = factor;
        return apply(OpKind::scale, {a}, std::move(attrs));
    }

    // Reverse pass from a scalar loss. Consumes the tape.
    GradMap<Real> backward(const Tensor<Real>& loss) {
        if (consumed_) throw tape_error("backward on a consumed tape");
        int root = intern(loss);
        if (nodes_[root].out.numel() != 1 || nodes_[root].out.rank() > 1) {
            throw tape_error("backward requires a scalar loss, got shape " +
                             nodes_[root].out.shape_str());
        }
        consumed_ = true;

        std::vector<std::vector<Real>> grad(nodes_.size());
        grad[root].assign(1, Real(1));

        for (int i = root; i >= 0; --i) {
            if (grad[i].empty() || !nodes_[i].requires_grad) continue;
            backward_node(i, grad);
        }

        GradMap<Real> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.op != OpKind::leaf || !n.requires_grad) continue;
            std::vector<Real> g = grad[i].empty()
                                      ? std::vector<Real>(n.out.numel(), Real(0))
                                      : std::move(grad[i]);
            out.insert(static_cast<int>(i), Tensor<Real>(n.out.shape, std::move(g)));
        }
        return out;
    }

    const Tensor<Real>& value_of(const Tensor<Real>& t) const {
        if (t.tape_id != id_ || t.node_id < 0) throw tape_error("tensor is not on this tape");
        return nodes_[static_cast<std::size_t>(t.node_id)].out;
    }

private:
    struct Node {
        OpKind op;
        std::vector<int> inputs;
        Tensor<Real> out;
        OpAttrs attrs;
        bool requires_grad;
    };

    static std::atomic<int>& next_tape_id() {
        static std::atomic<int> counter{0};
        return counter;
    }

    int intern(const Tensor<Real>& t) {
        if (t.node_id >= 0) {
            if (t.tape_id != id_) throw tape_error("tensor belongs to a different tape");
            if (static_cast<std::size_t>(t.node_id) >= nodes_.size()) {
                throw tape_error("tensor references an unknown node");
            }
            return t.node_id;
        }
        return constant(t).node_id;
    }

    const Tensor<Real>& in(const std::vector<int>& ids, std::size_t k) const {
        return nodes_[static_cast<std::size_t>(ids[k])].out;
    }

    Tensor<Real> forward(OpKind op, const std::vector<int>& ids, const OpAttrs& attrs) {
        auto arity = [&](std::size_t n) {
            if (ids.size() != n) {
                throw shape_error(std::string(op_name(op)) + " expects " + std::to_string(n) +
                                  " input(s), got " + std::to_string(ids.size()));
            }
        };
        switch (op) {
            case OpKind::leaf:
                throw tape_error("leaf is not applicable through apply()");
            case OpKind::add:
            case OpKind::sub:
            case OpKind::mul: {
                arity(2);
                const Tensor<Real>& a = in(ids, 0);
                const Tensor<Real>& b = in(ids, 1);
                if (!a.same_shape(b)) {
                    throw shape_error(std::string(op_name(op)) + ": shape mismatch " +
                                      a.shape_str() + " vs " + b.shape_str());
                }
                Tensor<Real> out = a;
                for (std::size_t i = 0; i < out.values.size(); ++i) {
                    Real x = a.values[i], y = b.values[i];
                    out.values[i] = op == OpKind::add ? x + y : op == OpKind::sub ? x - y : x * y;
                }
                return out;
            }
            case OpKind::matmul: {
                arity(2);
                const Tensor<Real>& a = in(ids, 0);
                const Tensor<Real>& b = in(ids, 1);
                if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
                    throw shape_error("matmul: incompatible shapes " + a.shape_str() + " x " +
                                      b.shape_str());
                }
                std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
                Tensor<Real> out = Tensor<Real>::zeros({m, n});
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t c = 0; c < k; ++c) {
                        Real av = a.values[i * k + c];
                        if (av == Real(0)) continue;
                        const Real* brow = &b.values[c * n];
                        Real* orow = &out.values[i * n];
                        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                    }
                }
                return out;
            }
            case OpKind::transpose: {
                arity(1);
                const Tensor<Real>& a = in(ids, 0);
                if (a.rank() != 2) throw shape_error("transpose expects a rank-2 tensor");
                std::size_t r = a.shape[0], c = a.shape[1];
                Tensor<Real> out = Tensor<Real>::zeros({c, r});
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) out.values[j * r + i] = a.values[i * c + j];
                }
                return out;
            }
            case OpKind::exp: {
                arity(1);
                Tensor<Real> out = in(ids, 0);
                for (Real& v : out.values) v = std::exp(v);
                return out;
            }
            case OpKind::log: {
                arity(1);
                Tensor<Real> out = in(ids, 0);
                for (Real& v : out.values) {
                    if (v <= Real(0)) throw value_error("log of a non-positive value");
                    v = std::log(v);
                }
                return out;
            }
            case OpKind::sigmoid: {
                arity(1);
                Tensor<Real> out = in(ids, 0);
                for (Real& v : out.values) {
                    if (v >= Real(0)) {
                        v = Real(1) / (Real(1) + std::exp(-v));
                    } else {
                        Real e = std::exp(v);
                        v = e / (Real(1) + e);
                    }
                }
                return out;
            }
            case OpKind::log1p: {
                arity(1);
                Tensor<Real> out = in(ids, 0);
                for (Real& v : out.values) {
                    if (v <= Real(-1)) throw value_error("log1p of a value <= -1");
                    v = std::log1p(v);
                }
                return out;
            }
            case OpKind::log_softmax_rows: {
                arity(1);
                const Tensor<Real>& a = in(ids, 0);
                if (a.rank() != 2) throw shape_error("log_softmax_rows expects a rank-2 tensor");
                Tensor<Real> out = a;
                std::size_t r = a.shape[0], c = a.shape[1];
                for (std::size_t i = 0; i < r; ++i) {
                    Real* row = &out.values[i * c];
                    Real mx = row[0];
                    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                    Real acc = Real(0);
                    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - mx);
                    Real lse = mx + std::log(acc);
                    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
                }
                return out;
            }
            case OpKind::gather_rows: {
                arity(1);
                const Tensor<Real>& a = in(ids, 0);
                if (a.rank() != 2) throw shape_error("gather_rows expects a rank-2 tensor");
                std::size_t r = a.shape[0], c = a.shape[1];
                Tensor<Real> out = Tensor<Real>::zeros({attrs.rows.size(), c});
                for (std::size_t i = 0; i < attrs.rows.size(); ++i) {
                    std::size_t src = attrs.rows[i];
                    if (src >= r) throw value_error("gather_rows index out of range");
                    for (std::size_t j = 0; j < c; ++j) out.values[i * c + j] = a.values[src * c + j];
                }
                return out;
            }
            case OpKind::sum:
            case OpKind::mean: {
                arity(1);
                const Tensor<Real>& a = in(ids, 0);
                Real acc = Real(0);
                for (Real v : a.values) acc += v;
                if (op == OpKind::mean) acc /= static_cast<Real>(a.numel());
                return Tensor<Real>::scalar(acc);
            }
            case OpKind::scale: {
                arity(1);
                Tensor<Real> out = in(ids, 0);
                Real f = static_cast<Real>(attrs.scalar);
                for (Real& v : out.values) v *= f;
                return out;
            }
        }
        throw tape_error("unknown op");
    }

    void accumulate(std::vector<Real>& slot, std::size_t n, std::size_t idx, Real v) {
        if (slot.empty()) slot.assign(n, Real(0));
        slot[idx] += v;
    }

    void ensure(std::vector<Real>& slot, std::size_t n) {
        if (slot.empty()) slot.assign(n, Real(0));
    }

    void backward_node(int i, std::vector<std::vector<Real>>& grad) {
        const Node& node = nodes_[static_cast<std::size_t>(i)];
        if (node.op == OpKind::leaf) return;
        const std::vector<Real>& g = grad[static_cast<std::size_t>(i)];

        auto grad_of = [&](std::size_t k) -> std::vector<Real>& {
            auto& slot = grad[static_cast<std::size_t>(node.inputs[k])];
            ensure(slot, in(node.inputs, k).numel());
            return slot;
        };
        auto needs = [&](std::size_t k) {
            return nodes_[static_cast<std::size_t>(node.inputs[k])].requires_grad;
        };

        switch (node.op) {
            case OpKind::leaf:
                return;
            case OpKind::add: {
                for (std::size_t k = 0; k < 2; ++k) {
                    if (!needs(k)) continue;
                    auto& gi = grad_of(k);
                    for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j];
                }
                return;
            }
            case OpKind::sub: {
                if (needs(0)) {
                    auto& ga = grad_of(0);
                    for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
                }
                if (needs(1)) {
                    auto& gb = grad_of(1);
                    for (std::size_t j = 0; j < g.size(); ++j) gb[j] -= g[j];
                }
                return;
            }
            case OpKind::mul: {
                const Tensor<Real>& a = in(node.inputs, 0);
                const Tensor<Real>& b = in(node.inputs, 1);
                if (needs(0)) {
                    auto& ga = grad_of(0);
                    for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * b.values[j];
                }
                if (needs(1)) {
                    auto& gb = grad_of(1);
                    for (std::size_t j = 0; j < g.size(); ++j) gb[j] += g[j] * a.values[j];
                }
                return;
            }
            case OpKind::matmul: {
                const Tensor<Real>& a = in(node.inputs, 0);
                const Tensor<Real>& b = in(node.inputs, 1);
                std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
                if (needs(0)) {
                    auto& ga = grad_of(0);  // g [m,n] * b^T [n,k]
                    for (std::size_t i2 = 0; i2 < m; ++i2) {
                        const Real* grow = &g[i2 * n];
                        for (std::size_t c = 0; c < k; ++c) {
                            const Real* brow = &b.values[c * n];
                            Real acc = Real(0);
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            ga[i2 * k + c] += acc;
                        }
                    }
                }
                if (needs(1)) {
                    auto& gb = grad_of(1);  // a^T [k,m] * g [m,n]
                    for (std::size_t i2 = 0; i2 < m; ++i2) {
                        for (std::size_t c = 0; c < k; ++c) {
                            Real av = a.values[i2 * k + c];
                            if (av == Real(0)) continue;
                            const Real* grow = &g[i2 * n];
                            Real* brow = &gb[c * n];
                            for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                        }
                    }
                }
                return;
            }
            case OpKind::transpose: {
                if (!needs(0)) return;
                const Tensor<Real>& a = in(node.inputs, 0);
                std::size_t r = a.shape[0], c = a.shape[1];
                auto& ga = grad_of(0);
                for (std::size_t i2 = 0; i2 < r; ++i2) {
                    for (std::size_t j = 0; j < c; ++j) ga[i2 * c + j] += g[j * r + i2];
                }
                return;
            }
            case OpKind::exp: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                const Tensor<Real>& y = node.out;
                for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * y.values[j];
                return;
            }
            case OpKind::log: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                const Tensor<Real>& x = in(node.inputs, 0);
                for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] / x.values[j];
                return;
            }
            case OpKind::sigmoid: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                const Tensor<Real>& y = node.out;
                for (std::size_t j = 0; j < g.size(); ++j) {
                    ga[j] += g[j] * y.values[j] * (Real(1) - y.values[j]);
                }
                return;
            }
            case OpKind::log1p: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                const Tensor<Real>& x = in(node.inputs, 0);
                for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] / (Real(1) + x.values[j]);
                return;
            }
            case OpKind::log_softmax_rows: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                const Tensor<Real>& y = node.out;
                std::size_t r = y.shape[0], c = y.shape[1];
                for (std::size_t i2 = 0; i2 < r; ++i2) {
                    Real gsum = Real(0);
                    for (std::size_t j = 0; j < c; ++j) gsum += g[i2 * c + j];
                    for (std::size_t j = 0; j < c; ++j) {
                        ga[i2 * c + j] += g[i2 * c + j] - std::exp(y.values[i2 * c + j]) * gsum;
                    }
                }
                return;
            }
            case OpKind::gather_rows: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                std::size_t c = node.out.shape[1];
                for (std::size_t i2 = 0; i2 < node.attrs.rows.size(); ++i2) {
                    std::size_t dst = node.attrs.rows[i2];
                    for (std::size_t j = 0; j < c; ++j) ga[dst * c + j] += g[i2 * c + j];
                }
                return;
            }
            case OpKind::sum: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                for (Real& v : ga) v += g[0];
                return;
            }
            case OpKind::mean: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                Real f = g[0] / static_cast<Real>(ga.size());
                for (Real& v : ga) v += f;
                return;
            }
            case OpKind::scale: {
                if (!needs(0)) return;
                auto& ga = grad_of(0);
                Real f = static_cast<Real>(node.attrs.scalar);
                for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * f;
                return;
            }
        }
    }

    int id_;
    std::vector<Node> nodes_;
    bool consumed_{false};
};

// Central-difference gradient of an arbitrary scalar function of a parameter
// list. Lives beside the tape as its independent test oracle; keys are the
// positions of the parameters in `params`.
template <typename Real>
GradMap<Real> finite_difference_gradient(
    const std::function<Real(const std::vector<Tensor<Real>>&)>& f,
    std::vector<Tensor<Real>> params, Real eps) {
    if (!(eps > Real(0))) throw value_error("finite differences require eps > 0");
    GradMap<Real> out;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor<Real> grad = Tensor<Real>::zeros(params[p].shape);
        for (std::size_t i = 0; i < params[p].values.size(); ++i) {
            Real saved = params[p].values[i];
            params[p].values[i] = saved + eps;
            Real up = f(params);
            params[p].values[i] = saved - eps;
            Real dn = f(params);
            params[p].values[i] = saved;
            if (!std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(dn))) {
                throw nonfinite_error("finite differences: function returned a non-finite value");
            }
            grad.values[i] = (up - dn) / (Real(2) * eps);
        }
        out.insert(static_cast<int>(p), std::move(grad));
    }
    return out;
}

}  // namespace ulab
