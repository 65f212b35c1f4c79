#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kuq/array.hpp"
#include "kuq/errors.hpp"
#include "kuq/reduce.hpp"

namespace kuq {

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    matmul,
    transpose,
    affine,
    tanh_op,
    square,
    abs_op,
    sum,
    mean,
    combine,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::affine: return "affine";
        case OpKind::tanh_op: return "tanh";
        case OpKind::square: return "square";
        case OpKind::abs_op: return "abs";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::combine: return "combine";
    }
    return "?";
}

struct NodeRef {
    std::uint32_t index = 0xffffffffu;
    bool valid() const { return index != 0xffffffffu; }
};

/// Named gradients keyed by parameter name; std::map keeps iteration stable.
using GradMap = std::map<std::string, RealArray>;

namespace detail {

// C (r x c) = or += A (r x k) * B (k x c)
inline void mm_nn(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                  std::size_t cc, bool accumulate) {
    if (!accumulate) std::fill(c, c + r * cc, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * cc;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + l * cc;
            for (std::size_t j = 0; j < cc; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (r x c) += A (r x k) * B^T where B is stored (c x k): row-dot-row.
inline void mm_nt_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                      std::size_t cc) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * cc;
        for (std::size_t j = 0; j < cc; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] += s;
        }
    }
}

// C (r x c) += A^T * B where A is stored (k x r), B is (k x c).
inline void mm_tn_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
                      std::size_t cc) {
    for (std::size_t l = 0; l < k; ++l) {
        const double* arow = a + l * r;
        const double* brow = b + l * cc;
        for (std::size_t i = 0; i < r; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * cc;
            for (std::size_t j = 0; j < cc; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

/// Record of a single differentiable computation over real arrays.
///
/// Nodes are appended in topological order (parents always precede their
/// node), forward() evaluates the list once in order and backward() walks it
/// once in reverse. Tapes are meant to be rebuilt per computation; there is
/// no graph caching. A tape belongs to one thread; distinct tapes over
/// distinct parameter copies may run in parallel, and accumulating their
/// gradients is the caller's synchronization point.
class Tape {
public:
    explicit Tape(bool checked = false) : checked_(checked) {}

    bool checked() const { return checked_; }

    // ---- graph construction ------------------------------------------------

    /// Named leaf that does not receive a gradient (data, constants with names).
    NodeRef input(const std::string& name, RealArray value) {
        return add_leaf(name, std::move(value), false);
    }

    /// Named leaf registered as a trainable parameter.
    NodeRef param(const std::string& name, RealArray value) {
        return add_leaf(name, std::move(value), true);
    }

    /// Anonymous constant leaf.
    NodeRef constant(RealArray value) { return add_leaf("", std::move(value), false); }

    NodeRef add(NodeRef a, NodeRef b) { return binary_elementwise(OpKind::add, a, b); }
    NodeRef sub(NodeRef a, NodeRef b) { return binary_elementwise(OpKind::sub, a, b); }
    NodeRef mul(NodeRef a, NodeRef b) { return binary_elementwise(OpKind::mul, a, b); }

    NodeRef scale(NodeRef a, double factor) {
        Node n;
        n.op = OpKind::scale;
        n.a = check_ref(a);
        n.factor = factor;
        return push(std::move(n), values_[a.index].shape);
    }

    NodeRef matmul(NodeRef a, NodeRef b) {
        check_ref(a);
        check_ref(b);
        const RealArray& va = values_[a.index];
        const RealArray& vb = values_[b.index];
        if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0]) {
            throw ShapeError(node_msg("matmul", nodes_.size()) + ": cannot multiply " +
                             shape_str(va.shape) + " by " + shape_str(vb.shape));
        }
        Node n;
        n.op = OpKind::matmul;
        n.a = a.index;
        n.b = b.index;
        return push(std::move(n), {va.shape[0], vb.shape[1]});
    }

    NodeRef transpose(NodeRef a) {
        check_ref(a);
        const RealArray& va = values_[a.index];
        if (va.rank() != 2) {
            throw ShapeError(node_msg("transpose", nodes_.size()) + ": expected rank-2, got " +
                             shape_str(va.shape));
        }
        Node n;
        n.op = OpKind::transpose;
        n.a = a.index;
        return push(std::move(n), {va.shape[1], va.shape[0]});
    }

    /// y = W*x + b with the bias broadcast across columns of x.
    NodeRef affine(NodeRef w, NodeRef x, NodeRef b) {
        check_ref(w);
        check_ref(x);
        check_ref(b);
        const RealArray& vw = values_[w.index];
        const RealArray& vx = values_[x.index];
        const RealArray& vb = values_[b.index];
        if (vw.rank() != 2 || vx.rank() != 2 || vw.shape[1] != vx.shape[0] || vb.rank() != 1 ||
            vb.shape[0] != vw.shape[0]) {
            throw ShapeError(node_msg("affine", nodes_.size()) + ": incompatible W " +
                             shape_str(vw.shape) + ", x " + shape_str(vx.shape) + ", b " +
                             shape_str(vb.shape));
        }
        Node n;
        n.op = OpKind::affine;
        n.a = w.index;
        n.b = x.index;
        n.c = b.index;
        return push(std::move(n), {vw.shape[0], vx.shape[1]});
    }

    NodeRef tanh(NodeRef a) { return unary_elementwise(OpKind::tanh_op, a); }
    NodeRef square(NodeRef a) { return unary_elementwise(OpKind::square, a); }
    NodeRef abs(NodeRef a) { return unary_elementwise(OpKind::abs_op, a); }

    /// Reduces every element to one scalar (order-canonical accumulation).
    NodeRef sum(NodeRef a) {
        Node n;
        n.op = OpKind::sum;
        n.a = check_ref(a);
        return push(std::move(n), {});
    }

    /// Elementwise mean of a stack of same-shape arrays (order-canonical).
    NodeRef mean(std::span<const NodeRef> stack) {
        if (stack.empty()) throw ContractError("mean: empty stack");
        const RealArray& first = values_[check_ref(stack[0])];
        Node n;
        n.op = OpKind::mean;
        for (NodeRef r : stack) {
            check_ref(r);
            if (!same_shape(values_[r.index], first)) {
                throw ShapeError(node_msg("mean", nodes_.size()) + ": mismatched member shapes " +
                                 shape_str(first.shape) + " vs " +
                                 shape_str(values_[r.index].shape));
            }
            n.many.push_back(r.index);
        }
        return push(std::move(n), first.shape);
    }

    /// Weighted sum of scalar nodes (order-canonical over the weighted terms).
    NodeRef combine(std::span<const NodeRef> scalars, std::span<const double> weights) {
        if (scalars.size() != weights.size()) {
            throw ContractError("combine: " + std::to_string(scalars.size()) + " nodes vs " +
                                std::to_string(weights.size()) + " weights");
        }
        Node n;
        n.op = OpKind::combine;
        for (NodeRef r : scalars) {
            check_ref(r);
            if (!values_[r.index].is_scalar()) {
                throw ShapeError(node_msg("combine", nodes_.size()) +
                                 ": operand node #" + std::to_string(r.index) + " is not scalar");
            }
            n.many.push_back(r.index);
        }
        n.weights.assign(weights.begin(), weights.end());
        return push(std::move(n), {});
    }

    // ---- binding and evaluation ----------------------------------------------

    void set_value(NodeRef leaf, RealArray value) {
        check_ref(leaf);
        Node& n = nodes_[leaf.index];
        if (n.op != OpKind::leaf) throw ContractError("set_value: node is not a leaf");
        if (!same_shape(values_[leaf.index], value)) {
            throw ShapeError("set_value: new shape " + shape_str(value.shape) +
                             " differs from " + shape_str(values_[leaf.index].shape));
        }
        if (checked_) value = kuq::checked(std::move(value));
        values_[leaf.index] = std::move(value);
    }

    /// Binds a named leaf (input or param) by name.
    void bind(const std::string& name, RealArray value) {
        auto it = named_.find(name);
        if (it == named_.end()) throw ContractError("bind: no leaf named '" + name + "'");
        set_value(NodeRef{it->second}, std::move(value));
    }

    /// Evaluates every node in order; leaf values are taken as bound.
    void forward() {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            eval_node(i);
            if (checked_ && !values_[i].all_finite()) {
                throw NumericError(node_msg(op_name(nodes_[i].op), i) +
                                   ": non-finite value in forward pass");
            }
        }
    }

    const RealArray& value(NodeRef r) const {
        check_ref(r);
        return values_[r.index];
    }

    double scalar_value(NodeRef r) const {
        const RealArray& v = value(r);
        if (v.numel() != 1) throw ContractError("scalar_value: node is not scalar");
        return v.data[0];
    }

    /// Reverse pass from a scalar output; returns gradients for every
    /// registered parameter (zeros for parameters the output does not reach).
    GradMap backward(NodeRef output) {
        check_ref(output);
        if (values_[output.index].numel() != 1) {
            throw ContractError("backward: output node #" + std::to_string(output.index) +
                                " is not scalar");
        }
        adjoints_.resize(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            adjoints_[i].shape = values_[i].shape;
            adjoints_[i].data.assign(values_[i].numel(), 0.0);
        }
        adjoints_[output.index].data[0] = 1.0;
        for (std::size_t ii = output.index + 1; ii-- > 0;) {
            backprop_node(ii);
        }
        GradMap grads;
        for (const auto& [name, idx] : params_) grads.emplace(name, adjoints_[idx]);
        return grads;
    }

    const RealArray& adjoint(NodeRef r) const {
        check_ref(r);
        return adjoints_[r.index];
    }

    /// Central-difference verification of backward() on this tape.
    /// Returns the max over parameter coordinates of
    /// |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    double grad_check(NodeRef output, double eps) {
        return grad_check_stats(output, eps, /*exclude_kinks=*/false).max_rel_error;
    }

    struct GradCheckStats {
        double max_rel_error = 0.0;
        std::size_t coords_checked = 0;
        std::size_t coords_skipped = 0;  // kink-adjacent coordinates
    };

    /// grad_check with optional exclusion of kink-adjacent coordinates: a
    /// coordinate is skipped when an |.| input sits within 10*eps of zero at
    /// the base point, or when the +/-eps perturbation flips its sign (the
    /// finite-difference interval then straddles the kink). Absolute
    /// agreement within 1e-12 counts as exact: flat L1 plateaus leave a
    /// roundoff-sized analytic residue that the relative formula would
    /// otherwise misreport.
    GradCheckStats grad_check_stats(NodeRef output, double eps, bool exclude_kinks = true) {
        if (eps <= 0.0) throw ContractError("grad_check: eps must be > 0");
        forward();
        const std::vector<std::int8_t> base_signs = exclude_kinks ? abs_signs(10.0 * eps)
                                                                  : std::vector<std::int8_t>{};
        GradMap analytic = backward(output);
        GradCheckStats stats;
        for (const auto& [name, idx] : params_) {
            RealArray& v = values_[idx];
            const RealArray& g = analytic[name];
            for (std::size_t i = 0; i < v.numel(); ++i) {
                const double keep = v.data[i];
                v.data[i] = keep + eps;
                forward();
                const double fp = scalar_value(output);
                const bool cross_p = exclude_kinks && abs_signs(0.0) != base_signs;
                v.data[i] = keep - eps;
                forward();
                const double fm = scalar_value(output);
                const bool cross_m = exclude_kinks && abs_signs(0.0) != base_signs;
                v.data[i] = keep;
                if (cross_p || cross_m) {
                    ++stats.coords_skipped;
                    continue;
                }
                const double numeric = (fp - fm) / (2.0 * eps);
                const double a = g.data[i];
                if (!std::isfinite(numeric) || !std::isfinite(a)) {
                    stats.max_rel_error = std::numeric_limits<double>::infinity();
                    forward();
                    return stats;
                }
                // Agreement within the central difference's own roundoff
                // resolution counts as exact, or near-zero gradients would be
                // compared against pure cancellation noise.
                const double fd_noise = 32.0 * std::numeric_limits<double>::epsilon() *
                                        std::max({std::fabs(fp), std::fabs(fm), 1.0}) /
                                        (2.0 * eps);
                const double abs_diff = std::fabs(a - numeric);
                const double err =
                    abs_diff <= std::max(1e-12, fd_noise)
                        ? 0.0
                        : abs_diff / std::max(1e-12, std::fabs(a) + std::fabs(numeric));
                stats.max_rel_error = std::max(stats.max_rel_error, err);
                ++stats.coords_checked;
            }
        }
        forward();  // leave cached values consistent with unperturbed leaves
        return stats;
    }

    // ---- introspection -------------------------------------------------------

    std::size_t node_count() const { return nodes_.size(); }

    OpKind kind(NodeRef r) const {
        check_ref(r);
        return nodes_[r.index].op;
    }

    const std::map<std::string, std::uint32_t>& params() const { return params_; }

    /// Smallest |input| over every abs node's operand elements after forward();
    /// +inf when the tape contains no abs node. Used to exclude kink-adjacent
    /// points from finite-difference checks.
    double abs_kink_margin() const {
        double margin = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].op != OpKind::abs_op) continue;
            for (double x : values_[nodes_[i].a].data) margin = std::min(margin, std::fabs(x));
        }
        return margin;
    }

    /// Sign pattern of every abs node input; values within `dead_zone` of zero
    /// count as sign 0.
    std::vector<std::int8_t> abs_signs(double dead_zone) const {
        std::vector<std::int8_t> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].op != OpKind::abs_op) continue;
            for (double x : values_[nodes_[i].a].data) {
                out.push_back(x > dead_zone ? std::int8_t{1} : (x < -dead_zone ? std::int8_t{-1} : std::int8_t{0}));
            }
        }
        return out;
    }

private:
    struct Node {
        OpKind op = OpKind::leaf;
        std::uint32_t a = 0xffffffffu;
        std::uint32_t b = 0xffffffffu;
        std::uint32_t c = 0xffffffffu;
        double factor = 0.0;
        std::vector<std::uint32_t> many;
        std::vector<double> weights;
        bool is_param = false;
    };

    static std::string node_msg(const char* op, std::size_t idx) {
        return std::string("node #") + std::to_string(idx) + " (" + op + ")";
    }

    std::uint32_t check_ref(NodeRef r) const {
        if (!r.valid() || r.index >= nodes_.size()) throw ContractError("invalid node reference");
        return r.index;
    }

    NodeRef add_leaf(const std::string& name, RealArray value, bool is_param) {
        if (checked_) value = kuq::checked(std::move(value));
        Node n;
        n.op = OpKind::leaf;
        n.is_param = is_param;
        auto idx = static_cast<std::uint32_t>(nodes_.size());
        if (!name.empty()) {
            if (!named_.emplace(name, idx).second) {
                throw ContractError("duplicate leaf name '" + name + "'");
            }
            if (is_param) params_.emplace(name, idx);
        } else if (is_param) {
            throw ContractError("parameters must be named");
        }
        nodes_.push_back(std::move(n));
        values_.push_back(std::move(value));
        return NodeRef{idx};
    }

    NodeRef push(Node n, std::vector<std::size_t> out_shape) {
        auto idx = static_cast<std::uint32_t>(nodes_.size());
        nodes_.push_back(std::move(n));
        values_.push_back(RealArray::zeros(std::move(out_shape)));
        return NodeRef{idx};
    }

    NodeRef binary_elementwise(OpKind op, NodeRef a, NodeRef b) {
        check_ref(a);
        check_ref(b);
        if (!same_shape(values_[a.index], values_[b.index])) {
            throw ShapeError(node_msg(op_name(op), nodes_.size()) + ": shape mismatch " +
                             shape_str(values_[a.index].shape) + " vs " +
                             shape_str(values_[b.index].shape));
        }
        Node n;
        n.op = op;
        n.a = a.index;
        n.b = b.index;
        return push(std::move(n), values_[a.index].shape);
    }

    NodeRef unary_elementwise(OpKind op, NodeRef a) {
        check_ref(a);
        Node n;
        n.op = op;
        n.a = a.index;
        return push(std::move(n), values_[a.index].shape);
    }

    void eval_node(std::size_t i) {
        const Node& n = nodes_[i];
        RealArray& out = values_[i];
        switch (n.op) {
            case OpKind::leaf:
                break;
            case OpKind::add: {
                const auto& a = values_[n.a].data;
                const auto& b = values_[n.b].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = a[j] + b[j];
                break;
            }
            case OpKind::sub: {
                const auto& a = values_[n.a].data;
                const auto& b = values_[n.b].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = a[j] - b[j];
                break;
            }
            case OpKind::mul: {
                const auto& a = values_[n.a].data;
                const auto& b = values_[n.b].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = a[j] * b[j];
                break;
            }
            case OpKind::scale: {
                const auto& a = values_[n.a].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = n.factor * a[j];
                break;
            }
            case OpKind::matmul: {
                const RealArray& a = values_[n.a];
                const RealArray& b = values_[n.b];
                detail::mm_nn(a.data.data(), b.data.data(), out.data.data(), a.shape[0],
                              a.shape[1], b.shape[1], false);
                break;
            }
            case OpKind::transpose: {
                const RealArray& a = values_[n.a];
                const std::size_t r = a.shape[0], c = a.shape[1];
                for (std::size_t ii = 0; ii < r; ++ii)
                    for (std::size_t jj = 0; jj < c; ++jj)
                        out.data[jj * r + ii] = a.data[ii * c + jj];
                break;
            }
            case OpKind::affine: {
                const RealArray& w = values_[n.a];
                const RealArray& x = values_[n.b];
                const RealArray& b = values_[n.c];
                const std::size_t r = w.shape[0], k = w.shape[1], c = x.shape[1];
                for (std::size_t ii = 0; ii < r; ++ii) {
                    double* row = out.data.data() + ii * c;
                    std::fill(row, row + c, b.data[ii]);
                }
                detail::mm_nn(w.data.data(), x.data.data(), out.data.data(), r, k, c, true);
                break;
            }
            case OpKind::tanh_op: {
                const auto& a = values_[n.a].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = std::tanh(a[j]);
                break;
            }
            case OpKind::square: {
                const auto& a = values_[n.a].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = a[j] * a[j];
                break;
            }
            case OpKind::abs_op: {
                const auto& a = values_[n.a].data;
                for (std::size_t j = 0; j < out.numel(); ++j) out.data[j] = std::fabs(a[j]);
                break;
            }
            case OpKind::sum:
                out.data[0] = detail::canonical_sum(values_[n.a].data, scratch_);
                break;
            case OpKind::mean: {
                const std::size_t m = n.many.size();
                stack_buf_.resize(m);
                for (std::size_t j = 0; j < out.numel(); ++j) {
                    for (std::size_t p = 0; p < m; ++p) stack_buf_[p] = values_[n.many[p]].data[j];
                    out.data[j] = detail::canonical_mean(stack_buf_, scratch_);
                }
                break;
            }
            case OpKind::combine: {
                stack_buf_.resize(n.many.size());
                for (std::size_t p = 0; p < n.many.size(); ++p) {
                    stack_buf_[p] = n.weights[p] * values_[n.many[p]].data[0];
                }
                out.data[0] = detail::canonical_sum(stack_buf_, scratch_);
                break;
            }
        }
    }

    void backprop_node(std::size_t i) {
        const Node& n = nodes_[i];
        const RealArray& g = adjoints_[i];
        switch (n.op) {
            case OpKind::leaf:
                break;
            case OpKind::add: {
                auto& ga = adjoints_[n.a].data;
                auto& gb = adjoints_[n.b].data;
                for (std::size_t j = 0; j < g.numel(); ++j) {
                    ga[j] += g.data[j];
                    gb[j] += g.data[j];
                }
                break;
            }
            case OpKind::sub: {
                auto& ga = adjoints_[n.a].data;
                auto& gb = adjoints_[n.b].data;
                for (std::size_t j = 0; j < g.numel(); ++j) {
                    ga[j] += g.data[j];
                    gb[j] -= g.data[j];
                }
                break;
            }
            case OpKind::mul: {
                const auto& a = values_[n.a].data;
                const auto& b = values_[n.b].data;
                auto& ga = adjoints_[n.a].data;
                auto& gb = adjoints_[n.b].data;
                for (std::size_t j = 0; j < g.numel(); ++j) {
                    ga[j] += b[j] * g.data[j];
                    gb[j] += a[j] * g.data[j];
                }
                break;
            }
            case OpKind::scale: {
                auto& ga = adjoints_[n.a].data;
                for (std::size_t j = 0; j < g.numel(); ++j) ga[j] += n.factor * g.data[j];
                break;
            }
            case OpKind::matmul: {
                const RealArray& a = values_[n.a];
                const RealArray& b = values_[n.b];
                const std::size_t r = a.shape[0], k = a.shape[1], c = b.shape[1];
                // dA += G * B^T, dB += A^T * G
                detail::mm_nt_acc(g.data.data(), b.data.data(), adjoints_[n.a].data.data(), r, c, k);
                detail::mm_tn_acc(a.data.data(), g.data.data(), adjoints_[n.b].data.data(), k, r, c);
                break;
            }
            case OpKind::transpose: {
                const std::size_t r = values_[n.a].shape[0], c = values_[n.a].shape[1];
                auto& ga = adjoints_[n.a].data;
                for (std::size_t ii = 0; ii < r; ++ii)
                    for (std::size_t jj = 0; jj < c; ++jj)
                        ga[ii * c + jj] += g.data[jj * r + ii];
                break;
            }
            case OpKind::affine: {
                const RealArray& w = values_[n.a];
                const RealArray& x = values_[n.b];
                const std::size_t r = w.shape[0], k = w.shape[1], c = x.shape[1];
                // dW += G * X^T, dX += W^T * G, db += row sums of G
                detail::mm_nt_acc(g.data.data(), x.data.data(), adjoints_[n.a].data.data(), r, c, k);
                detail::mm_tn_acc(w.data.data(), g.data.data(), adjoints_[n.b].data.data(), k, r, c);
                auto& gb = adjoints_[n.c].data;
                for (std::size_t ii = 0; ii < r; ++ii) {
                    const double* grow = g.data.data() + ii * c;
                    double s = 0.0;
                    for (std::size_t jj = 0; jj < c; ++jj) s += grow[jj];
                    gb[ii] += s;
                }
                break;
            }
            case OpKind::tanh_op: {
                const auto& y = values_[i].data;
                auto& ga = adjoints_[n.a].data;
                for (std::size_t j = 0; j < g.numel(); ++j)
                    ga[j] += (1.0 - y[j] * y[j]) * g.data[j];
                break;
            }
            case OpKind::square: {
                const auto& a = values_[n.a].data;
                auto& ga = adjoints_[n.a].data;
                for (std::size_t j = 0; j < g.numel(); ++j) ga[j] += 2.0 * a[j] * g.data[j];
                break;
            }
            case OpKind::abs_op: {
                // Subgradient at 0 is defined as 0.
                const auto& a = values_[n.a].data;
                auto& ga = adjoints_[n.a].data;
                for (std::size_t j = 0; j < g.numel(); ++j) {
                    if (a[j] > 0.0)
                        ga[j] += g.data[j];
                    else if (a[j] < 0.0)
                        ga[j] -= g.data[j];
                }
                break;
            }
            case OpKind::sum: {
                auto& ga = adjoints_[n.a].data;
                const double gd = g.data[0];
                for (std::size_t j = 0; j < ga.size(); ++j) ga[j] += gd;
                break;
            }
            case OpKind::mean: {
                const double w = 1.0 / static_cast<double>(n.many.size());
                for (std::uint32_t p : n.many) {
                    auto& gp = adjoints_[p].data;
                    for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += w * g.data[j];
                }
                break;
            }
            case OpKind::combine: {
                const double gd = g.data[0];
                for (std::size_t p = 0; p < n.many.size(); ++p) {
                    adjoints_[n.many[p]].data[0] += n.weights[p] * gd;
                }
                break;
            }
        }
    }

    bool checked_;
    std::vector<Node> nodes_;
    std::vector<RealArray> values_;
    std::vector<RealArray> adjoints_;
    std::map<std::string, std::uint32_t> named_;
    std::map<std::string, std::uint32_t> params_;
    std::vector<double> scratch_;
    std::vector<double> stack_buf_;
};

}  // namespace kuq
