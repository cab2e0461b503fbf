#pragma once

// Define-by-run reverse-mode tape over batched rank-2 tensors, plus a
// structural forward-mode pass. Ops evaluate eagerly at construction, so
// building the graph IS the forward pass. A tangent pass appends new nodes
// that compute a Jacobian-vector product; because those tangents are ordinary
// graph nodes, a single backward() differentiates straight through them.
// That is all the machinery the divergence-matching losses need: first-order
// forward-over-reverse, never reverse-over-reverse.
//
// Graphs are rebuilt per batch and are not thread-safe; confine each graph to
// one thread.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace fdm::ad {

using NodeId = std::int32_t;
constexpr NodeId kNoNode = -1;

enum class Op : std::uint8_t {
    Input,
    Constant,
    MatMul,
    AddBias,  // [B,m] + [1,m] broadcast over rows
    Add,
    Sub,
    Mul,       // elementwise, same shape
    ColScale,  // [B,m] * [1,m] broadcast over rows
    Scale,     // by compile-time scalar
    Act,
    ActGradMul,  // act'(x) ⊙ t, produced by tangent passes through Act
    Concat2,     // column-wise
    RowSum,      // [B,m] -> [B,1]
    Sum,         // -> [1,1]
    Mean,        // -> [1,1]
    Abs,
    Square,
    StopGrad,
};

enum class Act : std::uint8_t { Tanh, Silu, Softplus };

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Constant: return "constant";
        case Op::MatMul: return "matmul";
        case Op::AddBias: return "add_bias";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ColScale: return "col_scale";
        case Op::Scale: return "scale";
        case Op::Act: return "act";
        case Op::ActGradMul: return "act_grad_mul";
        case Op::Concat2: return "concat2";
        case Op::RowSum: return "row_sum";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Abs: return "abs";
        case Op::Square: return "square";
        case Op::StopGrad: return "stop_grad";
    }
    return "?";
}

// Activation value and its first two derivatives, written against the
// pre-activation input so the tape and the plain evaluators agree bitwise.
inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double act_val(Act a, double x) {
    switch (a) {
        case Act::Tanh: return std::tanh(x);
        case Act::Silu: return x * sigmoid(x);
        case Act::Softplus: return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    return 0.0;
}

inline double act_grad(Act a, double x) {
    switch (a) {
        case Act::Tanh: {
            const double v = std::tanh(x);
            return 1.0 - v * v;
        }
        case Act::Silu: {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        }
        case Act::Softplus: return sigmoid(x);
    }
    return 0.0;
}

inline double act_curv(Act a, double x) {
    switch (a) {
        case Act::Tanh: {
            const double v = std::tanh(x);
            return -2.0 * v * (1.0 - v * v);
        }
        case Act::Silu: {
            const double s = sigmoid(x);
            return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
        }
        case Act::Softplus: {
            const double s = sigmoid(x);
            return s * (1.0 - s);
        }
    }
    return 0.0;
}

inline const char* act_name(Act a) {
    switch (a) {
        case Act::Tanh: return "tanh";
        case Act::Silu: return "silu";
        case Act::Softplus: return "softplus";
    }
    return "?";
}

inline Act act_from_name(const std::string& s) {
    if (s == "tanh") return Act::Tanh;
    if (s == "silu") return Act::Silu;
    if (s == "softplus") return Act::Softplus;
    throw ConfigError("unknown activation '" + s + "' (want tanh|silu|softplus)");
}

struct Node {
    Op op = Op::Input;
    Act act = Act::Tanh;
    NodeId a = kNoNode;
    NodeId b = kNoNode;
    double scalar = 0.0;
    bool requires_grad = false;
    Tensor val;
    Tensor grad;  // empty until backward touches this node
};

class Graph {
  public:
    NodeId input(Tensor v) { return push(Op::Input, kNoNode, kNoNode, std::move(v), true); }
    NodeId constant(Tensor v) { return push(Op::Constant, kNoNode, kNoNode, std::move(v), false); }

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        if (va.cols != vb.rows)
            fail_shape("matmul", a, b);
        Tensor out(va.rows, vb.cols);
        matmul_accum_kernel(va.ptr(), va.rows, va.cols, vb.ptr(), vb.cols, out.ptr());
        return push(Op::MatMul, a, b, std::move(out), rg(a) || rg(b));
    }

    NodeId add_bias(NodeId x, NodeId bias) {
        const Tensor& vx = val(x);
        const Tensor& vb = val(bias);
        if (vb.rows != 1 || vb.cols != vx.cols)
            fail_shape("add_bias", x, bias);
        Tensor out = vx;
        for (std::size_t i = 0; i < vx.rows; ++i)
            for (std::size_t j = 0; j < vx.cols; ++j) out.at(i, j) += vb.at(0, j);
        return push(Op::AddBias, x, bias, std::move(out), rg(x) || rg(bias));
    }

    NodeId add(NodeId a, NodeId b) { return binary_same(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary_same(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary_same(Op::Mul, a, b); }

    NodeId col_scale(NodeId x, NodeId w) {
        const Tensor& vx = val(x);
        const Tensor& vw = val(w);
        if (vw.rows != 1 || vw.cols != vx.cols)
            fail_shape("col_scale", x, w);
        Tensor out = vx;
        for (std::size_t i = 0; i < vx.rows; ++i)
            for (std::size_t j = 0; j < vx.cols; ++j) out.at(i, j) *= vw.at(0, j);
        return push(Op::ColScale, x, w, std::move(out), rg(x) || rg(w));
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = val(a);
        for (double& v : out.data) v *= c;
        NodeId id = push(Op::Scale, a, kNoNode, std::move(out), rg(a));
        nodes_[id].scalar = c;
        return id;
    }

    NodeId activation(NodeId a, Act kind) {
        Tensor out = val(a);
        for (double& v : out.data) v = act_val(kind, v);
        NodeId id = push(Op::Act, a, kNoNode, std::move(out), rg(a));
        nodes_[id].act = kind;
        return id;
    }

    NodeId act_grad_mul(NodeId x, NodeId t, Act kind) {
        const Tensor& vx = val(x);
        const Tensor& vt = val(t);
        if (!vx.same_shape(vt))
            fail_shape("act_grad_mul", x, t);
        Tensor out(vx.rows, vx.cols);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] = act_grad(kind, vx.data[i]) * vt.data[i];
        NodeId id = push(Op::ActGradMul, x, t, std::move(out), rg(x) || rg(t));
        nodes_[id].act = kind;
        return id;
    }

    NodeId concat_cols(NodeId a, NodeId b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        if (va.rows != vb.rows)
            fail_shape("concat2", a, b);
        Tensor out(va.rows, va.cols + vb.cols);
        for (std::size_t i = 0; i < va.rows; ++i) {
            for (std::size_t j = 0; j < va.cols; ++j) out.at(i, j) = va.at(i, j);
            for (std::size_t j = 0; j < vb.cols; ++j) out.at(i, va.cols + j) = vb.at(i, j);
        }
        return push(Op::Concat2, a, b, std::move(out), rg(a) || rg(b));
    }

    NodeId row_sum(NodeId a) {
        const Tensor& va = val(a);
        Tensor out(va.rows, 1);
        for (std::size_t i = 0; i < va.rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < va.cols; ++j) s += va.at(i, j);
            out.at(i, 0) = s;
        }
        return push(Op::RowSum, a, kNoNode, std::move(out), rg(a));
    }

    NodeId sum(NodeId a) { return reduce(Op::Sum, a, 1.0); }
    NodeId mean(NodeId a) {
        return reduce(Op::Mean, a, 1.0 / static_cast<double>(val(a).size()));
    }

    NodeId abs(NodeId a) {
        Tensor out = val(a);
        for (double& v : out.data) v = std::abs(v);
        return push(Op::Abs, a, kNoNode, std::move(out), rg(a));
    }

    NodeId square(NodeId a) {
        Tensor out = val(a);
        for (double& v : out.data) v *= v;
        return push(Op::Square, a, kNoNode, std::move(out), rg(a));
    }

    NodeId stop_gradient(NodeId a) {
        return push(Op::StopGrad, a, kNoNode, val(a), false);
    }

    const Tensor& value(NodeId id) const { return nodes_.at(check(id)).val; }

    bool has_grad(NodeId id) const { return nodes_.at(check(id)).grad.size() > 0; }

    const Tensor& grad(NodeId id) const {
        const Node& n = nodes_.at(check(id));
        if (n.grad.size() == 0)
            throw ShapeError("grad requested on node " + std::to_string(id) +
                             " (" + std::string(op_name(n.op)) + ") which backward never reached");
        return n.grad;
    }

    // Reverse pass from `root`. A scalar root seeds with 1; a non-scalar root
    // needs an explicit seed of matching shape.
    void backward(NodeId root, const Tensor* seed = nullptr) {
        Node& rn = nodes_.at(check(root));
        if (!rn.requires_grad)
            throw ShapeError("backward root node " + std::to_string(root) +
                             " does not depend on any differentiable input");
        if (seed != nullptr) {
            if (!seed->same_shape(rn.val))
                throw ShapeError("backward seed shape " + seed->shape_str() +
                                 " != root shape " + rn.val.shape_str());
            accum(root, *seed);
        } else {
            if (rn.val.size() != 1)
                throw ShapeError("backward without seed requires scalar root, got " +
                                 rn.val.shape_str());
            accum(root, Tensor::scalar(1.0));
        }
        for (NodeId id = root; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.size() == 0 || !n.requires_grad) continue;
            backprop_node(id, n);
        }
    }

    // Forward-mode pass: seeds maps primal node -> tangent node (already in
    // the graph). Returns the tangent of `output`, or kNoNode when the output
    // does not depend on any seeded node.
    NodeId tangent(NodeId output, std::span<const std::pair<NodeId, NodeId>> seeds) {
        check(output);
        std::vector<NodeId> tan(static_cast<std::size_t>(output) + 1, kNoNode);
        NodeId lo = output;
        for (const auto& [primal, t] : seeds) {
            check(primal);
            check(t);
            if (primal > output)
                throw ShapeError("tangent seed node id exceeds output id");
            if (!val(primal).same_shape(val(t)))
                throw ShapeError("tangent seed shape mismatch on node " + std::to_string(primal));
            tan[static_cast<std::size_t>(primal)] = t;
            if (primal < lo) lo = primal;
        }
        for (NodeId id = lo + 1; id <= output; ++id)
            tan[static_cast<std::size_t>(id)] = tangent_node(id, tan);
        return tan[static_cast<std::size_t>(output)];
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

  private:
    std::vector<Node> nodes_;

    struct NodeHeader {
        Op op;
        Act act;
        NodeId a;
        NodeId b;
        double scalar;
    };

    NodeHeader header_of(NodeId id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return {n.op, n.act, n.a, n.b, n.scalar};
    }

    NodeId check(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw ShapeError("node id " + std::to_string(id) + " out of range");
        return id;
    }

    const Tensor& val(NodeId id) const { return nodes_[static_cast<std::size_t>(check(id))].val; }
    bool rg(NodeId id) const { return nodes_[static_cast<std::size_t>(check(id))].requires_grad; }

    NodeId push(Op op, NodeId a, NodeId b, Tensor v, bool requires_grad) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.requires_grad = requires_grad;
        n.val = std::move(v);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId binary_same(Op op, NodeId a, NodeId b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        if (!va.same_shape(vb))
            fail_shape(op_name(op), a, b);
        Tensor out(va.rows, va.cols);
        switch (op) {
            case Op::Add:
                for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = va.data[i] + vb.data[i];
                break;
            case Op::Sub:
                for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = va.data[i] - vb.data[i];
                break;
            case Op::Mul:
                for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = va.data[i] * vb.data[i];
                break;
            default: throw ShapeError("binary_same: bad op");
        }
        return push(op, a, b, std::move(out), rg(a) || rg(b));
    }

    NodeId reduce(Op op, NodeId a, double w) {
        const Tensor& va = val(a);
        double s = 0.0;
        for (double v : va.data) s += v;
        return push(op, a, kNoNode, Tensor::scalar(s * w), rg(a));
    }

    [[noreturn]] void fail_shape(const char* what, NodeId a, NodeId b) const {
        throw ShapeError(std::string(what) + " shape mismatch at node " +
                         std::to_string(static_cast<long>(nodes_.size())) + ": arg" +
                         std::to_string(a) + "=" + val(a).shape_str() + ", arg" +
                         std::to_string(b) + "=" + val(b).shape_str());
    }

    void accum(NodeId id, const Tensor& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = Tensor(n.val.rows, n.val.cols);
        for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
    }

    void accum_raw(NodeId id, const Tensor& g) {
        // like accum but caller already built the exact-shape gradient
        accum(id, g);
    }

    void backprop_node(NodeId id, Node& n) {
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::Input:
            case Op::Constant:
            case Op::StopGrad:
                break;
            case Op::MatMul: {
                const Tensor& va = val(n.a);
                const Tensor& vb = val(n.b);
                if (rg(n.a)) {
                    Tensor ga(va.rows, va.cols);
                    // ga[i,k] = sum_j g[i,j] vb[k,j]
                    for (std::size_t i = 0; i < va.rows; ++i)
                        for (std::size_t k = 0; k < va.cols; ++k) {
                            double s = 0.0;
                            for (std::size_t j = 0; j < vb.cols; ++j)
                                s += g.at(i, j) * vb.at(k, j);
                            ga.at(i, k) = s;
                        }
                    accum(n.a, ga);
                }
                if (rg(n.b)) {
                    Tensor gb(vb.rows, vb.cols);
                    // gb[k,j] = sum_i va[i,k] g[i,j]
                    for (std::size_t i = 0; i < va.rows; ++i)
                        for (std::size_t k = 0; k < va.cols; ++k) {
                            const double aik = va.at(i, k);
                            for (std::size_t j = 0; j < vb.cols; ++j)
                                gb.at(k, j) += aik * g.at(i, j);
                        }
                    accum(n.b, gb);
                }
                break;
            }
            case Op::AddBias: {
                if (rg(n.a)) accum(n.a, g);
                if (rg(n.b)) {
                    const Tensor& vb = val(n.b);
                    Tensor gb(1, vb.cols);
                    for (std::size_t i = 0; i < g.rows; ++i)
                        for (std::size_t j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
                    accum(n.b, gb);
                }
                break;
            }
            case Op::Add:
                if (rg(n.a)) accum(n.a, g);
                if (rg(n.b)) accum(n.b, g);
                break;
            case Op::Sub: {
                if (rg(n.a)) accum(n.a, g);
                if (rg(n.b)) {
                    Tensor gb = g;
                    for (double& v : gb.data) v = -v;
                    accum(n.b, gb);
                }
                break;
            }
            case Op::Mul: {
                if (rg(n.a)) {
                    Tensor ga = g;
                    const Tensor& vb = val(n.b);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] *= vb.data[i];
                    accum(n.a, ga);
                }
                if (rg(n.b)) {
                    Tensor gb = g;
                    const Tensor& va = val(n.a);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] *= va.data[i];
                    accum(n.b, gb);
                }
                break;
            }
            case Op::ColScale: {
                const Tensor& vx = val(n.a);
                const Tensor& vw = val(n.b);
                if (rg(n.a)) {
                    Tensor ga = g;
                    for (std::size_t i = 0; i < ga.rows; ++i)
                        for (std::size_t j = 0; j < ga.cols; ++j) ga.at(i, j) *= vw.at(0, j);
                    accum(n.a, ga);
                }
                if (rg(n.b)) {
                    Tensor gw(1, vw.cols);
                    for (std::size_t i = 0; i < g.rows; ++i)
                        for (std::size_t j = 0; j < g.cols; ++j)
                            gw.at(0, j) += g.at(i, j) * vx.at(i, j);
                    accum(n.b, gw);
                }
                break;
            }
            case Op::Scale: {
                if (rg(n.a)) {
                    Tensor ga = g;
                    for (double& v : ga.data) v *= n.scalar;
                    accum(n.a, ga);
                }
                break;
            }
            case Op::Act: {
                if (rg(n.a)) {
                    const Tensor& vx = val(n.a);
                    Tensor ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga.data[i] *= act_grad(n.act, vx.data[i]);
                    accum(n.a, ga);
                }
                break;
            }
            case Op::ActGradMul: {
                const Tensor& vx = val(n.a);
                const Tensor& vt = val(n.b);
                if (rg(n.a)) {
                    Tensor ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                        ga.data[i] *= act_curv(n.act, vx.data[i]) * vt.data[i];
                    accum(n.a, ga);
                }
                if (rg(n.b)) {
                    Tensor gt = g;
                    for (std::size_t i = 0; i < gt.size(); ++i)
                        gt.data[i] *= act_grad(n.act, vx.data[i]);
                    accum(n.b, gt);
                }
                break;
            }
            case Op::Concat2: {
                const Tensor& va = val(n.a);
                const Tensor& vb = val(n.b);
                if (rg(n.a)) {
                    Tensor ga(va.rows, va.cols);
                    for (std::size_t i = 0; i < va.rows; ++i)
                        for (std::size_t j = 0; j < va.cols; ++j) ga.at(i, j) = g.at(i, j);
                    accum(n.a, ga);
                }
                if (rg(n.b)) {
                    Tensor gb(vb.rows, vb.cols);
                    for (std::size_t i = 0; i < vb.rows; ++i)
                        for (std::size_t j = 0; j < vb.cols; ++j)
                            gb.at(i, j) = g.at(i, va.cols + j);
                    accum(n.b, gb);
                }
                break;
            }
            case Op::RowSum: {
                if (rg(n.a)) {
                    const Tensor& va = val(n.a);
                    Tensor ga(va.rows, va.cols);
                    for (std::size_t i = 0; i < va.rows; ++i)
                        for (std::size_t j = 0; j < va.cols; ++j) ga.at(i, j) = g.at(i, 0);
                    accum(n.a, ga);
                }
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                if (rg(n.a)) {
                    const Tensor& va = val(n.a);
                    const double w = (n.op == Op::Mean)
                                         ? g.data[0] / static_cast<double>(va.size())
                                         : g.data[0];
                    Tensor ga = Tensor::full(va.rows, va.cols, w);
                    accum(n.a, ga);
                }
                break;
            }
            case Op::Abs: {
                if (rg(n.a)) {
                    const Tensor& vx = val(n.a);
                    Tensor ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i) {
                        const double x = vx.data[i];
                        // subgradient 0 at the kink
                        ga.data[i] *= (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                    }
                    accum(n.a, ga);
                }
                break;
            }
            case Op::Square: {
                if (rg(n.a)) {
                    const Tensor& vx = val(n.a);
                    Tensor ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] *= 2.0 * vx.data[i];
                    accum(n.a, ga);
                }
                break;
            }
        }
        (void)id;
    }

    NodeId tangent_node(NodeId id, std::vector<NodeId>& tan) {
        // Copy the header: creating tangent nodes below grows nodes_ and would
        // invalidate a reference into it.
        const NodeHeader n = header_of(id);
        const NodeId ta = (n.a >= 0 && n.a <= id) ? tan[static_cast<std::size_t>(n.a)] : kNoNode;
        const NodeId tb = (n.b >= 0 && n.b <= id) ? tan[static_cast<std::size_t>(n.b)] : kNoNode;
        if (ta == kNoNode && tb == kNoNode) return kNoNode;
        switch (n.op) {
            case Op::Input:
            case Op::Constant:
                return kNoNode;
            case Op::MatMul: {
                NodeId part_a = (ta != kNoNode) ? matmul(ta, n.b) : kNoNode;
                NodeId part_b = (tb != kNoNode) ? matmul(n.a, tb) : kNoNode;
                return combine(part_a, part_b);
            }
            case Op::AddBias: {
                if (ta != kNoNode && tb != kNoNode) return add_bias(ta, tb);
                if (ta != kNoNode) return ta;
                const Tensor& vx = val(n.a);
                return add_bias(constant(Tensor::zeros(vx.rows, vx.cols)), tb);
            }
            case Op::Add: {
                if (ta != kNoNode && tb != kNoNode) return add(ta, tb);
                return ta != kNoNode ? ta : tb;
            }
            case Op::Sub: {
                if (ta != kNoNode && tb != kNoNode) return sub(ta, tb);
                if (ta != kNoNode) return ta;
                return scale(tb, -1.0);
            }
            case Op::Mul: {
                NodeId part_a = (ta != kNoNode) ? mul(ta, n.b) : kNoNode;
                NodeId part_b = (tb != kNoNode) ? mul(n.a, tb) : kNoNode;
                return combine(part_a, part_b);
            }
            case Op::ColScale: {
                NodeId part_a = (ta != kNoNode) ? col_scale(ta, n.b) : kNoNode;
                NodeId part_b = (tb != kNoNode) ? col_scale(n.a, tb) : kNoNode;
                return combine(part_a, part_b);
            }
            case Op::Scale:
                return scale(ta, n.scalar);
            case Op::Act:
                return act_grad_mul(n.a, ta, n.act);
            case Op::ActGradMul:
                throw UnsupportedError(
                    "tangent through act_grad_mul would need a second-order rule; "
                    "restructure the computation so tangents run over first-order nodes only");
            case Op::Concat2: {
                NodeId la = ta, lb = tb;
                if (la == kNoNode) {
                    const Tensor& va = val(n.a);
                    la = constant(Tensor::zeros(va.rows, va.cols));
                }
                if (lb == kNoNode) {
                    const Tensor& vb = val(n.b);
                    lb = constant(Tensor::zeros(vb.rows, vb.cols));
                }
                return concat_cols(la, lb);
            }
            case Op::RowSum:
                return row_sum(ta);
            case Op::Sum:
                return sum(ta);
            case Op::Mean:
                return mean(ta);
            case Op::Abs: {
                const Tensor& vx = val(n.a);
                Tensor sgn(vx.rows, vx.cols);
                for (std::size_t i = 0; i < sgn.size(); ++i) {
                    const double x = vx.data[i];
                    sgn.data[i] = (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                }
                return mul(constant(std::move(sgn)), ta);
            }
            case Op::Square:
                return scale(mul(n.a, ta), 2.0);
            case Op::StopGrad:
                return stop_gradient(ta);
        }
        return kNoNode;
    }

    NodeId combine(NodeId a, NodeId b) {
        if (a != kNoNode && b != kNoNode) return add(a, b);
        return a != kNoNode ? a : b;
    }
};

} // namespace fdm::ad
