#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iglab/rng.hpp"

namespace iglab {

using Vec = std::vector<double>;

struct Tensor {
    std::vector<int> shape;
    Vec data;  // row-major

    Tensor() = default;
    Tensor(std::vector<int> s, Vec d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(std::vector<int> shape);
    static Tensor from_vec(Vec v) {
        // Size must be read before the move: argument evaluation order would
        // otherwise be free to empty v first.
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }
    static Tensor from_vec(std::vector<int> shape, Vec v);
    static Tensor scalar(double v) { return Tensor({1}, Vec{v}); }
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev);

    int64_t size() const;
    int rows() const { return shape.at(0); }
    int cols() const { return shape.size() > 1 ? shape.at(1) : 1; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Node handle on a Tape. Valid only for the tape that produced it.
struct NodeRef {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Relu,
    Exp,
    Sum,
    Mean,
    Concat,
    Slice,
    SoftmaxCrossEntropy,
    GaussianLogDensity,
    Clamp,
    Minimum,
    StopGradient,
};

// Reverse-mode autodiff over a flat op record. Nodes are appended in
// evaluation order, so walking ids high-to-low visits the graph in reverse
// topological order exactly once. One tape serves one forward/backward
// cycle; call reset() (or destroy it) before reusing.
class Tape {
public:
    struct Node {
        Op op = Op::Leaf;
        std::vector<int> shape;
        Vec value;
        Vec grad;
        std::array<int, 8> args{-1, -1, -1, -1, -1, -1, -1, -1};
        int nargs = 0;
        double aux0 = 0.0, aux1 = 0.0;  // op-specific scalars (clip bounds, scale, variance)
        int iaux0 = 0, iaux1 = 0;       // op-specific ints (target index, slice range)
        bool trainable = false;
        std::string name;  // set for params; used in diagnostics only
    };

    NodeRef constant(const Tensor& t) { return leaf(t, false, ""); }
    NodeRef constant(const Vec& v) { return leaf(Tensor({static_cast<int>(v.size())}, v), false, ""); }
    NodeRef param(const Tensor& t, std::string name = "") { return leaf(t, true, std::move(name)); }

    // [m,k] x [k,n] -> [m,n]; a 1-D rhs of length k is treated as [k,1] and
    // yields a 1-D result of length m.
    NodeRef matmul(NodeRef a, NodeRef b);
    NodeRef add(NodeRef a, NodeRef b);
    NodeRef sub(NodeRef a, NodeRef b);
    NodeRef mul(NodeRef a, NodeRef b);
    NodeRef scale(NodeRef a, double c);
    NodeRef tanh(NodeRef a);
    NodeRef relu(NodeRef a);
    NodeRef exp(NodeRef a);
    NodeRef sum(NodeRef a);
    NodeRef mean(NodeRef a);
    NodeRef concat(std::span<const NodeRef> parts);
    NodeRef slice(NodeRef a, int begin, int len);
    // scalar: logsumexp(logits) - logits[target]  (== -log softmax[target])
    NodeRef softmax_cross_entropy(NodeRef logits, int target);
    // scalar: -||x - mu||^2 / (2 * variance), normalization constant dropped
    NodeRef gaussian_log_density(NodeRef x, NodeRef mu, double variance);
    NodeRef clamp(NodeRef a, double lo, double hi);
    NodeRef minimum(NodeRef a, NodeRef b);
    NodeRef stop_gradient(NodeRef a);

    // Seeds d(loss)/d(loss) = 1 and accumulates grads into every node.
    // loss must be scalar; throws on non-scalar loss or non-finite values.
    void backward(NodeRef loss);

    const Vec& value(NodeRef r) const { return node(r).value; }
    const Vec& grad(NodeRef r) const { return node(r).grad; }
    double scalar(NodeRef r) const;
    const std::vector<int>& shape(NodeRef r) const { return node(r).shape; }
    Tensor grad_tensor(NodeRef r) const { return Tensor(node(r).shape, node(r).grad); }

    size_t num_nodes() const { return nodes_.size(); }
    void reset() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;

    NodeRef leaf(const Tensor& t, bool trainable, std::string name);
    NodeRef push(Node n);
    Node& node(NodeRef r) { return nodes_.at(static_cast<size_t>(r.id)); }
    const Node& node(NodeRef r) const { return nodes_.at(static_cast<size_t>(r.id)); }
    NodeRef unary(Op op, NodeRef a);
    NodeRef binary_same_shape(Op op, NodeRef a, NodeRef b);
    void check_finite(const Node& n, const char* where) const;
};

}  // namespace iglab
