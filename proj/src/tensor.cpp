#include "iglab/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace iglab {

Tensor Tensor::zeros(std::vector<int> shape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return Tensor(std::move(shape), Vec(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.data) v = rng.normal() * stddev;
    return t;
}

Tensor Tensor::from_vec(std::vector<int> shape, Vec v) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    if (n != static_cast<int64_t>(v.size()))
        throw std::runtime_error("from_vec: shape does not match data length");
    return Tensor(std::move(shape), std::move(v));
}

int64_t Tensor::size() const {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

NodeRef Tape::push(Node n) {
    check_finite(n, "forward");
    n.grad.assign(n.value.size(), 0.0);
    nodes_.push_back(std::move(n));
    return NodeRef{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_finite(const Node& n, const char* where) const {
    for (double v : n.value)
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("tape: non-finite value in ") + where);
}

NodeRef Tape::leaf(const Tensor& t, bool trainable, std::string name) {
    Node n;
    n.op = Op::Leaf;
    n.shape = t.shape;
    n.value = t.data;
    n.trainable = trainable;
    n.name = std::move(name);
    return push(std::move(n));
}

NodeRef Tape::matmul(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.shape.size() != 2) throw std::runtime_error("matmul: lhs must be 2-D");
    int m = na.shape[0], k = na.shape[1];
    bool vec_rhs = nb.shape.size() == 1;
    int kb = nb.shape[0];
    int ncols = vec_rhs ? 1 : nb.shape[1];
    if (!vec_rhs && nb.shape.size() != 2) throw std::runtime_error("matmul: rhs must be 1-D or 2-D");
    if (kb != k) throw std::runtime_error("matmul: inner dimensions disagree");

    Node n;
    n.op = Op::MatMul;
    n.shape = vec_rhs ? std::vector<int>{m} : std::vector<int>{m, ncols};
    n.value.assign(static_cast<size_t>(m) * ncols, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < ncols; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += na.value[i * k + p] * nb.value[p * ncols + j];
            n.value[i * ncols + j] = acc;
        }
    n.args[0] = a.id;
    n.args[1] = b.id;
    n.nargs = 2;
    return push(std::move(n));
}

NodeRef Tape::binary_same_shape(Op op, NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (na.shape != nb.shape) throw std::runtime_error("tape: shape mismatch in elementwise op");
    Node n;
    n.op = op;
    n.shape = na.shape;
    n.value.resize(na.value.size());
    for (size_t i = 0; i < n.value.size(); ++i) {
        switch (op) {
            case Op::Add: n.value[i] = na.value[i] + nb.value[i]; break;
            case Op::Sub: n.value[i] = na.value[i] - nb.value[i]; break;
            case Op::Mul: n.value[i] = na.value[i] * nb.value[i]; break;
            case Op::Minimum: n.value[i] = std::min(na.value[i], nb.value[i]); break;
            default: throw std::runtime_error("tape: bad binary op");
        }
    }
    n.args[0] = a.id;
    n.args[1] = b.id;
    n.nargs = 2;
    return push(std::move(n));
}

NodeRef Tape::add(NodeRef a, NodeRef b) { return binary_same_shape(Op::Add, a, b); }
NodeRef Tape::sub(NodeRef a, NodeRef b) { return binary_same_shape(Op::Sub, a, b); }
NodeRef Tape::mul(NodeRef a, NodeRef b) { return binary_same_shape(Op::Mul, a, b); }
NodeRef Tape::minimum(NodeRef a, NodeRef b) { return binary_same_shape(Op::Minimum, a, b); }

NodeRef Tape::unary(Op op, NodeRef a) {
    const Node& na = node(a);
    Node n;
    n.op = op;
    n.shape = na.shape;
    n.value.resize(na.value.size());
    for (size_t i = 0; i < n.value.size(); ++i) {
        switch (op) {
            case Op::Tanh: n.value[i] = std::tanh(na.value[i]); break;
            case Op::Relu: n.value[i] = na.value[i] > 0.0 ? na.value[i] : 0.0; break;
            case Op::Exp: n.value[i] = std::exp(na.value[i]); break;
            case Op::StopGradient: n.value[i] = na.value[i]; break;
            default: throw std::runtime_error("tape: bad unary op");
        }
    }
    n.args[0] = a.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::tanh(NodeRef a) { return unary(Op::Tanh, a); }
NodeRef Tape::relu(NodeRef a) { return unary(Op::Relu, a); }
NodeRef Tape::exp(NodeRef a) { return unary(Op::Exp, a); }
NodeRef Tape::stop_gradient(NodeRef a) { return unary(Op::StopGradient, a); }

NodeRef Tape::scale(NodeRef a, double c) {
    const Node& na = node(a);
    Node n;
    n.op = Op::Scale;
    n.shape = na.shape;
    n.value.resize(na.value.size());
    for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = na.value[i] * c;
    n.aux0 = c;
    n.args[0] = a.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::clamp(NodeRef a, double lo, double hi) {
    const Node& na = node(a);
    Node n;
    n.op = Op::Clamp;
    n.shape = na.shape;
    n.value.resize(na.value.size());
    for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::clamp(na.value[i], lo, hi);
    n.aux0 = lo;
    n.aux1 = hi;
    n.args[0] = a.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::sum(NodeRef a) {
    const Node& na = node(a);
    double acc = 0.0;
    for (double v : na.value) acc += v;
    Node n;
    n.op = Op::Sum;
    n.shape = {1};
    n.value = {acc};
    n.args[0] = a.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::mean(NodeRef a) {
    const Node& na = node(a);
    double acc = 0.0;
    for (double v : na.value) acc += v;
    Node n;
    n.op = Op::Mean;
    n.shape = {1};
    n.value = {acc / static_cast<double>(na.value.size())};
    n.args[0] = a.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::concat(std::span<const NodeRef> parts) {
    if (parts.empty() || parts.size() > 8) throw std::runtime_error("concat: need 1..8 parts");
    Node n;
    n.op = Op::Concat;
    size_t total = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        const Node& p = node(parts[i]);
        if (p.shape.size() != 1) throw std::runtime_error("concat: 1-D inputs only");
        n.args[i] = parts[i].id;
        total += p.value.size();
    }
    n.nargs = static_cast<int>(parts.size());
    n.shape = {static_cast<int>(total)};
    n.value.reserve(total);
    for (size_t i = 0; i < parts.size(); ++i) {
        const Node& p = node(parts[i]);
        n.value.insert(n.value.end(), p.value.begin(), p.value.end());
    }
    return push(std::move(n));
}

NodeRef Tape::slice(NodeRef a, int begin, int len) {
    const Node& na = node(a);
    if (na.shape.size() != 1) throw std::runtime_error("slice: 1-D input only");
    if (begin < 0 || len < 0 || begin + len > na.shape[0]) throw std::runtime_error("slice: range out of bounds");
    Node n;
    n.op = Op::Slice;
    n.shape = {len};
    n.value.assign(na.value.begin() + begin, na.value.begin() + begin + len);
    n.iaux0 = begin;
    n.iaux1 = len;
    n.args[0] = a.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::softmax_cross_entropy(NodeRef logits, int target) {
    const Node& nl = node(logits);
    if (nl.shape.size() != 1) throw std::runtime_error("softmax_cross_entropy: 1-D logits only");
    int v = nl.shape[0];
    if (target < 0 || target >= v) throw std::runtime_error("softmax_cross_entropy: target out of range");
    double m = nl.value[0];
    for (double x : nl.value) m = std::max(m, x);
    double z = 0.0;
    for (double x : nl.value) z += std::exp(x - m);
    double lse = m + std::log(z);
    Node n;
    n.op = Op::SoftmaxCrossEntropy;
    n.shape = {1};
    n.value = {lse - nl.value[target]};
    n.iaux0 = target;
    n.aux0 = lse;
    n.args[0] = logits.id;
    n.nargs = 1;
    return push(std::move(n));
}

NodeRef Tape::gaussian_log_density(NodeRef x, NodeRef mu, double variance) {
    const Node& nx = node(x);
    const Node& nm = node(mu);
    if (nx.shape != nm.shape) throw std::runtime_error("gaussian_log_density: shape mismatch");
    if (variance <= 0.0) throw std::runtime_error("gaussian_log_density: variance must be positive");
    double acc = 0.0;
    for (size_t i = 0; i < nx.value.size(); ++i) {
        double d = nx.value[i] - nm.value[i];
        acc += d * d;
    }
    Node n;
    n.op = Op::GaussianLogDensity;
    n.shape = {1};
    n.value = {-acc / (2.0 * variance)};
    n.aux0 = variance;
    n.args[0] = x.id;
    n.args[1] = mu.id;
    n.nargs = 2;
    return push(std::move(n));
}

double Tape::scalar(NodeRef r) const {
    const Node& n = node(r);
    if (n.value.size() != 1) throw std::runtime_error("tape: scalar() on non-scalar node");
    return n.value[0];
}

void Tape::backward(NodeRef loss) {
    Node& l = node(loss);
    if (l.value.size() != 1) throw std::runtime_error("backward: loss must be scalar");
    if (!std::isfinite(l.value[0])) throw std::runtime_error("backward: loss is not finite");
    l.grad[0] += 1.0;

    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        switch (n.op) {
            case Op::Leaf:
            case Op::StopGradient:
                break;
            case Op::MatMul: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                Node& b = nodes_[static_cast<size_t>(n.args[1])];
                int m = a.shape[0], k = a.shape[1];
                int ncols = b.shape.size() == 1 ? 1 : b.shape[1];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < ncols; ++j) {
                        double g = n.grad[i * ncols + j];
                        if (g == 0.0) continue;
                        for (int p = 0; p < k; ++p) {
                            a.grad[i * k + p] += g * b.value[p * ncols + j];
                            b.grad[p * ncols + j] += g * a.value[i * k + p];
                        }
                    }
                break;
            }
            case Op::Add: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                Node& b = nodes_[static_cast<size_t>(n.args[1])];
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    a.grad[i] += n.grad[i];
                    b.grad[i] += n.grad[i];
                }
                break;
            }
            case Op::Sub: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                Node& b = nodes_[static_cast<size_t>(n.args[1])];
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    a.grad[i] += n.grad[i];
                    b.grad[i] -= n.grad[i];
                }
                break;
            }
            case Op::Mul: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                Node& b = nodes_[static_cast<size_t>(n.args[1])];
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    a.grad[i] += n.grad[i] * b.value[i];
                    b.grad[i] += n.grad[i] * a.value[i];
                }
                break;
            }
            case Op::Minimum: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                Node& b = nodes_[static_cast<size_t>(n.args[1])];
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    if (a.value[i] <= b.value[i])
                        a.grad[i] += n.grad[i];
                    else
                        b.grad[i] += n.grad[i];
                }
                break;
            }
            case Op::Scale: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i] * n.aux0;
                break;
            }
            case Op::Tanh: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (size_t i = 0; i < n.grad.size(); ++i)
                    a.grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
                break;
            }
            case Op::Relu: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (size_t i = 0; i < n.grad.size(); ++i)
                    if (a.value[i] > 0.0) a.grad[i] += n.grad[i];
                break;
            }
            case Op::Exp: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i] * n.value[i];
                break;
            }
            case Op::Clamp: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (size_t i = 0; i < n.grad.size(); ++i)
                    if (a.value[i] >= n.aux0 && a.value[i] <= n.aux1) a.grad[i] += n.grad[i];
                break;
            }
            case Op::Sum: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += n.grad[0];
                break;
            }
            case Op::Mean: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                double g = n.grad[0] / static_cast<double>(a.grad.size());
                for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g;
                break;
            }
            case Op::Concat: {
                size_t off = 0;
                for (int c = 0; c < n.nargs; ++c) {
                    Node& a = nodes_[static_cast<size_t>(n.args[c])];
                    for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += n.grad[off + i];
                    off += a.grad.size();
                }
                break;
            }
            case Op::Slice: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                for (int i = 0; i < n.iaux1; ++i)
                    a.grad[static_cast<size_t>(n.iaux0 + i)] += n.grad[static_cast<size_t>(i)];
                break;
            }
            case Op::SoftmaxCrossEntropy: {
                Node& a = nodes_[static_cast<size_t>(n.args[0])];
                double g = n.grad[0];
                if (g != 0.0) {
                    for (size_t i = 0; i < a.grad.size(); ++i) {
                        double p = std::exp(a.value[i] - n.aux0);
                        a.grad[i] += g * (p - (static_cast<int>(i) == n.iaux0 ? 1.0 : 0.0));
                    }
                }
                break;
            }
            case Op::GaussianLogDensity: {
                Node& x = nodes_[static_cast<size_t>(n.args[0])];
                Node& mu = nodes_[static_cast<size_t>(n.args[1])];
                double g = n.grad[0];
                if (g != 0.0) {
                    for (size_t i = 0; i < x.grad.size(); ++i) {
                        double d = (x.value[i] - mu.value[i]) / n.aux0;
                        x.grad[i] -= g * d;
                        mu.grad[i] += g * d;
                    }
                }
                break;
            }
        }
    }

    // Constants are leaves, so zeroing their incidental accumulation changes
    // nothing upstream; it keeps "gradient into a constant is exactly 0" true
    // for frozen tensors registered as constants.
    for (Node& n : nodes_)
        if (n.op == Op::Leaf && !n.trainable) n.grad.assign(n.grad.size(), 0.0);

    for (const Node& n : nodes_)
        if (n.trainable)
            for (double g : n.grad)
                if (!std::isfinite(g)) throw std::runtime_error("backward: non-finite gradient");
}

}  // namespace iglab
