#include "doctest.h"
#include "iglab/rng.hpp"
#include "iglab/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace iglab;

namespace {

// Scalar function of a flat parameter vector, used for central differences.
using ScalarFn = std::function<double(const Vec&)>;

double central_diff(const ScalarFn& f, Vec x, size_t i, double eps) {
    Vec hi = x, lo = x;
    hi[i] += eps;
    lo[i] -= eps;
    return (f(hi) - f(lo)) / (2.0 * eps);
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Builds a graph via `build`, backprops, and compares the gradient of every
// element of the single parameter against central differences.
void check_op_gradient(const ScalarFn& eval, const Vec& x0, Tape& tape,
                       NodeRef param, NodeRef loss, double tol = 1e-6) {
    tape.backward(loss);
    const Tensor& g = tape.grad_tensor(param);
    for (size_t i = 0; i < x0.size(); i++) {
        double fd = central_diff(eval, x0, i, 1e-5);
        CHECK_MESSAGE(rel_err(g.data[i], fd) < tol,
                      "elem " << i << " analytic " << g.data[i] << " fd " << fd);
    }
}

Vec random_vec(Rng& rng, size_t n, double scale = 1.0) {
    Vec v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

} // namespace

TEST_CASE("sum loss gives unit gradients") {
    Tape tape;
    NodeRef x = tape.param(Tensor::from_vec({3}, {1.0, -2.0, 0.5}), "x");
    NodeRef s = tape.sum(x);
    tape.backward(s);
    CHECK(tape.scalar(s) == doctest::Approx(-0.5));
    const Tensor& g = tape.grad_tensor(x);
    for (double v : g.data) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("every primitive matches central finite differences") {
    // Property test: 100 random seeds, each exercising all differentiable
    // primitives on small random tensors.
    for (uint64_t seed = 0; seed < 100; seed++) {
        Rng rng(derive_seed(1000, seed));

        SUBCASE("") {} // keep doctest happy about loop structure
        {
            // matmul [2,3]x[3,2] -> sum
            Vec a0 = random_vec(rng, 6), b0 = random_vec(rng, 6);
            auto eval_a = [&](const Vec& v) {
                Tape t;
                NodeRef a = t.param(Tensor::from_vec({2, 3}, v), "a");
                NodeRef b = t.constant(Tensor::from_vec({3, 2}, b0));
                return t.scalar(t.sum(t.matmul(a, b)));
            };
            Tape t;
            NodeRef a = t.param(Tensor::from_vec({2, 3}, a0), "a");
            NodeRef b = t.constant(Tensor::from_vec({3, 2}, b0));
            NodeRef loss = t.sum(t.matmul(a, b));
            check_op_gradient(eval_a, a0, t, a, loss);
        }
        {
            // matmul gradient wrt rhs, with 1-D rhs
            Vec a0 = random_vec(rng, 6), b0 = random_vec(rng, 3);
            auto eval_b = [&](const Vec& v) {
                Tape t;
                NodeRef a = t.constant(Tensor::from_vec({2, 3}, a0));
                NodeRef b = t.param(Tensor::from_vec({3}, v), "b");
                return t.scalar(t.sum(t.matmul(a, b)));
            };
            Tape t;
            NodeRef a = t.constant(Tensor::from_vec({2, 3}, a0));
            NodeRef b = t.param(Tensor::from_vec({3}, b0), "b");
            NodeRef loss = t.sum(t.matmul(a, b));
            check_op_gradient(eval_b, b0, t, b, loss);
        }
        {
            // add, sub, mul chained
            Vec x0 = random_vec(rng, 5), y0 = random_vec(rng, 5);
            auto eval = [&](const Vec& v) {
                Tape t;
                NodeRef x = t.param(Tensor::from_vec({5}, v), "x");
                NodeRef y = t.constant(Tensor::from_vec({5}, y0));
                NodeRef z = t.mul(t.add(x, y), t.sub(x, y));
                return t.scalar(t.sum(z));
            };
            Tape t;
            NodeRef x = t.param(Tensor::from_vec({5}, x0), "x");
            NodeRef y = t.constant(Tensor::from_vec({5}, y0));
            NodeRef loss = t.sum(t.mul(t.add(x, y), t.sub(x, y)));
            check_op_gradient(eval, x0, t, x, loss);
        }
        {
            // tanh -> scale -> mean
            Vec x0 = random_vec(rng, 7);
            auto eval = [&](const Vec& v) {
                Tape t;
                NodeRef x = t.param(Tensor::from_vec({7}, v), "x");
                return t.scalar(t.mean(t.scale(t.tanh(x), 2.5)));
            };
            Tape t;
            NodeRef x = t.param(Tensor::from_vec({7}, x0), "x");
            NodeRef loss = t.mean(t.scale(t.tanh(x), 2.5));
            check_op_gradient(eval, x0, t, x, loss);
        }
        {
            // relu (kept away from the kink) and exp
            Vec x0 = random_vec(rng, 6);
            for (auto& v : x0)
                if (std::abs(v) < 0.05) v = 0.1; // avoid non-differentiable point
            auto eval = [&](const Vec& v) {
                Tape t;
                NodeRef x = t.param(Tensor::from_vec({6}, v), "x");
                return t.scalar(t.sum(t.exp(t.scale(t.relu(x), 0.5))));
            };
            Tape t;
            NodeRef x = t.param(Tensor::from_vec({6}, x0), "x");
            NodeRef loss = t.sum(t.exp(t.scale(t.relu(x), 0.5)));
            check_op_gradient(eval, x0, t, x, loss);
        }
        {
            // concat + slice round trip
            Vec x0 = random_vec(rng, 4);
            Vec y0 = random_vec(rng, 3);
            auto eval = [&](const Vec& v) {
                Tape t;
                NodeRef x = t.param(Tensor::from_vec({4}, v), "x");
                NodeRef y = t.constant(Tensor::from_vec({3}, y0));
                std::vector<NodeRef> parts{x, y};
                NodeRef c = t.concat(parts);
                NodeRef s = t.slice(c, 1, 5); // overlaps both halves
                return t.scalar(t.sum(t.mul(s, s)));
            };
            Tape t;
            NodeRef x = t.param(Tensor::from_vec({4}, x0), "x");
            NodeRef y = t.constant(Tensor::from_vec({3}, y0));
            std::vector<NodeRef> parts{x, y};
            NodeRef s = t.slice(t.concat(parts), 1, 5);
            NodeRef loss = t.sum(t.mul(s, s));
            check_op_gradient(eval, x0, t, x, loss);
        }
        {
            // softmax cross entropy wrt logits
            Vec z0 = random_vec(rng, 5);
            int target = int(seed % 5);
            auto eval = [&](const Vec& v) {
                Tape t;
                NodeRef z = t.param(Tensor::from_vec({5}, v), "z");
                return t.scalar(t.softmax_cross_entropy(z, target));
            };
            Tape t;
            NodeRef z = t.param(Tensor::from_vec({5}, z0), "z");
            NodeRef loss = t.softmax_cross_entropy(z, target);
            check_op_gradient(eval, z0, t, z, loss);
        }
        {
            // gaussian log density wrt both x and mu
            Vec x0 = random_vec(rng, 4);
            Vec m0 = random_vec(rng, 4);
            double var = 0.3 + rng.uniform();
            auto eval_mu = [&](const Vec& v) {
                Tape t;
                NodeRef x = t.constant(Tensor::from_vec({4}, x0));
                NodeRef mu = t.param(Tensor::from_vec({4}, v), "mu");
                return t.scalar(t.gaussian_log_density(x, mu, var));
            };
            Tape t;
            NodeRef x = t.constant(Tensor::from_vec({4}, x0));
            NodeRef mu = t.param(Tensor::from_vec({4}, m0), "mu");
            NodeRef loss = t.gaussian_log_density(x, mu, var);
            check_op_gradient(eval_mu, m0, t, mu, loss);
        }
        {
            // clamp away from its edges, minimum against a constant
            Vec x0 = random_vec(rng, 5, 0.4); // keep inside [-2,2]
            for (auto& v : x0)
                if (std::abs(std::abs(v) - 1.0) < 0.05) v *= 0.8;
            auto eval = [&](const Vec& v) {
                Tape t;
                NodeRef x = t.param(Tensor::from_vec({5}, v), "x");
                NodeRef c = t.clamp(x, -1.0, 1.0);
                NodeRef m = t.minimum(c, t.constant(Tensor::from_vec(
                                             {5}, {0.7, 0.7, 0.7, 0.7, 0.7})));
                return t.scalar(t.sum(t.mul(m, m)));
            };
            Tape t;
            NodeRef x = t.param(Tensor::from_vec({5}, x0), "x");
            NodeRef c = t.clamp(x, -1.0, 1.0);
            NodeRef m = t.minimum(
                c, t.constant(Tensor::from_vec({5}, {0.7, 0.7, 0.7, 0.7, 0.7})));
            NodeRef loss = t.sum(t.mul(m, m));
            // FD straddles clamp/min switch points occasionally; loose tol.
            check_op_gradient(eval, x0, t, x, loss, 1e-4);
        }
    }
}

TEST_CASE("softmax cross entropy value matches log-sum-exp reference") {
    Vec z0 = {1.0, 2.0, 3.0, 0.5};
    int target = 2;
    Tape t;
    NodeRef z = t.param(Tensor::from_vec({4}, z0), "z");
    NodeRef loss = t.softmax_cross_entropy(z, target);

    double mx = 3.0;
    double lse = 0.0;
    for (double v : z0) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    CHECK(t.scalar(loss) == doctest::Approx(lse - z0[target]).epsilon(1e-12));

    // Gradient is softmax(z) - onehot(target).
    t.backward(loss);
    const Tensor& g = t.grad_tensor(z);
    for (size_t i = 0; i < z0.size(); i++) {
        double p = std::exp(z0[i] - lse);
        double expect = p - (int(i) == target ? 1.0 : 0.0);
        CHECK(g.data[i] == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("gaussian log density drops the normalization constant") {
    Vec x0 = {0.5, -1.0};
    Vec m0 = {0.0, 0.0};
    double var = 0.25;
    Tape t;
    NodeRef x = t.constant(Tensor::from_vec({2}, x0));
    NodeRef mu = t.constant(Tensor::from_vec({2}, m0));
    NodeRef lp = t.gaussian_log_density(x, mu, var);
    // -(0.25 + 1.0) / (2 * 0.25) = -2.5
    CHECK(t.scalar(lp) == doctest::Approx(-2.5).epsilon(1e-12));
}

TEST_CASE("stop_gradient blocks the backward path") {
    Tape t;
    NodeRef x = t.param(Tensor::from_vec({3}, {1.0, 2.0, 3.0}), "x");
    NodeRef y = t.stop_gradient(t.mul(x, x));
    NodeRef loss = t.sum(t.mul(y, x));
    t.backward(loss);
    const Tensor& g = t.grad_tensor(x);
    // d/dx of sum(sg(x^2) * x) = x^2 only; the x^2 branch contributes nothing.
    CHECK(g.data[0] == doctest::Approx(1.0));
    CHECK(g.data[1] == doctest::Approx(4.0));
    CHECK(g.data[2] == doctest::Approx(9.0));
}

TEST_CASE("backward is linear: grad of a*f + b*g decomposes") {
    Rng rng(77);
    Vec x0 = random_vec(rng, 6);

    auto grads_of = [&](double a, double b) {
        Tape t;
        NodeRef x = t.param(Tensor::from_vec({6}, x0), "x");
        NodeRef f = t.sum(t.mul(x, x));
        NodeRef g = t.sum(t.tanh(x));
        NodeRef loss = t.add(t.scale(f, a), t.scale(g, b));
        t.backward(loss);
        return t.grad_tensor(x).data;
    };

    Vec gf = grads_of(1.0, 0.0);
    Vec gg = grads_of(0.0, 1.0);
    Vec gc = grads_of(2.0, -3.0);
    for (size_t i = 0; i < x0.size(); i++) {
        CHECK(gc[i] == doctest::Approx(2.0 * gf[i] - 3.0 * gg[i]).epsilon(1e-12));
    }
}

TEST_CASE("forward and backward replay bit-identically") {
    auto run = [] {
        Rng rng(31337);
        Tape t;
        NodeRef w = t.param(Tensor::randn({4, 4}, rng, 0.5), "w");
        NodeRef x = t.constant(Tensor::randn({4}, rng, 1.0));
        NodeRef h = t.tanh(t.matmul(w, x));
        NodeRef loss = t.sum(t.mul(h, h));
        t.backward(loss);
        std::pair<double, Vec> out{t.scalar(loss), t.grad_tensor(w).data};
        return out;
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2); // exact, not approximate
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); i++) CHECK(g1[i] == g2[i]);
}

TEST_CASE("non-finite values are rejected as soon as they appear") {
    Tape t;
    NodeRef x = t.param(Tensor::from_vec({2}, {710.0, 0.0}), "x");
    // exp(710) overflows to inf; the op itself must throw.
    CHECK_THROWS_AS((void)t.exp(x), std::runtime_error);
}

TEST_CASE("backward rejects a non-scalar root") {
    Tape t;
    NodeRef x = t.param(Tensor::from_vec({3}, {1.0, 2.0, 3.0}), "x");
    NodeRef y = t.mul(x, x);
    CHECK_THROWS_AS(t.backward(y), std::runtime_error);
}

TEST_CASE("shape mismatches are rejected") {
    Tape t;
    NodeRef a = t.param(Tensor::from_vec({3}, {1, 2, 3}), "a");
    NodeRef b = t.constant(Tensor::from_vec({4}, {1, 2, 3, 4}));
    CHECK_THROWS_AS((void)t.add(a, b), std::runtime_error);
    NodeRef m = t.constant(Tensor::from_vec({2, 2}, {1, 0, 0, 1}));
    CHECK_THROWS_AS((void)t.matmul(m, a), std::runtime_error);
}
