#include "iglab/gradcheck.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace iglab {
namespace {

struct ProbeParams {
    Tensor w1, b1, w2, b2;
    Tensor input;
};

ProbeParams make_probe(uint64_t seed) {
    Rng rng(seed);
    ProbeParams p;
    p.w1 = Tensor::randn({5, 4}, rng, 0.7);
    p.b1 = Tensor::randn({5}, rng, 0.3);
    p.w2 = Tensor::randn({3, 5}, rng, 0.7);
    p.b2 = Tensor::randn({3}, rng, 0.3);
    p.input = Tensor::randn({4}, rng, 1.0);
    return p;
}

// loss = sum(out^2); hidden activation optionally frozen at `frozen_hidden`
// to model the stop-gradient branch.
double probe_loss(ProbeNet net, const ProbeParams& p, const Vec* frozen_hidden, Vec* hidden_out) {
    Tape tape;
    NodeRef x = tape.constant(p.input);
    NodeRef h;
    if (frozen_hidden != nullptr) {
        h = tape.constant(*frozen_hidden);
    } else {
        NodeRef pre = tape.add(tape.matmul(tape.param(p.w1), x), tape.param(p.b1));
        h = (net == ProbeNet::Linear) ? pre : tape.tanh(pre);
        if (net == ProbeNet::TanhMlpStopGrad) h = tape.stop_gradient(h);
    }
    NodeRef out = tape.add(tape.matmul(tape.param(p.w2), h), tape.param(p.b2));
    NodeRef loss = tape.sum(tape.mul(out, out));
    if (hidden_out) *hidden_out = tape.value(h);
    return tape.scalar(loss);
}

double rel_err(double a, double n) {
    double d = std::fabs(a - n);
    double s = std::max(std::fabs(a), std::fabs(n));
    return d / std::max(s, 1e-8);
}

}  // namespace

GradCheckReport finite_diff_check(ProbeNet net, uint64_t seed, double eps) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("finite_diff_check: eps out of (0, 1e-2]");
    ProbeParams base = make_probe(seed);

    // Analytic pass.
    Tape tape;
    NodeRef x = tape.constant(base.input);
    NodeRef rw1 = tape.param(base.w1);
    NodeRef rb1 = tape.param(base.b1);
    NodeRef pre = tape.add(tape.matmul(rw1, x), rb1);
    NodeRef h = (net == ProbeNet::Linear) ? pre : tape.tanh(pre);
    if (net == ProbeNet::TanhMlpStopGrad) h = tape.stop_gradient(h);
    NodeRef rw2 = tape.param(base.w2);
    NodeRef rb2 = tape.param(base.b2);
    NodeRef out = tape.add(tape.matmul(rw2, h), rb2);
    NodeRef loss = tape.sum(tape.mul(out, out));
    tape.backward(loss);

    Vec frozen_hidden;
    probe_loss(net, base, nullptr, &frozen_hidden);
    bool blocked_first = net == ProbeNet::TanhMlpStopGrad;

    struct Entry {
        const char* name;
        Tensor* tensor;
        NodeRef ref;
        bool blocked;
    };
    Entry entries[] = {
        {"w1", &base.w1, rw1, blocked_first},
        {"b1", &base.b1, rb1, blocked_first},
        {"w2", &base.w2, rw2, false},
        {"b2", &base.b2, rb2, false},
    };

    GradCheckReport report;
    for (Entry& e : entries) {
        const Vec& analytic = tape.grad(e.ref);
        double worst = 0.0;
        for (size_t i = 0; i < e.tensor->data.size(); ++i) {
            double numeric;
            if (e.blocked) {
                // Blocked path: the defined sensitivity through stop-gradient
                // is zero, so the stopped activation stays at its base value.
                numeric = 0.0;
            } else {
                double saved = e.tensor->data[i];
                e.tensor->data[i] = saved + eps;
                double lp = probe_loss(net, base, blocked_first ? &frozen_hidden : nullptr, nullptr);
                e.tensor->data[i] = saved - eps;
                double lm = probe_loss(net, base, blocked_first ? &frozen_hidden : nullptr, nullptr);
                e.tensor->data[i] = saved;
                numeric = (lp - lm) / (2.0 * eps);
            }
            worst = std::max(worst, rel_err(analytic[i], numeric));
        }
        report.per_param.push_back({e.name, worst});
        if (worst >= report.max_rel_error) {
            report.max_rel_error = worst;
            report.worst_param = e.name;
        }
    }
    return report;
}

}  // namespace iglab
