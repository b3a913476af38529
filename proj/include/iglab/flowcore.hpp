#pragma once

#include <functional>
#include <vector>

#include "iglab/rng.hpp"
#include "iglab/tensor.hpp"

namespace iglab {

// Flow time runs 1 -> t_min with negative dt. sigma_t = a * sqrt(t): finite
// at t=1, vanishing toward the data end. t_min keeps the score (which
// divides by t) away from its singularity.
struct NoiseSchedule {
    double a = 0.5;
    double t_min = 0.02;
    int n_steps = 16;

    void validate() const;
    double sigma(double t) const { return a * std::sqrt(t); }
    double dt() const { return -(1.0 - t_min) / n_steps; }
    double t_at(int k) const { return 1.0 + k * dt(); }  // k in [0, n_steps]
};

// One Euler(-Maruyama) step is x_next = c_x * x_t + c_v * v (+ std_dev * eps).
// Derived from mu = x_t + (v - sigma^2/2 * s) * dt with the score substituted
// as s = -(x_t + (1-t) v) / t. The sampler and the transition log-prob both
// go through this routine, which is what makes r_img = 1 hold identically
// before any parameter update.
struct StepCoeffs {
    double c_x;
    double c_v;
    double std_dev;  // sigma_t * sqrt(|dt|)
};
StepCoeffs step_coeffs(double t, double sigma, double dt);

using VelocityFn = std::function<Vec(const Vec& x, double t)>;
using TapeVelocityFn = std::function<NodeRef(Tape& tape, NodeRef x, double t)>;

// Velocity regression on the straight path x_t = t*noise + (1-t)*clean with
// target noise - clean; returns ||v - target||^2 (sum over dims).
double fm_loss(const VelocityFn& v, const Vec& clean, const Vec& noise, double t);
NodeRef fm_loss_tape(Tape& tape, const TapeVelocityFn& v, const Vec& clean,
                     const Vec& noise, double t);

// Deterministic probability-flow sampler: x_1 ~ N(0,I) seeded, n Euler steps
// down to t_min, then one straight-path clean prediction. If trajectory is
// given it receives x at every step boundary (n+1 entries, x_1 first).
Vec ode_sample(const VelocityFn& v, int n_steps, double t_min, int dim,
               uint64_t seed, std::vector<Vec>* trajectory = nullptr);

struct DenoiseStep {
    double t = 1.0;
    Vec x_t;
    Vec x_next;
    double sigma = 0.0;
    double dt = 0.0;
};

struct DenoiseRecord {
    std::vector<DenoiseStep> steps;  // n_steps entries, t descending from 1
    Vec cond;                        // conditioning vector used for every step
    int selected_step = 0;           // uniform in [0, n_steps)
    Vec x0_hat;                      // terminal clean prediction
};

// Stochastic sampler; records every transition for later ratio computation.
// No differentiation graph is retained — the record holds plain values.
DenoiseRecord sde_sample(const VelocityFn& v, const NoiseSchedule& sched,
                         const Vec& cond, int dim, uint64_t seed);

// log p(x_next | x_t) with the theta-independent constant dropped:
// -||x_next - mu||^2 / (2 sigma^2 |dt|), mu recomputed from the recorded x_t
// with v_now (velocity under the CURRENT parameters). Requires sigma > 0.
double transition_logprob(const DenoiseStep& step, const Vec& v_now);
NodeRef transition_logprob_tape(Tape& tape, const DenoiseStep& step, NodeRef v_now);

}  // namespace iglab
