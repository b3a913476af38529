#include "iglab/flowcore.hpp"

#include <cmath>
#include <stdexcept>

namespace iglab {

namespace {

void check_unit_t(double t) {
    if (!(t > 0.0 && t <= 1.0 + 1e-12))
        throw std::runtime_error("flowcore: t outside (0, 1]");
}

// x_next = c_x * x + c_v * v, the shared deterministic part of a step.
Vec apply_step(const Vec& x, const Vec& v, const StepCoeffs& c) {
    Vec out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = c.c_x * x[i] + c.c_v * v[i];
    return out;
}

}  // namespace

void NoiseSchedule::validate() const {
    if (a < 0.0) throw std::runtime_error("NoiseSchedule: a must be >= 0");
    if (!(t_min > 0.0 && t_min < 1.0))
        throw std::runtime_error("NoiseSchedule: t_min must lie in (0, 1)");
    if (n_steps < 1) throw std::runtime_error("NoiseSchedule: n_steps must be >= 1");
}

StepCoeffs step_coeffs(double t, double sigma, double dt) {
    check_unit_t(t);
    double s2 = sigma * sigma;
    StepCoeffs c;
    c.c_x = 1.0 + dt * s2 / (2.0 * t);
    c.c_v = dt * (1.0 + s2 * (1.0 - t) / (2.0 * t));
    c.std_dev = sigma * std::sqrt(std::abs(dt));
    return c;
}

double fm_loss(const VelocityFn& v, const Vec& clean, const Vec& noise, double t) {
    check_unit_t(t);
    if (clean.size() != noise.size()) throw std::runtime_error("fm_loss: size mismatch");
    Vec x_t(clean.size());
    for (size_t i = 0; i < clean.size(); ++i) x_t[i] = t * noise[i] + (1.0 - t) * clean[i];
    Vec vel = v(x_t, t);
    double acc = 0.0;
    for (size_t i = 0; i < clean.size(); ++i) {
        double d = vel[i] - (noise[i] - clean[i]);
        acc += d * d;
    }
    return acc;
}

NodeRef fm_loss_tape(Tape& tape, const TapeVelocityFn& v, const Vec& clean,
                     const Vec& noise, double t) {
    check_unit_t(t);
    if (clean.size() != noise.size()) throw std::runtime_error("fm_loss: size mismatch");
    Vec x_t(clean.size()), target(clean.size());
    for (size_t i = 0; i < clean.size(); ++i) {
        x_t[i] = t * noise[i] + (1.0 - t) * clean[i];
        target[i] = noise[i] - clean[i];
    }
    NodeRef vel = v(tape, tape.constant(x_t), t);
    NodeRef diff = tape.sub(vel, tape.constant(target));
    return tape.sum(tape.mul(diff, diff));
}

Vec ode_sample(const VelocityFn& v, int n_steps, double t_min, int dim,
               uint64_t seed, std::vector<Vec>* trajectory) {
    if (n_steps < 1) throw std::runtime_error("ode_sample: n_steps must be >= 1");
    if (!(t_min > 0.0 && t_min < 1.0)) throw std::runtime_error("ode_sample: bad t_min");
    Rng rng(seed);
    Vec x(static_cast<size_t>(dim));
    for (double& e : x) e = rng.normal();
    if (trajectory) {
        trajectory->clear();
        trajectory->push_back(x);
    }
    double dt = -(1.0 - t_min) / n_steps;
    for (int k = 0; k < n_steps; ++k) {
        double t = 1.0 + k * dt;
        StepCoeffs c = step_coeffs(t, 0.0, dt);  // sigma=0: plain Euler
        x = apply_step(x, v(x, t), c);
        if (trajectory) trajectory->push_back(x);
    }
    Vec vel = v(x, t_min);
    Vec x0(x.size());
    for (size_t i = 0; i < x.size(); ++i) x0[i] = x[i] - t_min * vel[i];
    return x0;
}

DenoiseRecord sde_sample(const VelocityFn& v, const NoiseSchedule& sched,
                         const Vec& cond, int dim, uint64_t seed) {
    sched.validate();
    Rng rng(seed);
    Vec x(static_cast<size_t>(dim));
    for (double& e : x) e = rng.normal();

    DenoiseRecord rec;
    rec.cond = cond;
    rec.steps.reserve(static_cast<size_t>(sched.n_steps));
    double dt = sched.dt();
    for (int k = 0; k < sched.n_steps; ++k) {
        double t = sched.t_at(k);
        double sigma = sched.sigma(t);
        StepCoeffs c = step_coeffs(t, sigma, dt);
        Vec vel = v(x, t);
        Vec x_next = apply_step(x, vel, c);
        if (c.std_dev > 0.0)
            for (double& e : x_next) e += c.std_dev * rng.normal();
        DenoiseStep step;
        step.t = t;
        step.x_t = x;
        step.x_next = x_next;
        step.sigma = sigma;
        step.dt = dt;
        rec.steps.push_back(std::move(step));
        x = std::move(x_next);
    }
    Vec vel = v(x, sched.t_min);
    rec.x0_hat.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) rec.x0_hat[i] = x[i] - sched.t_min * vel[i];
    rec.selected_step = rng.uniform_int(sched.n_steps);
    return rec;
}

double transition_logprob(const DenoiseStep& step, const Vec& v_now) {
    if (!(step.sigma > 0.0))
        throw std::runtime_error("transition_logprob: sigma must be positive (a > 0)");
    if (v_now.size() != step.x_t.size())
        throw std::runtime_error("transition_logprob: size mismatch");
    StepCoeffs c = step_coeffs(step.t, step.sigma, step.dt);
    double var = c.std_dev * c.std_dev;
    double acc = 0.0;
    for (size_t i = 0; i < v_now.size(); ++i) {
        double mu = c.c_x * step.x_t[i] + c.c_v * v_now[i];
        double d = step.x_next[i] - mu;
        acc += d * d;
    }
    return -acc / (2.0 * var);
}

NodeRef transition_logprob_tape(Tape& tape, const DenoiseStep& step, NodeRef v_now) {
    if (!(step.sigma > 0.0))
        throw std::runtime_error("transition_logprob: sigma must be positive (a > 0)");
    StepCoeffs c = step_coeffs(step.t, step.sigma, step.dt);
    double var = c.std_dev * c.std_dev;
    NodeRef mu = tape.add(tape.scale(tape.constant(step.x_t), c.c_x),
                          tape.scale(v_now, c.c_v));
    return tape.gaussian_log_density(tape.constant(step.x_next), mu, var);
}

}  // namespace iglab
