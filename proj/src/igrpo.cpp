#include "iglab/igrpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace iglab {

namespace {

constexpr int kTrajTokens = 3;

void check_trajectory(const Trajectory& tr) {
    if (tr.tokens.size() != kTrajTokens || tr.positions.size() != kTrajTokens ||
        tr.old_logps.size() != kTrajTokens) {
        throw std::invalid_argument("Trajectory: expected exactly 3 sampled tokens");
    }
    bool restore = tr.tokens[0] == kTokRestore;
    if (restore != tr.denoise.has_value()) {
        throw std::invalid_argument(
            "Trajectory: denoise record must accompany <restore> and nothing else");
    }
}

const DenoiseStep& selected_step(const Trajectory& tr) {
    const DenoiseRecord& rec = *tr.denoise;
    if (rec.steps.empty() || rec.selected_step < 0 ||
        rec.selected_step >= static_cast<int>(rec.steps.size())) {
        throw std::invalid_argument("Trajectory: selected denoise step out of range");
    }
    return rec.steps[static_cast<size_t>(rec.selected_step)];
}

// Training-side image context for the post-restore tokens, rebuilt from the
// selected transition's state ("inject one recorded denoising step"). The
// loss pass and the cached old log-probs both come through here (or the tape
// twin below), so every ratio is pinned to 1 before the first update even
// though rollout sampling conditions on the finished restoration.
void apply_image_context(const Model& m, Context& ctx, const Trajectory& tr, BridgeMode mode) {
    const DenoiseStep& st = selected_step(tr);
    switch (mode) {
        case BridgeMode::FullBridge:
            ctx.bridge_feat = bridge_inject(m, predict_clean(m, st.x_t, st.t, ctx.enc_feat));
            break;
        case BridgeMode::DecReenc:
            ctx.aux_feat = encode_latent(m, predict_clean(m, st.x_t, st.t, ctx.enc_feat));
            break;
        case BridgeMode::Substitution:
            ctx.bridge_feat = bridge_inject(m, tr.sample.degraded.pixels);
            break;
    }
}

// Deployment-side context used while sampling: the answer conditions on the
// terminal restored latent, exactly as greedy evaluation does. This is what
// ties the image reward to every transition of the denoising trajectory.
void terminal_image_context(const Model& m, Context& ctx, const Trajectory& tr, BridgeMode mode) {
    const Vec& x0 = tr.denoise->x0_hat;
    switch (mode) {
        case BridgeMode::FullBridge:
            ctx.bridge_feat = bridge_inject(m, x0);
            break;
        case BridgeMode::DecReenc:
            ctx.aux_feat = encode_latent(m, x0);
            break;
        case BridgeMode::Substitution:
            ctx.bridge_feat = bridge_inject(m, tr.sample.degraded.pixels);
            break;
    }
}

double token_logp_plain(const Model& m, const Vec& enc, const Trajectory& tr, int k,
                        BridgeMode mode) {
    Context ctx;
    ctx.enc_feat = enc;
    if (k > 0 && tr.denoise) apply_image_context(m, ctx, tr, mode);
    ctx.prev_token = k == 0 ? kBosIndex : tr.tokens[static_cast<size_t>(k) - 1];
    ctx.position = tr.positions[static_cast<size_t>(k)];
    return log_softmax_at(policy_logits(m, ctx), tr.tokens[static_cast<size_t>(k)]);
}

struct TrajNodes {
    std::vector<NodeRef> token_logps;  // one scalar per sampled token
    std::optional<NodeRef> vel;        // velocity at the selected transition
};

// Tape twin of the rollout's context construction. One velocity evaluation
// per restore trajectory is shared by the bridge feature (text side) and the
// transition log-prob (flow side): the single-step memory contract.
TrajNodes rebuild_traj_tape(Tape& tape, const ModelNodes& nodes, NodeRef enc_node,
                            const Trajectory& tr, BridgeMode mode) {
    TrajNodes out;
    ContextNodes ctx;
    ctx.enc_feat = enc_node;
    ctx.prev_token = kBosIndex;
    ctx.position = tr.positions[0];
    out.token_logps.push_back(tape.scale(
        tape.softmax_cross_entropy(policy_logits_tape(tape, nodes, ctx), tr.tokens[0]), -1.0));
    if (tr.denoise) {
        const DenoiseStep& st = selected_step(tr);
        NodeRef v = velocity_tape(tape, nodes, tape.constant(st.x_t), st.t, enc_node);
        out.vel = v;
        NodeRef x0_hat = tape.sub(tape.constant(st.x_t), tape.scale(v, st.t));
        switch (mode) {
            case BridgeMode::FullBridge:
                ctx.bridge_feat = bridge_inject_tape(tape, nodes, x0_hat);
                break;
            case BridgeMode::DecReenc:
                ctx.aux_feat = encode_tape(tape, nodes, x0_hat, /*sg=*/true);
                break;
            case BridgeMode::Substitution:
                ctx.bridge_feat =
                    bridge_inject_tape(tape, nodes, tape.constant(tr.sample.degraded.pixels));
                break;
        }
    }
    for (int k = 1; k < kTrajTokens; ++k) {
        ctx.prev_token = tr.tokens[static_cast<size_t>(k) - 1];
        ctx.position = tr.positions[static_cast<size_t>(k)];
        out.token_logps.push_back(tape.scale(
            tape.softmax_cross_entropy(policy_logits_tape(tape, nodes, ctx),
                                       tr.tokens[static_cast<size_t>(k)]),
            -1.0));
    }
    return out;
}

void check_group(const GroupBatch& batch) {
    const auto& trajs = batch.trajectories;
    if (trajs.empty()) throw std::invalid_argument("GroupBatch: empty group");
    if (batch.advantages.size() != trajs.size()) {
        throw std::invalid_argument("GroupBatch: advantages not computed for this group");
    }
    for (const Trajectory& tr : trajs) {
        check_trajectory(tr);
        if (tr.sample.sample_id != trajs[0].sample.sample_id) {
            throw std::invalid_argument("GroupBatch: a group must share one input");
        }
    }
}

void check_eps(double eps) {
    if (!(eps > 0.0 && eps < 1.0)) {
        throw std::invalid_argument("clip range eps must lie in (0, 1)");
    }
}

double clip_term(double ratio, double adv, double eps) {
    double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
    return std::min(ratio * adv, clipped * adv);
}

}  // namespace

void RlConfig::validate() const {
    if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("RlConfig: eps must lie in (0, 1)");
    if (lambda < 0.0) throw std::invalid_argument("RlConfig: lambda must be non-negative");
    if (beta < 0.0) throw std::invalid_argument("RlConfig: beta must be non-negative");
    if (lr <= 0.0) throw std::invalid_argument("RlConfig: lr must be positive");
    if (group_size < 2) throw std::invalid_argument("RlConfig: group_size must be at least 2");
    if (inner_epochs < 1) throw std::invalid_argument("RlConfig: inner_epochs must be positive");
    if (rounds < 1) throw std::invalid_argument("RlConfig: rounds must be positive");
    if (prompts_per_round < 1) {
        throw std::invalid_argument("RlConfig: prompts_per_round must be positive");
    }
    if (sample_count < 1) throw std::invalid_argument("RlConfig: sample_count must be positive");
    if (weights.acc < 0.0 || weights.fmt < 0.0 || weights.dec < 0.0) {
        throw std::invalid_argument("RlConfig: reward weights must be non-negative");
    }
    schedule.validate();
    if (bridge_mode == BridgeMode::Substitution) {
        throw std::invalid_argument(
            "RlConfig: latent substitution is an evaluation probe, not a training mode");
    }
}

GroupBatch sample_group(const Model& m_old, const Sample& input, int G,
                        const NoiseSchedule& sched, uint64_t seed, BridgeMode mode) {
    if (G < 1) throw std::invalid_argument("sample_group: group size must be positive");
    sched.validate();
    GroupBatch batch;
    Vec enc = encode(m_old, input.degraded);
    auto vfn = [&](const Vec& x, double t) { return velocity(m_old, x, t, enc); };
    for (int i = 0; i < G; ++i) {
        uint64_t tseed = derive_seed(seed, static_cast<uint64_t>(i));
        Rng rng(tseed);
        Trajectory tr;
        tr.sample = input;
        Context ctx;
        ctx.enc_feat = enc;
        ctx.prev_token = kBosIndex;
        ctx.position = 0;
        Vec logits = policy_logits(m_old, ctx);
        int tok0 = sample_categorical(softmax(logits), rng);
        tr.tokens.push_back(tok0);
        tr.positions.push_back(0);
        tr.old_logps.push_back(log_softmax_at(logits, tok0));
        tr.generated = tok0 == kTokRestore;
        if (tr.generated) {
            tr.denoise =
                sde_sample(vfn, sched, enc, kLatentDim, derive_seed(tseed, hash_str("sde")));
            const DenoiseStep& st = selected_step(tr);
            tr.old_flow_logp = transition_logprob(st, velocity(m_old, st.x_t, st.t, enc));
            terminal_image_context(m_old, ctx, tr, mode);
        }
        // a restore trace occupies the IMG slot, shifting answer/eos to 2/3
        int answer_pos = tr.generated ? 2 : 1;
        for (int k = 1; k < kTrajTokens; ++k) {
            ctx.prev_token = tr.tokens.back();
            ctx.position = answer_pos + (k - 1);
            logits = policy_logits(m_old, ctx);
            int tok = sample_categorical(softmax(logits), rng);
            tr.tokens.push_back(tok);
            tr.positions.push_back(ctx.position);
            tr.old_logps.push_back(log_softmax_at(logits, tok));
        }
        if (tr.generated) {
            // cache old log-probs under the training-side injected context so
            // the first-update ratios are exactly 1; the sampled tokens stay
            // the terminal-context draws above
            for (int k = 1; k < kTrajTokens; ++k) {
                tr.old_logps[static_cast<size_t>(k)] = token_logp_plain(m_old, enc, tr, k, mode);
            }
        }
        batch.trajectories.push_back(std::move(tr));
    }
    return batch;
}

RewardBreakdown compute_rewards(Trajectory& traj, int truth_class, const RewardWeights& w) {
    if (truth_class < 0 || truth_class >= kNumClasses) {
        throw std::invalid_argument("compute_rewards: truth class out of range");
    }
    check_trajectory(traj);
    RewardBreakdown r;
    int ans = traj.tokens[1];
    r.r_acc = ans == kTokAnswer0 + truth_class ? 1.0 : 0.0;
    bool head_ok = traj.tokens[0] == kTokDirect || traj.tokens[0] == kTokRestore;
    bool ans_ok = ans >= kTokAnswer0 && ans < kTokAnswer0 + kNumClasses;
    bool tail_ok = traj.tokens[2] == kTokEos;
    r.r_fmt = head_ok && ans_ok && tail_ok ? 1.0 : 0.0;
    bool c = r.r_acc > 0.5;
    // decision shaping: restoring and then answering right earns the bonus;
    // answering wrong after skipping restoration pays the penalty.
    if (traj.generated && c) {
        r.r_dec = 1.0;
    } else if (!traj.generated && !c) {
        r.r_dec = -1.0;
    } else {
        r.r_dec = 0.0;
    }
    r.total = w.acc * r.r_acc + w.fmt * r.r_fmt + w.dec * r.r_dec;
    traj.reward = r;
    traj.correct = c;
    return r;
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
    size_t n = rewards.size();
    if (n < 2) throw std::invalid_argument("group_advantages: need at least two rewards");
    double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n);
    double sd = std::sqrt(var);
    std::vector<double> adv(n, 0.0);
    if (sd > 0.0) {
        for (size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / sd;
    }
    return adv;
}

RlLosses interleaved_losses_tape(Tape& tape, const ModelNodes& nodes, const GroupBatch& batch,
                                 const RlConfig& cfg, const Model* ref) {
    cfg.validate();
    check_group(batch);
    if (cfg.beta > 0.0 && ref == nullptr) {
        throw std::invalid_argument("interleaved_losses_tape: beta > 0 needs the reference policy");
    }
    const auto& trajs = batch.trajectories;
    NodeRef enc_node =
        encode_tape(tape, nodes, tape.constant(trajs[0].sample.degraded.pixels), /*sg=*/true);
    Vec ref_enc;
    if (ref != nullptr) ref_enc = encode(*ref, trajs[0].sample.degraded);

    std::optional<NodeRef> text_sum;
    std::optional<NodeRef> flow_sum;
    int gen_count = 0;
    for (size_t i = 0; i < trajs.size(); ++i) {
        const Trajectory& tr = trajs[i];
        double adv = batch.advantages[i];
        TrajNodes tn = rebuild_traj_tape(tape, nodes, enc_node, tr, cfg.bridge_mode);
        std::optional<NodeRef> tok_sum;
        for (int k = 0; k < kTrajTokens; ++k) {
            NodeRef lp = tn.token_logps[static_cast<size_t>(k)];
            NodeRef ratio =
                tape.exp(tape.sub(lp, tape.constant(Vec{tr.old_logps[static_cast<size_t>(k)]})));
            NodeRef term =
                tape.minimum(tape.scale(ratio, adv),
                             tape.scale(tape.clamp(ratio, 1.0 - cfg.eps, 1.0 + cfg.eps), adv));
            if (cfg.beta > 0.0) {
                // k3 estimator rho - log rho - 1 with rho = pi_ref / pi_theta
                double ref_lp = token_logp_plain(*ref, ref_enc, tr, k, cfg.bridge_mode);
                NodeRef d = tape.sub(tape.constant(Vec{ref_lp}), lp);
                NodeRef kl = tape.sub(tape.sub(tape.exp(d), d), tape.constant(Vec{1.0}));
                term = tape.sub(term, tape.scale(kl, cfg.beta));
            }
            tok_sum = tok_sum ? tape.add(*tok_sum, term) : term;
        }
        NodeRef traj_term = tape.scale(*tok_sum, 1.0 / kTrajTokens);
        text_sum = text_sum ? tape.add(*text_sum, traj_term) : traj_term;
        if (tr.denoise) {
            NodeRef logp = transition_logprob_tape(tape, selected_step(tr), *tn.vel);
            NodeRef ratio = tape.exp(tape.sub(logp, tape.constant(Vec{tr.old_flow_logp})));
            NodeRef term =
                tape.minimum(tape.scale(ratio, adv),
                             tape.scale(tape.clamp(ratio, 1.0 - cfg.eps, 1.0 + cfg.eps), adv));
            flow_sum = flow_sum ? tape.add(*flow_sum, term) : term;
            ++gen_count;
        }
    }
    RlLosses out;
    out.text = tape.scale(*text_sum, -1.0 / static_cast<double>(trajs.size()));
    out.flow = gen_count > 0 ? tape.scale(*flow_sum, -1.0 / static_cast<double>(gen_count))
                             : tape.constant(Vec{0.0});
    out.text_advantages = &batch.advantages;
    out.flow_advantages = &batch.advantages;
    return out;
}

double grpo_text_loss(const Model& m, const GroupBatch& batch, double eps, double beta,
                      const Model* ref, BridgeMode mode) {
    check_eps(eps);
    check_group(batch);
    if (beta < 0.0) throw std::invalid_argument("grpo_text_loss: beta must be non-negative");
    if (beta > 0.0 && ref == nullptr) {
        throw std::invalid_argument("grpo_text_loss: beta > 0 needs the reference policy");
    }
    const auto& trajs = batch.trajectories;
    Vec enc = encode(m, trajs[0].sample.degraded);
    Vec ref_enc;
    if (ref != nullptr) ref_enc = encode(*ref, trajs[0].sample.degraded);
    double total = 0.0;
    for (size_t i = 0; i < trajs.size(); ++i) {
        const Trajectory& tr = trajs[i];
        double adv = batch.advantages[i];
        double tok_sum = 0.0;
        for (int k = 0; k < kTrajTokens; ++k) {
            double lp = token_logp_plain(m, enc, tr, k, mode);
            double ratio = std::exp(lp - tr.old_logps[static_cast<size_t>(k)]);
            double term = clip_term(ratio, adv, eps);
            if (beta > 0.0) {
                double d = token_logp_plain(*ref, ref_enc, tr, k, mode) - lp;
                term -= beta * (std::exp(d) - d - 1.0);
            }
            tok_sum += term;
        }
        total += tok_sum / kTrajTokens;
    }
    return -total / static_cast<double>(trajs.size());
}

double flow_grpo_loss(const Model& m, const GroupBatch& batch, double eps) {
    check_eps(eps);
    check_group(batch);
    const auto& trajs = batch.trajectories;
    Vec enc = encode(m, trajs[0].sample.degraded);
    double total = 0.0;
    int gen_count = 0;
    for (size_t i = 0; i < trajs.size(); ++i) {
        const Trajectory& tr = trajs[i];
        if (!tr.denoise) continue;
        const DenoiseStep& st = selected_step(tr);
        double lp = transition_logprob(st, velocity(m, st.x_t, st.t, enc));
        double ratio = std::exp(lp - tr.old_flow_logp);
        total += clip_term(ratio, batch.advantages[i], eps);
        ++gen_count;
    }
    return gen_count > 0 ? -total / static_cast<double>(gen_count) : 0.0;
}

RoundStats interleaved_update(Model& m, AdamOptimizer& opt, const Model& ref,
                              const std::vector<Sample>& prompts, const RlConfig& cfg, Rng& rng) {
    cfg.validate();
    if (prompts.empty()) throw std::invalid_argument("interleaved_update: no prompts");
    Model m_old = m;  // rollout policy for this round
    std::vector<GroupBatch> groups;
    groups.reserve(prompts.size());
    RoundStats st;
    int traj_total = 0;
    bool any_signal = false;
    for (const Sample& prompt : prompts) {
        GroupBatch g =
            sample_group(m_old, prompt, cfg.group_size, cfg.schedule, rng.bits(), cfg.bridge_mode);
        std::vector<double> rewards;
        rewards.reserve(g.trajectories.size());
        for (Trajectory& tr : g.trajectories) {
            rewards.push_back(compute_rewards(tr, prompt.class_id, cfg.weights).total);
            st.mean_reward += tr.reward.total;
            st.r_acc_mean += tr.reward.r_acc;
            st.trigger_rate += tr.generated ? 1.0 : 0.0;
            ++traj_total;
        }
        g.advantages = group_advantages(rewards);
        for (double a : g.advantages) {
            if (a != 0.0) any_signal = true;
        }
        groups.push_back(std::move(g));
    }
    st.mean_reward /= traj_total;
    st.r_acc_mean /= traj_total;
    st.trigger_rate /= traj_total;
    // every group unanimous: all advantages are zero and the update is a no-op
    st.degenerate = !any_signal;
    for (int e = 0; e < cfg.inner_epochs; ++e) {
        Tape tape;
        ModelNodes nodes = register_model(tape, m);
        std::optional<NodeRef> text_sum;
        std::optional<NodeRef> flow_sum;
        for (const GroupBatch& g : groups) {
            RlLosses l = interleaved_losses_tape(tape, nodes, g, cfg, &ref);
            text_sum = text_sum ? tape.add(*text_sum, l.text) : l.text;
            flow_sum = flow_sum ? tape.add(*flow_sum, l.flow) : l.flow;
        }
        NodeRef text = tape.scale(*text_sum, 1.0 / static_cast<double>(groups.size()));
        NodeRef flow = tape.scale(*flow_sum, 1.0 / static_cast<double>(groups.size()));
        NodeRef total = tape.add(text, tape.scale(flow, cfg.lambda));
        if (e == 0) {
            st.grpo_loss = tape.scalar(text);
            st.flow_loss = tape.scalar(flow);
        }
        if (!std::isfinite(tape.scalar(total))) {
            throw std::runtime_error("interleaved_update: non-finite loss");
        }
        tape.backward(total);
        auto params = m.trainable_map();
        auto grads = collect_grads(tape, nodes, m);
        opt.step(params, grads);
    }
    return st;
}

RlResult train_rl(Model& m, const std::vector<Sample>& pool, const RlConfig& cfg,
                  const std::string& log_path) {
    cfg.validate();
    if (pool.empty()) throw std::invalid_argument("train_rl: empty prompt pool");
    if (static_cast<int>(pool.size()) < cfg.prompts_per_round) {
        throw std::invalid_argument("train_rl: pool smaller than prompts_per_round");
    }
    Model ref = m;  // frozen stage-entry policy anchors the KL penalty
    AdamOptimizer opt(cfg.lr);
    Rng rng(derive_seed(cfg.seed, hash_str("rl")));
    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw std::runtime_error("train_rl: cannot open log file " + log_path);
    }
    RlResult res;
    res.rounds.reserve(static_cast<size_t>(cfg.rounds));
    std::vector<size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (int round = 0; round < cfg.rounds; ++round) {
        // partial Fisher-Yates: prompts_per_round distinct prompts per round
        for (int k = 0; k < cfg.prompts_per_round; ++k) {
            size_t j = static_cast<size_t>(k) +
                       static_cast<size_t>(rng.uniform_int(static_cast<int>(idx.size()) - k));
            std::swap(idx[static_cast<size_t>(k)], idx[j]);
        }
        std::vector<Sample> prompts;
        prompts.reserve(static_cast<size_t>(cfg.prompts_per_round));
        for (int k = 0; k < cfg.prompts_per_round; ++k) {
            prompts.push_back(pool[idx[static_cast<size_t>(k)]]);
        }
        RoundStats st = interleaved_update(m, opt, ref, prompts, cfg, rng);
        res.rounds.push_back(st);
        if (log) {
            nlohmann::ordered_json j;
            j["round"] = round;
            j["mean_reward"] = st.mean_reward;
            j["r_acc_mean"] = st.r_acc_mean;
            j["trigger_rate"] = st.trigger_rate;
            j["grpo_loss"] = st.grpo_loss;
            j["flow_loss"] = st.flow_loss;
            log << j.dump() << "\n";
        }
    }
    return res;
}

}  // namespace iglab
