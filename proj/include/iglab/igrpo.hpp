#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iglab/flowcore.hpp"
#include "iglab/model.hpp"
#include "iglab/optim.hpp"
#include "iglab/synthworld.hpp"

namespace iglab {

struct RewardWeights {
    double acc = 0.75;
    double fmt = 0.1;
    double dec = 0.15;
};

struct RewardBreakdown {
    double r_acc = 0.0;  // answer exact-match, {0, 1}
    double r_fmt = 0.0;  // grammar validity, {0, 1}
    double r_dec = 0.0;  // decision outcome, {-1, 0, +1}
    double total = 0.0;  // acc*r_acc + fmt*r_fmt + dec*r_dec exactly
};

// One temperature-1 rollout. Token contexts, and therefore the cached
// log-probs, are reconstructable bit-exactly from (sample, tokens, denoise):
// the answer context of a generated trajectory conditions on
// bridge(predict_clean(x_t, t)) at the selected denoising step, the same
// construction the training pass rebuilds under live parameters. That is
// what makes every ratio exactly 1 at theta = theta_old.
struct Trajectory {
    Sample sample;
    std::vector<int> tokens;        // exactly 3 sampled tokens
    std::vector<int> positions;     // grammar position per token
    std::vector<double> old_logps;  // log pi_old per token
    std::optional<DenoiseRecord> denoise;  // present iff tokens[0] == <restore>
    double old_flow_logp = 0.0;     // transition log-prob at the selected step
    RewardBreakdown reward;
    bool generated = false;  // g: restoration ran
    bool correct = false;    // c: reward.r_acc > 0.5
};

struct GroupBatch {
    std::vector<Trajectory> trajectories;
    std::vector<double> advantages;  // one per trajectory once rewards exist
};

struct RlConfig {
    double eps = 0.2;     // ratio clip
    double lambda = 0.3;  // image-loss weight
    double beta = 0.0;    // reference-KL coefficient
    double lr = 1e-4;
    int group_size = 4;
    int inner_epochs = 1;  // optimizer passes per sampling round
    int rounds = 200;
    int prompts_per_round = 8;
    int sample_count = 1000;  // prompt-pool size when a driver builds it
    uint64_t seed = 0;
    RewardWeights weights;
    NoiseSchedule schedule;
    BridgeMode bridge_mode = BridgeMode::FullBridge;  // Substitution is eval-only
    void validate() const;
};

// G rollouts from the frozen snapshot m_old for one input. Token 0 is
// sampled from the bare-encoder context; <restore> runs the SDE sampler and
// answers through the bridge, anything else continues direct-style. Rewards
// and advantages are left unfilled.
GroupBatch sample_group(const Model& m_old, const Sample& input, int G,
                        const NoiseSchedule& sched, uint64_t seed,
                        BridgeMode mode = BridgeMode::FullBridge);

// Fills traj.reward and the c flag. R_acc: answer slot equals the truth
// class. R_fmt: tokens follow the decision/answer/<eos> grammar. R_dec:
// (g,c) outcome table (1,1)->+1, (0,0)->-1, else 0.
RewardBreakdown compute_rewards(Trajectory& traj, int truth_class,
                                const RewardWeights& w);

// (R_i - mean) / std over the group; population std; all zeros when std = 0.
// Throws below two rewards.
std::vector<double> group_advantages(const std::vector<double>& rewards);

// Both tape losses over one group, built from a single shared forward per
// trajectory: the selected-step velocity node feeds the bridge (text side)
// and the transition log-prob (image side). Pointers record which advantage
// vector each side consumed so callers can assert they are the same object.
struct RlLosses {
    NodeRef text;  // negative clipped surrogate, mean over G (+ beta-KL)
    NodeRef flow;  // negative clipped surrogate, mean over generated
    const std::vector<double>* text_advantages = nullptr;
    const std::vector<double>* flow_advantages = nullptr;
};
RlLosses interleaved_losses_tape(Tape& tape, const ModelNodes& nodes,
                                 const GroupBatch& batch, const RlConfig& cfg,
                                 const Model* ref = nullptr);

// Forward-only conveniences for tests and diagnostics; same values as the
// tape versions.
double grpo_text_loss(const Model& m, const GroupBatch& batch, double eps,
                      double beta = 0.0, const Model* ref = nullptr,
                      BridgeMode mode = BridgeMode::FullBridge);
double flow_grpo_loss(const Model& m, const GroupBatch& batch, double eps);

struct RoundStats {
    double mean_reward = 0.0;
    double r_acc_mean = 0.0;
    double trigger_rate = 0.0;  // fraction of sampled trajectories that restored
    double grpo_loss = 0.0;
    double flow_loss = 0.0;
    bool degenerate = false;  // every group had zero reward std
};

// One sampling round: snapshot theta_old, sample a group per prompt, score,
// normalize, then inner_epochs combined-loss steps over all groups.
// ref supplies pi_ref for the beta-KL term; pass the stage-entry snapshot.
RoundStats interleaved_update(Model& m, AdamOptimizer& opt, const Model& ref,
                              const std::vector<Sample>& prompts,
                              const RlConfig& cfg, Rng& rng);

struct RlResult {
    std::vector<RoundStats> rounds;
};

// cfg.rounds rounds over prompts drawn from the pool. The incoming model
// must already exhibit both pathways (an SFT product); RL from a raw
// initialization has no mixture to learn from. Writes a JSONL line per
// round when log_path is non-empty.
RlResult train_rl(Model& m, const std::vector<Sample>& pool, const RlConfig& cfg,
                  const std::string& log_path = "");

}  // namespace iglab
