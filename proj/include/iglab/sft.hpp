#pragma once

#include <string>
#include <vector>

#include "iglab/model.hpp"
#include "iglab/optim.hpp"
#include "iglab/synthworld.hpp"

namespace iglab {

enum class Pathway { DirectAnswer, GenerateThenAnswer };
const char* pathway_name(Pathway p);
Pathway parse_pathway(const std::string& name);

// Linear answer head over the frozen encoder, trained briefly on clean
// grids. Stands in for the untuned base model's answering ability: whatever
// it gets right on a degraded input goes down the direct pathway.
struct Probe {
    Tensor w;  // [kNumClasses, kFeatDim]
    Tensor b;  // [kNumClasses]
};

// Trains the probe on the manifest's clean grids (80/20 split) and verifies
// >= 95% held-out accuracy; throws std::runtime_error below that floor,
// since it means the dataset or severity registry is miscalibrated.
Probe train_probe(const Model& m, const DatasetManifest& manifest, uint64_t seed);

int probe_predict(const Model& m, const Probe& p, const Grid& g);
// Fraction of samples the probe classifies correctly, on the degraded or
// the clean grid.
double probe_accuracy(const Model& m, const Probe& p, const std::vector<Sample>& samples,
                      bool on_degraded);

// Same container discipline as model checkpoints: magic, version, named
// f32 records, fixed order, byte-identical round-trip.
void save_probe(const std::string& path, const Probe& p);
Probe load_probe(const std::string& path);

// Probe right -> direct_answer; probe wrong -> generate_then_answer.
Pathway assign_pathway(const Model& m, const Probe& p, const Sample& s);

// A supervised trace. tokens/positions exclude the IMG slot, which is a
// marker (grammar position img_slot), not a sampled token: restore traces
// are [<restore>@0, IMG@1, answer@2, <eos>@3], direct traces
// [<direct>@0, answer@1, <eos>@2]. The embedding table has no IMG row, so
// prev_token after the slot is the last text token; the slot shows up in the
// context through the bridge/aux features and the position one-hot instead.
struct Trace {
    Pathway pathway = Pathway::DirectAnswer;
    std::vector<int> tokens;
    std::vector<int> positions;
    int img_slot = -1;  // grammar position of the IMG marker, -1 if none
    Sample sample;      // carries clean + degraded grids and the class truth
};

Trace synthesize_trace(const Sample& s, Pathway pw);

// Assigns a pathway per record, synthesizes traces, then subsamples the
// larger pathway to a 1:1 balance (seeded). Throws if either pathway is
// empty: a single-pathway dataset cannot teach the decision.
std::vector<Trace> build_traces(const Model& m, const Probe& probe,
                                const DatasetManifest& manifest, uint64_t seed);

struct SftConfig {
    double lambda_mse = 0.5;
    double lambda_kl = 0.1;
    int epochs = 3;
    // Peak rate of the warmup+cosine schedule in train_sft. Tuned so three
    // epochs over the default dataset clear the convergence gate; 1e-3
    // leaves the run far short of it.
    double lr = 8e-3;
    int sample_count = 4000;  // records drawn when a driver builds the dataset
    int batch_size = 1;
    // MC draws of (t, noise) averaged inside the MSE term per generate
    // trace per step. One draw per epoch is far too little signal for the
    // conditional velocity field.
    int flow_draws = 16;
    // Independent draws whose bridge/aux answer-token CE is averaged in.
    // The answer CE is stochastic through the draw either way; averaging is
    // variance reduction on the same expectation, and it multiplies the
    // answer-level supervision reaching the velocity net through the bridge.
    int answer_draws = 16;
    double vit_drop = 0.4;  // per-trace chance the policy sees no_img instead of enc_feat
    void validate() const;
};

struct LossBreakdown {
    double ce = 0.0;
    double mse = 0.0;
    double kl = 0.0;
    double total = 0.0;  // ce + lambda_mse*mse + lambda_kl*kl
};

// One Adam step over a batch. All three terms are batch means; direct
// traces contribute exactly zero MSE/KL. For generate traces a fresh
// t ~ U[t_min, 1] and noise draw feed the velocity regression, the bridge
// distillation toward encode(clean), and the answer context's bridge/aux
// features. rng also drives the ViT-drop coin per trace.
LossBreakdown sft_step(Model& m, AdamOptimizer& opt, const std::vector<Trace>& batch,
                       const SftConfig& cfg, Rng& rng);

struct EpochStats {
    LossBreakdown mean_loss;  // averaged over the epoch's steps
    double answer_acc = 0.0;  // teacher-forced answer accuracy, ViT drop off
};

struct SftResult {
    std::vector<EpochStats> epochs;
};

// Epochs x shuffled batches over the traces. Writes a JSON log (config +
// per-epoch loss components) when log_path is non-empty.
SftResult train_sft(Model& m, const std::vector<Trace>& traces, const SftConfig& cfg,
                    uint64_t seed, const std::string& log_path = "");

// Teacher-forced answer-token argmax accuracy over traces, ViT drop off.
// Generate traces rebuild training-style single-step contexts from
// per-sample derived (t, noise) draws and marginalize the answer
// distribution over them, so the number measures fit to the training
// construction, deterministically.
double answer_accuracy(const Model& m, const std::vector<Trace>& traces);

// Mean policy probability of <restore> at position 0 (no bridge/aux).
// The post-SFT behavioral check compares this between hard-degraded and
// clean grids.
double mean_restore_prob(const Model& m, const std::vector<Grid>& grids);

// Fraction of grids whose greedy position-0 decision is <restore>.
double trigger_rate(const Model& m, const std::vector<Grid>& grids);

}  // namespace iglab
