#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iglab/synthworld.hpp"
#include "iglab/tensor.hpp"

namespace iglab {

// ---- Token grammar -------------------------------------------------------
//
// A trace is at most 4 positions: the decision token, an optional IMG slot
// (a marker, not a sampled token, present only on restore traces), the
// answer token, and <eos>. The policy therefore always emits exactly three
// tokens; the IMG slot shifts the positions of the last two.
enum Token : int {
    kTokDirect = 0,
    kTokRestore = 1,
    kTokAnswer0 = 2,  // kTokAnswer0 + class_id for classes 0..5
    kTokEos = 8,
};
inline constexpr int kVocabSize = 9;     // <direct>, <restore>, A_0..A_5, <eos>
inline constexpr int kBosIndex = 9;      // extra embedding row for "no previous token"
inline constexpr int kMaxPositions = 4;  // grammar positions incl. the IMG slot

const char* token_name(int token);

// ---- Dimensions ----------------------------------------------------------
inline constexpr int kLatentDim = 144;  // 12x12 grid, identity latent map
inline constexpr int kFeatDim = 32;     // encoder / bridge feature width
inline constexpr int kEmbDim = 16;
inline constexpr int kPolicyHidden = 64;
inline constexpr int kVelHidden = 128;
// enc + bridge + sft-aux + prev-token embedding + position one-hot
inline constexpr int kContextDim = kFeatDim * 3 + kEmbDim + kMaxPositions;
inline constexpr int kVelInputDim = kLatentDim + 1 + kFeatDim;
inline constexpr double kTMin = 0.02;  // flow time floor shared with flowcore

// ---- Parameters ----------------------------------------------------------
//
// enc_* is the frozen perception encoder; everything else trains. The
// embedding table is stored flat ({(kVocabSize+1) * kEmbDim}) so rows can be
// sliced on the tape.
struct Model {
    Tensor enc_w;   // [kFeatDim, kLatentDim], frozen
    Tensor enc_b;   // [kFeatDim], frozen
    Tensor pol_w1;  // [kPolicyHidden, kContextDim]
    Tensor pol_b1;
    Tensor pol_w2;  // [kVocabSize, kPolicyHidden]
    Tensor pol_b2;
    Tensor emb;     // [(kVocabSize+1) * kEmbDim] flat
    Tensor no_img;  // [kFeatDim] learned stand-in for an absent bridge feature
    Tensor vel_w1;  // [kVelHidden, kVelInputDim]
    Tensor vel_b1;
    Tensor vel_w2;  // [kLatentDim, kVelHidden]
    Tensor vel_b2;
    Tensor bridge_w;  // [kFeatDim, kLatentDim], the latent bridge

    // Trainable tensors by canonical name (excludes enc_*).
    std::map<std::string, Tensor*> trainable_map();
    // Every tensor, for checkpointing.
    std::map<std::string, Tensor*> all_map();
};

// Seeded init. Verifies the encoder projection is non-degenerate (no pixel
// column identically zero) so single-pixel changes always move the feature.
Model init_model(uint64_t seed);

// How bridge_feat is produced after a restore step.
enum class BridgeMode {
    FullBridge,    // bridge_w * x0_hat, gradient flows into the velocity net
    DecReenc,      // encode(stop_gradient(x0_hat)): no gradient to generation
    Substitution,  // bridge_w * latent(degraded grid): diagnostic content swap
};
BridgeMode parse_bridge_mode(const std::string& name);
const char* bridge_mode_name(BridgeMode m);

// ---- Plain (no-tape) forward passes -------------------------------------
struct Context {
    Vec enc_feat;                   // kFeatDim
    std::optional<Vec> bridge_feat; // kFeatDim, present only after restore
    std::optional<Vec> aux_feat;    // kFeatDim, SFT-only ViT-reencode slot
    int prev_token = kBosIndex;
    int position = 0;  // grammar position in [0, kMaxPositions)
};

Vec encode(const Model& m, const Grid& g);
Vec encode_latent(const Model& m, const Vec& latent);  // same map, raw vector in
Vec policy_logits(const Model& m, const Context& ctx);
Vec velocity(const Model& m, const Vec& x_t, double t, const Vec& cond);
// Straight-path clean estimate: x0_hat = x_t - t * velocity(x_t, t, cond).
Vec predict_clean(const Model& m, const Vec& x_t, double t, const Vec& cond);
Vec bridge_inject(const Model& m, const Vec& x0_hat);

Vec softmax(const Vec& logits);
double log_softmax_at(const Vec& logits, int idx);
int sample_categorical(const Vec& probs, Rng& rng);
int argmax(const Vec& v);

// ---- Tape forward passes -------------------------------------------------
//
// Same arithmetic as the plain versions, in the same operation order, so a
// plain forward and a tape forward of identical inputs agree bitwise.
struct ModelNodes {
    std::map<std::string, NodeRef> by_name;
    NodeRef at(const std::string& name) const;
};

// Registers trainables as tape params and enc_* as constants.
ModelNodes register_model(Tape& tape, const Model& m);
// Gradients for every trainable after backward(), keyed like trainable_map().
std::map<std::string, Tensor> collect_grads(const Tape& tape, const ModelNodes& nodes,
                                            const Model& m);

// Context pieces that are plain data become tape constants internally.
struct ContextNodes {
    NodeRef enc_feat;                    // constant
    std::optional<NodeRef> bridge_feat;  // tape-computed or absent
    std::optional<NodeRef> aux_feat;     // constant (stop-gradient by construction)
    int prev_token = kBosIndex;
    int position = 0;
};

NodeRef policy_logits_tape(Tape& tape, const ModelNodes& nodes, const ContextNodes& ctx);
NodeRef velocity_tape(Tape& tape, const ModelNodes& nodes, NodeRef x_t, double t,
                      NodeRef cond);
NodeRef predict_clean_tape(Tape& tape, const ModelNodes& nodes, NodeRef x_t, double t,
                           NodeRef cond);
NodeRef bridge_inject_tape(Tape& tape, const ModelNodes& nodes, NodeRef x0_hat);
// encode() on the tape with enc_* as constants; input is stop-gradient'd
// first when sg is true (the dec-reenc ablation path).
NodeRef encode_tape(Tape& tape, const ModelNodes& nodes, NodeRef latent, bool sg);

// ---- Checkpoint file -----------------------------------------------------
//
// Layout: magic "IGL1-CKPT", u32 version, u32 record count, then per record
// u32 name length, name bytes, u32 ndims, u32 dims..., f32 data row-major.
// Little-endian. Fixed record order, so save(load(p)) is byte-identical.
void save_checkpoint(const std::string& path, const Model& m);
Model load_checkpoint(const std::string& path);

}  // namespace iglab
