#include "iglab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace iglab {

namespace {

// Canonical tensor order for checkpoints and tape registration.
const char* kTensorOrder[] = {
    "enc_w", "enc_b", "pol_w1", "pol_b1", "pol_w2", "pol_b2", "emb",
    "no_img", "vel_w1", "vel_b1", "vel_w2", "vel_b2", "bridge_w",
};

// Shared by plain and tape paths: y = W x (W 2-D, x 1-D), identical loop
// order to Tape::matmul so both produce bitwise-equal results.
Vec linear(const Tensor& w, const Vec& x) {
    int m = w.shape[0], k = w.shape[1];
    Vec y(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += w.data[static_cast<size_t>(i) * k + p] * x[static_cast<size_t>(p)];
        y[static_cast<size_t>(i)] = acc;
    }
    return y;
}

void add_inplace(Vec& y, const Vec& b) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += b[i];
}

void tanh_inplace(Vec& y) {
    for (double& v : y) v = std::tanh(v);
}

void check_t(double t) {
    if (!(t >= kTMin - 1e-12 && t <= 1.0 + 1e-12))
        throw std::runtime_error("velocity: t outside [t_min, 1]");
}

Vec context_vector(const Model& m, const Context& ctx) {
    if (ctx.position < 0 || ctx.position >= kMaxPositions)
        throw std::runtime_error("context: position out of range");
    if (ctx.prev_token < 0 || ctx.prev_token > kBosIndex)
        throw std::runtime_error("context: bad prev_token");
    Vec v;
    v.reserve(static_cast<size_t>(kContextDim));
    v.insert(v.end(), ctx.enc_feat.begin(), ctx.enc_feat.end());
    const Vec& bridge = ctx.bridge_feat ? *ctx.bridge_feat : m.no_img.data;
    v.insert(v.end(), bridge.begin(), bridge.end());
    if (ctx.aux_feat) {
        v.insert(v.end(), ctx.aux_feat->begin(), ctx.aux_feat->end());
    } else {
        v.insert(v.end(), static_cast<size_t>(kFeatDim), 0.0);
    }
    size_t row = static_cast<size_t>(ctx.prev_token) * kEmbDim;
    v.insert(v.end(), m.emb.data.begin() + row, m.emb.data.begin() + row + kEmbDim);
    for (int p = 0; p < kMaxPositions; ++p) v.push_back(p == ctx.position ? 1.0 : 0.0);
    return v;
}

}  // namespace

const char* token_name(int token) {
    static const char* names[kVocabSize] = {
        "<direct>", "<restore>", "A_0", "A_1", "A_2", "A_3", "A_4", "A_5", "<eos>",
    };
    if (token < 0 || token >= kVocabSize) throw std::runtime_error("token_name: out of range");
    return names[token];
}

std::map<std::string, Tensor*> Model::trainable_map() {
    return {
        {"pol_w1", &pol_w1}, {"pol_b1", &pol_b1}, {"pol_w2", &pol_w2},
        {"pol_b2", &pol_b2}, {"emb", &emb},       {"no_img", &no_img},
        {"vel_w1", &vel_w1}, {"vel_b1", &vel_b1}, {"vel_w2", &vel_w2},
        {"vel_b2", &vel_b2}, {"bridge_w", &bridge_w},
    };
}

std::map<std::string, Tensor*> Model::all_map() {
    auto m = trainable_map();
    m["enc_w"] = &enc_w;
    m["enc_b"] = &enc_b;
    return m;
}

Model init_model(uint64_t seed) {
    Model m;
    auto rn = [&](const char* name, std::vector<int> shape, double std) {
        Rng r(derive_seed(seed, hash_str(name)));
        return Tensor::randn(std::move(shape), r, std);
    };
    m.enc_w = rn("enc_w", {kFeatDim, kLatentDim}, 1.0 / std::sqrt(double(kLatentDim)));
    m.enc_b = rn("enc_b", {kFeatDim}, 0.5);
    m.pol_w1 = rn("pol_w1", {kPolicyHidden, kContextDim}, 1.0 / std::sqrt(double(kContextDim)));
    m.pol_b1 = Tensor::zeros({kPolicyHidden});
    // Small head init: near-uniform starting distribution over tokens.
    m.pol_w2 = rn("pol_w2", {kVocabSize, kPolicyHidden}, 0.05 / std::sqrt(double(kPolicyHidden)));
    m.pol_b2 = Tensor::zeros({kVocabSize});
    m.emb = rn("emb", {(kVocabSize + 1) * kEmbDim}, 0.5);
    m.no_img = rn("no_img", {kFeatDim}, 0.5);
    m.vel_w1 = rn("vel_w1", {kVelHidden, kVelInputDim}, 1.0 / std::sqrt(double(kVelInputDim)));
    m.vel_b1 = Tensor::zeros({kVelHidden});
    // Small output init: initial velocity near zero keeps early x0_hat sane.
    m.vel_w2 = rn("vel_w2", {kLatentDim, kVelHidden}, 0.01 / std::sqrt(double(kVelHidden)));
    m.vel_b2 = Tensor::zeros({kLatentDim});
    m.bridge_w = rn("bridge_w", {kFeatDim, kLatentDim}, 1.0 / std::sqrt(double(kLatentDim)));

    // Non-degeneracy: every pixel must reach at least one encoder feature.
    for (int j = 0; j < kLatentDim; ++j) {
        double col = 0.0;
        for (int i = 0; i < kFeatDim; ++i)
            col += std::abs(m.enc_w.data[static_cast<size_t>(i) * kLatentDim + j]);
        if (col == 0.0) throw std::runtime_error("init_model: degenerate encoder column");
    }
    return m;
}

BridgeMode parse_bridge_mode(const std::string& name) {
    if (name == "full_bridge") return BridgeMode::FullBridge;
    if (name == "dec_reenc") return BridgeMode::DecReenc;
    if (name == "latent_substitution") return BridgeMode::Substitution;
    throw std::runtime_error("parse_bridge_mode: unknown mode '" + name + "'");
}

const char* bridge_mode_name(BridgeMode m) {
    switch (m) {
        case BridgeMode::FullBridge: return "full_bridge";
        case BridgeMode::DecReenc: return "dec_reenc";
        case BridgeMode::Substitution: return "latent_substitution";
    }
    throw std::runtime_error("bridge_mode_name: bad mode");
}

Vec encode(const Model& m, const Grid& g) {
    if (g.size() != kLatentDim) throw std::runtime_error("encode: grid size != latent dim");
    return encode_latent(m, g.pixels);
}

Vec encode_latent(const Model& m, const Vec& latent) {
    Vec h = linear(m.enc_w, latent);
    add_inplace(h, m.enc_b.data);
    tanh_inplace(h);
    return h;
}

Vec policy_logits(const Model& m, const Context& ctx) {
    Vec in = context_vector(m, ctx);
    Vec h = linear(m.pol_w1, in);
    add_inplace(h, m.pol_b1.data);
    tanh_inplace(h);
    Vec out = linear(m.pol_w2, h);
    add_inplace(out, m.pol_b2.data);
    return out;
}

Vec velocity(const Model& m, const Vec& x_t, double t, const Vec& cond) {
    check_t(t);
    if (x_t.size() != kLatentDim || cond.size() != kFeatDim)
        throw std::runtime_error("velocity: bad input sizes");
    Vec in;
    in.reserve(static_cast<size_t>(kVelInputDim));
    in.insert(in.end(), x_t.begin(), x_t.end());
    in.push_back(t);
    in.insert(in.end(), cond.begin(), cond.end());
    Vec h = linear(m.vel_w1, in);
    add_inplace(h, m.vel_b1.data);
    tanh_inplace(h);
    Vec out = linear(m.vel_w2, h);
    add_inplace(out, m.vel_b2.data);
    return out;
}

Vec predict_clean(const Model& m, const Vec& x_t, double t, const Vec& cond) {
    Vec v = velocity(m, x_t, t, cond);
    Vec x0(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) x0[i] = x_t[i] - t * v[i];
    return x0;
}

Vec bridge_inject(const Model& m, const Vec& x0_hat) {
    return linear(m.bridge_w, x0_hat);
}

Vec softmax(const Vec& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    Vec p(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

double log_softmax_at(const Vec& logits, int idx) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return logits[static_cast<size_t>(idx)] - mx - std::log(z);
}

int sample_categorical(const Vec& probs, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;  // u landed in rounding slack
}

int argmax(const Vec& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

NodeRef ModelNodes::at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("ModelNodes: unknown tensor " + name);
    return it->second;
}

ModelNodes register_model(Tape& tape, const Model& m) {
    ModelNodes nodes;
    Model& mm = const_cast<Model&>(m);
    auto trainables = mm.trainable_map();
    auto all = mm.all_map();
    for (const char* name : kTensorOrder) {
        Tensor* t = all.at(name);
        if (trainables.count(name)) {
            nodes.by_name[name] = tape.param(*t, name);
        } else {
            nodes.by_name[name] = tape.constant(*t);  // frozen encoder
        }
    }
    return nodes;
}

std::map<std::string, Tensor> collect_grads(const Tape& tape, const ModelNodes& nodes,
                                            const Model& m) {
    std::map<std::string, Tensor> grads;
    Model& mm = const_cast<Model&>(m);
    for (auto& [name, tensor] : mm.trainable_map()) {
        (void)tensor;
        grads[name] = tape.grad_tensor(nodes.at(name));
    }
    return grads;
}

NodeRef policy_logits_tape(Tape& tape, const ModelNodes& nodes, const ContextNodes& ctx) {
    if (ctx.position < 0 || ctx.position >= kMaxPositions)
        throw std::runtime_error("context: position out of range");
    if (ctx.prev_token < 0 || ctx.prev_token > kBosIndex)
        throw std::runtime_error("context: bad prev_token");
    NodeRef bridge = ctx.bridge_feat ? *ctx.bridge_feat : nodes.at("no_img");
    NodeRef aux = ctx.aux_feat ? *ctx.aux_feat
                               : tape.constant(Vec(static_cast<size_t>(kFeatDim), 0.0));
    NodeRef prev = tape.slice(nodes.at("emb"), ctx.prev_token * kEmbDim, kEmbDim);
    Vec onehot(static_cast<size_t>(kMaxPositions), 0.0);
    onehot[static_cast<size_t>(ctx.position)] = 1.0;
    NodeRef pos = tape.constant(onehot);
    std::vector<NodeRef> parts{ctx.enc_feat, bridge, aux, prev, pos};
    NodeRef in = tape.concat(parts);
    NodeRef h = tape.tanh(tape.add(tape.matmul(nodes.at("pol_w1"), in), nodes.at("pol_b1")));
    return tape.add(tape.matmul(nodes.at("pol_w2"), h), nodes.at("pol_b2"));
}

NodeRef velocity_tape(Tape& tape, const ModelNodes& nodes, NodeRef x_t, double t,
                      NodeRef cond) {
    check_t(t);
    NodeRef tn = tape.constant(Vec{t});
    std::vector<NodeRef> parts{x_t, tn, cond};
    NodeRef in = tape.concat(parts);
    NodeRef h = tape.tanh(tape.add(tape.matmul(nodes.at("vel_w1"), in), nodes.at("vel_b1")));
    return tape.add(tape.matmul(nodes.at("vel_w2"), h), nodes.at("vel_b2"));
}

NodeRef predict_clean_tape(Tape& tape, const ModelNodes& nodes, NodeRef x_t, double t,
                           NodeRef cond) {
    NodeRef v = velocity_tape(tape, nodes, x_t, t, cond);
    return tape.sub(x_t, tape.scale(v, t));
}

NodeRef bridge_inject_tape(Tape& tape, const ModelNodes& nodes, NodeRef x0_hat) {
    return tape.matmul(nodes.at("bridge_w"), x0_hat);
}

NodeRef encode_tape(Tape& tape, const ModelNodes& nodes, NodeRef latent, bool sg) {
    NodeRef in = sg ? tape.stop_gradient(latent) : latent;
    return tape.tanh(tape.add(tape.matmul(nodes.at("enc_w"), in), nodes.at("enc_b")));
}

// ---- Checkpoint ----------------------------------------------------------

namespace {

void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

constexpr char kCkptMagic[] = "IGL1-CKPT";
constexpr size_t kCkptMagicLen = 9;
constexpr uint32_t kCkptVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const Model& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kCkptMagic, kCkptMagicLen);
    write_u32(f, kCkptVersion);
    Model& mm = const_cast<Model&>(m);
    auto all = mm.all_map();
    write_u32(f, static_cast<uint32_t>(all.size()));
    for (const char* name : kTensorOrder) {
        const Tensor& t = *all.at(name);
        uint32_t nlen = static_cast<uint32_t>(std::strlen(name));
        write_u32(f, nlen);
        f.write(name, nlen);
        write_u32(f, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) write_u32(f, static_cast<uint32_t>(d));
        for (double v : t.data) {
            float fv = static_cast<float>(v);
            f.write(reinterpret_cast<const char*>(&fv), 4);
        }
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[kCkptMagicLen];
    f.read(magic, kCkptMagicLen);
    if (!f || std::memcmp(magic, kCkptMagic, kCkptMagicLen) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint32_t version = read_u32(f);
    if (version != kCkptVersion)
        throw std::runtime_error("load_checkpoint: unsupported version");
    uint32_t count = read_u32(f);

    Model m = init_model(0);  // shapes only; every tensor is overwritten below
    auto all = m.all_map();
    if (count != all.size()) throw std::runtime_error("load_checkpoint: bad record count");
    for (uint32_t r = 0; r < count; ++r) {
        uint32_t nlen = read_u32(f);
        if (nlen > 256) throw std::runtime_error("load_checkpoint: oversized name");
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        if (!f) throw std::runtime_error("load_checkpoint: truncated name");
        auto it = all.find(name);
        if (it == all.end()) throw std::runtime_error("load_checkpoint: unknown tensor " + name);
        Tensor& t = *it->second;
        uint32_t ndims = read_u32(f);
        std::vector<int> shape(ndims);
        for (uint32_t d = 0; d < ndims; ++d) shape[d] = static_cast<int>(read_u32(f));
        if (shape != t.shape) throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        for (double& v : t.data) {
            float fv = 0.0f;
            f.read(reinterpret_cast<char*>(&fv), 4);
            if (!f) throw std::runtime_error("load_checkpoint: truncated data");
            v = static_cast<double>(fv);
        }
    }
    return m;
}

}  // namespace iglab
