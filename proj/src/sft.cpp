#include "iglab/sft.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "json.hpp"

namespace iglab {

namespace {

Vec probe_logits(const Probe& p, const Vec& feat) {
    Vec out(static_cast<size_t>(kNumClasses), 0.0);
    for (int i = 0; i < kNumClasses; ++i) {
        double acc = 0.0;
        for (int j = 0; j < kFeatDim; ++j)
            acc += p.w.data[static_cast<size_t>(i) * kFeatDim + j] * feat[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = acc + p.b.data[static_cast<size_t>(i)];
    }
    return out;
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<int>(i))]);
}

}  // namespace

const char* pathway_name(Pathway p) {
    switch (p) {
        case Pathway::DirectAnswer: return "direct_answer";
        case Pathway::GenerateThenAnswer: return "generate_then_answer";
    }
    throw std::runtime_error("pathway_name: bad pathway");
}

Pathway parse_pathway(const std::string& name) {
    if (name == "direct_answer") return Pathway::DirectAnswer;
    if (name == "generate_then_answer") return Pathway::GenerateThenAnswer;
    throw std::invalid_argument("parse_pathway: unknown pathway '" + name + "'");
}

Probe train_probe(const Model& m, const DatasetManifest& manifest, uint64_t seed) {
    const size_t n = manifest.records.size();
    if (n < 50) throw std::invalid_argument("train_probe: need at least 50 records");
    std::vector<Vec> feats;
    std::vector<int> labels;
    feats.reserve(n);
    labels.reserve(n);
    for (const ManifestRecord& rec : manifest.records) {
        Sample s = materialize(rec);
        feats.push_back(encode(m, s.clean));
        labels.push_back(rec.class_id);
    }

    Rng rng(derive_seed(seed, hash_str("probe")));
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle_indices(idx, rng);
    const size_t held = std::max<size_t>(1, n / 5);
    const size_t train_n = n - held;

    Probe p{Tensor::zeros({kNumClasses, kFeatDim}), Tensor::zeros({kNumClasses})};
    std::map<std::string, Tensor*> params{{"probe_w", &p.w}, {"probe_b", &p.b}};
    AdamOptimizer opt(0.05);
    const int steps = 300;
    const int batch = 32;
    for (int step = 0; step < steps; ++step) {
        Tape tape;
        NodeRef w = tape.param(p.w, "probe_w");
        NodeRef b = tape.param(p.b, "probe_b");
        std::optional<NodeRef> sum;
        for (int k = 0; k < batch; ++k) {
            size_t i = idx[static_cast<size_t>(rng.uniform_int(static_cast<int>(train_n)))];
            NodeRef logits = tape.add(tape.matmul(w, tape.constant(feats[i])), b);
            NodeRef ce = tape.softmax_cross_entropy(logits, labels[i]);
            sum = sum ? tape.add(*sum, ce) : ce;
        }
        tape.backward(tape.scale(*sum, 1.0 / batch));
        std::map<std::string, Tensor> grads{{"probe_w", tape.grad_tensor(w)},
                                            {"probe_b", tape.grad_tensor(b)}};
        opt.step(params, grads);
    }

    size_t correct = 0;
    for (size_t k = train_n; k < n; ++k) {
        size_t i = idx[k];
        if (argmax(probe_logits(p, feats[i])) == labels[i]) ++correct;
    }
    double acc = static_cast<double>(correct) / static_cast<double>(held);
    if (acc < 0.95)
        throw std::runtime_error("train_probe: held-out clean accuracy " + std::to_string(acc) +
                                 " below 0.95; dataset or severity registry miscalibrated");
    return p;
}

int probe_predict(const Model& m, const Probe& p, const Grid& g) {
    return argmax(probe_logits(p, encode(m, g)));
}

double probe_accuracy(const Model& m, const Probe& p, const std::vector<Sample>& samples,
                      bool on_degraded) {
    if (samples.empty()) throw std::invalid_argument("probe_accuracy: no samples");
    size_t correct = 0;
    for (const Sample& s : samples)
        if (probe_predict(m, p, on_degraded ? s.degraded : s.clean) == s.class_id) ++correct;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

namespace {

constexpr char kProbeMagic[] = "IGL1-PROBE";
constexpr size_t kProbeMagicLen = 10;

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("probe file: truncated");
    return v;
}

}  // namespace

void save_probe(const std::string& path, const Probe& p) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_probe: cannot open " + path);
    f.write(kProbeMagic, kProbeMagicLen);
    write_u32(f, 1);  // version
    for (const Tensor* t : {&p.w, &p.b}) {
        write_u32(f, static_cast<uint32_t>(t->shape.size()));
        for (int d : t->shape) write_u32(f, static_cast<uint32_t>(d));
        for (double v : t->data) {
            float fv = static_cast<float>(v);
            f.write(reinterpret_cast<const char*>(&fv), 4);
        }
    }
    if (!f) throw std::runtime_error("save_probe: write failed for " + path);
}

Probe load_probe(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_probe: cannot open " + path);
    char magic[kProbeMagicLen];
    f.read(magic, kProbeMagicLen);
    if (!f || std::memcmp(magic, kProbeMagic, kProbeMagicLen) != 0)
        throw std::runtime_error("load_probe: bad magic in " + path);
    if (read_u32(f) != 1) throw std::runtime_error("load_probe: unsupported version");
    Probe p{Tensor::zeros({kNumClasses, kFeatDim}), Tensor::zeros({kNumClasses})};
    for (Tensor* t : {&p.w, &p.b}) {
        uint32_t ndims = read_u32(f);
        std::vector<int> shape(ndims);
        for (uint32_t d = 0; d < ndims; ++d) shape[d] = static_cast<int>(read_u32(f));
        if (shape != t->shape) throw std::runtime_error("load_probe: shape mismatch");
        for (double& v : t->data) {
            float fv = 0.0f;
            f.read(reinterpret_cast<char*>(&fv), 4);
            if (!f) throw std::runtime_error("load_probe: truncated data");
            v = static_cast<double>(fv);
        }
    }
    return p;
}

Pathway assign_pathway(const Model& m, const Probe& p, const Sample& s) {
    return probe_predict(m, p, s.degraded) == s.class_id ? Pathway::DirectAnswer
                                                        : Pathway::GenerateThenAnswer;
}

Trace synthesize_trace(const Sample& s, Pathway pw) {
    if (s.class_id < 0 || s.class_id >= kNumClasses)
        throw std::invalid_argument("synthesize_trace: class out of range");
    Trace t;
    t.pathway = pw;
    t.sample = s;
    int answer = kTokAnswer0 + s.class_id;
    if (pw == Pathway::DirectAnswer) {
        t.tokens = {kTokDirect, answer, kTokEos};
        t.positions = {0, 1, 2};
        t.img_slot = -1;
    } else {
        t.tokens = {kTokRestore, answer, kTokEos};
        t.positions = {0, 2, 3};
        t.img_slot = 1;
    }
    return t;
}

std::vector<Trace> build_traces(const Model& m, const Probe& probe,
                                const DatasetManifest& manifest, uint64_t seed) {
    std::vector<Trace> direct, generate;
    for (const ManifestRecord& rec : manifest.records) {
        Sample s = materialize(rec);
        Pathway pw = assign_pathway(m, probe, s);
        (pw == Pathway::DirectAnswer ? direct : generate).push_back(synthesize_trace(s, pw));
    }
    if (direct.empty() || generate.empty())
        throw std::runtime_error("build_traces: a pathway is empty (" +
                                 std::to_string(direct.size()) + " direct, " +
                                 std::to_string(generate.size()) +
                                 " generate); cannot balance 1:1");
    Rng rng(derive_seed(seed, hash_str("balance")));
    auto subsample = [&](std::vector<Trace>& v, size_t keep) {
        for (size_t i = 0; i < keep; ++i)
            std::swap(v[i], v[i + static_cast<size_t>(rng.uniform_int(
                                      static_cast<int>(v.size() - i)))]);
        v.resize(keep);
    };
    size_t keep = std::min(direct.size(), generate.size());
    subsample(direct, keep);
    subsample(generate, keep);
    std::vector<Trace> out;
    out.reserve(2 * keep);
    for (size_t i = 0; i < keep; ++i) {
        out.push_back(std::move(direct[i]));
        out.push_back(std::move(generate[i]));
    }
    return out;
}

void SftConfig::validate() const {
    if (lambda_mse < 0.0 || lambda_kl < 0.0)
        throw std::invalid_argument("SftConfig: loss weights must be >= 0");
    if (epochs <= 0) throw std::invalid_argument("SftConfig: epochs must be positive");
    if (lr <= 0.0) throw std::invalid_argument("SftConfig: lr must be positive");
    if (sample_count <= 0) throw std::invalid_argument("SftConfig: sample_count must be positive");
    if (batch_size <= 0) throw std::invalid_argument("SftConfig: batch_size must be positive");
    if (flow_draws <= 0) throw std::invalid_argument("SftConfig: flow_draws must be positive");
    if (answer_draws <= 0) throw std::invalid_argument("SftConfig: answer_draws must be positive");
    if (vit_drop < 0.0 || vit_drop > 1.0)
        throw std::invalid_argument("SftConfig: vit_drop must be in [0, 1]");
}

LossBreakdown sft_step(Model& m, AdamOptimizer& opt, const std::vector<Trace>& batch,
                       const SftConfig& cfg, Rng& rng) {
    cfg.validate();
    if (batch.empty()) throw std::invalid_argument("sft_step: empty batch");
    Tape tape;
    ModelNodes nodes = register_model(tape, m);
    std::optional<NodeRef> ce_sum, mse_sum, kl_sum;
    auto accumulate = [&](std::optional<NodeRef>& slot, NodeRef term) {
        slot = slot ? tape.add(*slot, term) : term;
    };

    for (const Trace& tr : batch) {
        Vec enc = encode(m, tr.sample.degraded);
        NodeRef enc_node = tape.constant(enc);
        bool drop = rng.bernoulli(cfg.vit_drop);
        NodeRef policy_enc = drop ? nodes.at("no_img") : enc_node;

        if (tr.pathway == Pathway::GenerateThenAnswer) {
            std::optional<NodeRef> fm_sum, answer_ce_sum;
            std::optional<NodeRef> bridge0, aux0;
            int answer_token = tr.tokens[1];
            for (int draw = 0; draw < cfg.flow_draws + cfg.answer_draws; ++draw) {
                bool answer_draw = draw >= cfg.flow_draws;
                double t = rng.uniform(kTMin, 1.0);
                Vec noise(static_cast<size_t>(kLatentDim));
                Vec xt(static_cast<size_t>(kLatentDim));
                Vec target(static_cast<size_t>(kLatentDim));
                for (int i = 0; i < kLatentDim; ++i) {
                    noise[static_cast<size_t>(i)] = rng.normal();
                    double clean = tr.sample.clean.pixels[static_cast<size_t>(i)];
                    xt[static_cast<size_t>(i)] =
                        t * noise[static_cast<size_t>(i)] + (1.0 - t) * clean;
                    target[static_cast<size_t>(i)] = noise[static_cast<size_t>(i)] - clean;
                }
                NodeRef v = velocity_tape(tape, nodes, tape.constant(xt), t, enc_node);
                if (!answer_draw) {
                    NodeRef resid = tape.sub(v, tape.constant(target));
                    NodeRef sq = tape.sum(tape.mul(resid, resid));
                    fm_sum = fm_sum ? tape.add(*fm_sum, sq) : sq;
                } else {
                    NodeRef x0_hat = tape.sub(tape.constant(xt), tape.scale(v, t));
                    NodeRef bridge = bridge_inject_tape(tape, nodes, x0_hat);
                    NodeRef aux = encode_tape(tape, nodes, x0_hat, /*sg=*/true);
                    ContextNodes actx;
                    actx.enc_feat = policy_enc;
                    actx.bridge_feat = bridge;
                    actx.aux_feat = aux;
                    actx.prev_token = tr.tokens[0];
                    actx.position = tr.positions[1];
                    NodeRef ce = tape.softmax_cross_entropy(
                        policy_logits_tape(tape, nodes, actx), answer_token);
                    answer_ce_sum = answer_ce_sum ? tape.add(*answer_ce_sum, ce) : ce;
                    if (draw == cfg.flow_draws) {
                        // First answer draw also feeds the distillation
                        // residual and the contexts of the remaining positions.
                        NodeRef kl_resid =
                            tape.sub(bridge, tape.constant(encode(m, tr.sample.clean)));
                        accumulate(kl_sum, tape.sum(tape.mul(kl_resid, kl_resid)));
                        bridge0 = bridge;
                        aux0 = aux;
                    }
                }
            }
            accumulate(mse_sum, tape.scale(*fm_sum, 1.0 / cfg.flow_draws));
            // Decision token: no bridge yet. Answer: averaged above. <eos>:
            // draw-0 bridge context.
            ContextNodes c0;
            c0.enc_feat = policy_enc;
            c0.prev_token = kBosIndex;
            c0.position = tr.positions[0];
            accumulate(ce_sum, tape.softmax_cross_entropy(policy_logits_tape(tape, nodes, c0),
                                                          tr.tokens[0]));
            accumulate(ce_sum, tape.scale(*answer_ce_sum, 1.0 / cfg.answer_draws));
            ContextNodes ce_ctx;
            ce_ctx.enc_feat = policy_enc;
            ce_ctx.bridge_feat = bridge0;
            ce_ctx.aux_feat = aux0;
            ce_ctx.prev_token = answer_token;
            ce_ctx.position = tr.positions[2];
            accumulate(ce_sum, tape.softmax_cross_entropy(policy_logits_tape(tape, nodes, ce_ctx),
                                                          tr.tokens[2]));
        } else {
            for (size_t j = 0; j < tr.tokens.size(); ++j) {
                ContextNodes ctx;
                ctx.enc_feat = policy_enc;
                ctx.position = tr.positions[j];
                ctx.prev_token = j == 0 ? kBosIndex : tr.tokens[j - 1];
                NodeRef logits = policy_logits_tape(tape, nodes, ctx);
                accumulate(ce_sum, tape.softmax_cross_entropy(logits, tr.tokens[j]));
            }
        }
    }

    double inv = 1.0 / static_cast<double>(batch.size());
    LossBreakdown out;
    NodeRef ce = tape.scale(*ce_sum, inv);
    out.ce = tape.scalar(ce);
    NodeRef total = ce;
    if (mse_sum) {
        NodeRef mse = tape.scale(*mse_sum, inv);
        out.mse = tape.scalar(mse);
        total = tape.add(total, tape.scale(mse, cfg.lambda_mse));
    }
    if (kl_sum) {
        NodeRef kl = tape.scale(*kl_sum, inv);
        out.kl = tape.scalar(kl);
        total = tape.add(total, tape.scale(kl, cfg.lambda_kl));
    }
    out.total = tape.scalar(total);
    if (!std::isfinite(out.total))
        throw std::runtime_error("sft_step: non-finite loss");
    tape.backward(total);
    auto params = m.trainable_map();
    opt.step(params, collect_grads(tape, nodes, m));
    return out;
}

SftResult train_sft(Model& m, const std::vector<Trace>& traces, const SftConfig& cfg,
                    uint64_t seed, const std::string& log_path) {
    cfg.validate();
    if (traces.empty()) throw std::invalid_argument("train_sft: no traces");
    AdamOptimizer opt(cfg.lr);
    Rng rng(derive_seed(seed, hash_str("sft")));
    std::vector<size_t> order(traces.size());
    std::iota(order.begin(), order.end(), 0);

    size_t steps_per_epoch =
        (traces.size() + static_cast<size_t>(cfg.batch_size) - 1) / static_cast<size_t>(cfg.batch_size);
    size_t total_steps = steps_per_epoch * static_cast<size_t>(cfg.epochs);
    size_t global_step = 0;

    SftResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(order, rng);
        LossBreakdown sum;
        int steps = 0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
            // Warmup then cosine decay to 5% of peak; a from-scratch run this
            // short plateaus at a fixed-lr noise floor otherwise.
            const size_t warmup = std::min<size_t>(150, total_steps / 4);
            double lr;
            if (global_step < warmup) {
                lr = cfg.lr * static_cast<double>(global_step + 1) / static_cast<double>(warmup);
            } else {
                double progress = static_cast<double>(global_step - warmup) /
                                  static_cast<double>(total_steps - warmup);
                lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
            }
            ++global_step;
            opt.set_learning_rate(lr);
            size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
            std::vector<Trace> batch;
            batch.reserve(end - begin);
            for (size_t k = begin; k < end; ++k) batch.push_back(traces[order[k]]);
            LossBreakdown b = sft_step(m, opt, batch, cfg, rng);
            sum.ce += b.ce;
            sum.mse += b.mse;
            sum.kl += b.kl;
            sum.total += b.total;
            ++steps;
        }
        EpochStats es;
        es.mean_loss = {sum.ce / steps, sum.mse / steps, sum.kl / steps, sum.total / steps};
        es.answer_acc = answer_accuracy(m, traces);
        result.epochs.push_back(es);
    }

    if (!log_path.empty()) {
        nlohmann::json j;
        j["stage"] = "sft";
        j["config"] = {{"lambda_mse", cfg.lambda_mse}, {"lambda_kl", cfg.lambda_kl},
                       {"epochs", cfg.epochs},         {"lr", cfg.lr},
                       {"sample_count", cfg.sample_count}, {"batch_size", cfg.batch_size},
                       {"flow_draws", cfg.flow_draws}, {"answer_draws", cfg.answer_draws},
                       {"vit_drop", cfg.vit_drop},     {"seed", seed},
                       {"trace_count", traces.size()}};
        j["epochs"] = nlohmann::json::array();
        for (size_t e = 0; e < result.epochs.size(); ++e) {
            const EpochStats& es = result.epochs[e];
            j["epochs"].push_back({{"epoch", e + 1},
                                   {"ce", es.mean_loss.ce},
                                   {"mse", es.mean_loss.mse},
                                   {"kl", es.mean_loss.kl},
                                   {"total", es.mean_loss.total},
                                   {"answer_acc", es.answer_acc}});
        }
        std::ofstream f(log_path);
        if (!f) throw std::runtime_error("train_sft: cannot open log " + log_path);
        f << j.dump(2) << "\n";
    }
    return result;
}

double answer_accuracy(const Model& m, const std::vector<Trace>& traces) {
    if (traces.empty()) throw std::invalid_argument("answer_accuracy: no traces");
    constexpr int kEvalDraws = 8;
    size_t correct = 0;
    for (const Trace& tr : traces) {
        Vec enc = encode(m, tr.sample.degraded);
        int answer = tr.tokens[tr.tokens.size() - 2];
        if (tr.pathway == Pathway::DirectAnswer) {
            Context ctx;
            ctx.enc_feat = enc;
            ctx.prev_token = kTokDirect;
            ctx.position = 1;
            if (argmax(policy_logits(m, ctx)) == answer) ++correct;
            continue;
        }
        // The answer context of a generate trace is stochastic through the
        // (t, noise) draw, and training averages the answer CE over such
        // draws. The matched readout marginalizes the same way: mean
        // log-softmax over draws, then argmax. A single draw would measure
        // draw luck as much as model knowledge.
        Rng r(derive_seed(tr.sample.spec.seed, hash_str("sft-eval")));
        Vec mean_lp;
        for (int d = 0; d < kEvalDraws; ++d) {
            double t = r.uniform(kTMin, 1.0);
            Vec xt(static_cast<size_t>(kLatentDim));
            for (int i = 0; i < kLatentDim; ++i)
                xt[static_cast<size_t>(i)] = t * r.normal() +
                                             (1.0 - t) * tr.sample.clean.pixels[static_cast<size_t>(i)];
            Vec x0_hat = predict_clean(m, xt, t, enc);
            Context ctx;
            ctx.enc_feat = enc;
            ctx.bridge_feat = bridge_inject(m, x0_hat);
            ctx.aux_feat = encode_latent(m, x0_hat);
            ctx.prev_token = kTokRestore;
            ctx.position = 2;
            Vec logits = policy_logits(m, ctx);
            if (mean_lp.empty()) mean_lp.assign(logits.size(), 0.0);
            for (size_t i = 0; i < logits.size(); ++i)
                mean_lp[i] += log_softmax_at(logits, static_cast<int>(i)) / kEvalDraws;
        }
        if (argmax(mean_lp) == answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(traces.size());
}

double mean_restore_prob(const Model& m, const std::vector<Grid>& grids) {
    if (grids.empty()) throw std::invalid_argument("mean_restore_prob: no grids");
    double acc = 0.0;
    for (const Grid& g : grids) {
        Context ctx;
        ctx.enc_feat = encode(m, g);
        acc += softmax(policy_logits(m, ctx))[kTokRestore];
    }
    return acc / static_cast<double>(grids.size());
}

double trigger_rate(const Model& m, const std::vector<Grid>& grids) {
    if (grids.empty()) throw std::invalid_argument("trigger_rate: no grids");
    size_t hits = 0;
    for (const Grid& g : grids) {
        Context ctx;
        ctx.enc_feat = encode(m, g);
        if (argmax(policy_logits(m, ctx)) == kTokRestore) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(grids.size());
}

}  // namespace iglab
