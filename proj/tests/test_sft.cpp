#include "doctest.h"
#include "iglab/sft.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

using namespace iglab;

namespace {

std::vector<Sample> materialize_all(const DatasetManifest& man) {
    std::vector<Sample> out;
    out.reserve(man.records.size());
    for (const auto& rec : man.records) out.push_back(materialize(rec));
    return out;
}

ManifestRecord clean_record(int id, int class_id, uint64_t seed) {
    ManifestRecord r;
    r.sample_id = id;
    r.class_id = class_id;
    r.kind = Kind::GaussianNoise;
    r.severity = Severity::Clean;
    r.seed = seed;
    return r;
}

}  // namespace

TEST_CASE("pathway names round-trip and reject junk") {
    CHECK(pathway_name(Pathway::DirectAnswer) == "direct_answer");
    CHECK(pathway_name(Pathway::GenerateThenAnswer) == "generate_then_answer");
    CHECK(parse_pathway("direct_answer") == Pathway::DirectAnswer);
    CHECK(parse_pathway("generate_then_answer") == Pathway::GenerateThenAnswer);
    CHECK_THROWS_AS(parse_pathway("restore"), std::invalid_argument);
}

TEST_CASE("probe clears the clean floor, degrades with severity, and is deterministic") {
    Model m = init_model(11);
    DatasetManifest man = build_dataset(600, {}, 5);
    Probe p = train_probe(m, man, 5);

    DatasetManifest ev = build_dataset(300, {}, 77);
    std::vector<Sample> low, mid, hard, all = materialize_all(ev);
    for (const Sample& s : all) {
        if (s.spec.severity == Severity::Low) low.push_back(s);
        if (s.spec.severity == Severity::Mid) mid.push_back(s);
        if (s.spec.severity == Severity::Hard) hard.push_back(s);
    }
    CHECK(probe_accuracy(m, p, all, /*on_degraded=*/false) >= 0.95);
    double acc_low = probe_accuracy(m, p, low, true);
    double acc_hard = probe_accuracy(m, p, hard, true);
    CHECK(acc_hard < acc_low);

    Probe p2 = train_probe(m, man, 5);
    CHECK(p2.w.data == p.w.data);
    CHECK(p2.b.data == p.b.data);
}

TEST_CASE("probe files round-trip and reject truncation") {
    Model m = init_model(11);
    DatasetManifest man = build_dataset(600, {}, 5);
    Probe p = train_probe(m, man, 5);
    const char* path = "probe_roundtrip.bin";
    save_probe(path, p);
    Probe q = load_probe(path);
    CHECK(q.w.shape == p.w.shape);
    // Stored as float32, so round-tripping is exact at that precision.
    for (size_t i = 0; i < p.w.data.size(); ++i)
        CHECK(q.w.data[i] == static_cast<double>(static_cast<float>(p.w.data[i])));
    for (size_t i = 0; i < p.b.data.size(); ++i)
        CHECK(q.b.data[i] == static_cast<double>(static_cast<float>(p.b.data[i])));
    for (int id = 0; id < 8; ++id) {
        Grid g = make_shape(id % kNumClasses, 300 + id);
        CHECK(probe_predict(m, q, g) == probe_predict(m, p, g));
    }

    std::ofstream(path, std::ios::binary | std::ios::trunc) << "IGL1-PRO";
    CHECK_THROWS_AS(load_probe(path), std::runtime_error);
    std::remove(path);
}

TEST_CASE("pathway assignment follows probe correctness exactly") {
    Model m = init_model(11);
    DatasetManifest man = build_dataset(600, {}, 5);
    Probe p = train_probe(m, man, 5);

    DatasetManifest ev = build_dataset(300, {}, 99);
    int direct_n = 0, generate_n = 0;
    for (const Sample& s : materialize_all(ev)) {
        bool correct = probe_predict(m, p, s.degraded) == s.class_id;
        Pathway pw = assign_pathway(m, p, s);
        CHECK(pw == (correct ? Pathway::DirectAnswer : Pathway::GenerateThenAnswer));
        (pw == Pathway::DirectAnswer ? direct_n : generate_n)++;
    }
    CHECK(direct_n > 0);
    CHECK(generate_n > 0);

    // A clean grid the probe classifies correctly must stay on the direct path.
    for (int id = 0; id < 12; ++id) {
        Sample s = materialize(clean_record(id, id % kNumClasses, 1000 + id));
        if (probe_predict(m, p, s.degraded) == s.class_id) {
            CHECK(assign_pathway(m, p, s) == Pathway::DirectAnswer);
        }
    }
}

TEST_CASE("generate-then-answer fraction grows with severity") {
    Model m = init_model(11);
    DatasetManifest man = build_dataset(600, {}, 5);
    Probe p = train_probe(m, man, 5);

    auto generate_fraction = [&](const SeverityMix& mix) {
        DatasetManifest d = build_dataset(1000, mix, 421);
        int gen = 0;
        for (const Sample& s : materialize_all(d))
            if (assign_pathway(m, p, s) == Pathway::GenerateThenAnswer) ++gen;
        return static_cast<double>(gen) / 1000.0;
    };
    double f_low = generate_fraction({1.0, 0.0, 0.0});
    double f_mid = generate_fraction({0.0, 1.0, 0.0});
    double f_hard = generate_fraction({0.0, 0.0, 1.0});
    CHECK(f_low < f_mid);
    CHECK(f_mid < f_hard);
    CHECK(f_hard - f_low > 0.1);
}

TEST_CASE("trace grammar per pathway") {
    Sample s = materialize(clean_record(0, 3, 17));
    Trace d = synthesize_trace(s, Pathway::DirectAnswer);
    CHECK(d.tokens == std::vector<int>{kTokDirect, kTokAnswer0 + 3, kTokEos});
    CHECK(d.positions == std::vector<int>{0, 1, 2});
    CHECK(d.img_slot == -1);

    Trace g = synthesize_trace(s, Pathway::GenerateThenAnswer);
    CHECK(g.tokens == std::vector<int>{kTokRestore, kTokAnswer0 + 3, kTokEos});
    CHECK(g.positions == std::vector<int>{0, 2, 3});
    CHECK(g.img_slot == 1);

    Sample bad = s;
    bad.class_id = kNumClasses;
    CHECK_THROWS_AS(synthesize_trace(bad, Pathway::DirectAnswer), std::invalid_argument);
}

TEST_CASE("trace building balances pathways and keeps truthful answers") {
    Model m = init_model(11);
    DatasetManifest man = build_dataset(600, {}, 5);
    Probe p = train_probe(m, man, 5);
    std::vector<Trace> traces = build_traces(m, p, man, 5);

    int direct_n = 0, generate_n = 0;
    for (const Trace& t : traces) {
        CHECK(t.tokens[1] == kTokAnswer0 + t.sample.class_id);
        (t.pathway == Pathway::DirectAnswer ? direct_n : generate_n)++;
    }
    CHECK(direct_n == generate_n);

    std::vector<Trace> again = build_traces(m, p, man, 5);
    REQUIRE(again.size() == traces.size());
    for (size_t i = 0; i < traces.size(); ++i) {
        CHECK(again[i].sample.sample_id == traces[i].sample.sample_id);
        CHECK(again[i].pathway == traces[i].pathway);
    }
}

TEST_CASE("trace building demands both pathways") {
    Model m = init_model(11);
    DatasetManifest man = build_dataset(600, {}, 5);
    Probe p = train_probe(m, man, 5);

    // Keep only records the probe answers correctly; every trace would be
    // direct, which cannot form a balanced set.
    DatasetManifest direct_only = man;
    direct_only.records.clear();
    for (const auto& rec : man.records) {
        Sample s = materialize(rec);
        if (probe_predict(m, p, s.degraded) == s.class_id) direct_only.records.push_back(rec);
    }
    REQUIRE(!direct_only.records.empty());
    CHECK_THROWS_AS(build_traces(m, p, direct_only, 5), std::runtime_error);
}

TEST_CASE("direct-only batches contribute no image losses") {
    Model m = init_model(3);
    AdamOptimizer opt(1e-3);
    Rng rng(7);
    std::vector<Trace> batch;
    for (int i = 0; i < 4; ++i)
        batch.push_back(synthesize_trace(materialize(clean_record(i, i % kNumClasses, 50 + i)),
                                         Pathway::DirectAnswer));
    SftConfig cfg;
    LossBreakdown b = sft_step(m, opt, batch, cfg, rng);
    CHECK(b.mse == 0.0);
    CHECK(b.kl == 0.0);
    CHECK(b.total == b.ce);
}

TEST_CASE("loss decomposition is exact bookkeeping") {
    Model m = init_model(3);
    AdamOptimizer opt(1e-3);
    std::vector<Trace> batch;
    for (int i = 0; i < 4; ++i)
        batch.push_back(synthesize_trace(materialize(clean_record(i, i % kNumClasses, 80 + i)),
                                         i % 2 == 0 ? Pathway::DirectAnswer
                                                    : Pathway::GenerateThenAnswer));
    SftConfig cfg;
    cfg.flow_draws = 4;
    cfg.answer_draws = 4;
    {
        Rng rng(7);
        LossBreakdown b = sft_step(m, opt, batch, cfg, rng);
        CHECK(b.mse > 0.0);
        CHECK(b.kl > 0.0);
        CHECK(std::abs(b.total - (b.ce + cfg.lambda_mse * b.mse + cfg.lambda_kl * b.kl)) <= 1e-9);
    }
    {
        Rng rng(7);
        cfg.lambda_mse = 0.0;
        cfg.lambda_kl = 0.0;
        LossBreakdown b = sft_step(m, opt, batch, cfg, rng);
        CHECK(b.total == b.ce);
    }
}

TEST_CASE("non-finite parameters surface as an error, not a silent step") {
    Model m = init_model(3);
    m.pol_w1.data[0] = std::nan("");
    AdamOptimizer opt(1e-3);
    Rng rng(7);
    std::vector<Trace> batch{
        synthesize_trace(materialize(clean_record(0, 0, 50)), Pathway::DirectAnswer)};
    SftConfig cfg;
    CHECK_THROWS_AS(sft_step(m, opt, batch, cfg, rng), std::runtime_error);
}

TEST_CASE("config validation rejects nonsense") {
    SftConfig cfg;
    cfg.lambda_mse = -0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.flow_draws = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.answer_draws = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.vit_drop = 1.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    Model m = init_model(3);
    AdamOptimizer opt(1e-3);
    Rng rng(7);
    SftConfig ok;
    CHECK_THROWS_AS(sft_step(m, opt, {}, ok, rng), std::invalid_argument);
    CHECK_THROWS_AS(train_sft(m, {}, ok, 1), std::invalid_argument);
    CHECK_THROWS_AS(answer_accuracy(m, {}), std::invalid_argument);
    CHECK_THROWS_AS(mean_restore_prob(m, {}), std::invalid_argument);
    CHECK_THROWS_AS(trigger_rate(m, {}), std::invalid_argument);
}

TEST_CASE("short training runs are bit-reproducible") {
    DatasetManifest man = build_dataset(400, {}, 9);
    SftConfig cfg;
    cfg.epochs = 1;
    cfg.flow_draws = 4;
    cfg.answer_draws = 4;

    auto run = [&](Model& m) {
        Probe p = train_probe(m, man, 9);
        std::vector<Trace> traces = build_traces(m, p, man, 9);
        return train_sft(m, traces, cfg, 9);
    };
    Model a = init_model(21), b = init_model(21);
    SftResult ra = run(a);
    SftResult rb = run(b);
    REQUIRE(ra.epochs.size() == rb.epochs.size());
    CHECK(ra.epochs[0].mean_loss.total == rb.epochs[0].mean_loss.total);
    CHECK(ra.epochs[0].answer_acc == rb.epochs[0].answer_acc);
    for (auto& [name, tensor] : a.trainable_map()) {
        CHECK(tensor->data == b.trainable_map().at(name)->data);
    }
}

TEST_CASE("training log round-trips the run") {
    DatasetManifest man = build_dataset(400, {}, 9);
    Model m = init_model(21);
    Probe p = train_probe(m, man, 9);
    std::vector<Trace> traces = build_traces(m, p, man, 9);
    SftConfig cfg;
    cfg.epochs = 2;
    cfg.flow_draws = 4;
    cfg.answer_draws = 4;
    const char* path = "sft_log_test.json";
    SftResult res = train_sft(m, traces, cfg, 9, path);

    std::ifstream in(path);
    REQUIRE(in.good());
    nlohmann::json j;
    in >> j;
    CHECK(j.at("stage") == "sft");
    CHECK(j.at("config").at("epochs") == 2);
    CHECK(j.at("config").at("lr") == cfg.lr);
    CHECK(j.at("config").at("flow_draws") == 4);
    CHECK(j.at("config").at("answer_draws") == 4);
    CHECK(j.at("config").at("trace_count") == traces.size());
    REQUIRE(j.at("epochs").size() == 2);
    for (size_t e = 0; e < 2; ++e) {
        const auto& je = j.at("epochs")[e];
        CHECK(je.at("total") == doctest::Approx(res.epochs[e].mean_loss.total).epsilon(1e-12));
        CHECK(je.at("answer_acc") == doctest::Approx(res.epochs[e].answer_acc).epsilon(1e-12));
    }
    std::remove(path);
}

TEST_CASE("three epochs on the default dataset clear the convergence gate") {
    Model m = init_model(11);
    SftConfig cfg;
    DatasetManifest man = build_dataset(cfg.sample_count, {}, 5);
    Probe p = train_probe(m, man, 5);
    std::vector<Trace> traces = build_traces(m, p, man, 5);
    SftResult res = train_sft(m, traces, cfg, 5);

    REQUIRE(static_cast<int>(res.epochs.size()) == cfg.epochs);
    for (size_t e = 1; e < res.epochs.size(); ++e)
        CHECK(res.epochs[e].mean_loss.total < res.epochs[e - 1].mean_loss.total);
    CHECK(res.epochs.back().answer_acc > 0.90);

    // Post-training behavior: degradation raises the urge to restore.
    DatasetManifest ev = build_dataset(300, {}, 777);
    std::vector<Grid> hard_grids, clean_grids;
    for (const Sample& s : materialize_all(ev)) {
        if (s.spec.severity == Severity::Hard) hard_grids.push_back(s.degraded);
        clean_grids.push_back(s.clean);
    }
    CHECK(mean_restore_prob(m, hard_grids) > mean_restore_prob(m, clean_grids));
    CHECK(trigger_rate(m, hard_grids) > trigger_rate(m, clean_grids));
}
