#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "faceaug/checkpoint.hpp"
#include "faceaug/errors.hpp"
#include "faceaug/synthetic.hpp"
#include "faceaug/train.hpp"
#include "testutil.hpp"

using namespace faceaug;
using tu::random_uniform;

namespace {

// Small but honest config: every subsystem on, sized for sub-second steps.
TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.image_size = 16;
    cfg.channels = 1;
    cfg.gen_channels = 16;
    cfg.gen_residual_blocks = 2;
    cfg.embed_dim = 16;
    cfg.embed_blocks = 1;
    cfg.embed_reductions = 2;
    cfg.embed_base_channels = 8;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.triplet_strategy = "all";
    return cfg;
}

// Synthetic dataset whose files outlive the helper, for the manifest-driven
// entry points.
struct Fixture {
    tu::TempDir dir;
    DatasetManifest manifest;
    LoadedDataset ds;

    Fixture(int ids, int per, uint64_t seed = 5) : dir("ds") {
        SyntheticSpec spec;
        spec.identities = ids;
        spec.images_per_identity = per;
        spec.size = 16;
        spec.channels = 1;
        spec.seed = seed;
        manifest = generate_synthetic_dataset(spec, dir.str());
        ds = load_dataset(manifest);
    }
};

Batch controlled_batch(Rng& rng, const std::vector<std::string>& ids) {
    Batch b;
    b.images = random_uniform({static_cast<int>(ids.size()), 16, 16, 1}, rng, -2.0f, 2.0f);
    b.identities = ids;
    for (int i = 0; i < static_cast<int>(ids.size()); ++i) b.entry_indices.push_back(i);
    return b;
}

std::vector<Tensor> snapshot(ModuleItems& items) {
    std::vector<Tensor> out;
    for (Parameter* p : items.params) out.push_back(p->value);
    return out;
}

double max_param_diff(ModuleItems& items, const std::vector<Tensor>& before) {
    double m = 0.0;
    for (size_t i = 0; i < items.params.size(); ++i)
        m = std::max(m, tu::max_abs_diff(items.params[i]->value, before[i]));
    return m;
}

}  // namespace

TEST_CASE("config round trip, defaults, and rejection of bad fields") {
    TrainConfig def;
    CHECK(def.learning_rate == doctest::Approx(2e-4));
    CHECK(def.batch_size == 16);
    CHECK(def.margin == doctest::Approx(0.2));
    CHECK(def.lambda_frob == doctest::Approx(1e-3));
    CHECK(def.lambda_adv == doctest::Approx(0.1));
    CHECK(def.noise_scale == doctest::Approx(0.1));
    CHECK(def.image_size == 128);
    CHECK(def.gen_channels == 64);
    CHECK(def.embed_dim == 128);
    CHECK(def.triplet_strategy == "semi-hard");

    tu::TempDir tmp("cfg");
    TrainConfig cfg = tiny_cfg();
    cfg.learning_rate = 3e-4f;
    const std::string path = tmp.sub("config.json");
    save_train_config(cfg, path);
    TrainConfig back = load_train_config(path);
    CHECK(train_config_json(back) == train_config_json(cfg));
    CHECK(train_config_hash(back) == train_config_hash(cfg));

    // Partial file keeps defaults for everything absent.
    {
        std::ofstream f(tmp.sub("partial.json"));
        f << "{\"batch_size\": 4, \"image_size\": 32}\n";
    }
    TrainConfig partial = load_train_config(tmp.sub("partial.json"));
    CHECK(partial.batch_size == 4);
    CHECK(partial.image_size == 32);
    CHECK(partial.epochs == TrainConfig{}.epochs);

    CHECK_THROWS_AS((void)parse_train_config("{\"unknown_knob\": 1}", "t"), ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("{\"batch_size\": \"many\"}", "t"), ConfigError);
    CHECK_THROWS_AS((void)parse_train_config("not json", "t"), ConfigError);
}

TEST_CASE("config validation rejects out-of-range values") {
    auto expect_bad = [](void (*mutate)(TrainConfig&)) {
        TrainConfig cfg = tiny_cfg();
        mutate(cfg);
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    };
    expect_bad([](TrainConfig& c) { c.epochs = 0; });
    expect_bad([](TrainConfig& c) { c.batch_size = 1; });
    expect_bad([](TrainConfig& c) { c.learning_rate = 0.0f; });
    expect_bad([](TrainConfig& c) { c.margin = 0.0f; });
    expect_bad([](TrainConfig& c) { c.lambda_frob = -1.0f; });
    expect_bad([](TrainConfig& c) { c.noise_scale = -0.5f; });
    expect_bad([](TrainConfig& c) { c.image_size = 15; });
    expect_bad([](TrainConfig& c) { c.channels = 2; });
    expect_bad([](TrainConfig& c) { c.triplet_strategy = "hardest"; });
    expect_bad([](TrainConfig& c) { c.embed_reductions = 5; });  // 16 % 32 != 0
    CHECK_NOTHROW(tiny_cfg().validate());
}

TEST_CASE("config hash tracks content") {
    TrainConfig a = tiny_cfg();
    TrainConfig b = tiny_cfg();
    CHECK(train_config_hash(a) == train_config_hash(b));
    b.margin = 0.3f;
    CHECK(train_config_hash(a) != train_config_hash(b));
}

TEST_CASE("runlog csv round trip preserves records and notes") {
    RunLog log;
    for (int i = 1; i <= 3; ++i) {
        RunRecord r;
        r.step = i;
        r.epoch = 1;
        r.gen_loss = 0.123456789 * i;
        r.disc_loss = 0.5 / i;
        r.mse_term = 1e-4 * i;
        r.frob_term = 2e-5 * i;
        r.adv_term = 3e-3 * i;
        log.records.push_back(r);
    }
    log.notes.push_back("skipped batch 7: single identity");
    tu::TempDir tmp("runlog");
    const std::string path = tmp.sub("runlog.csv");
    write_runlog_csv(log, path);

    {
        std::ifstream in(path);
        std::string header;
        std::getline(in, header);
        CHECK(header == "step,epoch,gen_loss,disc_loss,mse_term,frob_term,adv_term");
    }
    RunLog back = read_runlog_csv(path);
    REQUIRE(back.records.size() == 3);
    CHECK(back.notes.size() == 1);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back.records[i].step == log.records[i].step);
        CHECK(back.records[i].gen_loss ==
              doctest::Approx(log.records[i].gen_loss).epsilon(1e-9));
        CHECK(back.records[i].adv_term ==
              doctest::Approx(log.records[i].adv_term).epsilon(1e-9));
    }

    {
        std::ofstream f(tmp.sub("bad.csv"));
        f << "step,epoch,gen_loss,disc_loss,mse_term,frob_term,adv_term\n";
        f << "1,1,0.5,0.5,0,0,0\n";
        f << "oops\n";
    }
    try {
        (void)read_runlog_csv(tmp.sub("bad.csv"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }
    {
        std::ofstream f(tmp.sub("badheader.csv"));
        f << "foo,bar\n";
    }
    CHECK_THROWS_AS((void)read_runlog_csv(tmp.sub("badheader.csv")), ConfigError);
}

TEST_CASE("trainer initialization is seed-deterministic") {
    TrainConfig cfg = tiny_cfg();
    Trainer a(cfg), b(cfg);
    ModuleItems ia, ib;
    a.generator().collect("g", ia);
    a.saliency().collect("s", ia);
    a.embedder().collect("e", ia);
    b.generator().collect("g", ib);
    b.saliency().collect("s", ib);
    b.embedder().collect("e", ib);
    REQUIRE(ia.params.size() == ib.params.size());
    for (size_t i = 0; i < ia.params.size(); ++i) {
        CHECK(ia.params[i]->name == ib.params[i]->name);
        CHECK(tu::max_abs_diff(ia.params[i]->value, ib.params[i]->value) == 0.0);
    }

    TrainConfig other = cfg;
    other.seed = cfg.seed + 1;
    Trainer c(other);
    ModuleItems ic;
    c.generator().collect("g", ic);
    bool differ = false;
    for (size_t i = 0; i < ic.params.size() && !differ; ++i)
        differ = tu::max_abs_diff(ic.params[i]->value, ia.params[i]->value) > 0.0;
    CHECK(differ);
}

TEST_CASE("a silent generator leaves every loss term at exactly zero") {
    TrainConfig cfg = tiny_cfg();
    cfg.noise_scale = 0.0f;
    Trainer tr(cfg);
    ModuleItems gi;
    tr.generator().collect("g", gi);
    tr.saliency().collect("s", gi);
    for (Parameter* p : gi.params) p->value.fill(0.0f);

    Rng rng(1);
    Batch batch = controlled_batch(rng, {"A", "A", "B", "B"});
    GenLossTerms terms = tr.generator_step(batch);
    CHECK(terms.mse == 0.0);
    CHECK(terms.frob == 0.0);
    CHECK(terms.adv == 0.0);
    CHECK(terms.total == 0.0);
}

TEST_CASE("loss terms carry their weights") {
    TrainConfig cfg = tiny_cfg();
    cfg.lambda_frob = 1e-3f;
    cfg.lambda_adv = 0.7f;
    Trainer tr(cfg);
    Rng rng(2);
    Tensor x = random_uniform({2, 16, 16, 1}, rng, -2.0f, 2.0f);

    // Frobenius: 2x2 all-ones mask has norm 2 -> weighted term 2e-3.
    Tensor mask({1, 2, 2, 1}, 1.0f);
    GenLossTerms f = tr.generator_loss_terms(x, x, mask);
    CHECK(f.mse == 0.0);
    CHECK(f.adv == 0.0);
    CHECK(f.frob == doctest::Approx(2e-3).epsilon(1e-9));
    CHECK(f.total == doctest::Approx(2e-3).epsilon(1e-9));

    // MSE: a uniform +0.1 shift on every pixel -> 0.01.
    Tensor shifted = x;
    for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.1f;
    GenLossTerms m = tr.generator_loss_terms(x, shifted, Tensor({1, 2, 2, 1}));
    CHECK(m.mse == doctest::Approx(0.01).epsilon(1e-4));
    CHECK(std::abs(m.mse - 0.01) < 1e-6);
    CHECK(m.frob == 0.0);
    CHECK(m.adv >= 0.0);
    CHECK(m.total == doctest::Approx(m.mse + m.frob - m.adv).epsilon(1e-9));
}

TEST_CASE("satisfied triplets leave the discriminator untouched") {
    TrainConfig cfg = tiny_cfg();
    cfg.margin = 1e-4f;
    Trainer tr(cfg);
    Rng rng(3);
    Tensor imgA = random_uniform({1, 16, 16, 1}, rng, -2.0f, 2.0f);
    Tensor imgB = random_uniform({1, 16, 16, 1}, rng, -2.0f, 2.0f);
    Batch real;
    real.images = Tensor({4, 16, 16, 1});
    for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j)
                real.images.at(n, i, j, 0) = (n < 2 ? imgA : imgB).at(0, i, j, 0);
    real.identities = {"A", "A", "B", "B"};
    real.entry_indices = {0, 1, 2, 3};

    ModuleItems ei;
    tr.embedder().collect("e", ei);
    auto before = snapshot(ei);
    // Duplicate the batch as "generated" so every anchor-positive distance is
    // exactly zero while anchors and negatives stay far apart.
    const double loss = tr.discriminator_step(real, real.images);
    CHECK(loss == 0.0);
    CHECK(max_param_diff(ei, before) == 0.0);
}

TEST_CASE("discriminator loss shrinks on a two-identity toy set") {
    int wins = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        TrainConfig cfg = tiny_cfg();
        cfg.seed = seed;
        Trainer tr(cfg);
        Fixture fx(2, 6, 100 + seed);
        std::vector<int> all;
        for (int i = 0; i < fx.ds.count(); ++i) all.push_back(i);
        Batch batch = fx.ds.gather(all);
        RunRecord rec;
        REQUIRE(tr.embedder_round(batch, rec));
        const double first = rec.disc_loss;
        double last = first;
        for (int step = 0; step < 50; ++step) {
            REQUIRE(tr.embedder_round(batch, rec));
            last = rec.disc_loss;
        }
        if (last < first) ++wins;
    }
    CHECK(wins >= 3);
}

TEST_CASE("generator training lowers reconstruction error when unopposed") {
    int wins = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        TrainConfig cfg = tiny_cfg();
        cfg.seed = seed;
        cfg.lambda_adv = 0.0f;
        cfg.noise_scale = 0.0f;
        Trainer tr(cfg);
        Rng rng(200 + seed);
        Batch batch = controlled_batch(rng, {"A", "A", "B", "B"});
        GenLossTerms first = tr.generator_step(batch);
        GenLossTerms last = first;
        for (int i = 0; i < 100; ++i) last = tr.generator_step(batch);
        if (last.mse < first.mse) ++wins;
    }
    CHECK(wins >= 3);
}

TEST_CASE("generator steps never move the embedder") {
    TrainConfig cfg = tiny_cfg();
    Trainer tr(cfg);
    ModuleItems ei;
    tr.embedder().collect("e", ei);
    auto before = snapshot(ei);
    Rng rng(4);
    Batch batch = controlled_batch(rng, {"A", "A", "B", "B"});
    for (int i = 0; i < 3; ++i) (void)tr.generator_step(batch);
    CHECK(max_param_diff(ei, before) == 0.0);
    for (Parameter* p : ei.params) CHECK(p->trainable);
}

TEST_CASE("single-identity batches are skipped before any state changes") {
    TrainConfig cfg = tiny_cfg();
    Trainer tr(cfg);
    Rng rng(5);
    Batch lonely = controlled_batch(rng, {"A", "A", "A", "A"});
    RunRecord rec;
    CHECK_FALSE(tr.adversarial_round(lonely, rec));
    CHECK(tr.step_count() == 0);
    CHECK(tr.generator_adam().t == 0);
    CHECK(tr.embedder_adam().t == 0);

    Batch good = controlled_batch(rng, {"A", "A", "B", "B"});
    CHECK(tr.adversarial_round(good, rec));
    CHECK(rec.disc_loss >= 0.0);
}

TEST_CASE("epoch plans are reproducible per epoch and differ across epochs") {
    TrainConfig cfg = tiny_cfg();
    Trainer tr(cfg);
    std::vector<std::string> ids;
    for (int p = 0; p < 4; ++p)
        for (int v = 0; v < 8; ++v) ids.push_back("p" + std::to_string(p));
    auto p1 = tr.epoch_plan(ids, 1);
    auto p1b = tr.epoch_plan(ids, 1);
    auto p2 = tr.epoch_plan(ids, 2);
    CHECK(p1 == p1b);
    CHECK(p1 != p2);
}

TEST_CASE("a full run logs every step, alternates updates, and checkpoints") {
    tu::TempDir tmp("run");
    TrainConfig cfg = tiny_cfg();
    Fixture fx(4, 6);
    Trainer tr(cfg);
    RunLog log = tr.train(fx.ds, tmp.str());
    REQUIRE(!log.records.empty());
    for (size_t i = 0; i < log.records.size(); ++i) {
        CHECK(log.records[i].step == static_cast<int64_t>(i + 1));
        CHECK(log.records[i].epoch >= 1);
        CHECK(log.records[i].epoch <= cfg.epochs);
        CHECK(log.records[i].gen_loss ==
              doctest::Approx(log.records[i].mse_term + log.records[i].frob_term -
                              log.records[i].adv_term)
                  .epsilon(1e-9));
    }
    // Strict alternation: one generator and one discriminator update per
    // logged step.
    CHECK(tr.generator_adam().t == static_cast<int64_t>(log.records.size()));
    CHECK(tr.embedder_adam().t == static_cast<int64_t>(log.records.size()));
    CHECK(std::filesystem::exists(tmp.sub("ckpt_last.bin")));
    CHECK(std::filesystem::exists(tmp.sub("ckpt_final.bin")));
}

TEST_CASE("the spelled-out entry point writes the runlog") {
    tu::TempDir tmpd("runfree");
    TrainConfig cfg = tiny_cfg();
    cfg.epochs = 1;
    Fixture fx(3, 5);
    TrainResult res = train(fx.manifest, cfg, tmpd.str());
    CHECK(!res.log.records.empty());
    CHECK(res.final_checkpoint == tmpd.sub("ckpt_final.bin"));
    CHECK(std::filesystem::exists(tmpd.sub("runlog.csv")));
    RunLog read_back = read_runlog_csv(tmpd.sub("runlog.csv"));
    CHECK(read_back.records.size() == res.log.records.size());
}

TEST_CASE("identical seeds reproduce identical runs") {
    TrainConfig cfg = tiny_cfg();
    Fixture fx(4, 6);
    tu::TempDir t1("det1"), t2("det2");
    RunLog a = Trainer(cfg).train(fx.ds, t1.str());
    RunLog b = Trainer(cfg).train(fx.ds, t2.str());
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(std::abs(a.records[i].gen_loss - b.records[i].gen_loss) < 1e-6);
        CHECK(std::abs(a.records[i].disc_loss - b.records[i].disc_loss) < 1e-6);
    }

    TrainConfig shifted = cfg;
    shifted.seed = cfg.seed + 7;
    tu::TempDir t3("det3");
    RunLog c = Trainer(shifted).train(fx.ds, t3.str());
    bool differ = c.records.size() != a.records.size();
    for (size_t i = 0; !differ && i < c.records.size(); ++i)
        differ = std::abs(a.records[i].disc_loss - c.records[i].disc_loss) > 1e-12;
    CHECK(differ);
}

TEST_CASE("dataset too small for triplets is rejected up front") {
    TrainConfig cfg = tiny_cfg();
    Fixture fx(1, 4);
    tu::TempDir tmp("small");
    Trainer tr(cfg);
    CHECK_THROWS_AS((void)tr.train(fx.ds, tmp.str()), ConfigError);
}

TEST_CASE("image geometry mismatches are rejected") {
    TrainConfig cfg = tiny_cfg();
    cfg.image_size = 32;
    Trainer tr(cfg);
    Fixture fx(3, 4);  // 16x16 images
    tu::TempDir tmp("geom");
    CHECK_THROWS_AS((void)tr.train(fx.ds, tmp.str()), ShapeError);
}

TEST_CASE("checkpoint round trip restores the exact training trajectory") {
    TrainConfig cfg = tiny_cfg();
    cfg.epochs = 4;
    Fixture fx(4, 6);

    tu::TempDir ta("ckpt_a"), tb("ckpt_b"), tc("ckpt_c");
    RunLog uninterrupted = Trainer(cfg).train(fx.ds, ta.str());

    Trainer early(cfg);
    RunLog first_half = early.train(fx.ds, tb.str(), 2);
    CHECK_FALSE(std::filesystem::exists(tb.sub("ckpt_final.bin")));
    REQUIRE(std::filesystem::exists(tb.sub("ckpt_last.bin")));

    TrainResult resumed = train_resume(tb.sub("ckpt_last.bin"), fx.manifest, tc.str());
    REQUIRE(first_half.records.size() + resumed.log.records.size() ==
            uninterrupted.records.size());
    for (size_t i = 0; i < resumed.log.records.size(); ++i) {
        const RunRecord& want = uninterrupted.records[first_half.records.size() + i];
        const RunRecord& got = resumed.log.records[i];
        CHECK(got.step == want.step);
        CHECK(std::abs(got.gen_loss - want.gen_loss) < 1e-6);
        CHECK(std::abs(got.disc_loss - want.disc_loss) < 1e-6);
        CHECK(std::abs(got.mse_term - want.mse_term) < 1e-6);
        CHECK(std::abs(got.frob_term - want.frob_term) < 1e-6);
        CHECK(std::abs(got.adv_term - want.adv_term) < 1e-6);
    }
    CHECK(std::filesystem::exists(tc.sub("ckpt_final.bin")));
}

TEST_CASE("checkpoint files validate their header") {
    TrainConfig cfg = tiny_cfg();
    Trainer tr(cfg);
    tu::TempDir tmp("ckptval");
    const std::string path = tmp.sub("ckpt.bin");
    save_checkpoint(tr, path);

    TrainConfig stored = checkpoint_config(path);
    CHECK(train_config_hash(stored) == train_config_hash(cfg));
    auto loaded = load_checkpoint(path);
    CHECK(loaded->step_count() == tr.step_count());
    CHECK(train_config_hash(loaded->config()) == train_config_hash(cfg));

    // Flip one config byte inside the header: the stored hash must no longer
    // match.
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const std::string needle = "\"batch_size\":8";
    auto pos = bytes.find(needle);
    REQUIRE(pos != std::string::npos);
    bytes[pos + needle.size() - 1] = '9';
    {
        std::ofstream out(tmp.sub("tampered.bin"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS((void)load_checkpoint(tmp.sub("tampered.bin")), ConfigError);

    // Truncation and magic corruption are IO errors.
    {
        std::ofstream out(tmp.sub("short.bin"), std::ios::binary);
        out.write(bytes.data(), 64);
    }
    CHECK_THROWS_AS((void)load_checkpoint(tmp.sub("short.bin")), IoError);
    bytes = std::string("XXXXXXXX") + bytes.substr(8);
    {
        std::ofstream out(tmp.sub("magic.bin"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS((void)load_checkpoint(tmp.sub("magic.bin")), IoError);
}

TEST_CASE("non-finite losses save a failure checkpoint and surface the error") {
    tu::TempDir tmp("blowup");
    TrainConfig cfg = tiny_cfg();
    Fixture fx(3, 5);
    Trainer tr(cfg);
    tr.embedder().stem.weight.value[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS((void)tr.train(fx.ds, tmp.str()), NumericalError);
    CHECK(std::filesystem::exists(tmp.sub("ckpt_failure.bin")));
}

TEST_CASE("frobenius pressure shrinks the applied perturbation") {
    Fixture fx(3, 6);
    auto final_epoch_raw_frob = [&](float lambda_frob) {
        TrainConfig cfg = tiny_cfg();
        cfg.epochs = 4;
        cfg.lambda_frob = lambda_frob;
        tu::TempDir tmp("frob");
        RunLog log = Trainer(cfg).train(fx.ds, tmp.str());
        double sum = 0.0;
        int n = 0;
        for (const auto& r : log.records)
            if (r.epoch == cfg.epochs) {
                sum += r.frob_term / static_cast<double>(lambda_frob);
                ++n;
            }
        REQUIRE(n > 0);
        return sum / n;
    };
    const double base = final_epoch_raw_frob(1e-3f);
    const double strong = final_epoch_raw_frob(1e-1f);
    CHECK(strong < base);
}
