#include <gtest/gtest.h>

#include <filesystem>

#include "fildeep/trainer.hpp"

using namespace fildeep;

namespace {

GeneratorConfig tiny_gen() {
    GeneratorConfig g;
    g.M = 12;
    g.sdf_H = g.sdf_W = 16;
    return g;
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.M = 12;
    c.N = 6;
    c.F = 1;
    c.C = 8;
    c.heads = 2;
    c.K = 2;
    c.K_L = 1;
    c.H = c.W = 16;
    c.cse_blocks = 2;
    c.cse_width = 2;
    return c;
}

TrainConfig quick(std::uint64_t seed = 1) {
    TrainConfig t;
    t.seed = seed;
    t.epochs_cse = 2;
    t.epochs_lf = 3;
    t.epochs_hf = 4;
    t.batch = 8;
    t.batch_hf = 4;
    t.lf_val_fraction = 0.1;
    t.eval_voxels = 64;
    return t;
}

const MFDataset& corpus() {
    static const MFDataset ds = [] {
        auto d = split_dataset(build_dataset(tiny_gen(), 40, 16, 3), {6, 4, 4}, 2);
        d.normalizer = fit_normalizer(d);
        return d;
    }();
    return ds;
}

bool same_values(const nn::ParamStore<float>& a, const nn::ParamStore<float>& b, const std::string& prefix = "") {
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& p = a.at(i);
        if (p.name.rfind(prefix, 0) != 0) continue;
        if (!b.has(p.name) || b.get(p.name).value != p.value) return false;
    }
    return true;
}

Model lf_model(const TrainConfig& tc) {
    RunReport rep;
    Model m = make_model(corpus(), tiny_model(), tc.seed);
    train_lf(m, corpus(), tc, rep);
    return m;
}

} // namespace

TEST(TrainConfig, ParsesAndValidates) {
    auto kv = KeyValueConfig::parse("lr_lf = 0.01\nepochs_hf = 7\nfreeze = joint\nseed = 9\n");
    const auto t = TrainConfig::from_config(kv);
    EXPECT_DOUBLE_EQ(t.lr_lf, 0.01);
    EXPECT_EQ(t.epochs_hf, 7);
    EXPECT_EQ(t.freeze, "joint");
    EXPECT_EQ(t.seed, 9u);
    EXPECT_THROW(TrainConfig::from_config(KeyValueConfig::parse("lr_hf = 0")), ConfigError);
    EXPECT_THROW(TrainConfig::from_config(KeyValueConfig::parse("freeze = maybe")), ConfigError);
    EXPECT_THROW(TrainConfig::from_config(KeyValueConfig::parse("optimizer = sgd")), ConfigError);
}

TEST(Trainer, ModelMustMatchDataset) {
    auto c = tiny_model();
    c.M = 24;
    c.N = 6;
    EXPECT_THROW(make_model(corpus(), c, 0), ConfigError);
}

TEST(Trainer, ZeroEpochsEqualsInitialization) {
    auto tc = quick();
    tc.epochs_lf = 0;
    RunReport rep;
    Model m = make_model(corpus(), tiny_model(), tc.seed);
    train_lf(m, corpus(), tc, rep);
    const auto init = nn::init_model<float>(tiny_model(), tc.seed, false);
    EXPECT_TRUE(same_values(init, m.params));
    EXPECT_EQ(rep.curve.size(), 1u);
}

TEST(Trainer, SkippingStageZeroKeepsSectionEncoderAtInit) {
    auto tc = quick();
    tc.pretrain_cse = false;
    tc.train_lf = false;
    tc.train_hf = false;
    RunReport rep;
    Model m = run_fildeep(corpus(), tiny_model(), tc, rep);
    const auto init = nn::init_model<float>(tiny_model(), tc.seed, false);
    EXPECT_TRUE(same_values(init, m.params, "cse."));
    EXPECT_FALSE(m.done("cse"));

    Model n = make_model(corpus(), tiny_model(), tc.seed);
    pretrain_cse(n, corpus(), tc, rep);
    EXPECT_FALSE(same_values(init, n.params, "cse."));
    // nothing outside the autoencoder moved
    EXPECT_TRUE(same_values(init, n.params, "cle_w."));
    EXPECT_TRUE(same_values(init, n.params, "lf."));
}

TEST(Trainer, SectionAutoencoderImprovesHeldOut) {
    auto tc = quick();
    tc.epochs_cse = 40;
    tc.lr_cse = 3e-3;
    tc.lf_val_fraction = 0.25;
    RunReport rep;
    Model m = make_model(corpus(), tiny_model(), tc.seed);
    pretrain_cse(m, corpus(), tc, rep);
    EXPECT_LT(rep.scalars.at("cse_heldout_mse_final"), rep.scalars.at("cse_heldout_mse_init") * 0.5);
}

TEST(Trainer, StageOneLossDecreases) {
    auto tc = quick();
    tc.epochs_lf = 40;
    tc.lr_lf = 3e-3;
    tc.patience = 0;
    RunReport rep;
    Model m = make_model(corpus(), tiny_model(), tc.seed);
    train_lf(m, corpus(), tc, rep);
    EXPECT_LT(rep.scalars.at("lf_last_train_loss"), 0.3 * rep.scalars.at("lf_first_train_loss"));
    EXPECT_LT(rep.scalars.at("lf_best_val_mad_mm"), rep.curve.front().val);
}

TEST(Trainer, TinyRateFullBatchIsMonotone) {
    MFDataset ds = split_dataset(build_dataset(tiny_gen(), 10, 1, 8), {1, 0, 0}, 0);
    auto tc = quick();
    tc.lf_val_fraction = 0.0;
    tc.batch = 10;
    tc.epochs_lf = 25;
    tc.lr_lf = 1e-5;
    tc.cosine = false;
    tc.clip_norm = 0.0;
    tc.patience = 0;
    RunReport rep;
    Model m = make_model(ds, tiny_model(), 0);
    train_lf(m, ds, tc, rep);
    ASSERT_EQ(rep.curve.size(), 26u);
    for (std::size_t i = 2; i < rep.curve.size(); ++i)
        EXPECT_LE(rep.curve[i].train_loss, rep.curve[i - 1].train_loss) << "epoch " << rep.curve[i].epoch;
    EXPECT_LT(rep.curve.back().train_loss, rep.curve[1].train_loss);
}

TEST(Trainer, StageTwoRequiresStageOne) {
    RunReport rep;
    Model m = make_model(corpus(), tiny_model(), 0);
    EXPECT_THROW(train_hf(m, tiny_model(), corpus(), quick(), rep), ConfigError);
}

TEST(Trainer, StageTwoFreezesSharedModulesBitExactly) {
    const auto tc = quick();
    const Model lf = lf_model(tc);
    RunReport rep;
    Model hf = train_hf(lf, tiny_model(), corpus(), tc, rep);
    EXPECT_TRUE(same_values(lf.params, hf.params));
    const auto init = nn::init_model<float>(tiny_model(), tc.seed, true);
    bool head_moved = false;
    for (std::size_t i = 0; i < hf.params.size(); ++i) {
        const auto& p = hf.params.at(i);
        if (p.name.rfind("hf.", 0) == 0 && p.value != init.get(p.name).value) head_moved = true;
    }
    EXPECT_TRUE(head_moved || rep.scalars.at("hf_best_epoch") == 0);
    EXPECT_TRUE(rep.scalars.count("lf_path_val_mad_mm"));
}

TEST(Trainer, JointFineTuneMovesSharedModules) {
    auto tc = quick();
    tc.freeze = "joint";
    tc.patience = 0;
    const Model lf = lf_model(quick());
    RunReport rep;
    Model hf = train_hf(lf, tiny_model(), corpus(), tc, rep);
    // best-epoch restore keeps the stage-1 weights unless some epoch improved val MAD
    if (rep.scalars.at("hf_best_epoch") > 0) EXPECT_FALSE(same_values(lf.params, hf.params, "lf."));
    for (std::size_t i = 0; i < hf.params.size(); ++i) EXPECT_EQ(hf.params.at(i).lr_scale, 1.0);
}

TEST(Trainer, LfIntermediateMatchesStageOneModel) {
    const auto tc = quick();
    Model lf = lf_model(tc);
    RunReport rep;
    Model hf = train_hf(lf, tiny_model(), corpus(), tc, rep);
    const auto recs = corpus().select(Fidelity::HF, Split::Test);
    const auto a = predict_records(lf, corpus(), recs);
    const auto b = predict_records(hf, corpus(), recs);
    ASSERT_EQ(a.size(), recs.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].y_lf.points, b[i].y_lf.points);
        EXPECT_EQ(a[i].y.points, a[i].y_lf.points);  // no head yet: final output is the LF path
        EXPECT_EQ(b[i].y.size(), 12);
        EXPECT_EQ(b[i].y.points.cols(), 3);
    }
    // deterministic across calls
    const auto c = predict_records(hf, corpus(), recs);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(c[i].y.points, b[i].y.points);
}

TEST(Trainer, PredictOnRawInstanceMatchesRecordPath) {
    const auto tc = quick();
    Model lf = lf_model(tc);
    const auto& ds = corpus();
    const auto r = ds.select(Fidelity::LF, Split::Train).front();
    const auto inst = sample_instance(ds.records[r].seed, ds.gen);
    const auto a = predict(lf, inst);
    const auto b = predict_records(lf, ds, {r});
    EXPECT_EQ(a.y.points, b[0].y.points);
}

TEST(Trainer, TestRecordsNeverFeedGradients) {
    RunReport rep;
    run_fildeep(corpus(), tiny_model(), quick(), rep);
    const auto& ds = corpus();
    for (auto r : rep.gradient_records) {
        EXPECT_NE(ds.splits[r], Split::Test);
        EXPECT_NE(ds.splits[r], Split::Val);
    }
    ASSERT_TRUE(rep.test.has_value());
    EXPECT_EQ(rep.test->per_instance.size(), 4u);
}

TEST(Trainer, SingleModesUseTheirCorpora) {
    const auto& ds = corpus();
    for (auto mode : {SingleMode::LFOnly, SingleMode::HFOnly, SingleMode::Mix}) {
        RunReport rep;
        Model m = make_model(ds, tiny_model(), 0);
        train_single(m, ds, quick(), mode, rep);
        std::size_t lf = 0, hf = 0;
        for (auto r : rep.gradient_records) (ds.records[r].fidelity == Fidelity::LF ? lf : hf)++;
        EXPECT_EQ(hf, mode == SingleMode::LFOnly ? 0u : 6u) << to_string(mode);
        EXPECT_EQ(lf > 0, mode != SingleMode::HFOnly) << to_string(mode);
    }
}

TEST(Trainer, RunsAreReproducible) {
    RunReport a, b;
    Model ma = run_fildeep(corpus(), tiny_model(), quick(7), a);
    Model mb = run_fildeep(corpus(), tiny_model(), quick(7), b);
    EXPECT_EQ(a.to_json(false).dump(), b.to_json(false).dump());
    EXPECT_TRUE(same_values(ma.params, mb.params));
    RunReport c;
    run_fildeep(corpus(), tiny_model(), quick(8), c);
    EXPECT_NE(a.to_json(false).dump(), c.to_json(false).dump());
}

TEST(Trainer, BaselineHeadsAndResidualAblationTrain) {
    const auto tc = quick();
    const Model lf = lf_model(tc);
    for (auto [head, res] : {std::pair{"acf", "none"}, {"acf", "output"}, {"residual_mlp", "feature"}, {"vanilla_mlp", "none"}}) {
        auto c = tiny_model();
        c.hf_head = head;
        c.residual = res;
        RunReport rep;
        Model m = train_hf(lf, c, corpus(), tc, rep);
        EXPECT_TRUE(m.has_hf_head());
        EXPECT_TRUE(std::isfinite(rep.scalars.at("hf_best_val_mad_mm"))) << head << "/" << res;
    }
    auto bad = tiny_model();
    bad.C = 16;
    RunReport rep;
    EXPECT_THROW(train_hf(lf, bad, corpus(), tc, rep), ConfigError);
}

TEST(Trainer, DivergenceReportsNumericalError) {
    Model m = make_model(corpus(), tiny_model(), 0);
    m.params.get("cld.W").value(0, 0) = std::numeric_limits<float>::quiet_NaN();
    RunReport rep;
    try {
        train_lf(m, corpus(), quick(), rep);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
    }
}

TEST(Trainer, CheckpointRoundTrip) {
    const auto tc = quick();
    Model lf = lf_model(tc);
    RunReport rep;
    Model hf = train_hf(lf, tiny_model(), corpus(), tc, rep);
    const auto path = (std::filesystem::temp_directory_path() / "fildeep_model.ckpt").string();
    hf.save(path);
    Model back = Model::load(path);
    EXPECT_EQ(back.config, hf.config);
    EXPECT_EQ(back.norm, hf.norm);
    EXPECT_EQ(back.stages, hf.stages);
    EXPECT_TRUE(same_values(hf.params, back.params));
    const auto recs = corpus().select(Fidelity::HF, Split::Test);
    EXPECT_EQ(predict_records(back, corpus(), recs)[0].y.points, predict_records(hf, corpus(), recs)[0].y.points);

    // a stage-1 checkpoint whose config claims a trained head is rejected
    lf.stages.push_back("hf");
    lf.save(path);
    EXPECT_THROW(Model::load(path), DataError);
    std::filesystem::remove(path);
}

TEST(Trainer, ReportSerialization) {
    RunReport rep;
    run_fildeep(corpus(), tiny_model(), quick(), rep);
    const auto j = rep.to_json();
    EXPECT_TRUE(j.contains("wall_seconds"));
    EXPECT_FALSE(rep.to_json(false).contains("wall_seconds"));
    EXPECT_EQ(j["curve"][0]["train_loss"], nullptr);
    EXPECT_TRUE(j["test"].contains("mad_mm"));
    const auto path = (std::filesystem::temp_directory_path() / "fildeep_curve.csv").string();
    rep.write_curves_csv(path);
    std::ifstream is(path);
    std::string head;
    std::getline(is, head);
    EXPECT_EQ(head, "stage,epoch,train_loss,val,lr");
    std::filesystem::remove(path);
}
