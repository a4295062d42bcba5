#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "fildeep/datastore.hpp"

using namespace fildeep;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_gen() {
    GeneratorConfig g;
    g.M = 48;
    g.sdf_H = g.sdf_W = 16;
    return g;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path tmpdir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("fildeep_ds_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST(BuildDataset, CountsAndFidelityTags) {
    auto ds = build_dataset(small_gen(), 7, 4, 11);
    EXPECT_EQ(ds.count(Fidelity::LF), 7u);
    EXPECT_EQ(ds.count(Fidelity::HF), 4u);
    EXPECT_EQ(ds.instances.size(), 11u);  // unpaired: fresh HF instances
    std::set<std::uint64_t> seeds;
    for (const auto& r : ds.records) {
        seeds.insert(r.seed);
        EXPECT_EQ(ds.output(r).size(), 48);
    }
    EXPECT_EQ(seeds.size(), 11u);
}

TEST(BuildDataset, PairedSharesInputsDiffersInOutput) {
    auto ds = build_dataset(small_gen(), 1, 1, 5, true);
    ASSERT_EQ(ds.instances.size(), 1u);
    ASSERT_EQ(ds.records.size(), 2u);
    EXPECT_EQ(ds.records[0].instance, ds.records[1].instance);
    const auto& lf = ds.output(ds.records[0]);
    const auto& hf = ds.output(ds.records[1]);
    EXPECT_GT((lf.points - hf.points).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(BuildDataset, RejectsBadCounts) {
    EXPECT_THROW(build_dataset(small_gen(), 0, 1, 1), ConfigError);
    EXPECT_THROW(build_dataset(small_gen(), 1, 0, 1), ConfigError);
    EXPECT_THROW(build_dataset(small_gen(), 1, 2, 1, true), ConfigError);
}

TEST(BuildDataset, FailureCarriesSeed) {
    auto g = small_gen();
    g.mold_a = {0.05, 0.05};  // tight enough to coil, so every mold draw self-intersects
    try {
        build_dataset(g, 1, 1, 3);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos) << e.what();
    }
}

TEST(SplitDataset, DefaultProtocolLeavesReserved) {
    // counts only matter here, so the HF population is built cheaply
    MFDataset ds;
    for (int i = 0; i < 300; ++i) {
        ds.records.push_back({"h" + std::to_string(i), 0, Fidelity::HF, std::uint64_t(i)});
        ds.splits.push_back(Split::Reserved);
    }
    for (int i = 0; i < 20; ++i) {
        ds.records.push_back({"l" + std::to_string(i), 0, Fidelity::LF, std::uint64_t(i)});
        ds.splits.push_back(Split::Test);
    }
    auto s = split_dataset(ds, {60, 30, 30}, 1);
    EXPECT_EQ(s.select(Fidelity::HF, Split::Train).size(), 60u);
    EXPECT_EQ(s.select(Fidelity::HF, Split::Val).size(), 30u);
    EXPECT_EQ(s.select(Fidelity::HF, Split::Test).size(), 30u);
    EXPECT_EQ(s.select(Fidelity::HF, Split::Reserved).size(), 180u);
    EXPECT_EQ(s.select(Fidelity::LF, Split::Train).size(), 20u);

    auto t = split_dataset(ds, {60, 30, 30}, 2);
    EXPECT_EQ(t.select(Fidelity::HF, Split::Train).size(), 60u);
    EXPECT_NE(s.select(Fidelity::HF, Split::Train), t.select(Fidelity::HF, Split::Train));
    EXPECT_EQ(split_dataset(ds, {60, 30, 30}, 1).splits, s.splits);
}

TEST(SplitDataset, TrivialAndInsufficient) {
    auto ds = build_dataset(small_gen(), 1, 1, 2);
    auto s = split_dataset(ds, {1, 0, 0}, 0);
    EXPECT_EQ(s.select(Fidelity::HF, Split::Train).size(), 1u);
    try {
        split_dataset(ds, {1, 1, 0}, 0);
        FAIL();
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('2'), std::string::npos);
        EXPECT_NE(msg.find('1'), std::string::npos);
    }
}

TEST(Normalizer, RoundTripOnRandomLines) {
    Normalizer n;
    n.global_scale = 873.25;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd(0.0, 500.0);
    for (int k = 0; k < 100; ++k) {
        Points3 p(20, 3);
        for (int i = 0; i < p.size(); ++i) p.data()[i] = nd(rng);
        const auto back = n.invert(n.apply(CharLine(p))).points;
        EXPECT_LE(((back - p).cwiseAbs().array() / p.cwiseAbs().array().max(1e-300)).maxCoeff(), 1e-9);
    }
    MotionParams m;
    m.p = {1, 2, 3, 4, 5, 6};
    n.motion_mean = {0.5, 1, 1, 1, 1, 1};
    n.motion_std = {2, 3, 1, 1, 0.5, 7};
    const auto back = n.invert_motion(n.apply(m));
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(back.p[i], m.p[i], 1e-12);
}

TEST(Normalizer, GlobalScaleIsBruteForceMaxOverTrain) {
    auto ds = split_dataset(build_dataset(small_gen(), 5, 6, 9), {2, 2, 2}, 3);
    const auto n = fit_normalizer(ds);
    double mx = 0.0, sdf = 0.0;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        if (ds.splits[i] != Split::Train) continue;
        const auto& d = ds.instance(ds.records[i]);
        for (const auto* l : {&d.init_line, &d.mold_line, &ds.output(ds.records[i])})
            for (int r = 0; r < l->size(); ++r)
                for (int c = 0; c < 3; ++c) mx = std::max(mx, std::abs(l->points(r, c)));
        for (int r = 0; r < d.sdf.values.size(); ++r) sdf = std::max(sdf, std::abs(d.sdf.values.data()[r]));
    }
    EXPECT_EQ(n.global_scale, mx);
    EXPECT_EQ(n.sdf_scale, sdf);
}

TEST(Normalizer, ConstantMotionComponentClamped) {
    auto ds = build_dataset(small_gen(), 3, 1, 1);
    for (auto& d : ds.instances) d.motion.p[2] = 42.0;
    const auto n = fit_normalizer(ds);
    EXPECT_EQ(n.motion_std[2], 1.0);
    EXPECT_NEAR(n.motion_mean[2], 42.0, 1e-12);
    EXPECT_TRUE(std::isfinite(n.apply(ds.instances[0].motion)[2]));
}

TEST(Normalizer, IgnoresNonTrainRecords) {
    auto ds = split_dataset(build_dataset(small_gen(), 4, 6, 21), {2, 2, 2}, 5);
    const auto full = fit_normalizer(ds);
    // drop test records entirely and refit
    MFDataset pruned = ds;
    pruned.records.clear();
    pruned.splits.clear();
    for (std::size_t i = 0; i < ds.records.size(); ++i)
        if (ds.splits[i] != Split::Test) {
            pruned.records.push_back(ds.records[i]);
            pruned.splits.push_back(ds.splits[i]);
        }
    EXPECT_EQ(fit_normalizer(pruned), full);
    // perturbing a test output leaves stats untouched
    auto test = ds.select(Fidelity::HF, Split::Test);
    ds.instances[ds.records[test[0]].instance].out_hf.points *= 100.0;
    EXPECT_EQ(fit_normalizer(ds), full);
}

TEST(Normalizer, EmptyTrainRejected) {
    MFDataset ds;
    EXPECT_THROW(fit_normalizer(ds), DataError);
    Normalizer bad;
    bad.global_scale = 0.0;
    EXPECT_THROW(bad.validate(), DataError);
}

TEST(Persistence, RoundTripLossless) {
    auto ds = split_dataset(build_dataset(small_gen(), 3, 3, 8), {1, 1, 1}, 2);
    ds.normalizer = fit_normalizer(ds);
    const auto dir = tmpdir("rt");
    write_dataset(ds, dir.string());
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    const auto back = read_dataset(dir.string());
    ASSERT_EQ(back.records.size(), ds.records.size());
    EXPECT_EQ(back.splits, ds.splits);
    EXPECT_EQ(back.normalizer, ds.normalizer);
    EXPECT_EQ(back.gen.to_json(), ds.gen.to_json());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& a = ds.records[i];
        const auto& b = back.records[i];
        EXPECT_EQ(a.id, b.id);
        EXPECT_EQ(a.seed, b.seed);
        EXPECT_EQ(a.fidelity, b.fidelity);
        EXPECT_EQ(ds.output(a).points, back.output(b).points);
        EXPECT_EQ(ds.instance(a).init_line.points, back.instance(b).init_line.points);
        EXPECT_EQ(ds.instance(a).mold_line.points, back.instance(b).mold_line.points);
        EXPECT_EQ(ds.instance(a).sdf.values, back.instance(b).sdf.values);
        EXPECT_EQ(ds.instance(a).motion.p, back.instance(b).motion.p);
        EXPECT_EQ(ds.instance(a).section.vertices, back.instance(b).section.vertices);
    }
    // writing what was read reproduces the manifest byte for byte
    const auto dir2 = tmpdir("rt2");
    write_dataset(back, dir2.string());
    EXPECT_EQ(slurp(dir / "manifest.json"), slurp(dir2 / "manifest.json"));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST(Persistence, RebuildSameSeedByteIdentical) {
    auto make = [] {
        auto ds = split_dataset(build_dataset(small_gen(), 2, 2, 77), {1, 1, 0}, 4);
        ds.normalizer = fit_normalizer(ds);
        return ds;
    };
    const auto a = tmpdir("a"), b = tmpdir("b");
    write_dataset(make(), a.string());
    write_dataset(make(), b.string());
    EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
    EXPECT_EQ(slurp(a / "instances/inst_000000/sdf.bin"), slurp(b / "instances/inst_000000/sdf.bin"));
    EXPECT_EQ(slurp(a / "instances/inst_000003/out_hf.csv"), slurp(b / "instances/inst_000003/out_hf.csv"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Persistence, MissingOrCorruptRejected) {
    const auto d = tmpdir("bad");
    EXPECT_THROW(read_dataset(d.string()), DataError);
    fs::create_directories(d);
    std::ofstream(d / "manifest.json") << "{ not json";
    EXPECT_THROW(read_dataset(d.string()), DataError);
    std::ofstream(d / "manifest.json") << R"({"format_version": 99})";
    EXPECT_THROW(read_dataset(d.string()), DataError);
    fs::remove_all(d);
}
