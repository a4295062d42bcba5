#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "fildeep/model_codec.hpp"

using namespace fildeep;
using namespace fildeep::nn;

namespace {

using Md = Mat<double>;

ModelConfig tiny() {
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

Md random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
    std::uniform_real_distribution<double> U(-s, s);
    Md m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = U(rng);
    return m;
}

ParamStore<double> codec(const ModelConfig& c, std::uint64_t seed = 1) {
    ParamStore<double> ps;
    init_codec_params(ps, c, seed);
    return ps;
}

void zero_prefix(ParamStore<double>& ps, const std::string& pre) {
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps.at(i).name.rfind(pre, 0) == 0) ps.at(i).value.setZero();
}

} // namespace

TEST(ModelConfig, ValidatesStructure) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    c.N = 40;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig{};
    c.M = 290;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig{};
    c.heads = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ModelConfig{};
    c.K = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_NO_THROW(c.validate(true));
    c = ModelConfig{};
    c.H = 60;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, JsonAndKeyValueRoundTrip) {
    ModelConfig c = tiny();
    c.residual = "output";
    EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
    const auto kv = KeyValueConfig::parse("N = 12\nC = 16\nheads = 8\nhf_head = vanilla_mlp\n");
    const auto d = ModelConfig::from_config(kv);
    EXPECT_EQ(d.N, 12);
    EXPECT_EQ(d.F, 2);
    EXPECT_EQ(d.heads, 8);
    EXPECT_EQ(d.hf_head, "vanilla_mlp");
}

TEST(Encoders, DefaultShapeContracts) {
    const ModelConfig c;
    auto ps = codec(c);
    Tape<double> t(false);
    std::mt19937_64 rng(1);
    const auto le = encode_line(t, ps, c, t.constant(random_mat(rng, c.M, 3)), "cle_w");
    EXPECT_EQ(t.value(le.tokens).rows(), 48);
    EXPECT_EQ(t.value(le.tokens).cols(), 64);
    const Var s = encode_section(t, ps, c, t.constant(random_mat(rng, 64 * 64, 1)));
    EXPECT_EQ(t.value(s).rows(), 1);
    EXPECT_EQ(t.value(s).cols(), 64);
    const Var p = encode_motion(t, ps, c, t.constant(random_mat(rng, 1, 6)));
    EXPECT_EQ(t.value(p).rows(), 48);
    const Var y = decode_line(t, ps, c, le.tokens);
    EXPECT_EQ(t.value(y).rows(), 288);
    EXPECT_EQ(t.value(y).cols(), 3);
    const auto r = decode_section(t, ps, c, s);
    EXPECT_EQ(t.value(r.recon).rows(), 64 * 64);
    EXPECT_EQ(t.value(r.recon).cols(), 1);
}

TEST(Encoders, RejectWrongShapes) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    Tape<double> t(false);
    EXPECT_THROW(encode_line(t, ps, c, t.constant(Md::Zero(13, 3)), "cle_w"), DataError);
    EXPECT_THROW(encode_section(t, ps, c, t.constant(Md::Zero(15 * 16, 1))), DataError);
    EXPECT_THROW(encode_motion(t, ps, c, t.constant(Md::Zero(1, 5))), DataError);
    Md bad = Md::Zero(1, 6);
    bad(0, 2) = std::nan("");
    EXPECT_THROW(encode_motion(t, ps, c, t.constant(bad)), DataError);
    EXPECT_THROW(decode_line(t, ps, c, t.constant(Md::Zero(5, 8))), DataError);
    EXPECT_THROW(fuse_workpiece(t, c, t.constant(Md::Zero(1, 8)), t.constant(Md::Zero(12, 8))), DataError);
    EXPECT_THROW(fuse_external(t, ps, c, t.constant(Md::Zero(6, 8)), t.constant(Md::Zero(6, 7))), DataError);
}

TEST(LineEncoder, ZeroInputZeroWeightsGivesPositionalEncoding) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    zero_prefix(ps, "cle_w");
    Tape<double> t(false);
    const auto le = encode_line(t, ps, c, t.constant(Md::Zero(c.M, 3)), "cle_w");
    EXPECT_EQ(t.value(le.tokens), positional_encoding<double>(c.N, c.C));
}

TEST(LineEncoder, PositionalEncodingIsSinusoidal) {
    const Md pe = positional_encoding<double>(6, 8);
    EXPECT_EQ(pe(0, 0), 0.0);
    EXPECT_EQ(pe(0, 1), 1.0);
    EXPECT_NEAR(pe(3, 2), std::sin(3.0 * std::pow(10000.0, -2.0 / 8.0)), 1e-15);
    EXPECT_NEAR(pe(5, 7), std::cos(5.0 * std::pow(10000.0, -6.0 / 8.0)), 1e-15);
}

TEST(LineEncoder, RegionLocalityBeforeGlobalAdd) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    std::mt19937_64 rng(3);
    const Md a = random_mat(rng, c.M, 3);
    for (int j = 0; j < c.N; ++j) {
        Md b = a;
        b.middleRows(j * c.region_points(), c.region_points()) += random_mat(rng, c.region_points(), 3);
        Tape<double> t(false);
        const Md la = t.value(encode_line(t, ps, c, t.constant(a), "cle_m").local);
        const Md lb = t.value(encode_line(t, ps, c, t.constant(b), "cle_m").local);
        for (int i = 0; i < c.N; ++i) {
            const double d = (la.row(i) - lb.row(i)).norm();
            if (i == j) EXPECT_GT(d, 1e-6);
            else EXPECT_EQ(d, 0.0);
        }
    }
}

TEST(LineEncoder, BatchedEqualsPerSample) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    std::mt19937_64 rng(4);
    const Md a = random_mat(rng, c.M, 3), b = random_mat(rng, c.M, 3);
    Md ab(2 * c.M, 3);
    ab << a, b;
    Tape<double> t(false);
    const Md ta = t.value(encode_line(t, ps, c, t.constant(a), "cle_w").tokens);
    const Md tb = t.value(encode_line(t, ps, c, t.constant(b), "cle_w").tokens);
    const Md tab = t.value(encode_line(t, ps, c, t.constant(ab), "cle_w").tokens);
    EXPECT_LT((tab.topRows(c.N) - ta).norm(), 1e-12);
    EXPECT_LT((tab.bottomRows(c.N) - tb).norm(), 1e-12);
}

TEST(SectionEncoder, ContinuousInInput) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    std::mt19937_64 rng(5);
    const Md s = random_mat(rng, c.H * c.W, 1);
    const Md s2 = s + random_mat(rng, c.H * c.W, 1, 1e-9);
    Tape<double> t(false);
    const Md fa = t.value(encode_section(t, ps, c, t.constant(s)));
    const Md fb = t.value(encode_section(t, ps, c, t.constant(s2)));
    EXPECT_LT((fa - fb).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(SectionEncoder, ExternalExtractorHook) {
    ModelConfig c = tiny();
    c.cse_external_dim = 3;
    auto ps = codec(c);
    EXPECT_FALSE(ps.has("cse.conv0.W"));
    SectionExtractor<double> ext = [](const Md& sdf, Eigen::Index B) {
        Md f(B, 3);
        for (Eigen::Index b = 0; b < B; ++b) {
            const auto blk = sdf.middleRows(b * 256, 256);
            f.row(b) << blk.minCoeff(), blk.maxCoeff(), blk.mean();
        }
        return f;
    };
    Tape<double> t(false);
    Md s = Md::Zero(256, 1);
    s(0, 0) = -2.0;
    s(1, 0) = 4.0;
    const Md f = t.value(encode_section(t, ps, c, t.constant(s), &ext));
    Md expect = Md(1, 3);
    expect << -2.0, 4.0, 2.0 / 256;
    EXPECT_LT((f - (expect * ps.get("cse.ext.W").value + ps.get("cse.ext.b").value)).norm(), 1e-14);
    EXPECT_THROW(encode_section(t, ps, c, t.constant(s)), ConfigError);
}

TEST(MotionEncoder, ShapeForEightTokensPerDof) {
    ModelConfig c;
    c.F = 8;
    c.N = 48;
    auto ps = codec(c);
    Tape<double> t(false);
    const Var p = encode_motion(t, ps, c, t.constant(Md::Ones(2, 6)));
    EXPECT_EQ(t.value(p).rows(), 96);
    EXPECT_EQ(t.value(p).cols(), c.C);
}

TEST(MotionEncoder, BlockIndependenceAndLinearity) {
    ModelConfig c = tiny();
    c.F = 2;
    c.N = 12;
    auto ps = codec(c);
    zero_prefix(ps, "mpe.embed.b");
    zero_prefix(ps, "mpe.proj.b");
    std::mt19937_64 rng(6);
    const Md p = random_mat(rng, 1, 6);
    Tape<double> t(false);
    const Md base = t.value(encode_motion(t, ps, c, t.constant(p)));
    for (int i = 0; i < 6; ++i) {
        Md q = p;
        q(0, i) = 0.0;
        const Md z = t.value(encode_motion(t, ps, c, t.constant(q)));
        for (int d = 0; d < 6; ++d) {
            const auto blk = z.middleRows(d * c.F, c.F);
            if (d == i) EXPECT_EQ(blk.cwiseAbs().maxCoeff(), 0.0);
            else EXPECT_EQ(blk, base.middleRows(d * c.F, c.F));
        }
    }
    const Md e0 = t.value(encode_motion(t, ps, c, t.constant(Md::Zero(1, 6))));
    const Md e2 = t.value(encode_motion(t, ps, c, t.constant(2.0 * p)));
    EXPECT_LT(((e2 - base) - (base - e0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, WorkpieceFusionProperties) {
    const ModelConfig c = tiny();
    std::mt19937_64 rng(7);
    const Md l = random_mat(rng, c.N, c.C), s = random_mat(rng, 1, c.C), k = random_mat(rng, 1, c.C);
    Tape<double> t(false);
    EXPECT_EQ(t.value(fuse_workpiece(t, c, t.constant(Md::Zero(1, c.C)), t.constant(l))), l);
    const Md only_s = t.value(fuse_workpiece(t, c, t.constant(s), t.constant(Md::Zero(c.N, c.C))));
    for (int i = 0; i < c.N; ++i) EXPECT_EQ(only_s.row(i), s.row(0));
    const Md a = t.value(fuse_workpiece(t, c, t.constant(s + k), t.constant(l)));
    const Md b = t.value(fuse_workpiece(t, c, t.constant(s), t.constant(l)));
    for (int i = 0; i < c.N; ++i) EXPECT_LT((a.row(i) - b.row(i) - k.row(0)).norm(), 1e-14);
}

TEST(Fusion, ExternalFusionIdentityAndRowLocality) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    std::mt19937_64 rng(8);
    const Md p = random_mat(rng, c.N, c.C), m = random_mat(rng, c.N, c.C);
    {
        auto q = codec(c);
        q.get("ecfe.W").value.setZero();
        q.get("ecfe.W").value.topRows(c.C).setIdentity();
        q.get("ecfe.b").value.setZero();
        Tape<double> t(false);
        EXPECT_EQ(t.value(fuse_external(t, q, c, t.constant(p), t.constant(m))), p);
    }
    Tape<double> t(false);
    const Md e = t.value(fuse_external(t, ps, c, t.constant(p), t.constant(m)));
    EXPECT_EQ(e.rows(), c.N);
    EXPECT_EQ(e.cols(), c.C);
    Md p2 = p, m2 = m;
    p2.row(2) += random_mat(rng, 1, c.C);
    m2.row(2) += random_mat(rng, 1, c.C);
    const Md e2 = t.value(fuse_external(t, ps, c, t.constant(p2), t.constant(m2)));
    for (int i = 0; i < c.N; ++i) {
        if (i == 2) EXPECT_GT((e2.row(i) - e.row(i)).norm(), 1e-6);
        else EXPECT_EQ(e2.row(i), e.row(i));
    }
}

TEST(LineDecoder, RegionLocalityAndZero) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    std::mt19937_64 rng(9);
    const Md tok = random_mat(rng, c.N, c.C);
    Tape<double> t(false);
    const Md y = t.value(decode_line(t, ps, c, t.constant(tok)));
    for (int j = 0; j < c.N; ++j) {
        Md tj = tok;
        tj.row(j) += random_mat(rng, 1, c.C);
        const Md yj = t.value(decode_line(t, ps, c, t.constant(tj)));
        for (int i = 0; i < c.M; ++i) {
            const bool inside = i / c.region_points() == j;
            if (inside) EXPECT_GT((yj.row(i) - y.row(i)).norm(), 0.0);
            else EXPECT_EQ(yj.row(i), y.row(i));
        }
    }
    zero_prefix(ps, "cld.b");
    EXPECT_EQ(t.value(decode_line(t, ps, c, t.constant(Md::Zero(c.N, c.C)))).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SectionDecoder, DeterministicWithoutNoise) {
    const ModelConfig c = tiny();
    auto ps = codec(c);
    std::mt19937_64 rng(10);
    const Md f = random_mat(rng, 2, c.C);
    Tape<double> t(false);
    const Md a = t.value(decode_section(t, ps, c, t.constant(f)).recon);
    const Md b = t.value(decode_section(t, ps, c, t.constant(f)).recon);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.rows(), 2 * c.H * c.W);
    std::mt19937_64 noise(1);
    const Md n = t.value(decode_section(t, ps, c, t.constant(f), &noise).recon);
    EXPECT_GT((n - a).norm(), 0.0);
}

TEST(SectionDecoder, KlTermZeroAtStandardNormal) {
    Tape<double> t;
    const Var kl0 = kl_term(t, t.constant(Md::Zero(2, 4)), t.constant(Md::Zero(2, 4)));
    EXPECT_NEAR(t.value(kl0)(0, 0), 0.0, 1e-15);
    const Var kl1 = kl_term(t, t.constant(Md::Ones(1, 1)), t.constant(Md::Zero(1, 1)));
    EXPECT_NEAR(t.value(kl1)(0, 0), 0.5, 1e-15);
}

TEST(Losses, LineLossClosedForms) {
    const int M = 12;
    std::mt19937_64 rng(11);
    const Md gt = random_mat(rng, M, 3);
    Tape<double> t;
    EXPECT_EQ(t.value(loss_cll(t, t.constant(gt), gt))(0, 0), 0.0);
    Md off = gt;
    off(5, 1) += 1.0;
    EXPECT_NEAR(t.value(loss_cll(t, t.constant(off), gt))(0, 0), 1.0 / M, 1e-15);
    Md nan = gt;
    nan(0, 0) = std::nan("");
    EXPECT_THROW(loss_cll(t, t.constant(nan), gt), NumericalError);
    EXPECT_THROW(loss_cll(t, t.constant(Md::Zero(M, 2)), gt), DataError);
}

TEST(Losses, LineLossGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(12);
    const Md gt = random_mat(rng, 12, 3), pred = random_mat(rng, 12, 3);
    for (const std::vector<double>& w : {std::vector<double>{}, std::vector<double>{1.0, 0.2, 3.0}}) {
        Tape<double> t;
        const Var p = t.variable(pred);
        t.backward(loss_cll(t, p, gt, w));
        const Md g = t.grad(p);
        const double h = 1e-6;
        for (Eigen::Index i = 0; i < pred.size(); ++i) {
            Md a = pred, b = pred;
            a.data()[i] += h;
            b.data()[i] -= h;
            Tape<double> ta;
            const double fa = ta.value(loss_cll(ta, ta.constant(a), gt, w))(0, 0);
            const double fb = ta.value(loss_cll(ta, ta.constant(b), gt, w))(0, 0);
            const double fd = (fa - fb) / (2 * h);
            EXPECT_NEAR(g.data()[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(Losses, SectionLoss) {
    std::mt19937_64 rng(13);
    const Md a = random_mat(rng, 64, 1), b = random_mat(rng, 64, 1);
    Tape<double> t;
    EXPECT_EQ(t.value(loss_csl(t, t.constant(a), a))(0, 0), 0.0);
    EXPECT_NEAR(t.value(loss_csl(t, t.constant((a.array() + 1.0).matrix()), a))(0, 0), 1.0, 1e-14);
    EXPECT_DOUBLE_EQ(t.value(loss_csl(t, t.constant(a), b))(0, 0), t.value(loss_csl(t, t.constant(b), a))(0, 0));
    EXPECT_THROW(loss_csl(t, t.constant(a), Md(Md::Zero(63, 1))), DataError);
}

TEST(Checkpoint, RoundTripAndRejection) {
    const ModelConfig c = tiny();
    auto ps = codec(c, 3).cast<float>();
    const auto path = (std::filesystem::temp_directory_path() / "fildeep_ck_test.bin").string();
    save_checkpoint(path, c, ps, {{"note", "x"}});
    const auto ck = load_checkpoint(path);
    EXPECT_EQ(ck.config, c);
    EXPECT_EQ(ck.extra.at("note"), "x");
    ASSERT_EQ(ck.params.size(), ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        EXPECT_EQ(ck.params.at(i).name, ps.at(i).name);
        EXPECT_EQ(ck.params.at(i).value, ps.at(i).value);
    }
    {
        std::ofstream os(path, std::ios::binary);
        os << "garbage";
    }
    EXPECT_THROW(load_checkpoint(path), DataError);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), DataError);
}

TEST(Init, DeterministicAndNameKeyed) {
    const ModelConfig c = tiny();
    auto a = codec(c, 5), b = codec(c, 5), d = codec(c, 6);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.at(i).value, b.at(i).value);
    EXPECT_NE(a.get("cld.W").value, d.get("cld.W").value);
    ModelConfig e = c;
    e.cse_external_dim = 4;  // removes the conv stack; unrelated parameters keep their values
    auto f = codec(e, 5);
    EXPECT_EQ(f.get("cld.W").value, a.get("cld.W").value);
}
