#pragma once

// Shared encoders and decoders, the two training losses, and the parameter
// checkpoint archive.
//
// Token layout: a batch of B samples with N tokens of width C is a
// (B*N) x C matrix; lines are (B*M) x 3; SDF images are (B*H*W) x 1 with
// rows in (sample, row, column) order.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fildeep/autodiff.hpp"
#include "fildeep/config.hpp"
#include "fildeep/errors.hpp"

namespace fildeep {

struct ModelConfig {
    int M = 288;          // points per line
    int N = 48;           // tokens
    int C = 64;           // channel width
    int F = 8;            // tokens per motion DOF, N = 6F
    int K = 3;            // ACF depth
    int heads = 4;
    int K_L = 2;          // LF processor depth
    int H = 64;           // SDF grid
    int W = 64;
    double lambda_cs = 0.1;
    double kl_weight = 0.0;

    std::string lf_backbone = "attention";  // attention | mlp
    std::string hf_head = "acf";            // acf | residual_mlp | vanilla_mlp
    std::string residual = "feature";       // feature | output | none
    bool e_adaptor = false;
    int ffn_mult = 4;
    int cse_blocks = 4;
    int cse_width = 8;
    int cse_external_dim = 0;  // > 0 replaces the conv stack by an external extractor of this width
    bool cll_axis_weights = false;

    int region_points() const { return M / N; }

    /// `allow_zero_depth` admits K = 0, a wiring-only configuration.
    void validate(bool allow_zero_depth = false) const {
        if (M <= 0 || N <= 0 || C <= 0 || F <= 0) throw ConfigError("M, N, C, F must be positive");
        if (N != 6 * F) throw ConfigError("N must equal 6 F (got N=" + std::to_string(N) + ", F=" + std::to_string(F) + ")");
        if (M % N != 0) throw ConfigError("M must be divisible by N");
        if (heads <= 0 || C % heads != 0) throw ConfigError("heads must divide C");
        if (K < (allow_zero_depth ? 0 : 1)) throw ConfigError("K must be >= 1");
        if (K_L < 0) throw ConfigError("K_L must be >= 0");
        if (ffn_mult <= 0) throw ConfigError("ffn_mult must be positive");
        if (cse_blocks < 1 || cse_width < 1) throw ConfigError("cse_blocks and cse_width must be positive");
        const int f = 1 << cse_blocks;
        if (H < 8 || W < 8 || H % f != 0 || W % f != 0)
            throw ConfigError("H and W must be >= 8 and divisible by 2^cse_blocks");
        if (!(lambda_cs >= 0.0) || !(kl_weight >= 0.0)) throw ConfigError("loss weights must be non-negative");
        if (lf_backbone != "attention" && lf_backbone != "mlp") throw ConfigError("lf_backbone must be attention or mlp");
        if (hf_head != "acf" && hf_head != "residual_mlp" && hf_head != "vanilla_mlp")
            throw ConfigError("hf_head must be acf, residual_mlp or vanilla_mlp");
        if (residual != "feature" && residual != "output" && residual != "none")
            throw ConfigError("residual must be feature, output or none");
        if (cse_external_dim < 0) throw ConfigError("cse_external_dim must be >= 0");
    }

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {"M", "N", "C", "F", "K", "heads", "K_L", "H", "W", "lambda_cs",
                                                "kl_weight", "lf_backbone", "hf_head", "residual", "e_adaptor",
                                                "ffn_mult", "cse_blocks", "cse_width", "cse_external_dim",
                                                "cll_axis_weights"};
        return k;
    }

    /// Reads the model keys present in `kv`; other keys are ignored.
    static ModelConfig from_config(const KeyValueConfig& kv) { return from_config(kv, ModelConfig()); }

    static ModelConfig from_config(const KeyValueConfig& kv, ModelConfig c) {
        auto I = [&](const char* key, int& dst) { dst = static_cast<int>(kv.get_int(key, dst)); };
        I("M", c.M);
        I("N", c.N);
        I("C", c.C);
        I("F", c.F);
        I("K", c.K);
        I("heads", c.heads);
        I("K_L", c.K_L);
        I("H", c.H);
        I("W", c.W);
        I("ffn_mult", c.ffn_mult);
        I("cse_blocks", c.cse_blocks);
        I("cse_width", c.cse_width);
        I("cse_external_dim", c.cse_external_dim);
        c.lambda_cs = kv.get_double("lambda_cs", c.lambda_cs);
        c.kl_weight = kv.get_double("kl_weight", c.kl_weight);
        c.lf_backbone = kv.get_string("lf_backbone", c.lf_backbone);
        c.hf_head = kv.get_string("hf_head", c.hf_head);
        c.residual = kv.get_string("residual", c.residual);
        c.e_adaptor = kv.get_bool("e_adaptor", c.e_adaptor);
        c.cll_axis_weights = kv.get_bool("cll_axis_weights", c.cll_axis_weights);
        if (!kv.has("F") && kv.has("N")) c.F = c.N / 6;
        return c;
    }

    nlohmann::json to_json() const {
        return {{"M", M},
                {"N", N},
                {"C", C},
                {"F", F},
                {"K", K},
                {"heads", heads},
                {"K_L", K_L},
                {"H", H},
                {"W", W},
                {"lambda_cs", lambda_cs},
                {"kl_weight", kl_weight},
                {"lf_backbone", lf_backbone},
                {"hf_head", hf_head},
                {"residual", residual},
                {"e_adaptor", e_adaptor},
                {"ffn_mult", ffn_mult},
                {"cse_blocks", cse_blocks},
                {"cse_width", cse_width},
                {"cse_external_dim", cse_external_dim},
                {"cll_axis_weights", cll_axis_weights}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.M = j.at("M");
        c.N = j.at("N");
        c.C = j.at("C");
        c.F = j.at("F");
        c.K = j.at("K");
        c.heads = j.at("heads");
        c.K_L = j.at("K_L");
        c.H = j.at("H");
        c.W = j.at("W");
        c.lambda_cs = j.at("lambda_cs");
        c.kl_weight = j.at("kl_weight");
        c.lf_backbone = j.at("lf_backbone");
        c.hf_head = j.at("hf_head");
        c.residual = j.at("residual");
        c.e_adaptor = j.at("e_adaptor");
        c.ffn_mult = j.at("ffn_mult");
        c.cse_blocks = j.at("cse_blocks");
        c.cse_width = j.at("cse_width");
        c.cse_external_dim = j.at("cse_external_dim");
        c.cll_axis_weights = j.at("cll_axis_weights");
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace nn {

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (h | 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Each parameter draws from its own stream keyed by name, so adding a module
// never reshuffles the initialization of the others.
template <class T>
Mat<T> xavier(std::uint64_t seed, const std::string& name, Eigen::Index rows, Eigen::Index cols, double fan_in,
              double fan_out) {
    std::mt19937_64 rng(name_seed(seed, name));
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> U(-a, a);
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(U(rng));
    return m;
}

} // namespace detail

template <class T>
void add_linear(ParamStore<T>& ps, const std::string& name, int in, int out, std::uint64_t seed) {
    ps.add(name + ".W", detail::xavier<T>(seed, name + ".W", in, out, in, out));
    ps.add(name + ".b", Mat<T>::Zero(1, out));
}

template <class T>
void add_region_linear(ParamStore<T>& ps, const std::string& name, int R, int in, int out, std::uint64_t seed) {
    ps.add(name + ".W", detail::xavier<T>(seed, name + ".W", static_cast<Eigen::Index>(R) * in, out, in, out));
    ps.add(name + ".b", Mat<T>::Zero(R, out));
}

template <class T>
void add_layer_norm(ParamStore<T>& ps, const std::string& name, int C) {
    ps.add(name + ".g", Mat<T>::Ones(1, C));
    ps.add(name + ".b", Mat<T>::Zero(1, C));
}

template <class T>
Var linear(Tape<T>& t, ParamStore<T>& ps, const std::string& name, Var x) {
    return t.linear(x, t.param(ps.get(name + ".W")), t.param(ps.get(name + ".b")));
}

template <class T>
Var region_linear(Tape<T>& t, ParamStore<T>& ps, const std::string& name, Var x, Eigen::Index R) {
    return t.region_linear(x, t.param(ps.get(name + ".W")), t.param(ps.get(name + ".b")), R);
}

template <class T>
Var layer_norm(Tape<T>& t, ParamStore<T>& ps, const std::string& name, Var x) {
    return t.layer_norm(x, t.param(ps.get(name + ".g")), t.param(ps.get(name + ".b")));
}

inline int cse_channels(const ModelConfig& c, int block) { return c.cse_width << std::min(block, 2); }

/// Encoder and decoder parameters for every shared module.
template <class T>
void init_codec_params(ParamStore<T>& ps, const ModelConfig& c, std::uint64_t seed) {
    const int P = c.region_points();
    for (const char* pre : {"cle_w", "cle_m"}) {
        const std::string p = pre;
        add_linear(ps, p + ".embed", 3, c.C, seed);
        add_region_linear(ps, p + ".region", c.N, P * c.C, c.C, seed);
        add_linear(ps, p + ".glob1", c.C, c.C, seed);
        add_linear(ps, p + ".glob2", c.C, c.C, seed);
    }
    if (c.cse_external_dim > 0) {
        add_linear(ps, "cse.ext", c.cse_external_dim, c.C, seed);
    } else {
        int cin = 1;
        for (int i = 0; i < c.cse_blocks; ++i) {
            const int cout = cse_channels(c, i);
            const std::string n = "cse.conv" + std::to_string(i);
            ps.add(n + ".W", detail::xavier<T>(seed, n + ".W", 9 * cin, cout, 9.0 * cin, 9.0 * cout));
            ps.add(n + ".b", Mat<T>::Zero(1, cout));
            cin = cout;
        }
        const int cells = (c.H >> c.cse_blocks) * (c.W >> c.cse_blocks);
        add_linear(ps, "cse.out", cells * cin, c.C, seed);
    }
    add_linear(ps, "csd.mu", c.C, c.C, seed);
    add_linear(ps, "csd.logvar", c.C, c.C, seed);
    {
        const int c0 = cse_channels(c, c.cse_blocks - 1);
        const int cells = (c.H >> c.cse_blocks) * (c.W >> c.cse_blocks);
        add_linear(ps, "csd.seed", c.C, cells * c0, seed);
        int cin = c0;
        for (int i = 0; i < c.cse_blocks; ++i) {
            const int cout = cse_channels(c, c.cse_blocks - 1 - i);
            const std::string n = "csd.up" + std::to_string(i);
            ps.add(n + ".W", detail::xavier<T>(seed, n + ".W", 9 * cin, cout, 9.0 * cin, 9.0 * cout));
            ps.add(n + ".b", Mat<T>::Zero(1, cout));
            cin = cout;
        }
        ps.add("csd.out.W", detail::xavier<T>(seed, "csd.out.W", 9 * cin, 1, 9.0 * cin, 9.0));
        ps.add("csd.out.b", Mat<T>::Zero(1, 1));
    }
    add_region_linear(ps, "mpe.embed", 6, 1, c.C, seed);
    add_region_linear(ps, "mpe.proj", 6, c.C, c.F * c.C, seed);
    add_linear(ps, "ecfe", 2 * c.C, c.C, seed);
    add_region_linear(ps, "cld", c.N, c.C, P * 3, seed);
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Fixed sinusoidal encoding over token index, N x C.
template <class T>
Mat<T> positional_encoding(int N, int C) {
    Mat<T> pe(N, C);
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < C; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / C);
            pe(n, j) = static_cast<T>(j % 2 == 0 ? std::sin(n * freq) : std::cos(n * freq));
        }
    return pe;
}

struct LineEncoding {
    Var local;   // region tokens before the global add
    Var global;  // B x C
    Var tokens;
};

/// CLE. `line` is (B*M) x 3, prefix selects the workpiece or mold encoder.
template <class T>
LineEncoding encode_line(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var line, const std::string& prefix) {
    const auto& L = t.value(line);
    if (L.cols() != 3 || L.rows() == 0 || L.rows() % c.M != 0)
        throw DataError("line encoder expects " + std::to_string(c.M) + " points per line");
    const Eigen::Index B = L.rows() / c.M;
    const int P = c.region_points();
    Var e = linear(t, ps, prefix + ".embed", line);
    Var regions = t.reshape(e, B * c.N, static_cast<Eigen::Index>(P) * c.C);
    LineEncoding out;
    out.local = region_linear(t, ps, prefix + ".region", regions, c.N);
    Var pooled = t.group_mean(e, c.M);
    out.global = linear(t, ps, prefix + ".glob2", t.gelu(linear(t, ps, prefix + ".glob1", pooled)));
    Var tok = t.add_group_broadcast(out.local, out.global);
    out.tokens = t.add_tiled_constant(tok, positional_encoding<T>(c.N, c.C));
    return out;
}

/// Frozen external section feature extractor: maps a batch of SDF images
/// ((B*H*W) x 1) to B x cse_external_dim features.
template <class T>
using SectionExtractor = std::function<Mat<T>(const Mat<T>& sdf_batch, Eigen::Index B)>;

/// CSE. Returns B x C.
template <class T>
Var encode_section(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var sdf,
                   const SectionExtractor<T>* external = nullptr) {
    const auto& S = t.value(sdf);
    const Eigen::Index cells = static_cast<Eigen::Index>(c.H) * c.W;
    if (S.cols() != 1 || S.rows() == 0 || S.rows() % cells != 0)
        throw DataError("section encoder expects " + std::to_string(c.H) + "x" + std::to_string(c.W) + " grids");
    const Eigen::Index B = S.rows() / cells;
    if (c.cse_external_dim > 0) {
        if (!external || !*external) throw ConfigError("cse_external_dim set but no external extractor given");
        Mat<T> f = (*external)(S, B);
        if (f.rows() != B || f.cols() != c.cse_external_dim) throw DataError("external extractor output shape mismatch");
        return linear(t, ps, "cse.ext", t.constant(std::move(f)));
    }
    typename Tape<T>::ImageShape s{B, c.H, c.W, 1};
    Var x = sdf;
    for (int i = 0; i < c.cse_blocks; ++i) {
        const std::string n = "cse.conv" + std::to_string(i);
        x = t.gelu(t.conv2d(x, t.param(ps.get(n + ".W")), t.param(ps.get(n + ".b")), s, 3, 2, 1));
        s = {B, s.H / 2, s.W / 2, cse_channels(c, i)};
    }
    Var flat = t.reshape(x, B, s.H * s.W * s.C);
    return linear(t, ps, "cse.out", flat);
}

/// MPE. `motion` is B x 6 (normalized); returns (B*N) x C.
template <class T>
Var encode_motion(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var motion) {
    const auto& P = t.value(motion);
    if (P.cols() != 6) throw DataError("motion encoder expects exactly 6 components");
    if (!P.allFinite()) throw DataError("motion parameters must be finite");
    const Eigen::Index B = P.rows();
    Var x = t.reshape(motion, B * 6, 1);
    Var e = region_linear(t, ps, "mpe.embed", x, 6);
    Var proj = region_linear(t, ps, "mpe.proj", e, 6);
    return t.reshape(proj, B * c.N, c.C);
}

/// WRFE: every token of sample b gets s_feat row b added.
template <class T>
Var fuse_workpiece(Tape<T>& t, const ModelConfig& c, Var s_feat, Var l_tok) {
    const auto& S = t.value(s_feat);
    const auto& L = t.value(l_tok);
    if (S.cols() != c.C || L.cols() != c.C || L.rows() != S.rows() * c.N)
        throw DataError("workpiece fusion shape mismatch");
    return t.add_group_broadcast(l_tok, s_feat);
}

/// ECFE: per-token linear map of [p | m] from 2C to C.
template <class T>
Var fuse_external(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var p_tok, Var m_tok) {
    const auto& Pm = t.value(p_tok);
    const auto& Mm = t.value(m_tok);
    if (Pm.rows() != Mm.rows() || Pm.cols() != c.C || Mm.cols() != c.C || Pm.rows() % c.N != 0)
        throw DataError("external fusion shape mismatch");
    return linear(t, ps, "ecfe", t.concat_cols(p_tok, m_tok));
}

// ---------------------------------------------------------------------------
// Decoders
// ---------------------------------------------------------------------------

/// CLD: token i decodes the M/N points of region i. Returns (B*M) x 3.
template <class T>
Var decode_line(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var tok) {
    const auto& X = t.value(tok);
    if (X.cols() != c.C || X.rows() == 0 || X.rows() % c.N != 0) throw DataError("line decoder shape mismatch");
    const Eigen::Index B = X.rows() / c.N;
    Var pts = region_linear(t, ps, "cld", tok, c.N);
    return t.reshape(pts, B * c.M, 3);
}

struct SectionDecoding {
    Var recon;  // (B*H*W) x 1
    Var mu;
    Var logvar;
};

/// CSD. With `noise` null the bottleneck is deterministic (z = mu).
template <class T>
SectionDecoding decode_section(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var feat,
                               std::mt19937_64* noise = nullptr) {
    const auto& Fm = t.value(feat);
    if (Fm.cols() != c.C || Fm.rows() == 0) throw DataError("section decoder expects B x C features");
    const Eigen::Index B = Fm.rows();
    SectionDecoding out;
    out.mu = linear(t, ps, "csd.mu", feat);
    out.logvar = linear(t, ps, "csd.logvar", feat);
    Var z = out.mu;
    if (noise) {
        std::normal_distribution<double> G(0.0, 1.0);
        Mat<T> eps(B, c.C);
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<T>(G(*noise));
        Var sd = t.exp(t.scale(out.logvar, T(0.5)));
        z = t.add(out.mu, t.mul(sd, t.constant(std::move(eps))));
    }
    const int h0 = c.H >> c.cse_blocks, w0 = c.W >> c.cse_blocks;
    int ch = cse_channels(c, c.cse_blocks - 1);
    Var x = t.reshape(linear(t, ps, "csd.seed", z), B * h0 * w0, ch);
    typename Tape<T>::ImageShape s{B, h0, w0, ch};
    for (int i = 0; i < c.cse_blocks; ++i) {
        x = t.upsample2x(x, s);
        s = {B, s.H * 2, s.W * 2, s.C};
        const std::string n = "csd.up" + std::to_string(i);
        x = t.gelu(t.conv2d(x, t.param(ps.get(n + ".W")), t.param(ps.get(n + ".b")), s, 3, 1, 1));
        s.C = cse_channels(c, c.cse_blocks - 1 - i);
    }
    out.recon = t.conv2d(x, t.param(ps.get("csd.out.W")), t.param(ps.get("csd.out.b")), s, 3, 1, 1);
    return out;
}

/// KL divergence of N(mu, exp(logvar)) from N(0, 1), averaged over entries.
template <class T>
Var kl_term(Tape<T>& t, Var mu, Var logvar) {
    Var inner = t.sub(t.sub(t.add_scalar(logvar, T(1)), t.mul(mu, mu)), t.exp(logvar));
    return t.scale(t.mean_all(inner), T(-0.5));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// CLL: mean over points of the squared Euclidean error. `axis_weights`
/// (empty or 3 entries) rescales each coordinate's contribution.
template <class T>
Var loss_cll(Tape<T>& t, Var pred, const Mat<T>& gt, const std::vector<T>& axis_weights = {}) {
    const auto& P = t.value(pred);
    if (P.cols() != 3 || gt.cols() != 3 || P.rows() != gt.rows()) throw DataError("line loss expects matching M x 3 lines");
    if (!P.allFinite() || !gt.allFinite()) throw NumericalError("NaN or infinite value in line loss input");
    return t.weighted_sq_error(pred, gt, static_cast<T>(P.rows()), axis_weights);
}

/// CSL: mean squared error over all cells.
template <class T>
Var loss_csl(Tape<T>& t, Var recon, const Mat<T>& gt) {
    const auto& R = t.value(recon);
    if (R.rows() != gt.rows() || R.cols() != gt.cols()) throw DataError("section loss shape mismatch");
    return t.weighted_sq_error(recon, gt, static_cast<T>(R.size()));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'F', 'D', 'P', 'A', 'R', 'A', 'M', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ParamStore<float> params;
    nlohmann::json extra = nlohmann::json::object();
};

/// Archive layout: 8-byte magic, uint32 version, uint64 header length, JSON
/// header (config echo, parameter table, extra), then the float32 payload.
template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore<T>& ps,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& p = ps.at(i);
        table.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(p.value.size());
    }
    const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                   {"model_config", cfg.to_json()},
                                   {"params", table},
                                   {"extra", extra}};
    const std::string h = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os.write(kCheckpointMagic, 8);
    const std::uint32_t v = kCheckpointVersion;
    const std::uint64_t n = h.size();
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
    os.write(reinterpret_cast<const char*>(&n), sizeof n);
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& p = ps.at(i);
        for (Eigen::Index k = 0; k < p.value.size(); ++k) {
            const float f = static_cast<float>(p.value.data()[k]);
            os.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
    if (!os) throw DataError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    char magic[8];
    std::uint32_t v = 0;
    std::uint64_t n = 0;
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError(path + " is not a checkpoint");
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v) || v != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version");
    if (!is.read(reinterpret_cast<char*>(&n), sizeof n) || n > (1ull << 32)) throw DataError(path + ": bad header length");
    std::string h(n, '\0');
    if (!is.read(h.data(), static_cast<std::streamsize>(n))) throw DataError(path + ": truncated header");
    Checkpoint ck;
    try {
        const auto header = nlohmann::json::parse(h);
        ck.config = ModelConfig::from_json(header.at("model_config"));
        ck.extra = header.value("extra", nlohmann::json::object());
        for (const auto& e : header.at("params")) {
            const Eigen::Index r = e.at("rows"), c = e.at("cols");
            Mat<float> m(r, c);
            if (m.size() && !is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float))))
                throw DataError(path + ": truncated parameter data");
            ck.params.add(e.at("name").get<std::string>(), std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": bad checkpoint header: " + e.what());
    }
    return ck;
}

} // namespace nn
} // namespace fildeep
