#pragma once

// LF processor, HF processor (stacked cross-fidelity attention blocks) and the
// per-token MLP heads used as ablation baselines; plus the end-to-end
// forward pass that wires encoders, processors and decoders together.

#include <string>
#include <vector>

#include "fildeep/geometry.hpp"
#include "fildeep/model_codec.hpp"

namespace fildeep::nn {

template <class T>
void add_mha(ParamStore<T>& ps, const std::string& name, int C, std::uint64_t seed) {
    for (const char* k : {".q", ".k", ".v", ".o"}) add_linear(ps, name + k, C, C, seed);
}

template <class T>
void add_attention_block(ParamStore<T>& ps, const std::string& name, const ModelConfig& c, std::uint64_t seed) {
    add_mha(ps, name + ".mca", c.C, seed);
    add_mha(ps, name + ".msa", c.C, seed);
    add_linear(ps, name + ".ffn1", c.C, c.ffn_mult * c.C, seed);
    add_linear(ps, name + ".ffn2", c.ffn_mult * c.C, c.C, seed);
    for (const char* ln : {".ln1", ".ln2", ".ln3"}) add_layer_norm(ps, name + ln, c.C);
}

template <class T>
void init_lf_params(ParamStore<T>& ps, const ModelConfig& c, std::uint64_t seed) {
    if (c.lf_backbone == "attention") {
        for (int i = 0; i < c.K_L; ++i) add_attention_block(ps, "lf.block" + std::to_string(i), c, seed);
    } else {
        add_linear(ps, "lf.mlp1", 2 * c.C, c.ffn_mult * c.C, seed);
        add_linear(ps, "lf.mlp2", c.ffn_mult * c.C, c.C, seed);
    }
}

template <class T>
void init_hf_params(ParamStore<T>& ps, const ModelConfig& c, std::uint64_t seed) {
    if (c.hf_head == "acf") {
        for (int i = 0; i < c.K; ++i) add_attention_block(ps, "hf.block" + std::to_string(i), c, seed);
    } else {
        add_linear(ps, "hf.mlp1", 2 * c.C, c.ffn_mult * c.C, seed);
        add_linear(ps, "hf.mlp2", c.ffn_mult * c.C, c.C, seed);
    }
    // zero the last layer when a residual carries w_lf, so a fresh head
    // reproduces the LF path and stage 2 starts from the stage-1 fit
    if (c.residual != "none") {
        if (c.hf_head == "acf" && c.K > 0) {
            const std::string ln = "hf.block" + std::to_string(c.K - 1) + ".ln3";
            ps.get(ln + ".g").value.setZero();
            ps.get(ln + ".b").value.setZero();
        } else if (c.hf_head == "residual_mlp") {
            ps.get("hf.mlp2.W").value.setZero();
            ps.get("hf.mlp2.b").value.setZero();
        }
    }
    if (c.e_adaptor) {
        ps.add("hf.adapt.W", Mat<T>::Identity(c.C, c.C));
        ps.add("hf.adapt.b", Mat<T>::Zero(1, c.C));
    }
}

/// Every parameter of the full model (shared modules, LF and HF processors).
template <class T>
ParamStore<T> init_model(const ModelConfig& c, std::uint64_t seed, bool with_hf = true) {
    c.validate(true);
    ParamStore<T> ps;
    init_codec_params(ps, c, seed);
    init_lf_params(ps, c, seed);
    if (with_hf) init_hf_params(ps, c, seed);
    return ps;
}

/// Standard multi-head attention: query tokens from `q_in`, keys and values
/// from `kv_in`, then the output projection.
template <class T>
Var mha(Tape<T>& t, ParamStore<T>& ps, const std::string& name, Var q_in, Var kv_in, Eigen::Index B, int heads,
        std::vector<Mat<T>>* probs = nullptr) {
    Var q = linear(t, ps, name + ".q", q_in);
    Var k = linear(t, ps, name + ".k", kv_in);
    Var v = linear(t, ps, name + ".v", kv_in);
    return linear(t, ps, name + ".o", t.attention(q, k, v, B, heads, probs));
}

/// Attention probabilities of one block: (sample, head) ordered N x N maps.
template <class T>
struct BlockMaps {
    std::vector<Mat<T>> cross;
    std::vector<Mat<T>> self;
};

/// One cross-fidelity block:
///   w_cross = LN(MCA(e, w, w) + w)
///   w_self  = LN(MSA(w_cross) + w_cross)
///   w_out   = LN(FFN(w_self) + w_self)
template <class T>
Var acf_block(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, const std::string& name, Var w_prev, Var e,
              BlockMaps<T>* maps = nullptr) {
    const auto& Wv = t.value(w_prev);
    const auto& Ev = t.value(e);
    if (Wv.rows() != Ev.rows() || Wv.cols() != c.C || Ev.cols() != c.C || Wv.rows() % c.N != 0)
        throw DataError("attention block shape mismatch");
    if (c.C % c.heads != 0) throw ConfigError("heads must divide C");
    const Eigen::Index B = Wv.rows() / c.N;
    Var cross = mha(t, ps, name + ".mca", e, w_prev, B, c.heads, maps ? &maps->cross : nullptr);
    Var w_cross = layer_norm(t, ps, name + ".ln1", t.add(cross, w_prev));
    Var self = mha(t, ps, name + ".msa", w_cross, w_cross, B, c.heads, maps ? &maps->self : nullptr);
    Var w_self = layer_norm(t, ps, name + ".ln2", t.add(self, w_cross));
    Var ffn = linear(t, ps, name + ".ffn2", t.gelu(linear(t, ps, name + ".ffn1", w_self)));
    return layer_norm(t, ps, name + ".ln3", t.add(ffn, w_self));
}

/// Per-token MLP on [a | b] channels.
template <class T>
Var token_mlp(Tape<T>& t, ParamStore<T>& ps, const std::string& name, Var a, Var b) {
    return linear(t, ps, name + "2", t.gelu(linear(t, ps, name + "1", t.concat_cols(a, b))));
}

/// LF processor: attention blocks with e as query, or a residual token MLP.
template <class T>
Var lf_forward(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var w_tok, Var e_tok) {
    if (t.value(w_tok).rows() != t.value(e_tok).rows() || t.value(w_tok).cols() != c.C || t.value(e_tok).cols() != c.C)
        throw DataError("LF processor shape mismatch");
    if (c.lf_backbone == "mlp") return t.add(w_tok, token_mlp(t, ps, "lf.mlp", w_tok, e_tok));
    Var w = w_tok;
    for (int i = 0; i < c.K_L; ++i) w = acf_block(t, ps, c, "lf.block" + std::to_string(i), w, e_tok);
    return w;
}

/// Per-token MLP head on [e | w_lf]; adds w_lf when `residual`.
template <class T>
Var baseline_hf(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var w_lf, Var e_tok, bool residual) {
    if (t.value(w_lf).rows() != t.value(e_tok).rows() || t.value(w_lf).cols() != c.C || t.value(e_tok).cols() != c.C)
        throw DataError("HF head shape mismatch");
    Var y = token_mlp(t, ps, "hf.mlp", e_tok, w_lf);
    return residual ? t.add(y, w_lf) : y;
}

/// HF processor. Returns w^K + w_lf with the feature-space residual, w^K
/// otherwise (the output-space residual is applied after decoding).
template <class T>
Var hf_forward(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, Var w_lf, Var e_tok,
               std::vector<BlockMaps<T>>* maps = nullptr) {
    const bool feature_res = c.residual == "feature";
    if (c.e_adaptor) e_tok = linear(t, ps, "hf.adapt", e_tok);
    if (c.hf_head != "acf") {
        // the MLP heads carry their own residual flag
        return baseline_hf(t, ps, c, w_lf, e_tok, c.hf_head == "residual_mlp" && c.residual != "none");
    }
    Var w = w_lf;
    if (maps) maps->assign(static_cast<std::size_t>(c.K), {});
    for (int k = 0; k < c.K; ++k)
        w = acf_block(t, ps, c, "hf.block" + std::to_string(k), w, e_tok, maps ? &(*maps)[static_cast<std::size_t>(k)] : nullptr);
    return feature_res ? t.add(w, w_lf) : w;
}

// ---------------------------------------------------------------------------
// End-to-end forward pass
// ---------------------------------------------------------------------------

/// Normalized network inputs for B samples.
template <class T>
struct Inputs {
    Mat<T> sdf;        // (B*H*W) x 1
    Mat<T> init_line;  // (B*M) x 3
    Mat<T> mold_line;  // (B*M) x 3
    Mat<T> motion;     // B x 6
    Eigen::Index B = 0;
};

template <class T>
struct Forward {
    Var s_feat, l_tok, m_tok, p_tok, w_tok, e_tok;
    Var w_lf, y_lf;
    Var w_hf, y_hf;          // valid when the HF path ran
    SectionDecoding recon;   // valid when reconstruction ran
    bool has_hf = false;
    bool has_recon = false;
};

struct ForwardOptions {
    bool hf = true;
    bool recon = false;
};

/// Shared encoders, then the LF processor and decoder; optionally the HF
/// processor and the section reconstruction.
template <class T>
Forward<T> forward(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, const Inputs<T>& in, ForwardOptions opt = {},
                   std::vector<BlockMaps<T>>* maps = nullptr, const SectionExtractor<T>* external = nullptr,
                   std::mt19937_64* noise = nullptr) {
    Forward<T> f;
    f.s_feat = encode_section(t, ps, c, t.constant(in.sdf), external);
    f.l_tok = encode_line(t, ps, c, t.constant(in.init_line), "cle_w").tokens;
    f.m_tok = encode_line(t, ps, c, t.constant(in.mold_line), "cle_m").tokens;
    f.p_tok = encode_motion(t, ps, c, t.constant(in.motion));
    f.w_tok = fuse_workpiece(t, c, f.s_feat, f.l_tok);
    f.e_tok = fuse_external(t, ps, c, f.p_tok, f.m_tok);
    f.w_lf = lf_forward(t, ps, c, f.w_tok, f.e_tok);
    f.y_lf = decode_line(t, ps, c, f.w_lf);
    if (opt.hf) {
        f.w_hf = hf_forward(t, ps, c, f.w_lf, f.e_tok, maps);
        f.y_hf = decode_line(t, ps, c, f.w_hf);
        if (c.hf_head == "acf" && c.residual == "output") f.y_hf = t.add(f.y_hf, f.y_lf);
        f.has_hf = true;
    }
    if (opt.recon) {
        f.recon = decode_section(t, ps, c, f.s_feat, noise);
        f.has_recon = true;
    }
    return f;
}

/// HF head alone on cached (w_lf, e) features, used when the shared modules
/// are frozen. Produces the same y_hf as forward().
template <class T>
Var hf_head_from_features(Tape<T>& t, ParamStore<T>& ps, const ModelConfig& c, const Mat<T>& w_lf, const Mat<T>& e_tok,
                          const Mat<T>* y_lf = nullptr) {
    Var wl = t.constant(w_lf);
    Var y = decode_line(t, ps, c, hf_forward(t, ps, c, wl, t.constant(e_tok)));
    if (c.hf_head == "acf" && c.residual == "output") {
        if (!y_lf) throw DataError("output-space residual needs the LF prediction");
        y = t.add(y, t.constant(*y_lf));
    }
    return y;
}

/// Attention maps of the HF blocks for a single sample: maps[k].cross[h] and
/// maps[k].self[h] are N x N row-stochastic matrices.
template <class T>
std::vector<BlockMaps<T>> attention_maps(ParamStore<T>& ps, const ModelConfig& c, const Inputs<T>& one) {
    if (one.B != 1) throw DataError("attention maps are captured for one sample at a time");
    if (c.hf_head != "acf") throw ConfigError("attention maps need the attention HF head");
    Tape<T> t(false);
    std::vector<BlockMaps<T>> maps;
    forward(t, ps, c, one, {}, &maps);
    return maps;
}

/// Writes each map as an SDF-format image (header + float32 payload) named
/// <dir>/<type>_block<k>_head<h>.bin; returns the written paths.
template <class T>
std::vector<std::string> export_attention_maps(const std::vector<BlockMaps<T>>& maps, const std::string& dir) {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < maps.size(); ++k) {
        for (const auto& [type, list] : {std::pair{"cross", &maps[k].cross}, std::pair{"self", &maps[k].self}}) {
            for (std::size_t h = 0; h < list->size(); ++h) {
                SDFGrid g;
                const auto& m = (*list)[h];
                g.values = m.template cast<double>();
                g.bbox = {0.0, 0.0, static_cast<double>(m.cols()), static_cast<double>(m.rows())};
                const std::string path =
                    dir + "/" + type + "_block" + std::to_string(k) + "_head" + std::to_string(h) + ".bin";
                write_sdf(path, g);
                out.push_back(path);
            }
        }
    }
    return out;
}

} // namespace fildeep::nn
