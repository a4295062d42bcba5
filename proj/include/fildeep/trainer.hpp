#pragma once

// Staged multi-fidelity training (section autoencoder, LF path, HF head),
// single-fidelity and mixed baselines, prediction and run reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fildeep/config.hpp"
#include "fildeep/datastore.hpp"
#include "fildeep/errors.hpp"
#include "fildeep/metrics.hpp"
#include "fildeep/model_codec.hpp"
#include "fildeep/processors.hpp"

namespace fildeep {

struct TrainConfig {
    bool pretrain_cse = true;
    bool train_lf = true;
    bool train_hf = true;
    double lr_cse = 1e-3;
    double lr_lf = 1e-3;
    double lr_hf = 3e-4;
    int epochs_cse = 10;
    int epochs_lf = 30;
    int epochs_hf = 200;
    int min_steps = 0;  // raises a stage's epoch count until it takes this many steps
    int batch = 32;
    int batch_hf = 16;
    std::uint64_t seed = 0;
    std::string freeze = "frozen";  // frozen | joint
    double joint_lr_scale = 0.1;    // rate multiplier on shared modules when joint
    std::string optimizer = "adam";
    int patience = 20;  // epochs without a val improvement; 0 disables
    double clip_norm = 1.0;
    bool cosine = true;
    double lf_val_fraction = 0.05;
    int eval_voxels = 64;

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {
            "pretrain_cse", "train_lf",  "train_hf", "lr_cse",         "lr_lf",     "lr_hf",           "epochs_cse",
            "epochs_lf",    "epochs_hf", "min_steps", "batch",         "batch_hf",  "seed",            "freeze",
            "joint_lr_scale", "optimizer", "patience", "clip_norm",     "cosine",    "lf_val_fraction", "eval_voxels"};
        return k;
    }

    void validate() const {
        if (!(lr_cse > 0 && lr_lf > 0 && lr_hf > 0)) throw ConfigError("learning rates must be positive");
        if (epochs_cse < 0 || epochs_lf < 0 || epochs_hf < 0 || min_steps < 0)
            throw ConfigError("epoch and step counts must be non-negative");
        if (batch < 1 || batch_hf < 1) throw ConfigError("batch sizes must be >= 1");
        if (freeze != "frozen" && freeze != "joint") throw ConfigError("freeze must be frozen or joint");
        if (!(joint_lr_scale > 0)) throw ConfigError("joint_lr_scale must be positive");
        if (optimizer != "adam") throw ConfigError("only the adam optimizer is available");
        if (patience < 0) throw ConfigError("patience must be >= 0");
        if (clip_norm < 0) throw ConfigError("clip_norm must be >= 0");
        if (!(lf_val_fraction >= 0 && lf_val_fraction < 1)) throw ConfigError("lf_val_fraction must lie in [0, 1)");
        if (eval_voxels < 16) throw ConfigError("eval_voxels must be >= 16");
    }

    static TrainConfig from_config(const KeyValueConfig& kv) { return from_config(kv, TrainConfig()); }

    static TrainConfig from_config(const KeyValueConfig& kv, TrainConfig t) {
        t.pretrain_cse = kv.get_bool("pretrain_cse", t.pretrain_cse);
        t.train_lf = kv.get_bool("train_lf", t.train_lf);
        t.train_hf = kv.get_bool("train_hf", t.train_hf);
        t.lr_cse = kv.get_double("lr_cse", t.lr_cse);
        t.lr_lf = kv.get_double("lr_lf", t.lr_lf);
        t.lr_hf = kv.get_double("lr_hf", t.lr_hf);
        t.epochs_cse = static_cast<int>(kv.get_int("epochs_cse", t.epochs_cse));
        t.epochs_lf = static_cast<int>(kv.get_int("epochs_lf", t.epochs_lf));
        t.epochs_hf = static_cast<int>(kv.get_int("epochs_hf", t.epochs_hf));
        t.min_steps = static_cast<int>(kv.get_int("min_steps", t.min_steps));
        t.batch = static_cast<int>(kv.get_int("batch", t.batch));
        t.batch_hf = static_cast<int>(kv.get_int("batch_hf", t.batch_hf));
        t.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(t.seed)));
        t.freeze = kv.get_string("freeze", t.freeze);
        t.joint_lr_scale = kv.get_double("joint_lr_scale", t.joint_lr_scale);
        t.optimizer = kv.get_string("optimizer", t.optimizer);
        t.patience = static_cast<int>(kv.get_int("patience", t.patience));
        t.clip_norm = kv.get_double("clip_norm", t.clip_norm);
        t.cosine = kv.get_bool("cosine", t.cosine);
        t.lf_val_fraction = kv.get_double("lf_val_fraction", t.lf_val_fraction);
        t.eval_voxels = static_cast<int>(kv.get_int("eval_voxels", t.eval_voxels));
        t.validate();
        return t;
    }

    nlohmann::json to_json() const {
        return {{"pretrain_cse", pretrain_cse}, {"train_lf", train_lf},   {"train_hf", train_hf},
                {"lr_cse", lr_cse},             {"lr_lf", lr_lf},         {"lr_hf", lr_hf},
                {"epochs_cse", epochs_cse},     {"epochs_lf", epochs_lf}, {"epochs_hf", epochs_hf},
                {"min_steps", min_steps},       {"batch", batch},         {"batch_hf", batch_hf},
                {"seed", seed},                 {"freeze", freeze},       {"joint_lr_scale", joint_lr_scale},
                {"optimizer", optimizer},       {"patience", patience},   {"clip_norm", clip_norm},
                {"cosine", cosine},             {"lf_val_fraction", lf_val_fraction},
                {"eval_voxels", eval_voxels}};
    }
};

/// Parameters plus everything needed to run them on raw geometry.
struct Model {
    ModelConfig config;
    nn::ParamStore<float> params;
    Normalizer norm;
    std::vector<std::string> stages;  // completed stages, in order

    bool done(const std::string& s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }
    bool has_hf_head() const { return done("hf"); }

    Model clone() const {
        Model m;
        m.config = config;
        m.params = params.cast<float>();
        m.norm = norm;
        m.stages = stages;
        return m;
    }

    void save(const std::string& path, const nlohmann::json& echo = nlohmann::json::object()) const {
        nn::save_checkpoint(path, config, params, {{"normalizer", norm.to_json()}, {"stages", stages}, {"echo", echo}});
    }

    static Model load(const std::string& path) {
        auto ck = nn::load_checkpoint(path);
        Model m;
        m.config = ck.config;
        m.params = std::move(ck.params);
        try {
            m.norm = Normalizer::from_json(ck.extra.at("normalizer"));
            m.stages = ck.extra.at("stages").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ": checkpoint lacks model metadata: " + e.what());
        }
        // every parameter the config asks for must be present with its shape
        auto ref = nn::init_model<float>(m.config, 0, m.has_hf_head());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const auto& r = ref.at(i);
            if (!m.params.has(r.name)) throw DataError(path + ": missing parameter " + r.name);
            const auto& p = m.params.get(r.name);
            if (p.value.rows() != r.value.rows() || p.value.cols() != r.value.cols())
                throw DataError(path + ": shape mismatch for " + r.name);
        }
        return m;
    }
};

struct CurvePoint {
    std::string stage;
    int epoch = 0;
    double train_loss = 0.0;  // mean over the epoch's batches; NaN for the pre-training row
    double val = 0.0;         // val MAD in mm (section MSE for the autoencoder stage)
    double lr = 0.0;
};

struct RunReport {
    std::string mode;
    std::uint64_t seed = 0;
    nlohmann::json config = nlohmann::json::object();
    std::vector<CurvePoint> curve;
    std::map<std::string, double> scalars;
    std::optional<MetricReport> test;
    double wall_seconds = 0.0;
    std::string checkpoint;
    std::set<std::size_t> gradient_records;  // dataset record indices that fed a gradient

    /// `with_wall_clock` false gives output that is identical across reruns.
    nlohmann::json to_json(bool with_wall_clock = true) const {
        nlohmann::json c = nlohmann::json::array();
        for (const auto& p : curve)
            c.push_back({{"stage", p.stage}, {"epoch", p.epoch},
                         {"train_loss", std::isfinite(p.train_loss) ? nlohmann::json(p.train_loss) : nlohmann::json()},
                         {"val", p.val}, {"lr", p.lr}});
        nlohmann::json j = {{"mode", mode},
                            {"seed", seed},
                            {"config", config},
                            {"curve", c},
                            {"scalars", scalars},
                            {"gradient_record_count", gradient_records.size()},
                            {"checkpoint", checkpoint}};
        if (test) j["test"] = test->to_json();
        if (with_wall_clock) j["wall_seconds"] = wall_seconds;
        return j;
    }

    void write_curves_csv(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot open " + path + " for writing");
        os << "stage,epoch,train_loss,val,lr\n" << std::setprecision(10);
        for (const auto& p : curve) {
            os << p.stage << ',' << p.epoch << ',';
            if (std::isfinite(p.train_loss)) os << p.train_loss;
            os << ',' << p.val << ',' << p.lr << '\n';
        }
    }
};

namespace detail {

/// Normalized tensors for a list of records, one row block per record.
struct Prepared {
    std::vector<std::size_t> records;
    int M = 0, HW = 0;
    nn::Mat<float> sdf, init, mold, motion, target;

    Eigen::Index size() const { return static_cast<Eigen::Index>(records.size()); }

    static nn::Mat<float> gather(const nn::Mat<float>& src, const std::vector<Eigen::Index>& rows, Eigen::Index block) {
        nn::Mat<float> out(static_cast<Eigen::Index>(rows.size()) * block, src.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            out.middleRows(static_cast<Eigen::Index>(i) * block, block) = src.middleRows(rows[i] * block, block);
        return out;
    }

    nn::Inputs<float> inputs(const std::vector<Eigen::Index>& rows) const {
        nn::Inputs<float> in;
        in.B = static_cast<Eigen::Index>(rows.size());
        in.sdf = gather(sdf, rows, HW);
        in.init_line = gather(init, rows, M);
        in.mold_line = gather(mold, rows, M);
        in.motion = gather(motion, rows, 1);
        return in;
    }
    nn::Mat<float> targets(const std::vector<Eigen::Index>& rows) const { return gather(target, rows, M); }
};

inline void check_compatible(const ModelConfig& c, const GeneratorConfig& g) {
    if (c.M != g.M) throw ConfigError("model M=" + std::to_string(c.M) + " but the dataset has M=" + std::to_string(g.M));
    if (c.H != g.sdf_H || c.W != g.sdf_W) throw ConfigError("model SDF grid does not match the dataset");
}

inline void fill_inputs(Prepared& p, Eigen::Index i, const Normalizer& n, const GridD& sdf, const CharLine& init,
                        const CharLine& mold, const MotionParams& motion) {
    const Eigen::Index M = p.M, HW = p.HW;
    if (sdf.size() != HW) throw DataError("SDF grid size mismatch");
    if (init.size() != M || mold.size() != M) throw DataError("input lines must have M points");
    p.sdf.middleRows(i * HW, HW) = Eigen::Map<const Eigen::VectorXd>(sdf.data(), HW).cast<float>() / static_cast<float>(n.sdf_scale);
    p.init.middleRows(i * M, M) = n.apply(init).cast<float>();
    p.mold.middleRows(i * M, M) = n.apply(mold).cast<float>();
    const auto z = n.apply(motion);
    for (int k = 0; k < 6; ++k) p.motion(i, k) = static_cast<float>(z[static_cast<std::size_t>(k)]);
}

inline Prepared prepare(const MFDataset& ds, const Normalizer& n, const ModelConfig& c, const std::vector<std::size_t>& recs) {
    Prepared p;
    p.records = recs;
    p.M = c.M;
    p.HW = c.H * c.W;
    const auto B = static_cast<Eigen::Index>(recs.size());
    p.sdf.resize(B * p.HW, 1);
    p.init.resize(B * c.M, 3);
    p.mold.resize(B * c.M, 3);
    p.motion.resize(B, 6);
    p.target.resize(B * c.M, 3);
    for (Eigen::Index i = 0; i < B; ++i) {
        const auto& r = ds.records[recs[static_cast<std::size_t>(i)]];
        const auto& d = ds.instance(r);
        fill_inputs(p, i, n, d.sdf.values, d.init_line, d.mold_line, d.motion);
        const auto& out = ds.output(r);
        if (out.size() != c.M) throw DataError("record " + r.id + " has no output of M points");
        p.target.middleRows(i * c.M, c.M) = n.apply(out).cast<float>();
    }
    return p;
}

/// Records split into mini-batches after a seeded shuffle.
inline std::vector<std::vector<Eigen::Index>> batches(Eigen::Index n, int batch, std::mt19937_64& rng) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<std::vector<Eigen::Index>> out;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch))
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + static_cast<std::size_t>(batch))));
    return out;
}

inline std::vector<std::vector<Eigen::Index>> sequential(Eigen::Index n, int batch) {
    std::vector<std::vector<Eigen::Index>> out;
    for (Eigen::Index s = 0; s < n; s += batch) {
        out.emplace_back();
        for (Eigen::Index i = s; i < std::min(n, s + batch); ++i) out.back().push_back(i);
    }
    return out;
}

inline int effective_epochs(int epochs, int min_steps, std::size_t steps_per_epoch) {
    if (steps_per_epoch == 0) return 0;
    const int need = static_cast<int>((static_cast<std::size_t>(min_steps) + steps_per_epoch - 1) / steps_per_epoch);
    return epochs == 0 ? 0 : std::max(epochs, need);
}

inline std::vector<nn::Mat<float>> snapshot(const nn::ParamStore<float>& ps) {
    std::vector<nn::Mat<float>> v;
    for (std::size_t i = 0; i < ps.size(); ++i) v.push_back(ps.at(i).value);
    return v;
}
inline void restore(nn::ParamStore<float>& ps, const std::vector<nn::Mat<float>>& v) {
    for (std::size_t i = 0; i < ps.size(); ++i) ps.at(i).value = v[i];
}

/// Mean point distance in mm between normalized predictions and targets.
inline double mad_mm(const nn::Mat<float>& pred, const nn::Mat<float>& target, int M, double scale) {
    const Eigen::Index B = pred.rows() / M;
    double sum = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
        const Points3 p = pred.middleRows(b * M, M).cast<double>() * scale;
        const Points3 q = target.middleRows(b * M, M).cast<double>() * scale;
        sum += mad(CharLine(p), CharLine(q));
    }
    return B ? sum / static_cast<double>(B) : 0.0;
}

inline std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) {
    return nn::detail::name_seed(seed, "train/" + stage);
}

inline const char* kSharedPrefixes[] = {"cle_w.", "cle_m.", "cse.", "csd.", "mpe.", "ecfe.", "cld.", "lf."};

/// LF train records split into a fit part and a held-out validation slice.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> lf_partition(const MFDataset& ds, const TrainConfig& tc) {
    auto lf = ds.select(Fidelity::LF, Split::Train);
    std::mt19937_64 rng(stage_seed(tc.seed, "lf_val"));
    for (std::size_t i = lf.size(); i > 1; --i) std::swap(lf[i - 1], lf[rng() % i]);
    std::size_t nval = static_cast<std::size_t>(std::floor(tc.lf_val_fraction * static_cast<double>(lf.size())));
    if (tc.lf_val_fraction > 0 && nval == 0 && lf.size() > 1) nval = 1;
    std::vector<std::size_t> val(lf.begin(), lf.begin() + static_cast<std::ptrdiff_t>(nval));
    std::vector<std::size_t> fit(lf.begin() + static_cast<std::ptrdiff_t>(nval), lf.end());
    std::sort(val.begin(), val.end());
    std::sort(fit.begin(), fit.end());
    return {fit, val};
}

inline void rethrow_numeric(const std::string& stage, int epoch, std::size_t step, const NumericalError& e) {
    throw NumericalError(stage + " diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " +
                         e.what());
}

} // namespace detail

/// Fresh model; normalization is fitted on the dataset's train split.
inline Model make_model(const MFDataset& ds, const ModelConfig& c, std::uint64_t seed, bool with_hf = false) {
    c.validate();
    detail::check_compatible(c, ds.gen);
    Model m;
    m.config = c;
    m.params = nn::init_model<float>(c, seed, with_hf);
    m.norm = fit_normalizer(ds);
    return m;
}

// ---------------------------------------------------------------------------
// Stage 0: section autoencoder
// ---------------------------------------------------------------------------

/// Held-out reconstruction MSE of the autoencoder on normalized SDFs.
inline double section_mse(Model& m, const detail::Prepared& p) {
    if (p.size() == 0) return 0.0;
    double sum = 0.0;
    for (const auto& rows : detail::sequential(p.size(), 64)) {
        nn::Tape<float> t(false);
        auto in = p.inputs(rows);
        auto s = nn::encode_section(t, m.params, m.config, t.constant(in.sdf));
        auto r = nn::decode_section(t, m.params, m.config, s);
        sum += static_cast<double>((t.value(r.recon) - in.sdf).squaredNorm());
    }
    return sum / static_cast<double>(p.size() * p.HW);
}

inline void pretrain_cse(Model& m, const MFDataset& ds, const TrainConfig& tc, RunReport& rep) {
    tc.validate();
    if (m.config.cse_external_dim > 0) throw ConfigError("the autoencoder stage needs the built-in section encoder");
    auto [fit, val] = detail::lf_partition(ds, tc);
    // one record per distinct instance
    auto distinct = [&](const std::vector<std::size_t>& recs) {
        std::set<std::size_t> seen;
        std::vector<std::size_t> out;
        for (auto r : recs)
            if (seen.insert(ds.records[r].instance).second) out.push_back(r);
        return out;
    };
    fit = distinct(fit);
    val = distinct(val);
    if (fit.empty()) throw DataError("no training sections");
    const auto P = detail::prepare(ds, m.norm, m.config, fit);
    const auto V = detail::prepare(ds, m.norm, m.config, val);
    m.params.train_only({"cse.", "csd."});
    std::mt19937_64 rng(detail::stage_seed(tc.seed, "cse"));
    std::mt19937_64 noise(detail::stage_seed(tc.seed, "cse_noise"));
    const std::size_t spe = static_cast<std::size_t>((P.size() + tc.batch - 1) / tc.batch);
    const int epochs = detail::effective_epochs(tc.epochs_cse, tc.min_steps, spe);
    nn::Adam<float> opt({tc.lr_cse, 0.9, 0.999, 1e-8, tc.clip_norm, tc.cosine ? static_cast<long>(epochs * spe) : 0});
    const auto& V_or_P = V.size() ? V : P;
    const double init_mse = section_mse(m, V_or_P);
    rep.scalars["cse_heldout_mse_init"] = init_mse;
    rep.curve.push_back({"cse", 0, std::nan(""), init_mse, opt.current_lr()});
    for (auto r : fit) rep.gradient_records.insert(r);
    for (int e = 1; e <= epochs; ++e) {
        double loss_sum = 0.0;
        const double lr = opt.current_lr();
        const auto bs = detail::batches(P.size(), tc.batch, rng);
        for (std::size_t s = 0; s < bs.size(); ++s) {
            try {
                nn::Tape<float> t;
                auto in = P.inputs(bs[s]);
                auto feat = nn::encode_section(t, m.params, m.config, t.constant(in.sdf));
                auto dec = nn::decode_section(t, m.params, m.config, feat, m.config.kl_weight > 0 ? &noise : nullptr);
                nn::Var loss = nn::loss_csl(t, dec.recon, in.sdf);
                if (m.config.kl_weight > 0)
                    loss = t.add(loss, t.scale(nn::kl_term(t, dec.mu, dec.logvar), static_cast<float>(m.config.kl_weight)));
                const double lv = t.value(loss)(0, 0);
                if (!std::isfinite(lv)) throw NumericalError("section loss is not finite");
                loss_sum += lv;
                m.params.zero_grad();
                t.backward(loss);
                opt.step(m.params);
            } catch (const NumericalError& err) {
                detail::rethrow_numeric("section autoencoder", e, s, err);
            }
        }
        rep.curve.push_back({"cse", e, loss_sum / static_cast<double>(bs.size()), section_mse(m, V_or_P), lr});
    }
    rep.scalars["cse_heldout_mse_final"] = section_mse(m, V_or_P);
    m.params.zero_grad();
    m.params.train_all();
    m.stages.push_back("cse");
}

// ---------------------------------------------------------------------------
// Stage 1 and single-fidelity baselines: encoders, LF processor, decoder
// ---------------------------------------------------------------------------

/// Mean val MAD (mm) of the LF-path output.
inline double eval_lf_path(Model& m, const detail::Prepared& p) {
    if (p.size() == 0) return 0.0;
    double sum = 0.0;
    for (const auto& rows : detail::sequential(p.size(), 64)) {
        nn::Tape<float> t(false);
        auto f = nn::forward(t, m.params, m.config, p.inputs(rows), nn::ForwardOptions{false, false});
        sum += detail::mad_mm(t.value(f.y_lf), p.targets(rows), p.M, m.norm.global_scale) * static_cast<double>(rows.size());
    }
    return sum / static_cast<double>(p.size());
}

/// Trains the shared modules and LF processor on `fit` with CLL + lambda_cs
/// CSL, keeping the parameters of the best `val` epoch.
inline void train_path(Model& m, const MFDataset& ds, const TrainConfig& tc, const std::vector<std::size_t>& fit,
                       const std::vector<std::size_t>& val, const std::string& stage, RunReport& rep) {
    tc.validate();
    if (fit.empty()) throw DataError(stage + ": no training records");
    const auto P = detail::prepare(ds, m.norm, m.config, fit);
    const auto V = detail::prepare(ds, m.norm, m.config, val);
    std::vector<std::string> prefixes(std::begin(detail::kSharedPrefixes), std::end(detail::kSharedPrefixes));
    m.params.train_only(prefixes);
    const bool recon = m.config.lambda_cs > 0 && m.config.cse_external_dim == 0;
    std::mt19937_64 rng(detail::stage_seed(tc.seed, stage));
    std::mt19937_64 noise(detail::stage_seed(tc.seed, stage + "_noise"));
    const std::size_t spe = static_cast<std::size_t>((P.size() + tc.batch - 1) / tc.batch);
    const int epochs = detail::effective_epochs(tc.epochs_lf, tc.min_steps, spe);
    nn::Adam<float> opt({tc.lr_lf, 0.9, 0.999, 1e-8, tc.clip_norm, tc.cosine ? static_cast<long>(epochs * spe) : 0});

    const auto& VV = V.size() ? V : P;
    double best = eval_lf_path(m, VV);
    int best_epoch = 0, bad = 0;
    auto best_params = detail::snapshot(m.params);
    rep.curve.push_back({stage, 0, std::nan(""), best, opt.current_lr()});
    for (auto r : fit) rep.gradient_records.insert(r);
    double first_loss = std::nan(""), last_loss = std::nan("");
    for (int e = 1; e <= epochs; ++e) {
        double loss_sum = 0.0;
        const double lr = opt.current_lr();
        const auto bs = detail::batches(P.size(), tc.batch, rng);
        for (std::size_t s = 0; s < bs.size(); ++s) {
            try {
                nn::Tape<float> t;
                auto in = P.inputs(bs[s]);
                std::mt19937_64* nz = m.config.kl_weight > 0 ? &noise : nullptr;
                auto f = nn::forward<float>(t, m.params, m.config, in, nn::ForwardOptions{false, recon}, nullptr, nullptr, nz);
                nn::Var loss = nn::loss_cll(t, f.y_lf, P.targets(bs[s]));
                if (recon) {
                    loss = t.add(loss, t.scale(nn::loss_csl(t, f.recon.recon, in.sdf), static_cast<float>(m.config.lambda_cs)));
                    if (m.config.kl_weight > 0)
                        loss = t.add(loss, t.scale(nn::kl_term(t, f.recon.mu, f.recon.logvar),
                                                   static_cast<float>(m.config.kl_weight * m.config.lambda_cs)));
                }
                const double lv = t.value(loss)(0, 0);
                if (!std::isfinite(lv)) throw NumericalError("training loss is not finite");
                loss_sum += lv;
                m.params.zero_grad();
                t.backward(loss);
                opt.step(m.params);
            } catch (const NumericalError& err) {
                detail::rethrow_numeric(stage, e, s, err);
            }
        }
        const double train_loss = loss_sum / static_cast<double>(bs.size());
        if (e == 1) first_loss = train_loss;
        last_loss = train_loss;
        const double v = eval_lf_path(m, VV);
        rep.curve.push_back({stage, e, train_loss, v, lr});
        if (v < best) {
            best = v;
            best_epoch = e;
            bad = 0;
            best_params = detail::snapshot(m.params);
        } else if (tc.patience > 0 && ++bad >= tc.patience) {
            break;
        }
    }
    detail::restore(m.params, best_params);
    m.params.zero_grad();
    m.params.train_all();
    rep.scalars[stage + "_best_val_mad_mm"] = best;
    rep.scalars[stage + "_best_epoch"] = best_epoch;
    if (std::isfinite(first_loss)) rep.scalars[stage + "_first_train_loss"] = first_loss;
    if (std::isfinite(last_loss)) rep.scalars[stage + "_last_train_loss"] = last_loss;
    m.stages.push_back(stage);
}

/// Stage 1 on LF pairs, validated on a held-out LF slice.
inline void train_lf(Model& m, const MFDataset& ds, const TrainConfig& tc, RunReport& rep) {
    auto [fit, val] = detail::lf_partition(ds, tc);
    train_path(m, ds, tc, fit, val, "lf", rep);
}

enum class SingleMode { LFOnly, HFOnly, Mix };

inline std::string to_string(SingleMode s) {
    switch (s) {
        case SingleMode::LFOnly: return "lf_only";
        case SingleMode::HFOnly: return "hf_only";
        case SingleMode::Mix: return "mix";
    }
    return "?";
}

inline SingleMode single_mode_from_string(const std::string& s) {
    if (s == "lf_only" || s == "lf" || s == "LF") return SingleMode::LFOnly;
    if (s == "hf_only" || s == "hf" || s == "HF") return SingleMode::HFOnly;
    if (s == "mix") return SingleMode::Mix;
    throw ConfigError("unknown single-fidelity mode '" + s + "'");
}

/// The stage-1 architecture alone, trained on LF, HF or their union.
/// LF-only validates on the LF slice; the others on the HF val split.
inline void train_single(Model& m, const MFDataset& ds, const TrainConfig& tc, SingleMode mode, RunReport& rep) {
    auto [lf_fit, lf_val] = detail::lf_partition(ds, tc);
    const auto hf_train = ds.select(Fidelity::HF, Split::Train);
    const auto hf_val = ds.select(Fidelity::HF, Split::Val);
    std::vector<std::size_t> fit, val;
    switch (mode) {
        case SingleMode::LFOnly:
            fit = lf_fit;
            val = lf_val;
            break;
        case SingleMode::HFOnly:
            fit = hf_train;
            val = hf_val;
            break;
        case SingleMode::Mix:
            fit = lf_fit;
            fit.insert(fit.end(), hf_train.begin(), hf_train.end());
            val = hf_val;
            break;
    }
    train_path(m, ds, tc, fit, val, to_string(mode), rep);
}

// ---------------------------------------------------------------------------
// Stage 2: HF processor
// ---------------------------------------------------------------------------

namespace detail {

struct Features {
    nn::Mat<float> w_lf, e_tok, y_lf, target;
};

inline Features features(Model& m, const Prepared& p) {
    Features f;
    const Eigen::Index N = m.config.N, C = m.config.C;
    f.w_lf.resize(p.size() * N, C);
    f.e_tok.resize(p.size() * N, C);
    f.y_lf.resize(p.size() * p.M, 3);
    f.target = p.target;
    for (const auto& rows : sequential(p.size(), 64)) {
        nn::Tape<float> t(false);
        auto fw = nn::forward(t, m.params, m.config, p.inputs(rows), nn::ForwardOptions{false, false});
        const auto b0 = rows.front(), nb = static_cast<Eigen::Index>(rows.size());
        f.w_lf.middleRows(b0 * N, nb * N) = t.value(fw.w_lf);
        f.e_tok.middleRows(b0 * N, nb * N) = t.value(fw.e_tok);
        f.y_lf.middleRows(b0 * p.M, nb * p.M) = t.value(fw.y_lf);
    }
    return f;
}

inline nn::Mat<float> head_predict(Model& m, const Features& f, const std::vector<Eigen::Index>& rows, int M) {
    nn::Tape<float> t(false);
    const auto N = m.config.N;
    const auto y_lf = Prepared::gather(f.y_lf, rows, M);
    auto y = nn::hf_head_from_features(t, m.params, m.config, Prepared::gather(f.w_lf, rows, N),
                                       Prepared::gather(f.e_tok, rows, N), &y_lf);
    return t.value(y);
}

inline double eval_head(Model& m, const Features& f, int M) {
    const Eigen::Index B = f.target.rows() / M;
    if (B == 0) return 0.0;
    double sum = 0.0;
    for (const auto& rows : sequential(B, 64))
        sum += mad_mm(head_predict(m, f, rows, M), Prepared::gather(f.target, rows, M), M, m.norm.global_scale) *
               static_cast<double>(rows.size());
    return sum / static_cast<double>(B);
}

inline double eval_full_hf(Model& m, const Prepared& p) {
    if (p.size() == 0) return 0.0;
    double sum = 0.0;
    for (const auto& rows : sequential(p.size(), 64)) {
        nn::Tape<float> t(false);
        auto fw = nn::forward(t, m.params, m.config, p.inputs(rows));
        sum += mad_mm(t.value(fw.y_hf), p.targets(rows), p.M, m.norm.global_scale) * static_cast<double>(rows.size());
    }
    return sum / static_cast<double>(p.size());
}

/// Configs must agree on everything outside the HF head.
inline void check_shared(const ModelConfig& lf, const ModelConfig& full) {
    ModelConfig a = lf, b = full;
    for (ModelConfig* c : {&a, &b}) {
        c->K = 1;
        c->hf_head = "acf";
        c->residual = "feature";
        c->e_adaptor = false;
        c->lambda_cs = 0;
        c->kl_weight = 0;
    }
    if (!(a == b)) throw ConfigError("HF head config disagrees with the LF model outside the HF head");
}

} // namespace detail

/// Stage 2: starts from the stage-1 model `lf` and trains an HF head with
/// configuration `full` on the HF train split, early-stopping on HF val MAD.
inline Model train_hf(const Model& lf, const ModelConfig& full, const MFDataset& ds, const TrainConfig& tc, RunReport& rep) {
    tc.validate();
    full.validate();
    if (!lf.done("lf")) throw ConfigError("stage 2 needs a model that finished LF training");
    detail::check_shared(lf.config, full);
    Model m = lf.clone();
    m.config = full;
    m.stages.erase(std::remove(m.stages.begin(), m.stages.end(), "hf"), m.stages.end());
    {
        // drop any previous head, then add a fresh one
        nn::ParamStore<float> ps;
        for (std::size_t i = 0; i < m.params.size(); ++i)
            if (m.params.at(i).name.rfind("hf.", 0) != 0) ps.add(m.params.at(i).name, m.params.at(i).value);
        nn::init_hf_params(ps, full, tc.seed);
        m.params = std::move(ps);
    }
    const auto train = ds.select(Fidelity::HF, Split::Train);
    const auto val = ds.select(Fidelity::HF, Split::Val);
    if (train.empty()) throw DataError("stage 2: no HF train records");
    const auto P = detail::prepare(ds, m.norm, m.config, train);
    const auto V = detail::prepare(ds, m.norm, m.config, val);
    const bool joint = tc.freeze == "joint";
    const int M = m.config.M;

    detail::Features FP, FV;
    if (joint) {
        m.params.train_all();
        for (std::size_t i = 0; i < m.params.size(); ++i)
            if (m.params.at(i).name.rfind("hf.", 0) != 0) m.params.at(i).lr_scale = tc.joint_lr_scale;
    } else {
        m.params.train_only({"hf."});
        FP = detail::features(m, P);
        FV = detail::features(m, V);
    }
    auto val_mad = [&] { return joint ? detail::eval_full_hf(m, V.size() ? V : P) : detail::eval_head(m, V.size() ? FV : FP, M); };
    // the LF path on the same HF val targets, the bar the head has to clear
    rep.scalars["lf_path_val_mad_mm"] = eval_lf_path(m, V.size() ? V : P);

    std::mt19937_64 rng(detail::stage_seed(tc.seed, "hf"));
    const std::size_t spe = static_cast<std::size_t>((P.size() + tc.batch_hf - 1) / tc.batch_hf);
    const int epochs = detail::effective_epochs(tc.epochs_hf, tc.min_steps, spe);
    nn::Adam<float> opt({tc.lr_hf, 0.9, 0.999, 1e-8, tc.clip_norm, tc.cosine ? static_cast<long>(epochs * spe) : 0});
    double best = val_mad();
    int best_epoch = 0, bad = 0;
    auto best_params = detail::snapshot(m.params);
    rep.curve.push_back({"hf", 0, std::nan(""), best, opt.current_lr()});
    for (auto r : train) rep.gradient_records.insert(r);
    for (int e = 1; e <= epochs; ++e) {
        double loss_sum = 0.0;
        const double lr = opt.current_lr();
        const auto bs = detail::batches(P.size(), tc.batch_hf, rng);
        for (std::size_t s = 0; s < bs.size(); ++s) {
            try {
                nn::Tape<float> t;
                nn::Var y;
                if (joint) {
                    y = nn::forward(t, m.params, m.config, P.inputs(bs[s])).y_hf;
                } else {
                    const auto y_lf = detail::Prepared::gather(FP.y_lf, bs[s], M);
                    y = nn::hf_head_from_features(t, m.params, m.config,
                                                  detail::Prepared::gather(FP.w_lf, bs[s], m.config.N),
                                                  detail::Prepared::gather(FP.e_tok, bs[s], m.config.N), &y_lf);
                }
                nn::Var loss = nn::loss_cll(t, y, P.targets(bs[s]));
                const double lv = t.value(loss)(0, 0);
                if (!std::isfinite(lv)) throw NumericalError("training loss is not finite");
                loss_sum += lv;
                m.params.zero_grad();
                t.backward(loss);
                opt.step(m.params);
            } catch (const NumericalError& err) {
                detail::rethrow_numeric("hf", e, s, err);
            }
        }
        const double v = val_mad();
        rep.curve.push_back({"hf", e, loss_sum / static_cast<double>(bs.size()), v, lr});
        if (v < best) {
            best = v;
            best_epoch = e;
            bad = 0;
            best_params = detail::snapshot(m.params);
        } else if (tc.patience > 0 && ++bad >= tc.patience) {
            break;
        }
    }
    detail::restore(m.params, best_params);
    for (std::size_t i = 0; i < m.params.size(); ++i) m.params.at(i).lr_scale = 1.0;
    m.params.zero_grad();
    m.params.train_all();
    rep.scalars["hf_best_val_mad_mm"] = best;
    rep.scalars["hf_best_epoch"] = best_epoch;
    m.stages.push_back("hf");
    return m;
}

// ---------------------------------------------------------------------------
// Prediction and evaluation
// ---------------------------------------------------------------------------

struct Prediction {
    CharLine y;     // final output in mm (HF head when trained, LF path otherwise)
    CharLine y_lf;  // LF path output in mm
};

/// Predictions for several raw inputs at once.
inline std::vector<Prediction> predict_batch(Model& m, const std::vector<const GridD*>& sdf,
                                             const std::vector<const CharLine*>& init,
                                             const std::vector<const CharLine*>& mold,
                                             const std::vector<const MotionParams*>& motion) {
    const auto n = static_cast<Eigen::Index>(sdf.size());
    detail::Prepared p;
    p.M = m.config.M;
    p.HW = m.config.H * m.config.W;
    p.sdf.resize(n * p.HW, 1);
    p.init.resize(n * p.M, 3);
    p.mold.resize(n * p.M, 3);
    p.motion.resize(n, 6);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        // SDFs are stored as float32, so round here too
        const GridD s = sdf[k]->cast<float>().cast<double>();
        detail::fill_inputs(p, i, m.norm, s, *init[k], *mold[k], *motion[k]);
    }
    const bool hf = m.has_hf_head();
    std::vector<Prediction> out;
    for (const auto& rows : detail::sequential(n, 64)) {
        nn::Tape<float> t(false);
        auto f = nn::forward(t, m.params, m.config, p.inputs(rows), nn::ForwardOptions{hf, false});
        const auto& yl = t.value(f.y_lf);
        const auto& yh = hf ? t.value(f.y_hf) : yl;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto b = static_cast<Eigen::Index>(r);
            Prediction pr;
            pr.y = m.norm.invert(yh.middleRows(b * p.M, p.M).cast<double>());
            pr.y_lf = m.norm.invert(yl.middleRows(b * p.M, p.M).cast<double>());
            out.push_back(std::move(pr));
        }
    }
    return out;
}

inline Prediction predict(Model& m, const GridD& sdf, const CharLine& init, const CharLine& mold, const MotionParams& motion) {
    return predict_batch(m, {&sdf}, {&init}, {&mold}, {&motion}).front();
}

inline Prediction predict(Model& m, const ProblemInstance& x) {
    return predict(m, x.sdf.values, x.init_line, x.mold_line, x.motion);
}

inline std::vector<Prediction> predict_records(Model& m, const MFDataset& ds, const std::vector<std::size_t>& recs) {
    std::vector<const GridD*> s;
    std::vector<const CharLine*> a, b;
    std::vector<const MotionParams*> p;
    for (auto r : recs) {
        const auto& d = ds.instance(ds.records[r]);
        s.push_back(&d.sdf.values);
        a.push_back(&d.init_line);
        b.push_back(&d.mold_line);
        p.push_back(&d.motion);
    }
    return predict_batch(m, s, a, b, p);
}

/// Metrics of the model on `fidelity` targets of one split. With `lf_path`
/// the intermediate LF prediction is scored instead of the final output.
inline MetricReport evaluate(Model& m, const MFDataset& ds, Split split, const TrainConfig& tc,
                             Fidelity fidelity = Fidelity::HF, bool lf_path = false) {
    const auto recs = ds.select(fidelity, split);
    const auto preds = predict_records(m, ds, recs);
    MetricReport rep;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto& r = ds.records[recs[i]];
        const auto& d = ds.instance(r);
        rep.add(evaluate_instance(r.id, lf_path ? preds[i].y_lf : preds[i].y, ds.output(r), d.section, m.config.N,
                                  tc.eval_voxels));
    }
    rep.finalize();
    return rep;
}

/// The complete staged pipeline as configured: optional stage 0, stage 1,
/// stage 2, then HF test metrics.
inline Model run_fildeep(const MFDataset& ds, const ModelConfig& c, const TrainConfig& tc, RunReport& rep) {
    const auto t0 = std::chrono::steady_clock::now();
    rep.mode = "fildeep";
    rep.seed = tc.seed;
    rep.config = {{"model", c.to_json()}, {"train", tc.to_json()}};
    Model m = make_model(ds, c, tc.seed);
    if (tc.pretrain_cse) pretrain_cse(m, ds, tc, rep);
    if (tc.train_lf) train_lf(m, ds, tc, rep);
    if (tc.train_hf) m = train_hf(m, c, ds, tc, rep);
    if (!ds.select(Fidelity::HF, Split::Test).empty()) rep.test = evaluate(m, ds, Split::Test, tc);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

} // namespace fildeep
