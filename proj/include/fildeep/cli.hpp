#pragma once

// Command-line front end: datagen, train, eval, compensate, plot.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
// FILDEEP_SEED, when set, overrides the `seed` key of the config file;
// an explicit --seed flag overrides both.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fildeep/compensation.hpp"
#include "fildeep/config.hpp"
#include "fildeep/datastore.hpp"
#include "fildeep/errors.hpp"
#include "fildeep/metrics.hpp"
#include "fildeep/trainer.hpp"

namespace fildeep::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;
inline constexpr const char* kSeedEnv = "FILDEEP_SEED";

namespace fs = std::filesystem;

// keys read by the front end itself
inline const std::set<std::string>& datagen_keys() {
    static const std::set<std::string> k = {"seed", "n_lf", "n_hf", "paired", "hf_train", "hf_val", "hf_test", "split_seed"};
    return k;
}
inline const std::set<std::string>& run_keys() {
    static const std::set<std::string> k = {"mode"};
    return k;
}
inline const std::set<std::string>& compensation_keys() {
    static const std::set<std::string> k = {"alpha", "tau", "max_iter", "unwind_factor", "case_seed", "predictor"};
    return k;
}
inline const std::set<std::string>& plot_keys() {
    static const std::set<std::string> k = {"sweep_param", "sweep_values", "gap_samples", "gap_bins", "record"};
    return k;
}

/// All keys a config file may carry; one file can serve every subcommand.
inline std::set<std::string> known_keys() {
    std::set<std::string> k;
    for (const auto* s : {&GeneratorConfig::keys(), &ModelConfig::keys(), &TrainConfig::keys(), &datagen_keys(),
                          &run_keys(), &compensation_keys(), &plot_keys()})
        k.insert(s->begin(), s->end());
    return k;
}

struct Context {
    KeyValueConfig kv;
    std::string config_path;
    std::string out;
    std::ostream* log = &std::cerr;

    nlohmann::json echo() const {
        return {{"config_file", config_path}, {"values", kv.to_json()}};
    }
};

inline KeyValueConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    auto kv = KeyValueConfig::parse(ss.str());
    kv.require_known(known_keys());
    return kv;
}

/// Config file, then FILDEEP_SEED, then the --seed flag.
inline void apply_seed_overrides(KeyValueConfig& kv, const std::string& flag_seed) {
    if (const char* env = std::getenv(kSeedEnv); env && *env) {
        const std::string v = env;
        if (v.find_first_not_of("0123456789") != std::string::npos) throw ConfigError(std::string(kSeedEnv) + " must be a non-negative integer");
        kv.set("seed", v);
    }
    if (!flag_seed.empty()) {
        if (flag_seed.find_first_not_of("0123456789") != std::string::npos) throw ConfigError("--seed must be a non-negative integer");
        kv.set("seed", flag_seed);
    }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream os(p);
    if (!os) throw DataError("cannot write " + p.string());
    os << j.dump(2) << '\n';
}

inline void require_out(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) throw ConfigError("cannot create output directory " + out);
}

/// Model config defaults follow the dataset geometry.
inline ModelConfig model_config_for(const KeyValueConfig& kv, const GeneratorConfig& gen) {
    ModelConfig base;
    base.M = gen.M;
    base.H = gen.sdf_H;
    base.W = gen.sdf_W;
    auto c = ModelConfig::from_config(kv, base);
    c.validate();
    return c;
}

inline void write_metrics(const fs::path& dir, const std::string& stem, const MetricReport& r, const nlohmann::json& echo) {
    auto j = r.to_json();
    j["config_echo"] = echo;
    write_json(dir / (stem + ".json"), j);
    r.write_csv((dir / (stem + ".csv")).string());
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline int cmd_datagen(Context& cx) {
    require_out(cx.out);
    const auto gen = GeneratorConfig::from_config(cx.kv);
    const auto seed = static_cast<std::uint64_t>(cx.kv.get_int("seed", 0));
    const int n_lf = static_cast<int>(cx.kv.get_int("n_lf", 3000));
    const int n_hf = static_cast<int>(cx.kv.get_int("n_hf", 300));
    const HFCounts counts{static_cast<int>(cx.kv.get_int("hf_train", 60)), static_cast<int>(cx.kv.get_int("hf_val", 30)),
                          static_cast<int>(cx.kv.get_int("hf_test", 30))};
    const auto split_seed = static_cast<std::uint64_t>(cx.kv.get_int("split_seed", static_cast<long long>(seed)));
    *cx.log << "datagen: " << n_lf << " LF, " << n_hf << " HF, seed " << seed << "\n";
    auto ds = split_dataset(build_dataset(gen, n_lf, n_hf, seed, cx.kv.get_bool("paired", false)), counts, split_seed);
    ds.normalizer = fit_normalizer(ds);
    write_dataset(ds, cx.out, cx.echo());
    *cx.log << "datagen: wrote " << ds.records.size() << " records to " << cx.out << "\n";
    return kExitOk;
}

inline int cmd_train(Context& cx, const std::string& data_dir, const std::string& init_ckpt) {
    require_out(cx.out);
    if (data_dir.empty()) throw ConfigError("--data is required");
    const auto ds = read_dataset(data_dir);
    const auto mc = model_config_for(cx.kv, ds.gen);
    const auto tc = TrainConfig::from_config(cx.kv);
    const std::string mode = cx.kv.get_string("mode", "fildeep");
    const fs::path out(cx.out);
    RunReport rep;
    rep.config = {{"model", mc.to_json()}, {"train", tc.to_json()}, {"echo", cx.echo()}};
    rep.seed = tc.seed;
    rep.mode = mode;
    const auto t0 = std::chrono::steady_clock::now();
    Model m;
    if (mode == "fildeep") {
        if (!init_ckpt.empty()) {
            // stage 2 only, from an existing stage-1 checkpoint
            Model lf = Model::load(init_ckpt);
            m = train_hf(lf, mc, ds, tc, rep);
        } else {
            m = make_model(ds, mc, tc.seed);
            if (tc.pretrain_cse) pretrain_cse(m, ds, tc, rep);
            if (tc.train_lf) {
                train_lf(m, ds, tc, rep);
                m.save((out / "lf.ckpt").string(), cx.echo());
            }
            if (tc.train_hf) m = train_hf(m, mc, ds, tc, rep);
        }
    } else {
        const auto sm = single_mode_from_string(mode);
        m = make_model(ds, mc, tc.seed);
        if (tc.pretrain_cse) pretrain_cse(m, ds, tc, rep);
        train_single(m, ds, tc, sm, rep);
    }
    m.save((out / "model.ckpt").string(), cx.echo());
    rep.checkpoint = (out / "model.ckpt").string();
    if (!ds.select(Fidelity::HF, Split::Test).empty()) {
        rep.test = evaluate(m, ds, Split::Test, tc);
        write_metrics(out, "metrics", *rep.test, cx.echo());
    }
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(out / "run_report.json", rep.to_json());
    rep.write_curves_csv((out / "curves.csv").string());
    if (rep.test) *cx.log << "train: test MAD " << rep.test->mad_mm << " mm, IoU " << rep.test->iou3d_percent << " %\n";
    return kExitOk;
}

inline int cmd_eval(Context& cx, const std::string& data_dir, const std::string& ckpt, const std::string& split,
                    const std::string& fidelity, bool lf_path) {
    require_out(cx.out);
    if (data_dir.empty() || ckpt.empty()) throw ConfigError("--data and --model are required");
    const auto ds = read_dataset(data_dir);
    Model m = Model::load(ckpt);
    detail::check_compatible(m.config, ds.gen);
    const auto tc = TrainConfig::from_config(cx.kv);
    const auto rep = evaluate(m, ds, split_from_string(split), tc, fidelity_from_string(fidelity), lf_path);
    if (rep.per_instance.empty()) throw DataError("split '" + split + "' has no " + fidelity + " records");
    auto echo = cx.echo();
    echo["model"] = ckpt;
    echo["split"] = split;
    echo["fidelity"] = fidelity;
    echo["lf_path"] = lf_path;
    write_metrics(cx.out, "metrics", rep, echo);
    *cx.log << "eval: " << split << " MAD " << rep.mad_mm << " mm, IoU " << rep.iou3d_percent << " %, TE " << rep.te_mm
            << " mm\n";
    return kExitOk;
}

inline int cmd_compensate(Context& cx, const std::string& ckpt) {
    require_out(cx.out);
    const auto gen = GeneratorConfig::from_config(cx.kv);
    CompensationOptions o;
    o.alpha = cx.kv.get_double("alpha", o.alpha);
    o.tau = cx.kv.get_double("tau", o.tau);
    o.max_iter = static_cast<int>(cx.kv.get_int("max_iter", o.max_iter));
    const double unwind = cx.kv.get_double("unwind_factor", 2.0);
    const auto seed = static_cast<std::uint64_t>(cx.kv.get_int("case_seed", cx.kv.get_int("seed", 0)));
    const auto c = make_compensation_case(seed, gen, unwind);
    o.unwind_len = c.unwind_len;
    Predictor pred;
    std::string kind = cx.kv.get_string("predictor", ckpt.empty() ? "hf_simulator" : "model");
    std::optional<Model> model;
    if (kind == "model") {
        if (ckpt.empty()) throw ConfigError("predictor = model needs --model");
        model = Model::load(ckpt);
        detail::check_compatible(model->config, gen);
        const auto inst = c.instance;
        pred = [&model, inst](const CharLine& mold, const MotionParams& p) {
            return predict(*model, inst.sdf.values, inst.init_line, mold, p).y;
        };
    } else if (kind == "hf_simulator") {
        pred = simulator_predictor(c.instance, gen, gen.hf);
    } else if (kind == "lf_simulator") {
        pred = simulator_predictor(c.instance, gen, gen.lf);
    } else {
        throw ConfigError("predictor must be model, hf_simulator or lf_simulator");
    }
    const auto tr = compensate(c.target, pred, o);
    auto echo = cx.echo();
    echo["predictor"] = kind;
    echo["case_seed"] = seed;
    tr.write(cx.out, echo);
    write_line_csv((fs::path(cx.out) / "target.csv").string(), c.target);
    *cx.log << "compensate: " << tr.status << " after " << tr.iterations.size() - 1 << " updates, MAD "
            << tr.final().mad_mm << " mm\n";
    if (tr.status == "non_finite") throw NumericalError("compensation produced a non-finite design");
    return kExitOk;
}

inline int plot_curves(Context& cx, const std::string& report) {
    if (report.empty()) throw ConfigError("--report is required for curves");
    std::ifstream is(report);
    if (!is) throw DataError("cannot read " + report);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad run report: ") + e.what());
    }
    std::ofstream os(fs::path(cx.out) / "loss_curves.csv");
    os << "stage,epoch,train_loss,val\n" << std::setprecision(10);
    for (const auto& p : j.at("curve")) {
        os << p.at("stage").get<std::string>() << ',' << p.at("epoch").get<int>() << ',';
        if (!p.at("train_loss").is_null()) os << p.at("train_loss").get<double>();
        os << ',' << p.at("val").get<double>() << '\n';
    }
    return kExitOk;
}

inline int plot_gap(Context& cx) {
    const auto gen = GeneratorConfig::from_config(cx.kv);
    const int n = static_cast<int>(cx.kv.get_int("gap_samples", 200));
    const int bins = static_cast<int>(cx.kv.get_int("gap_bins", 20));
    if (n < 1 || bins < 1) throw ConfigError("gap_samples and gap_bins must be >= 1");
    const auto seed = static_cast<std::uint64_t>(cx.kv.get_int("seed", 0));
    std::vector<double> gap;
    for (int i = 0; i < n; ++i) {
        const auto inst = sample_instance(detail::stream_seed(seed, 7, static_cast<std::uint64_t>(i)), gen);
        gap.push_back(mad(simulate(inst, gen.lf, gen), simulate(inst, gen.hf, gen)));
    }
    const double lo = *std::min_element(gap.begin(), gap.end());
    const double hi = *std::max_element(gap.begin(), gap.end());
    const double w = hi > lo ? (hi - lo) / bins : 1.0;
    std::vector<int> count(static_cast<std::size_t>(bins), 0);
    for (double g : gap) count[static_cast<std::size_t>(std::min(bins - 1, static_cast<int>((g - lo) / w)))]++;
    std::ofstream os(fs::path(cx.out) / "gap_histogram.csv");
    os << "bin_lo_mm,bin_hi_mm,count\n" << std::setprecision(10);
    for (int b = 0; b < bins; ++b) os << lo + b * w << ',' << lo + (b + 1) * w << ',' << count[static_cast<std::size_t>(b)] << '\n';
    std::ofstream raw(fs::path(cx.out) / "gap_samples.csv");
    raw << "sample,mad_lf_hf_mm\n" << std::setprecision(10);
    for (std::size_t i = 0; i < gap.size(); ++i) raw << i << ',' << gap[i] << '\n';
    write_json(fs::path(cx.out) / "gap_echo.json", cx.echo());
    return kExitOk;
}

inline int plot_attention(Context& cx, const std::string& data_dir, const std::string& ckpt) {
    if (data_dir.empty() || ckpt.empty()) throw ConfigError("--data and --model are required for attention");
    const auto ds = read_dataset(data_dir);
    Model m = Model::load(ckpt);
    if (!m.has_hf_head()) throw ConfigError("attention maps need a model with a trained HF head");
    detail::check_compatible(m.config, ds.gen);
    const auto recs = ds.select(Fidelity::HF, Split::Test);
    if (recs.empty()) throw DataError("no HF test records");
    const auto k = static_cast<std::size_t>(cx.kv.get_int("record", 0));
    if (k >= recs.size()) throw ConfigError("record index out of range");
    const auto p = detail::prepare(ds, m.norm, m.config, {recs[k]});
    const auto maps = nn::attention_maps(m.params, m.config, p.inputs({0}));
    const auto dir = fs::path(cx.out) / "attention";
    fs::create_directories(dir);
    const auto files = nn::export_attention_maps(maps, dir.string());
    auto echo = cx.echo();
    echo["record"] = ds.records[recs[k]].id;
    echo["files"] = files;
    write_json(dir / "index.json", echo);
    return kExitOk;
}

/// Val and test MAD of the HF head over one hyper-parameter. K reuses a
/// stage-1 checkpoint when --model is given; other parameters retrain all stages.
inline int plot_sweep(Context& cx, const std::string& data_dir, const std::string& ckpt) {
    if (data_dir.empty()) throw ConfigError("--data is required for sweep");
    const auto ds = read_dataset(data_dir);
    const std::string param = cx.kv.get_string("sweep_param", "K");
    const auto values = cx.kv.get_int_list("sweep_values", {1, 2, 3, 4, 5, 6});
    if (param != "K" && param != "heads") throw ConfigError("sweep_param must be K or heads");
    const auto tc = TrainConfig::from_config(cx.kv);
    std::optional<Model> lf;
    if (!ckpt.empty()) {
        if (param != "K") throw ConfigError("a stage-1 checkpoint can only be reused for a K sweep");
        lf = Model::load(ckpt);
    }
    std::ofstream os(fs::path(cx.out) / ("sweep_" + param + ".csv"));
    os << param << ",val_mad_mm,test_mad_mm,test_iou3d_percent,test_te_mm\n" << std::setprecision(10);
    for (auto v : values) {
        auto kv = cx.kv;
        kv.set(param, std::to_string(v));
        const auto mc = model_config_for(kv, ds.gen);
        RunReport rep;
        Model m;
        if (lf) m = train_hf(*lf, mc, ds, tc, rep);
        else m = run_fildeep(ds, mc, tc, rep);
        const auto test = evaluate(m, ds, Split::Test, tc);
        os << v << ',' << rep.scalars.at("hf_best_val_mad_mm") << ',' << test.mad_mm << ',' << test.iou3d_percent << ','
           << test.te_mm << '\n';
        *cx.log << "sweep: " << param << "=" << v << " test MAD " << test.mad_mm << " mm\n";
    }
    write_json(fs::path(cx.out) / ("sweep_" + param + "_echo.json"), cx.echo());
    return kExitOk;
}

inline int cmd_plot(Context& cx, const std::string& kind, const std::string& data_dir, const std::string& ckpt,
                    const std::string& report) {
    require_out(cx.out);
    if (kind == "curves") return plot_curves(cx, report);
    if (kind == "gap") return plot_gap(cx);
    if (kind == "attention") return plot_attention(cx, data_dir, ckpt);
    if (kind == "sweep") return plot_sweep(cx, data_dir, ckpt);
    throw ConfigError("unknown plot kind '" + kind + "' (curves, gap, attention, sweep)");
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"fildeep: multi-fidelity surrogate for stretch-bending springback"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.\n"
               "Environment: FILDEEP_SEED overrides the config seed (--seed overrides both).");

    std::string config, outdir, seed, data, model, split = "test", fidelity = "HF", kind, report, init;
    bool lf_path = false;
    auto common = [&](CLI::App* s) {
        s->add_option("-c,--config", config, "config file (key = value lines or flat JSON)");
        s->add_option("-o,--out", outdir, "output directory")->required();
        s->add_option("--seed", seed, "seed override");
    };
    auto* dg = app.add_subcommand("datagen", "generate and split a multi-fidelity dataset");
    common(dg);
    auto* tr = app.add_subcommand("train", "train FilDeep (mode = fildeep) or a baseline (lf_only, hf_only, mix)");
    common(tr);
    tr->add_option("-d,--data", data, "dataset directory")->required();
    tr->add_option("--init", init, "stage-1 checkpoint; trains only the HF head");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    common(ev);
    ev->add_option("-d,--data", data, "dataset directory")->required();
    ev->add_option("-m,--model", model, "checkpoint")->required();
    ev->add_option("--split", split, "train | val | test | reserved")->capture_default_str();
    ev->add_option("--fidelity", fidelity, "target fidelity, HF or LF")->capture_default_str();
    ev->add_flag("--lf-path", lf_path, "score the intermediate LF prediction");
    auto* cp = app.add_subcommand("compensate", "iterative mold compensation for a generated target");
    common(cp);
    cp->add_option("-m,--model", model, "checkpoint used as predictor (default: HF simulator)");
    auto* pl = app.add_subcommand("plot", "export plot data: curves, gap, attention, sweep");
    common(pl);
    pl->add_option("kind", kind, "curves | gap | attention | sweep")->required();
    pl->add_option("-d,--data", data, "dataset directory");
    pl->add_option("-m,--model", model, "checkpoint");
    pl->add_option("--report", report, "run_report.json for curves");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitConfig;
    }

    try {
        Context cx;
        cx.kv = load_config(config);
        apply_seed_overrides(cx.kv, seed);
        cx.config_path = config;
        cx.out = outdir;
        cx.log = &err;
        if (*dg) return cmd_datagen(cx);
        if (*tr) return cmd_train(cx, data, init);
        if (*ev) return cmd_eval(cx, data, model, split, fidelity, lf_path);
        if (*cp) return cmd_compensate(cx, model);
        if (*pl) return cmd_plot(cx, kind, data, model, report);
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        err << e.what() << "\n";
        return kExitData;
    } catch (const NumericalError& e) {
        err << e.what() << "\n";
        return kExitNumerical;
    } catch (const nlohmann::json::exception& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    }
    err << app.help();
    return kExitConfig;
}

} // namespace fildeep::cli
