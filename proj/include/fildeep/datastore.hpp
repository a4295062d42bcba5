#pragma once

// Multi-fidelity dataset: generation, HF split protocol, normalization and
// the on-disk layout
//
//   <dir>/manifest.json
//   <dir>/instances/<id>/{sdf.bin, section.csv, init_line.csv, mold_line.csv,
//                         motion.json, out_lf.csv, out_hf.csv}

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fildeep/config.hpp"
#include "fildeep/errors.hpp"
#include "fildeep/geometry.hpp"
#include "fildeep/simulator.hpp"

namespace fildeep {

enum class Fidelity { LF, HF };
enum class Split { Train, Val, Test, Reserved };

inline std::string to_string(Fidelity f) { return f == Fidelity::LF ? "LF" : "HF"; }
inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Reserved: return "reserved";
    }
    return "?";
}

inline Fidelity fidelity_from_string(const std::string& s) {
    if (s == "LF") return Fidelity::LF;
    if (s == "HF") return Fidelity::HF;
    throw DataError("unknown fidelity tag '" + s + "'");
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "reserved") return Split::Reserved;
    throw DataError("unknown split '" + s + "'");
}

/// Geometry and inputs of one generated instance, shared by its LF and HF
/// records when paired.
struct InstanceData {
    std::string id;
    std::uint64_t seed = 0;
    Polygon2D section;
    SDFGrid sdf;  // values rounded to float32, as stored
    CharLine init_line;
    CharLine mold_line;
    MotionParams motion;
    double L0 = 0.0;
    CharLine out_lf;  // empty when not simulated
    CharLine out_hf;
};

struct MFRecord {
    std::string id;           // "<instance>/<fidelity>"
    std::size_t instance = 0; // index into MFDataset::instances
    Fidelity fidelity = Fidelity::LF;
    std::uint64_t seed = 0;
};

/// Line coordinates share one global scale; motion is z-scored per
/// component; SDF values are divided by sdf_scale.
struct Normalizer {
    double global_scale = 1.0;
    std::array<double, 6> motion_mean{};
    std::array<double, 6> motion_std{1, 1, 1, 1, 1, 1};
    double sdf_scale = 1.0;

    void validate() const {
        bool ok = global_scale > 0.0 && sdf_scale > 0.0 && std::isfinite(global_scale) && std::isfinite(sdf_scale);
        for (double s : motion_std) ok = ok && s > 0.0 && std::isfinite(s);
        if (!ok) throw DataError("normalizer scales must be positive and finite");
    }

    Points3 apply(const CharLine& line) const { return line.points / global_scale; }
    CharLine invert(const Points3& y) const { return CharLine(y * global_scale); }

    std::array<double, 6> apply(const MotionParams& p) const {
        std::array<double, 6> z{};
        for (int i = 0; i < 6; ++i) z[i] = (p.p[i] - motion_mean[i]) / motion_std[i];
        return z;
    }
    MotionParams invert_motion(const std::array<double, 6>& z) const {
        MotionParams p;
        for (int i = 0; i < 6; ++i) p.p[i] = z[i] * motion_std[i] + motion_mean[i];
        return p;
    }

    GridD apply(const SDFGrid& g) const { return g.values / sdf_scale; }

    nlohmann::json to_json() const {
        return {{"global_scale", global_scale}, {"motion_mean", motion_mean}, {"motion_std", motion_std},
                {"sdf_scale", sdf_scale}};
    }
    static Normalizer from_json(const nlohmann::json& j) {
        Normalizer n;
        n.global_scale = j.at("global_scale");
        n.motion_mean = j.at("motion_mean").get<std::array<double, 6>>();
        n.motion_std = j.at("motion_std").get<std::array<double, 6>>();
        n.sdf_scale = j.at("sdf_scale");
        n.validate();
        return n;
    }
    friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

struct HFCounts {
    int train = 60, val = 30, test = 30;
};

struct MFDataset {
    std::vector<InstanceData> instances;
    std::vector<MFRecord> records;
    std::vector<Split> splits;  // parallel to records
    Normalizer normalizer;
    GeneratorConfig gen;
    std::uint64_t seed = 0;
    bool paired = false;
    HFCounts hf_counts{0, 0, 0};
    std::uint64_t split_seed = 0;

    const InstanceData& instance(const MFRecord& r) const { return instances[r.instance]; }

    const CharLine& output(const MFRecord& r) const {
        return r.fidelity == Fidelity::LF ? instances[r.instance].out_lf : instances[r.instance].out_hf;
    }

    /// Record indices with the given fidelity and split.
    std::vector<std::size_t> select(Fidelity f, Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].fidelity == f && splits[i] == s) out.push_back(i);
        return out;
    }

    std::size_t count(Fidelity f) const {
        std::size_t n = 0;
        for (const auto& r : records) n += r.fidelity == f;
        return n;
    }
};

namespace detail {

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t i) {
    std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + stream * 0xD1B54A32D192ED03ull + i + 1;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::string instance_name(std::size_t i) {
    std::ostringstream os;
    os << "inst_" << std::setw(6) << std::setfill('0') << i;
    return os.str();
}

inline CharLine simulate_seed(std::uint64_t seed, const FidelityLevel& fid, const GeneratorConfig& gen) {
    try {
        return simulate(sample_instance(seed, gen), fid, gen);
    } catch (const NumericalError& e) {
        throw NumericalError("simulation failed for seed " + std::to_string(seed) + ": " + e.what());
    } catch (const Error& e) {
        throw DataError("simulation failed for seed " + std::to_string(seed) + ": " + e.what());
    }
}

inline InstanceData make_instance(std::uint64_t seed, std::size_t index, const GeneratorConfig& gen) {
    ProblemInstance inst;
    try {
        inst = sample_instance(seed, gen);
    } catch (const Error& e) {
        throw DataError("generation failed for seed " + std::to_string(seed) + ": " + e.what());
    }
    InstanceData d;
    d.id = instance_name(index);
    d.seed = seed;
    d.section = inst.section;
    d.sdf = inst.sdf;
    d.sdf.values = d.sdf.values.cast<float>().cast<double>();
    d.init_line = inst.init_line;
    d.mold_line = inst.mold_line;
    d.motion = inst.motion;
    d.L0 = inst.L0;
    return d;
}

} // namespace detail

/// Generates n_lf LF and n_hf HF records. HF instances use their own seed
/// stream unless `paired`, in which case HF record i reuses LF instance i.
/// Splits are unset (all HF reserved, all LF train) until split_dataset.
inline MFDataset build_dataset(const GeneratorConfig& gen, int n_lf, int n_hf, std::uint64_t seed, bool paired = false) {
    gen.validate();
    if (n_lf < 1 || n_hf < 1) throw ConfigError("n_lf and n_hf must be >= 1");
    if (paired && n_hf > n_lf) throw ConfigError("paired mode needs n_hf <= n_lf");
    MFDataset ds;
    ds.gen = gen;
    ds.seed = seed;
    ds.paired = paired;
    for (int i = 0; i < n_lf; ++i) {
        const std::uint64_t s = detail::stream_seed(seed, 0, static_cast<std::uint64_t>(i));
        auto d = detail::make_instance(s, ds.instances.size(), gen);
        d.out_lf = detail::simulate_seed(s, gen.lf, gen);
        ds.records.push_back({d.id + "/LF", ds.instances.size(), Fidelity::LF, s});
        ds.splits.push_back(Split::Train);
        ds.instances.push_back(std::move(d));
    }
    for (int i = 0; i < n_hf; ++i) {
        std::size_t idx;
        if (paired) {
            idx = static_cast<std::size_t>(i);
        } else {
            const std::uint64_t s = detail::stream_seed(seed, 1, static_cast<std::uint64_t>(i));
            ds.instances.push_back(detail::make_instance(s, ds.instances.size(), gen));
            idx = ds.instances.size() - 1;
        }
        auto& d = ds.instances[idx];
        d.out_hf = detail::simulate_seed(d.seed, gen.hf, gen);
        ds.records.push_back({d.id + "/HF", idx, Fidelity::HF, d.seed});
        ds.splits.push_back(Split::Reserved);
    }
    return ds;
}

/// Seeded partition of the HF records into train/val/test (the rest are
/// reserved); every LF record goes to train.
inline MFDataset split_dataset(MFDataset ds, HFCounts counts, std::uint64_t seed) {
    if (counts.train < 0 || counts.val < 0 || counts.test < 0) throw ConfigError("split counts must be non-negative");
    std::vector<std::size_t> hf;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        if (ds.records[i].fidelity == Fidelity::HF) hf.push_back(i);
        else ds.splits[i] = Split::Train;
    }
    const std::size_t need = static_cast<std::size_t>(counts.train + counts.val + counts.test);
    if (hf.size() < need)
        throw DataError("split needs " + std::to_string(need) + " HF records, dataset has " + std::to_string(hf.size()));
    std::mt19937_64 rng(seed ^ 0x2545F4914F6CDD1Dull);
    for (std::size_t i = hf.size(); i > 1; --i) std::swap(hf[i - 1], hf[rng() % i]);
    for (std::size_t k = 0; k < hf.size(); ++k) {
        Split s = Split::Reserved;
        if (k < static_cast<std::size_t>(counts.train)) s = Split::Train;
        else if (k < static_cast<std::size_t>(counts.train + counts.val)) s = Split::Val;
        else if (k < need) s = Split::Test;
        ds.splits[hf[k]] = s;
    }
    ds.hf_counts = counts;
    ds.split_seed = seed;
    return ds;
}

/// Statistics from train records only.
inline Normalizer fit_normalizer(const MFDataset& ds) {
    Normalizer n;
    double scale = 0.0, sdf = 0.0;
    std::array<double, 6> sum{}, sq{};
    std::size_t count = 0;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        if (ds.splits[i] != Split::Train) continue;
        const auto& r = ds.records[i];
        const auto& d = ds.instance(r);
        for (const CharLine* l : {&d.init_line, &d.mold_line, &ds.output(r)})
            if (l->size()) scale = std::max(scale, l->points.cwiseAbs().maxCoeff());
        sdf = std::max(sdf, d.sdf.values.cwiseAbs().maxCoeff());
        for (int k = 0; k < 6; ++k) {
            sum[k] += d.motion.p[k];
            sq[k] += d.motion.p[k] * d.motion.p[k];
        }
        ++count;
    }
    if (count == 0) throw DataError("cannot fit normalizer: empty train split");
    n.global_scale = scale;
    n.sdf_scale = sdf;
    for (int k = 0; k < 6; ++k) {
        const double mean = sum[k] / count;
        const double var = std::max(0.0, sq[k] / count - mean * mean);
        n.motion_mean[k] = mean;
        const double sd = std::sqrt(var);
        // a constant component would otherwise divide by ~0
        n.motion_std[k] = sd > 1e-9 * std::max(1.0, std::abs(mean)) ? sd : 1.0;
    }
    n.validate();
    return n;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

inline void write_polygon_csv(const std::string& path, const Polygon2D& p) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os << "u,v\n" << std::setprecision(17);
    for (const auto& v : p.vertices) os << v.x() << ',' << v.y() << '\n';
}

inline Polygon2D read_polygon_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path);
    std::string row;
    if (!std::getline(is, row) || row.rfind("u,v", 0) != 0) throw DataError(path + ": header must be u,v");
    Polygon2D p;
    while (std::getline(is, row)) {
        if (row.empty()) continue;
        std::istringstream ss(row);
        double u, v;
        char c;
        if (!(ss >> u >> c >> v) || c != ',') throw DataError(path + ": malformed row " + row);
        p.vertices.push_back({u, v});
    }
    return p;
}

inline nlohmann::json manifest_json(const MFDataset& ds) {
    nlohmann::json recs = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        const auto& d = ds.instance(r);
        const std::string base = "instances/" + d.id + "/";
        recs.push_back({{"id", r.id},
                        {"instance", d.id},
                        {"fidelity", to_string(r.fidelity)},
                        {"seed", r.seed},
                        {"split", to_string(ds.splits[i])},
                        {"sdf", base + "sdf.bin"},
                        {"section", base + "section.csv"},
                        {"init_line", base + "init_line.csv"},
                        {"mold_line", base + "mold_line.csv"},
                        {"motion", base + "motion.json"},
                        {"output", base + (r.fidelity == Fidelity::LF ? "out_lf.csv" : "out_hf.csv")}});
    }
    return {{"format_version", kDatasetFormatVersion},
            {"seed", ds.seed},
            {"paired", ds.paired},
            {"hf_counts", {ds.hf_counts.train, ds.hf_counts.val, ds.hf_counts.test}},
            {"split_seed", ds.split_seed},
            {"generator_config", ds.gen.to_json()},
            {"normalizer", ds.normalizer.to_json()},
            {"records", recs}};
}

/// Writes the dataset; `extra_echo` (e.g. the run config) is stored verbatim.
inline void write_dataset(const MFDataset& ds, const std::string& dir,
                          const nlohmann::json& extra_echo = nlohmann::json::object()) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "instances");
    for (const auto& d : ds.instances) {
        const fs::path p = fs::path(dir) / "instances" / d.id;
        fs::create_directories(p);
        write_sdf((p / "sdf.bin").string(), d.sdf);
        write_polygon_csv((p / "section.csv").string(), d.section);
        write_line_csv((p / "init_line.csv").string(), d.init_line);
        write_line_csv((p / "mold_line.csv").string(), d.mold_line);
        std::ofstream mj(p / "motion.json");
        mj << nlohmann::json({{"p", d.motion.p}, {"seed", d.seed}, {"L0", d.L0}}).dump(2) << '\n';
        if (d.out_lf.size()) write_line_csv((p / "out_lf.csv").string(), d.out_lf);
        if (d.out_hf.size()) write_line_csv((p / "out_hf.csv").string(), d.out_hf);
    }
    auto m = manifest_json(ds);
    m["config_echo"] = extra_echo;
    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os) throw DataError("cannot write manifest in " + dir);
    os << m.dump(2) << '\n';
}

inline MFDataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw DataError("no manifest.json in " + dir);
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad manifest: ") + e.what());
    }
    if (m.value("format_version", 0) != kDatasetFormatVersion) throw DataError("unsupported dataset format version");
    MFDataset ds;
    try {
        ds.seed = m.at("seed");
        ds.paired = m.at("paired");
        ds.hf_counts = {m.at("hf_counts")[0], m.at("hf_counts")[1], m.at("hf_counts")[2]};
        ds.split_seed = m.at("split_seed");
        ds.gen = GeneratorConfig::from_config(KeyValueConfig::parse(m.at("generator_config").dump()));
        ds.normalizer = Normalizer::from_json(m.at("normalizer"));
        std::map<std::string, std::size_t> index;
        for (const auto& r : m.at("records")) {
            const std::string inst = r.at("instance");
            auto it = index.find(inst);
            if (it == index.end()) {
                InstanceData d;
                d.id = inst;
                d.sdf = read_sdf((fs::path(dir) / r.at("sdf").get<std::string>()).string());
                d.section = read_polygon_csv((fs::path(dir) / r.at("section").get<std::string>()).string());
                d.init_line = read_line_csv((fs::path(dir) / r.at("init_line").get<std::string>()).string());
                d.mold_line = read_line_csv((fs::path(dir) / r.at("mold_line").get<std::string>()).string());
                std::ifstream mj(fs::path(dir) / r.at("motion").get<std::string>());
                if (!mj) throw DataError("missing motion.json for " + inst);
                const auto mo = nlohmann::json::parse(mj);
                d.motion.p = mo.at("p").get<std::array<double, 6>>();
                d.seed = mo.at("seed");
                d.L0 = mo.at("L0");
                it = index.emplace(inst, ds.instances.size()).first;
                ds.instances.push_back(std::move(d));
            }
            MFRecord rec;
            rec.id = r.at("id");
            rec.instance = it->second;
            rec.fidelity = fidelity_from_string(r.at("fidelity"));
            rec.seed = r.at("seed");
            const CharLine out = read_line_csv((fs::path(dir) / r.at("output").get<std::string>()).string());
            (rec.fidelity == Fidelity::LF ? ds.instances[rec.instance].out_lf : ds.instances[rec.instance].out_hf) = out;
            ds.records.push_back(rec);
            ds.splits.push_back(split_from_string(r.at("split")));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad manifest: ") + e.what());
    }
    return ds;
}

} // namespace fildeep
