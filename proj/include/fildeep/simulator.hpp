#pragma once

// Synthetic multi-fidelity stretch-bending data generator.
//
// The workpiece is clamped at its head (origin, heading +x), conforms to the
// mold over a contact arc, is stretched axially and released. Springback
// follows a bilinear moment-curvature law:
//
//   kappa_y = sigma_y / (E c),  M(k) = EI k                               |k| <= kappa_y
//                               M(k) = sign(k) EI (kappa_y + eta (|k| - kappa_y))   otherwise
//
// High fidelity unloads elastically along EI (optionally softened by the axial
// stretch); low fidelity recovers a constant fraction c0 of the loaded
// curvature on a coarse segmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fildeep/config.hpp"
#include "fildeep/errors.hpp"
#include "fildeep/geometry.hpp"

namespace fildeep {

struct Material {
    double E = 70000.0;      // MPa
    double sigma_y = 250.0;  // MPa
    double eta = 0.05;       // hardening ratio, post-yield slope over EI
    double lam = 30.0;       // stretch-springback coupling

    void validate() const {
        if (!(E > 0.0) || !(sigma_y > 0.0)) throw DataError("material E and sigma_y must be positive");
        if (!(eta > 0.0 && eta < 1.0)) throw DataError("material eta must lie in (0, 1)");
        if (!(lam >= 0.0)) throw DataError("material lam must be non-negative");
    }
};

/// Mold curvature profile kappa_m(s) over [0, length]. Either the parametric
/// family a + b s + c sin(omega s), or a piecewise-linear profile sampled at
/// knots (used when the mold is given as a line, e.g. during compensation).
struct MoldCurve {
    double a = 0.0, b = 0.0, c = 0.0, omega = 0.0;  // 1/mm, 1/mm^2, 1/mm, 1/mm
    double length = 0.0;                            // mm
    std::vector<double> knot_s;
    std::vector<double> knot_kappa;

    bool sampled() const { return !knot_s.empty(); }

    double kappa(double s) const {
        if (!sampled()) return a + b * s + c * std::sin(omega * s);
        if (s <= knot_s.front()) return knot_kappa.front();
        if (s >= knot_s.back()) return knot_kappa.back();
        const auto it = std::upper_bound(knot_s.begin(), knot_s.end(), s);
        const auto i = static_cast<std::size_t>(it - knot_s.begin());
        const double t = (s - knot_s[i - 1]) / (knot_s[i] - knot_s[i - 1]);
        return (1.0 - t) * knot_kappa[i - 1] + t * knot_kappa[i];
    }

    /// Exact integral of kappa over [0, s].
    double integral(double s) const {
        if (!sampled()) {
            const double sine = omega != 0.0 ? (c / omega) * (1.0 - std::cos(omega * s)) : 0.0;
            return a * s + 0.5 * b * s * s + sine;
        }
        double acc = 0.0;
        if (s <= knot_s.front()) return knot_kappa.front() * s;
        acc += knot_kappa.front() * knot_s.front();
        for (std::size_t i = 1; i < knot_s.size(); ++i) {
            const double s0 = knot_s[i - 1], s1 = knot_s[i];
            if (s <= s1) {
                const double ks = kappa(s);
                return acc + 0.5 * (knot_kappa[i - 1] + ks) * (s - s0);
            }
            acc += 0.5 * (knot_kappa[i - 1] + knot_kappa[i]) * (s1 - s0);
        }
        return acc + knot_kappa.back() * (s - knot_s.back());
    }

    /// Curvature at the head, the osculating circle used by the involute.
    double head_curvature() const { return kappa(0.0); }

    /// Builds a sampled profile from the signed x-z turning of a polyline.
    static MoldCurve from_line(const CharLine& line) {
        const int n = line.size();
        if (n < 3) throw DataError("mold line needs at least 3 points");
        const auto s = cumulative_length(line);
        MoldCurve m;
        m.length = s.back();
        if (!(m.length > 0.0)) throw DataError("mold line has zero length");
        std::vector<double> heading(static_cast<std::size_t>(n - 1));
        for (int i = 0; i + 1 < n; ++i) {
            const Vec3 d = line.point(i + 1) - line.point(i);
            heading[static_cast<std::size_t>(i)] = std::atan2(d.z(), d.x());
        }
        for (int i = 1; i + 1 < n; ++i) {
            double turn = heading[static_cast<std::size_t>(i)] - heading[static_cast<std::size_t>(i - 1)];
            turn = std::remainder(turn, 2.0 * std::numbers::pi);
            const double l0 = s[static_cast<std::size_t>(i)] - s[static_cast<std::size_t>(i - 1)];
            const double l1 = s[static_cast<std::size_t>(i + 1)] - s[static_cast<std::size_t>(i)];
            m.knot_s.push_back(s[static_cast<std::size_t>(i)]);
            m.knot_kappa.push_back(turn / (0.5 * (l0 + l1)));
        }
        return m;
    }
};

struct MotionParams {
    std::array<double, 6> p{};  // d_x, d_y, d_z (mm), theta_x, theta_y, theta_z (rad)

    double dx() const { return p[0]; }
    double dy() const { return p[1]; }
    double dz() const { return p[2]; }
    double theta_x() const { return p[3]; }
    double theta_y() const { return p[4]; }
    double theta_z() const { return p[5]; }
    bool finite() const {
        return std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); });
    }
    friend bool operator==(const MotionParams&, const MotionParams&) = default;
};

struct FidelityLevel {
    int n_seg = 512;
    bool exact_unloading = true;
    bool stretch_coupling = true;

    static FidelityLevel high() { return {512, true, true}; }
    static FidelityLevel low() { return {32, false, false}; }
    void validate() const {
        if (n_seg < 4) throw DataError("fidelity n_seg must be >= 4");
    }
};

enum class SectionFamily { RoundedRect = 0, LProfile = 1, Channel = 2 };

struct ProblemInstance {
    Polygon2D section;
    SDFGrid sdf;
    CharLine init_line;
    MoldCurve mold;
    CharLine mold_line;
    MotionParams motion;
    Material material;
    double L0 = 0.0;
    std::uint64_t seed = 0;
    SectionFamily family = SectionFamily::RoundedRect;

    int M() const { return init_line.size(); }
};

using Range = std::pair<double, double>;

/// Every tunable of the generator; each field maps to one config key.
struct GeneratorConfig {
    int M = 288;
    int sdf_H = 64;
    int sdf_W = 64;
    Range L0{1000.0, 1000.0};
    double mold_length_factor = 1.2;

    Range E{70000.0, 70000.0};
    Range sigma_y{250.0, 250.0};
    Range eta{0.05, 0.05};
    Range lam{30.0, 30.0};

    Range width{20.0, 40.0};
    Range height{20.0, 40.0};
    Range thickness{3.0, 6.0};
    Range corner_fraction{0.05, 0.3};

    Range mold_a{5e-4, 1.5e-3};
    Range mold_b{-3e-7, 3e-7};
    Range mold_c{0.0, 2e-4};
    Range mold_omega{0.004, 0.012};

    Range d_x{100.0, 400.0};
    Range d_y{-1.0, 1.0};
    Range d_z{100.0, 400.0};
    Range theta_x{-0.05, 0.05};
    Range theta_y{0.4, 1.2};
    Range theta_z{-0.05, 0.05};

    double beta1 = 400.0;   // mm/rad
    double beta2 = 2.0;
    double gamma = 0.01;
    double eps0 = 0.002;
    double alpha1 = 0.05;   // 1/rad
    double alpha2 = 0.02;   // 1/mm
    double c0 = 0.85;

    FidelityLevel hf = FidelityLevel::high();
    FidelityLevel lf = FidelityLevel::low();

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {
            "M", "sdf_H", "sdf_W", "L0", "mold_length_factor", "E", "sigma_y", "eta", "lam", "width", "height",
            "thickness", "corner_fraction", "mold_a", "mold_b", "mold_c", "mold_omega", "d_x", "d_y", "d_z",
            "theta_x", "theta_y", "theta_z", "beta1", "beta2", "gamma", "eps0", "alpha1", "alpha2", "c0",
            "hf_n_seg", "hf_exact_unloading", "hf_stretch_coupling", "lf_n_seg", "lf_exact_unloading",
            "lf_stretch_coupling"};
        return k;
    }

    static GeneratorConfig from_config(const KeyValueConfig& kv) {
        GeneratorConfig g;
        g.M = static_cast<int>(kv.get_int("M", g.M));
        g.sdf_H = static_cast<int>(kv.get_int("sdf_H", g.sdf_H));
        g.sdf_W = static_cast<int>(kv.get_int("sdf_W", g.sdf_W));
        g.L0 = kv.get_range("L0", g.L0);
        g.mold_length_factor = kv.get_double("mold_length_factor", g.mold_length_factor);
        g.E = kv.get_range("E", g.E);
        g.sigma_y = kv.get_range("sigma_y", g.sigma_y);
        g.eta = kv.get_range("eta", g.eta);
        g.lam = kv.get_range("lam", g.lam);
        g.width = kv.get_range("width", g.width);
        g.height = kv.get_range("height", g.height);
        g.thickness = kv.get_range("thickness", g.thickness);
        g.corner_fraction = kv.get_range("corner_fraction", g.corner_fraction);
        g.mold_a = kv.get_range("mold_a", g.mold_a);
        g.mold_b = kv.get_range("mold_b", g.mold_b);
        g.mold_c = kv.get_range("mold_c", g.mold_c);
        g.mold_omega = kv.get_range("mold_omega", g.mold_omega);
        g.d_x = kv.get_range("d_x", g.d_x);
        g.d_y = kv.get_range("d_y", g.d_y);
        g.d_z = kv.get_range("d_z", g.d_z);
        g.theta_x = kv.get_range("theta_x", g.theta_x);
        g.theta_y = kv.get_range("theta_y", g.theta_y);
        g.theta_z = kv.get_range("theta_z", g.theta_z);
        g.beta1 = kv.get_double("beta1", g.beta1);
        g.beta2 = kv.get_double("beta2", g.beta2);
        g.gamma = kv.get_double("gamma", g.gamma);
        g.eps0 = kv.get_double("eps0", g.eps0);
        g.alpha1 = kv.get_double("alpha1", g.alpha1);
        g.alpha2 = kv.get_double("alpha2", g.alpha2);
        g.c0 = kv.get_double("c0", g.c0);
        g.hf.n_seg = static_cast<int>(kv.get_int("hf_n_seg", g.hf.n_seg));
        g.hf.exact_unloading = kv.get_bool("hf_exact_unloading", g.hf.exact_unloading);
        g.hf.stretch_coupling = kv.get_bool("hf_stretch_coupling", g.hf.stretch_coupling);
        g.lf.n_seg = static_cast<int>(kv.get_int("lf_n_seg", g.lf.n_seg));
        g.lf.exact_unloading = kv.get_bool("lf_exact_unloading", g.lf.exact_unloading);
        g.lf.stretch_coupling = kv.get_bool("lf_stretch_coupling", g.lf.stretch_coupling);
        g.validate();
        return g;
    }

    nlohmann::json to_json() const {
        auto r = [](const Range& x) { return nlohmann::json::array({x.first, x.second}); };
        return {{"M", M}, {"sdf_H", sdf_H}, {"sdf_W", sdf_W}, {"L0", r(L0)},
                {"mold_length_factor", mold_length_factor}, {"E", r(E)}, {"sigma_y", r(sigma_y)}, {"eta", r(eta)},
                {"lam", r(lam)}, {"width", r(width)}, {"height", r(height)}, {"thickness", r(thickness)},
                {"corner_fraction", r(corner_fraction)}, {"mold_a", r(mold_a)}, {"mold_b", r(mold_b)},
                {"mold_c", r(mold_c)}, {"mold_omega", r(mold_omega)}, {"d_x", r(d_x)}, {"d_y", r(d_y)},
                {"d_z", r(d_z)}, {"theta_x", r(theta_x)}, {"theta_y", r(theta_y)}, {"theta_z", r(theta_z)},
                {"beta1", beta1}, {"beta2", beta2}, {"gamma", gamma}, {"eps0", eps0}, {"alpha1", alpha1},
                {"alpha2", alpha2}, {"c0", c0}, {"hf_n_seg", hf.n_seg}, {"hf_exact_unloading", hf.exact_unloading},
                {"hf_stretch_coupling", hf.stretch_coupling}, {"lf_n_seg", lf.n_seg},
                {"lf_exact_unloading", lf.exact_unloading}, {"lf_stretch_coupling", lf.stretch_coupling}};
    }

    void validate() const {
        if (M < 2) throw ConfigError("M must be >= 2");
        if (sdf_H < 8 || sdf_W < 8) throw ConfigError("SDF grid must be at least 8x8");
        if (!(L0.first > 0.0)) throw ConfigError("L0 must be positive");
        if (mold_length_factor < 1.0) throw ConfigError("mold_length_factor must be >= 1");
        if (!(E.first > 0.0) || !(sigma_y.first > 0.0)) throw ConfigError("E and sigma_y must be positive");
        if (!(eta.first > 0.0) || !(eta.second < 1.0)) throw ConfigError("eta range must lie in (0, 1)");
        if (lam.first < 0.0) throw ConfigError("lam must be non-negative");
        if (!(width.first > 0.0) || !(height.first > 0.0) || !(thickness.first > 0.0))
            throw ConfigError("section dimensions must be positive");
        if (2.0 * thickness.second >= std::min(width.first, height.first))
            throw ConfigError("thickness too large for the section dimensions");
        if (corner_fraction.first < 0.0 || corner_fraction.second >= 0.5)
            throw ConfigError("corner_fraction must lie in [0, 0.5)");
        if (c0 < 0.0 || c0 > 1.0) throw ConfigError("c0 must lie in [0, 1]");
        if (hf.n_seg < 4 || lf.n_seg < 4) throw ConfigError("n_seg must be >= 4");
    }
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace detail {

/// Platform-independent uniform draw (53 random mantissa bits).
inline double uniform(std::mt19937_64& rng, const Range& r) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return r.first + (r.second - r.first) * u;
}

inline Polygon2D centered(std::vector<Vec2> pts) {
    Vec2 lo = pts.front(), hi = pts.front();
    for (const auto& p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const Vec2 mid = 0.5 * (lo + hi);
    for (auto& p : pts) p -= mid;
    return {std::move(pts)};
}

} // namespace detail

inline Polygon2D rounded_rectangle(double w, double h, double r, int arc_points = 6) {
    r = std::clamp(r, 0.0, 0.5 * std::min(w, h) * 0.999);
    std::vector<Vec2> pts;
    if (r <= 0.0) return detail::centered({{0, 0}, {w, 0}, {w, h}, {0, h}});
    const std::array<Vec2, 4> centers{Vec2(w - r, r), Vec2(w - r, h - r), Vec2(r, h - r), Vec2(r, r)};
    const std::array<double, 4> start{-0.5 * std::numbers::pi, 0.0, 0.5 * std::numbers::pi, std::numbers::pi};
    for (std::size_t k = 0; k < 4; ++k) {
        for (int i = 0; i <= arc_points; ++i) {
            const double t = start[k] + 0.5 * std::numbers::pi * i / arc_points;
            pts.emplace_back(centers[k] + r * Vec2(std::cos(t), std::sin(t)));
        }
    }
    return detail::centered(std::move(pts));
}

inline Polygon2D l_profile(double w, double h, double t) {
    return detail::centered({{0, 0}, {w, 0}, {w, t}, {t, t}, {t, h}, {0, h}});
}

inline Polygon2D channel_profile(double w, double h, double t) {
    return detail::centered({{0, 0}, {w, 0}, {w, h}, {w - t, h}, {w - t, t}, {t, t}, {t, h}, {0, h}});
}

/// Exact-arc polyline of the mold from the head (origin, +x); `segments`
/// equal arc-length pieces, so the points lie on the mold curve.
inline CharLine mold_polyline(const MoldCurve& mold, int segments) {
    std::vector<double> k(static_cast<std::size_t>(segments)), ds(static_cast<std::size_t>(segments));
    const double h = mold.length / segments;
    for (int i = 0; i < segments; ++i) {
        k[static_cast<std::size_t>(i)] = (mold.integral((i + 1) * h) - mold.integral(i * h)) / h;
        ds[static_cast<std::size_t>(i)] = h;
    }
    return line_from_curvature(k, ds, Pose0{});
}

/// True when the planar projection (x-z) of the line has no self crossings.
inline bool planar_simple(const CharLine& line) {
    const int n = line.size();
    double hmin = 1e300, hmax = -1e300, prev = 0.0, unwrapped = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        const Vec3 d = line.point(i + 1) - line.point(i);
        const double h = std::atan2(d.z(), d.x());
        unwrapped = i == 0 ? h : unwrapped + std::remainder(h - prev, 2.0 * std::numbers::pi);
        prev = h;
        hmin = std::min(hmin, unwrapped);
        hmax = std::max(hmax, unwrapped);
    }
    // headings within a half-turn make the curve monotone along a direction
    if (hmax - hmin < std::numbers::pi - 1e-9) return true;
    auto orient = [](const Vec2& a, const Vec2& b, const Vec2& c) {
        return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
    };
    auto p2 = [&](int i) { return Vec2(line.points(i, 0), line.points(i, 2)); };
    for (int i = 0; i + 1 < n; ++i)
        for (int j = i + 2; j + 1 < n; ++j) {
            const Vec2 a = p2(i), b = p2(i + 1), c = p2(j), d = p2(j + 1);
            if (orient(a, b, c) * orient(a, b, d) < 0 && orient(c, d, a) * orient(c, d, b) < 0) return false;
        }
    return true;
}

inline CharLine straight_line(double L0, int M) {
    Points3 p = Points3::Zero(M, 3);
    for (int i = 0; i < M; ++i) p(i, 0) = L0 * static_cast<double>(i) / static_cast<double>(M - 1);
    return CharLine(std::move(p));
}

/// Deterministic instance for a seed. Mold draws that self-intersect are
/// redrawn up to 100 times.
inline ProblemInstance sample_instance(std::uint64_t seed, const GeneratorConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);
    using detail::uniform;
    ProblemInstance inst;
    inst.seed = seed;
    inst.L0 = uniform(rng, cfg.L0);

    inst.family = static_cast<SectionFamily>(rng() % 3);
    const double w = uniform(rng, cfg.width), h = uniform(rng, cfg.height), t = uniform(rng, cfg.thickness);
    const double cf = uniform(rng, cfg.corner_fraction);
    switch (inst.family) {
        case SectionFamily::RoundedRect: inst.section = rounded_rectangle(w, h, cf * std::min(w, h)); break;
        case SectionFamily::LProfile: inst.section = l_profile(w, h, t); break;
        case SectionFamily::Channel: inst.section = channel_profile(w, h, t); break;
    }
    inst.sdf = polygon_sdf(inst.section, cfg.sdf_H, cfg.sdf_W);

    inst.material = {uniform(rng, cfg.E), uniform(rng, cfg.sigma_y), uniform(rng, cfg.eta), uniform(rng, cfg.lam)};
    inst.material.validate();

    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        inst.mold = MoldCurve{};
        inst.mold.a = uniform(rng, cfg.mold_a);
        inst.mold.b = uniform(rng, cfg.mold_b);
        inst.mold.c = uniform(rng, cfg.mold_c);
        inst.mold.omega = uniform(rng, cfg.mold_omega);
        inst.mold.length = inst.L0 * cfg.mold_length_factor;
        inst.mold_line = mold_polyline(inst.mold, cfg.M - 1);
        ok = planar_simple(inst.mold_line);
    }
    if (!ok) throw DataError("seed " + std::to_string(seed) + ": no simple mold after 100 draws");

    inst.motion.p = {uniform(rng, cfg.d_x),     uniform(rng, cfg.d_y),     uniform(rng, cfg.d_z),
                     uniform(rng, cfg.theta_x), uniform(rng, cfg.theta_y), uniform(rng, cfg.theta_z)};
    inst.init_line = straight_line(inst.L0, cfg.M);
    return inst;
}

// ---------------------------------------------------------------------------
// Mechanics
// ---------------------------------------------------------------------------

struct LoadedState {
    std::vector<double> kappa;  // per-segment cell-averaged loaded curvature
    double eps = 0.0;           // axial stretch
};

inline double contact_arc(const ProblemInstance& inst, const GeneratorConfig& cfg) {
    const auto& m = inst.motion;
    const double s = cfg.beta1 * std::abs(m.theta_y()) + cfg.beta2 * std::hypot(m.dx(), m.dz());
    return std::clamp(s, 0.0, std::min(inst.L0, inst.mold.length));
}

inline LoadedState loaded_curvature(const ProblemInstance& inst, const FidelityLevel& fid, const GeneratorConfig& cfg) {
    fid.validate();
    LoadedState st;
    const double sc = contact_arc(inst, cfg);
    const double ds = inst.L0 / fid.n_seg;
    st.kappa.resize(static_cast<std::size_t>(fid.n_seg));
    for (int i = 0; i < fid.n_seg; ++i) {
        const double s0 = i * ds, s1 = std::min((i + 1) * ds, sc);
        st.kappa[static_cast<std::size_t>(i)] = s1 > s0 ? (inst.mold.integral(s1) - inst.mold.integral(s0)) / ds : 0.0;
    }
    st.eps = std::max(0.0, cfg.eps0 + cfg.gamma * inst.motion.dx() / inst.L0);
    return st;
}

inline double yield_curvature(const Material& mat, const SectionProps& props) { return mat.sigma_y / (mat.E * props.c); }

/// Bilinear moment divided by EI (a curvature).
inline double moment_over_EI(double kappa, double kappa_y, double eta) {
    const double a = std::abs(kappa);
    if (a <= kappa_y) return kappa;
    return std::copysign(kappa_y + eta * (a - kappa_y), kappa);
}

inline std::vector<double> springback(std::span<const double> kappa_load, const Material& mat, const SectionProps& props,
                                      double eps, const FidelityLevel& fid, double c0 = 0.85) {
    std::vector<double> out(kappa_load.size());
    const double ky = yield_curvature(mat, props);
    const double soften = fid.stretch_coupling ? 1.0 + mat.lam * eps : 1.0;
    for (std::size_t i = 0; i < kappa_load.size(); ++i) {
        const double k = kappa_load[i];
        const double recovery = fid.exact_unloading ? moment_over_EI(k, ky, mat.eta) / soften : c0 * k;
        out[i] = k - recovery;
    }
    return out;
}

/// Incremental elastoplastic reference: loads to kappa_load in `steps`
/// increments with a 1D return map (isotropic hardening reproducing the
/// post-yield tangent eta EI), then removes the moment in `steps` equal
/// decrements along EI. Test oracle only.
inline double unload_oracle(double kappa_load, const Material& mat, const SectionProps& props, int steps) {
    if (steps < 10) throw DataError("unload_oracle needs steps >= 10");
    const double EI = mat.E * props.inertia;
    const double My = EI * yield_curvature(mat, props);
    const double Hp = mat.eta * EI / (1.0 - mat.eta);
    double moment = 0.0, kp = 0.0, alpha = 0.0, kappa = 0.0;
    for (int i = 1; i <= steps; ++i) {
        kappa = kappa_load * static_cast<double>(i) / static_cast<double>(steps);
        const double trial = EI * (kappa - kp);
        const double f = std::abs(trial) - (My + Hp * alpha);
        if (f > 0.0) {
            const double dg = f / (EI + Hp);
            const double sgn = trial >= 0.0 ? 1.0 : -1.0;
            moment = trial - EI * dg * sgn;
            kp += dg * sgn;
            alpha += dg;
        } else {
            moment = trial;
        }
    }
    // compensated sum: 1e5 plain decrements drift by ~1e-12 of kappa
    const double dk = -moment / steps / EI;
    double carry = 0.0;
    for (int i = 0; i < steps; ++i) {
        const double y = dk - carry;
        const double next = kappa + y;
        carry = (next - kappa) - y;
        kappa = next;
    }
    return kappa;
}

/// Final-state characteristic line of the workpiece, resampled to inst.M().
inline CharLine simulate(const ProblemInstance& inst, const FidelityLevel& fid, const GeneratorConfig& cfg) {
    const LoadedState st = loaded_curvature(inst, fid, cfg);
    const SectionProps props = section_props(inst.section);
    const auto kr = springback(st.kappa, inst.material, props, st.eps, fid, cfg.c0);
    const double eps_p = std::max(0.0, st.eps - inst.material.sigma_y / inst.material.E);
    const double ds = inst.L0 / fid.n_seg;
    std::vector<double> seg(static_cast<std::size_t>(fid.n_seg), ds * (1.0 + eps_p));
    std::vector<double> y(static_cast<std::size_t>(fid.n_seg));
    const double lift = cfg.alpha1 * inst.motion.theta_x() + cfg.alpha2 * inst.motion.dy();
    for (int i = 0; i < fid.n_seg; ++i) {
        const double frac = (i + 1) * ds / inst.L0;
        y[static_cast<std::size_t>(i)] = lift * frac * frac * inst.L0;
    }
    const Pose0 head{inst.init_line.point(0), 0.0};
    return resample_line(line_from_curvature(kr, seg, head, y), inst.M());
}

/// Clamp motion from the involute of the mold's osculating circle at the
/// head. In circle-centred coordinates the clamp sits at
/// R (cos t + t sin t, sin t - t cos t), t = unwind_len / R; the returned
/// displacement is relative to the tangency start point (R, 0).
inline MotionParams involute_init(const MoldCurve& mold, double unwind_len) {
    MotionParams p;
    const double a = mold.head_curvature();
    if (a == 0.0 || unwind_len == 0.0) return p;
    const double R = 1.0 / std::abs(a);
    const double t = unwind_len / R;
    const double sgn = a > 0.0 ? 1.0 : -1.0;
    p.p[0] = R * (std::cos(t) + t * std::sin(t)) - R;
    p.p[2] = sgn * R * (std::sin(t) - t * std::cos(t));
    p.p[4] = sgn * t;
    return p;
}

} // namespace fildeep
