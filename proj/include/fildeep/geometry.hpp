#pragma once

// Geometric primitives shared by the simulator, the surrogate model and the
// metrics: cross-section polygons and their signed distance images,
// characteristic lines (ordered 3D point sets), section properties and swept
// solid voxelization.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fildeep/errors.hpp"

namespace fildeep {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using GridD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Cross-section outline in the (u, v) section plane, millimetres,
/// counter-clockwise. `u` is the width axis (maps to world y when swept), `v`
/// the height axis lying in the bending plane.
struct Polygon2D {
    std::vector<Vec2> vertices;

    double signed_area() const {
        double a = 0.0;
        const std::size_t n = vertices.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2& p = vertices[i];
            const Vec2& q = vertices[(i + 1) % n];
            a += p.x() * q.y() - q.x() * p.y();
        }
        return 0.5 * a;
    }

    Polygon2D translated(const Vec2& d) const {
        Polygon2D out = *this;
        for (auto& v : out.vertices) v += d;
        return out;
    }

    Polygon2D scaled(double s) const {
        Polygon2D out = *this;
        for (auto& v : out.vertices) v *= s;
        return out;
    }
};

inline constexpr double kDegenerateArea = 1e-9;

/// Throws DataError unless the polygon has >= 3 vertices, no repeated
/// consecutive vertices and a positive (CCW) area above the degeneracy floor.
inline void validate_polygon(const Polygon2D& poly) {
    const std::size_t n = poly.vertices.size();
    if (n < 3) throw DataError("polygon needs at least 3 vertices, got " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) {
        if (!poly.vertices[i].allFinite()) throw DataError("polygon vertex " + std::to_string(i) + " is not finite");
        if ((poly.vertices[i] - poly.vertices[(i + 1) % n]).norm() == 0.0)
            throw DataError("polygon has repeated consecutive vertex at index " + std::to_string(i));
    }
    const double a = poly.signed_area();
    if (std::abs(a) < kDegenerateArea) throw DataError("degenerate polygon, area " + std::to_string(a) + " mm^2");
    if (a < 0.0) throw DataError("polygon must be counter-clockwise (signed area " + std::to_string(a) + ")");
}

/// Even-odd crossing test. Points exactly on the boundary may land either way.
inline bool point_in_polygon(const Polygon2D& poly, const Vec2& p) {
    bool inside = false;
    const auto& vs = poly.vertices;
    const std::size_t n = vs.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& a = vs[i];
        const Vec2& b = vs[j];
        if ((a.y() > p.y()) != (b.y() > p.y())) {
            const double x = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
            if (p.x() < x) inside = !inside;
        }
    }
    return inside;
}

inline double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
    const Vec2 ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (p - (a + t * ab)).norm();
}

inline double polygon_boundary_distance(const Polygon2D& poly, const Vec2& p) {
    double best = std::numeric_limits<double>::infinity();
    const std::size_t n = poly.vertices.size();
    for (std::size_t i = 0; i < n; ++i)
        best = std::min(best, point_segment_distance(p, poly.vertices[i], poly.vertices[(i + 1) % n]));
    return best;
}

// ---------------------------------------------------------------------------
// Signed distance images
// ---------------------------------------------------------------------------

/// Signed distance image of a section. Row i samples v, column j samples u;
/// cell centres sit at bbox_min + (index + 0.5) * cell. Negative inside.
struct SDFGrid {
    GridD values;                      // H x W
    std::array<double, 4> bbox{};      // u_min, v_min, u_max, v_max

    int H() const { return static_cast<int>(values.rows()); }
    int W() const { return static_cast<int>(values.cols()); }
    double cell_u() const { return (bbox[2] - bbox[0]) / W(); }
    double cell_v() const { return (bbox[3] - bbox[1]) / H(); }
    Vec2 cell_center(int i, int j) const {
        return {bbox[0] + (j + 0.5) * cell_u(), bbox[1] + (i + 0.5) * cell_v()};
    }
};

inline constexpr const char* kSignConvention = "negative_inside";

/// Rasterizes the signed Euclidean distance to the polygon boundary over the
/// polygon bounding box grown by `pad` on every side. A negative `pad` selects
/// the default of 10% of the bounding-box diagonal.
inline SDFGrid polygon_sdf(const Polygon2D& poly, int H, int W, double pad = -1.0) {
    validate_polygon(poly);
    if (H < 8 || W < 8) throw DataError("SDF grid must be at least 8x8");
    Vec2 lo = poly.vertices.front(), hi = lo;
    for (const auto& v : poly.vertices) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
    }
    if (pad < 0.0) pad = 0.1 * (hi - lo).norm();
    SDFGrid g;
    g.bbox = {lo.x() - pad, lo.y() - pad, hi.x() + pad, hi.y() + pad};
    g.values.resize(H, W);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const Vec2 c = g.cell_center(i, j);
            const double d = polygon_boundary_distance(poly, c);
            g.values(i, j) = point_in_polygon(poly, c) ? -d : d;
        }
    }
    return g;
}

inline void write_sdf(std::ostream& os, const SDFGrid& g) {
    nlohmann::json header = {{"H", g.H()},
                             {"W", g.W()},
                             {"bbox", {g.bbox[0], g.bbox[1], g.bbox[2], g.bbox[3]}},
                             {"sign_convention", kSignConvention}};
    os << header.dump() << '\n';
    // little-endian float32, row-major; the targets we build for are all LE.
    static_assert(sizeof(float) == 4);
    for (int i = 0; i < g.H(); ++i) {
        for (int j = 0; j < g.W(); ++j) {
            const float f = static_cast<float>(g.values(i, j));
            os.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
}

inline SDFGrid read_sdf(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("SDF stream missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad SDF header: ") + e.what());
    }
    SDFGrid g;
    const int H = header.at("H").get<int>();
    const int W = header.at("W").get<int>();
    if (H <= 0 || W <= 0) throw DataError("bad SDF shape");
    for (int k = 0; k < 4; ++k) g.bbox[static_cast<std::size_t>(k)] = header.at("bbox").at(static_cast<std::size_t>(k)).get<double>();
    g.values.resize(H, W);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            float f = 0.0f;
            if (!is.read(reinterpret_cast<char*>(&f), sizeof f)) throw DataError("SDF payload truncated");
            g.values(i, j) = f;
        }
    }
    return g;
}

inline void write_sdf(const std::string& path, const SDFGrid& g) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    write_sdf(os, g);
}

inline SDFGrid read_sdf(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    return read_sdf(is);
}

// ---------------------------------------------------------------------------
// Characteristic lines
// ---------------------------------------------------------------------------

/// Ordered head-to-tail 3D point set along a workpiece or mold.
struct CharLine {
    Points3 points;

    CharLine() = default;
    explicit CharLine(Points3 p) : points(std::move(p)) {}

    int size() const { return static_cast<int>(points.rows()); }
    Vec3 point(int i) const { return points.row(i).transpose(); }

    double length() const {
        double s = 0.0;
        for (int i = 1; i < size(); ++i) s += (points.row(i) - points.row(i - 1)).norm();
        return s;
    }

    friend bool operator==(const CharLine& a, const CharLine& b) {
        return a.points.rows() == b.points.rows() && a.points == b.points;
    }
};

inline std::vector<double> cumulative_length(const CharLine& line) {
    std::vector<double> s(static_cast<std::size_t>(line.size()), 0.0);
    for (int i = 1; i < line.size(); ++i)
        s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i - 1)] + (line.points.row(i) - line.points.row(i - 1)).norm();
    return s;
}

/// Piecewise-linear resampling at M uniform arc-length parameters. Both
/// endpoints are reproduced exactly.
inline CharLine resample_line(const CharLine& line, int M) {
    if (M < 2) throw DataError("resample_line needs M >= 2");
    if (line.size() < 2) throw DataError("resample_line needs at least 2 points");
    if (!line.points.allFinite()) throw DataError("resample_line input is not finite");
    const auto s = cumulative_length(line);
    const double total = s.back();
    if (!(total > 0.0)) throw DataError("resample_line got a zero-length polyline");

    Points3 out(M, 3);
    out.row(0) = line.points.row(0);
    out.row(M - 1) = line.points.row(line.size() - 1);
    std::size_t seg = 1;
    for (int k = 1; k < M - 1; ++k) {
        const double target = total * static_cast<double>(k) / static_cast<double>(M - 1);
        while (seg + 1 < s.size() && s[seg] < target) ++seg;
        const double s0 = s[seg - 1], s1 = s[seg];
        const double t = s1 > s0 ? (target - s0) / (s1 - s0) : 0.0;
        const int i0 = static_cast<int>(seg - 1);
        out.row(k) = (1.0 - t) * line.points.row(i0) + t * line.points.row(i0 + 1);
    }
    return CharLine(std::move(out));
}

/// Start of a planar curvature integration: position and heading angle in the
/// x-z plane (0 = +x, positive turns toward +z).
struct Pose0 {
    Vec3 position = Vec3::Zero();
    double heading = 0.0;
};

/// Integrates piecewise-constant curvature into a line. Each segment is an
/// exact circular arc in the x-z plane; the y coordinate of point i+1 is
/// pose0.y + out_of_plane[i]. Returns n + 1 points.
inline CharLine line_from_curvature(std::span<const double> kappa, std::span<const double> seg_len, const Pose0& pose0,
                                    std::span<const double> out_of_plane = {}) {
    const std::size_t n = kappa.size();
    if (n < 1) throw DataError("line_from_curvature needs at least one segment");
    if (seg_len.size() != n) throw DataError("kappa and seg_len sizes differ");
    if (!out_of_plane.empty() && out_of_plane.size() != n) throw DataError("out_of_plane size differs from kappa");
    Points3 pts(static_cast<Eigen::Index>(n + 1), 3);
    double x = pose0.position.x(), z = pose0.position.z(), th = pose0.heading;
    pts.row(0) = pose0.position.transpose();
    for (std::size_t i = 0; i < n; ++i) {
        const double ds = seg_len[i];
        if (!(ds > 0.0)) throw DataError("segment length must be positive");
        const double k = kappa[i];
        const double dth = k * ds;
        if (std::abs(dth) < 1e-8) {
            // second-order series of the arc; exact for k = 0
            const double mid = th + 0.5 * dth;
            x += ds * std::cos(mid);
            z += ds * std::sin(mid);
        } else {
            x += (std::sin(th + dth) - std::sin(th)) / k;
            z += (std::cos(th) - std::cos(th + dth)) / k;
        }
        th += dth;
        const double y = pose0.position.y() + (out_of_plane.empty() ? 0.0 : out_of_plane[i]);
        pts.row(static_cast<Eigen::Index>(i + 1)) << x, y, z;
    }
    return CharLine(std::move(pts));
}

inline void write_line_csv(std::ostream& os, const CharLine& line) {
    os << "x,y,z\n" << std::setprecision(17);
    for (int i = 0; i < line.size(); ++i)
        os << line.points(i, 0) << ',' << line.points(i, 1) << ',' << line.points(i, 2) << '\n';
}

inline CharLine read_line_csv(std::istream& is) {
    std::string row;
    if (!std::getline(is, row)) throw DataError("empty line CSV");
    if (row.rfind("x,y,z", 0) != 0) throw DataError("line CSV header must be x,y,z");
    std::vector<Vec3> pts;
    while (std::getline(is, row)) {
        if (row.empty()) continue;
        std::istringstream ss(row);
        Vec3 p;
        char c1 = 0, c2 = 0;
        if (!(ss >> p.x() >> c1 >> p.y() >> c2 >> p.z()) || c1 != ',' || c2 != ',')
            throw DataError("malformed line CSV row: " + row);
        pts.push_back(p);
    }
    Points3 m(static_cast<Eigen::Index>(pts.size()), 3);
    for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    return CharLine(std::move(m));
}

inline void write_line_csv(const std::string& path, const CharLine& line) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path + " for writing");
    write_line_csv(os, line);
}

inline CharLine read_line_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path);
    return read_line_csv(is);
}

// ---------------------------------------------------------------------------
// Section properties
// ---------------------------------------------------------------------------

struct SectionProps {
    double area = 0.0;     // mm^2
    double inertia = 0.0;  // mm^4, about the centroidal u axis
    double c = 0.0;        // mm, extreme fibre distance along v
    Vec2 centroid = Vec2::Zero();
};

inline Vec2 polygon_centroid(const Polygon2D& poly) {
    // shift to the first vertex for conditioning
    const Vec2 o = poly.vertices.front();
    double a = 0.0;
    Vec2 m = Vec2::Zero();
    const std::size_t n = poly.vertices.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 p = poly.vertices[i] - o;
        const Vec2 q = poly.vertices[(i + 1) % n] - o;
        const double cr = p.x() * q.y() - q.x() * p.y();
        a += cr;
        m += cr * (p + q);
    }
    return o + m / (3.0 * a);
}

/// Exact polygon area and centroidal second moment about the u axis
/// (bending in the x-z plane).
inline SectionProps section_props(const Polygon2D& poly) {
    validate_polygon(poly);
    SectionProps sp;
    sp.centroid = polygon_centroid(poly);
    const std::size_t n = poly.vertices.size();
    double a2 = 0.0, ivv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2 p = poly.vertices[i] - sp.centroid;
        const Vec2 q = poly.vertices[(i + 1) % n] - sp.centroid;
        const double cr = p.x() * q.y() - q.x() * p.y();
        a2 += cr;
        ivv += cr * (p.y() * p.y() + p.y() * q.y() + q.y() * q.y());
        sp.c = std::max(sp.c, std::abs(p.y()));
    }
    sp.area = 0.5 * a2;
    sp.inertia = ivv / 12.0;
    return sp;
}

// ---------------------------------------------------------------------------
// Rotation-minimizing frames and swept-solid voxelization
// ---------------------------------------------------------------------------

struct Frame {
    Vec3 origin;
    Vec3 t;  // tangent
    Vec3 r;  // section u axis
    Vec3 s;  // section v axis, t x r
};

/// Double-reflection rotation-minimizing frames along the line. The first
/// frame's r axis is +y projected off the starting tangent.
inline std::vector<Frame> rotation_minimizing_frames(const CharLine& line) {
    const int n = line.size();
    if (n < 2) throw DataError("frames need at least 2 points");
    std::vector<Vec3> tan(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int a = std::max(0, i - 1), b = std::min(n - 1, i + 1);
        Vec3 d = line.point(b) - line.point(a);
        if (d.norm() == 0.0) throw DataError("line has coincident consecutive points");
        tan[static_cast<std::size_t>(i)] = d.normalized();
    }
    std::vector<Frame> frames(static_cast<std::size_t>(n));
    Vec3 r = Vec3::UnitY() - Vec3::UnitY().dot(tan[0]) * tan[0];
    if (r.norm() < 1e-9) r = Vec3::UnitZ() - Vec3::UnitZ().dot(tan[0]) * tan[0];
    r.normalize();
    for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (i > 0) {
            const Vec3 v1 = line.point(i) - line.point(i - 1);
            const double c1 = v1.squaredNorm();
            const Vec3 rl = r - (2.0 / c1) * v1.dot(r) * v1;
            const Vec3 tl = tan[ui - 1] - (2.0 / c1) * v1.dot(tan[ui - 1]) * v1;
            const Vec3 v2 = tan[ui] - tl;
            const double c2 = v2.squaredNorm();
            r = c2 > 1e-30 ? Vec3(rl - (2.0 / c2) * v2.dot(rl) * v2) : rl;
            r = (r - r.dot(tan[ui]) * tan[ui]).normalized();
        }
        frames[ui] = {line.point(i), tan[ui], r, tan[ui].cross(r)};
    }
    return frames;
}

struct Box3 {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Zero();

    Box3 merged(const Box3& o) const { return {lo.cwiseMin(o.lo), hi.cwiseMax(o.hi)}; }
};

struct VoxelGrid {
    int V = 0;
    Box3 box;
    std::vector<std::uint8_t> occupancy;  // x fastest, then y, then z

    std::size_t index(int ix, int iy, int iz) const {
        return static_cast<std::size_t>(ix) + static_cast<std::size_t>(V) * (static_cast<std::size_t>(iy) + static_cast<std::size_t>(V) * static_cast<std::size_t>(iz));
    }
    Vec3 voxel_size() const { return (box.hi - box.lo) / static_cast<double>(V); }
    std::size_t count() const {
        return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), std::uint8_t{1}));
    }
    double occupied_volume() const { return static_cast<double>(count()) * voxel_size().prod(); }
};

inline double section_radius(const Polygon2D& section, const Vec2& centroid) {
    double r = 0.0;
    for (const auto& v : section.vertices) r = std::max(r, (v - centroid).norm());
    return r;
}

/// Axis-aligned box enclosing the solid swept by `section` along `line`.
inline Box3 swept_bbox(const Polygon2D& section, const CharLine& line) {
    validate_polygon(section);
    const double rad = section_radius(section, polygon_centroid(section));
    Box3 b{line.points.colwise().minCoeff().transpose(), line.points.colwise().maxCoeff().transpose()};
    b.lo.array() -= rad;
    b.hi.array() += rad;
    return b;
}

/// Voxelizes the constant-section sweep on the given box with V cells per
/// axis. The line is attached to the section centroid. A voxel is occupied iff
/// its centre, expressed in the nearest rotation-minimizing frame, lies inside
/// the section and within that frame's half-spacing along the tangent.
inline VoxelGrid sweep_voxelize(const Polygon2D& section, const CharLine& line, int V, const Box3& box) {
    validate_polygon(section);
    if (V < 16) throw DataError("sweep_voxelize needs V >= 16");
    if (line.size() < 2 || !line.points.allFinite()) throw DataError("sweep_voxelize needs a finite line of >= 2 points");
    VoxelGrid g;
    g.V = V;
    g.box = box;
    const Vec3 vs = g.voxel_size();
    if (!(vs.minCoeff() > 0.0)) throw DataError("sweep_voxelize box is degenerate");
    const double len = line.length();
    if (len < vs.maxCoeff()) throw DataError("line shorter than one voxel");

    const Vec2 centroid = polygon_centroid(section);
    const double rad = section_radius(section, centroid);
    // frames no further apart than half the finest voxel edge
    const double spacing = 0.5 * std::min(vs.minCoeff(), rad > 0 ? rad : vs.minCoeff());
    const int n = std::clamp(static_cast<int>(std::ceil(len / spacing)) + 1, line.size(), 8192);
    const CharLine dense = resample_line(line, n);
    const auto frames = rotation_minimizing_frames(dense);
    const double half = 0.5 * len / static_cast<double>(n - 1);

    const std::size_t total = static_cast<std::size_t>(V) * static_cast<std::size_t>(V) * static_cast<std::size_t>(V);
    std::vector<float> best(total, std::numeric_limits<float>::infinity());
    std::vector<std::int32_t> owner(total, -1);
    const double reach = std::sqrt(rad * rad + half * half) + 1e-9;
    auto center = [&](int ix, int iy, int iz) {
        return Vec3(box.lo.x() + (ix + 0.5) * vs.x(), box.lo.y() + (iy + 0.5) * vs.y(), box.lo.z() + (iz + 0.5) * vs.z());
    };
    auto lo_index = [&](double x, int axis) {
        return std::max(0, static_cast<int>(std::floor((x - box.lo[axis]) / vs[axis] - 0.5)));
    };
    auto hi_index = [&](double x, int axis) {
        return std::min(V - 1, static_cast<int>(std::ceil((x - box.lo[axis]) / vs[axis] - 0.5)));
    };
    for (int f = 0; f < n; ++f) {
        const Vec3& o = frames[static_cast<std::size_t>(f)].origin;
        const int x0 = lo_index(o.x() - reach, 0), x1 = hi_index(o.x() + reach, 0);
        const int y0 = lo_index(o.y() - reach, 1), y1 = hi_index(o.y() + reach, 1);
        const int z0 = lo_index(o.z() - reach, 2), z1 = hi_index(o.z() + reach, 2);
        for (int iz = z0; iz <= z1; ++iz)
            for (int iy = y0; iy <= y1; ++iy)
                for (int ix = x0; ix <= x1; ++ix) {
                    const float d2 = static_cast<float>((center(ix, iy, iz) - o).squaredNorm());
                    const std::size_t k = g.index(ix, iy, iz);
                    if (d2 < best[k]) {
                        best[k] = d2;
                        owner[k] = f;
                    }
                }
    }
    g.occupancy.assign(total, 0);
    for (int iz = 0; iz < V; ++iz)
        for (int iy = 0; iy < V; ++iy)
            for (int ix = 0; ix < V; ++ix) {
                const std::size_t k = g.index(ix, iy, iz);
                if (owner[k] < 0) continue;
                const Frame& fr = frames[static_cast<std::size_t>(owner[k])];
                const Vec3 d = center(ix, iy, iz) - fr.origin;
                if (std::abs(d.dot(fr.t)) > half * (1.0 + 1e-9)) continue;
                const Vec2 uv(centroid.x() + d.dot(fr.r), centroid.y() + d.dot(fr.s));
                if (point_in_polygon(section, uv)) g.occupancy[k] = 1;
            }
    return g;
}

inline VoxelGrid sweep_voxelize(const Polygon2D& section, const CharLine& line, int V) {
    return sweep_voxelize(section, line, V, swept_bbox(section, line));
}

} // namespace fildeep
