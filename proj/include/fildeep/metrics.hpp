#pragma once

// Evaluation metrics on characteristic lines: MAD, 3D IoU of the swept
// solids and tail error, plus report assembly.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include <json.hpp>

#include "fildeep/errors.hpp"
#include "fildeep/geometry.hpp"

namespace fildeep {

namespace detail {
inline void check_same_length(const CharLine& a, const CharLine& b, const char* what) {
    if (a.size() != b.size() || a.size() == 0)
        throw DataError(std::string(what) + ": line lengths differ (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
}
} // namespace detail

/// Mean Euclidean distance between index-corresponding points.
inline double mad(const CharLine& pred, const CharLine& gt) {
    detail::check_same_length(pred, gt, "mad");
    return (pred.points - gt.points).rowwise().norm().mean();
}

/// MAD over the last ceil(tail_fraction * M) points.
inline double tail_error(const CharLine& pred, const CharLine& gt, double tail_fraction) {
    detail::check_same_length(pred, gt, "tail_error");
    if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) throw ConfigError("tail_fraction must lie in (0, 1]");
    const int M = pred.size();
    const int n = std::min(M, std::max(1, static_cast<int>(std::ceil(tail_fraction * M - 1e-9))));
    return (pred.points.bottomRows(n) - gt.points.bottomRows(n)).rowwise().norm().mean();
}

/// Default tail: the last of n_regions equal regions.
inline double tail_error_regions(const CharLine& pred, const CharLine& gt, int n_regions) {
    if (n_regions < 1) throw ConfigError("n_regions must be >= 1");
    return tail_error(pred, gt, 1.0 / n_regions);
}

/// Percent overlap of the two swept solids, voxelized on their union box.
inline double iou3d(const CharLine& pred, const CharLine& gt, const Polygon2D& section, int V) {
    const Box3 box = swept_bbox(section, pred).merged(swept_bbox(section, gt));
    const auto a = sweep_voxelize(section, pred, V, box);
    const auto b = sweep_voxelize(section, gt, V, box);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.occupancy.size(); ++i) {
        inter += a.occupancy[i] & b.occupancy[i];
        uni += a.occupancy[i] | b.occupancy[i];
    }
    if (uni == 0) throw DataError("iou3d: empty union");
    return 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

struct InstanceMetrics {
    std::string id;
    double mad_mm = 0.0;
    double iou3d_percent = 0.0;
    double te_mm = 0.0;
};

struct MetricReport {
    double mad_mm = 0.0;
    double iou3d_percent = 0.0;
    double te_mm = 0.0;
    std::vector<InstanceMetrics> per_instance;

    void add(InstanceMetrics m) { per_instance.push_back(std::move(m)); }

    /// Means over per_instance.
    void finalize() {
        mad_mm = iou3d_percent = te_mm = 0.0;
        if (per_instance.empty()) return;
        for (const auto& m : per_instance) {
            mad_mm += m.mad_mm;
            iou3d_percent += m.iou3d_percent;
            te_mm += m.te_mm;
        }
        const double n = static_cast<double>(per_instance.size());
        mad_mm /= n;
        iou3d_percent /= n;
        te_mm /= n;
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& m : per_instance)
            rows.push_back({{"id", m.id}, {"mad_mm", m.mad_mm}, {"iou3d_percent", m.iou3d_percent}, {"te_mm", m.te_mm}});
        return {{"mad_mm", mad_mm}, {"iou3d_percent", iou3d_percent}, {"te_mm", te_mm},
                {"count", per_instance.size()}, {"per_instance", rows}};
    }

    void write_csv(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot open " + path + " for writing");
        os << "id,mad_mm,iou3d_percent,te_mm\n" << std::setprecision(10);
        for (const auto& m : per_instance) os << m.id << ',' << m.mad_mm << ',' << m.iou3d_percent << ',' << m.te_mm << '\n';
    }
};

/// All three metrics for one prediction.
inline InstanceMetrics evaluate_instance(const std::string& id, const CharLine& pred, const CharLine& gt,
                                         const Polygon2D& section, int n_regions, int V) {
    return {id, mad(pred, gt), iou3d(pred, gt, section, V), tail_error_regions(pred, gt, n_regions)};
}

} // namespace fildeep
