#include "boxcal/metrics.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "boxcal/kdtree.hpp"

namespace boxcal {

double MetricReport::mean() const {
    if (values.empty()) return 0.0;
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

double MetricReport::stddev() const {
    if (values.empty()) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(values.size()));
}

double MetricReport::rsd() const {
    const double m = mean();
    return m > 0.0 ? stddev() / m : 0.0;
}

double miou(const LabelMap& a, const LabelMap& b, int class_count, const MiouOptions& opts) {
    if (a.width() != b.width() || a.height() != b.height())
        throw std::invalid_argument("miou: label maps differ in size");
    const int first = opts.include_background ? 0 : 1;
    std::vector<long> inter(static_cast<size_t>(class_count) + 1, 0);
    std::vector<long> uni(static_cast<size_t>(class_count) + 1, 0);
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            const int ca = a.at(y, x), cb = b.at(y, x);
            if (ca == cb) {
                if (ca <= class_count) {
                    inter[static_cast<size_t>(ca)]++;
                    uni[static_cast<size_t>(ca)]++;
                }
            } else {
                if (ca <= class_count) uni[static_cast<size_t>(ca)]++;
                if (cb <= class_count) uni[static_cast<size_t>(cb)]++;
            }
        }
    }
    double sum = 0.0;
    int present = 0;
    for (int c = first; c <= class_count; ++c) {
        if (uni[static_cast<size_t>(c)] == 0) continue;  // class absent from both maps
        sum += static_cast<double>(inter[static_cast<size_t>(c)]) /
               static_cast<double>(uni[static_cast<size_t>(c)]);
        present++;
    }
    return present > 0 ? sum / present : 0.0;
}

double miou_rerender(const LabelMap& predicted, const StructureModel& model,
                     const RigidPose& estimated_pose, const Intrinsics& k,
                     const MiouOptions& opts) {
    const auto [depth, rendered] = render(model, estimated_pose, k);
    (void)depth;
    return miou(predicted, rendered, model.side_count(), opts);
}

double rmse_corr(const Correspondences& c, const Eigen::Matrix3Xd& s, const VisibilityMask& m,
                 const RigidPose& pose) {
    if (c.columns() != static_cast<int>(s.cols()) || c.columns() != m.columns())
        throw std::invalid_argument("rmse_corr: column counts disagree");
    double sum = 0.0;
    int n = 0;
    for (int k = 0; k < c.columns(); ++k) {
        if (!m[k] || !c.valid[static_cast<size_t>(k)]) continue;
        sum += (pose.apply(c.points.col(k)) - s.col(k)).squaredNorm();
        n++;
    }
    if (n == 0) throw std::invalid_argument("rmse_corr: no visible columns");
    return std::sqrt(sum / n);
}

double rms_dist(const PointCloud& a, const PointCloud& b) {
    if (a.points.empty() || b.points.empty())
        throw std::invalid_argument("rms_dist: empty point cloud");
    const KdTree tree(b.points);
    double sum = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : sum)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(a.points.size()); ++i) {
        sum += tree.nearest(a.points[static_cast<size_t>(i)]).squared_dist;
    }
    return std::sqrt(sum / static_cast<double>(a.points.size()));
}

double hausdorff_rms(const PointCloud& a, const PointCloud& b) {
    return std::max(rms_dist(a, b), rms_dist(b, a));
}

void save_reports_csv(const std::string& path, const std::vector<MetricReport>& reports) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_reports_csv: cannot open " + path);
    f << "sample";
    for (const auto& r : reports) f << "," << r.name;
    f << "\n";
    size_t rows = 0;
    for (const auto& r : reports) rows = std::max(rows, r.values.size());
    f.precision(17);
    for (size_t i = 0; i < rows; ++i) {
        f << i;
        for (const auto& r : reports) {
            f << ",";
            if (i < r.values.size()) f << r.values[i];
        }
        f << "\n";
    }
}

void save_reports_json(const std::string& path, const std::vector<MetricReport>& reports) {
    nlohmann::json j;
    j["format"] = "boxcal-metrics-v1";
    j["metrics"] = nlohmann::json::array();
    for (const auto& r : reports) {
        j["metrics"].push_back({{"name", r.name},
                                {"count", r.values.size()},
                                {"mean", r.mean()},
                                {"std", r.stddev()},
                                {"rsd", r.rsd()}});
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_reports_json: cannot open " + path);
    f << j.dump(2) << "\n";
}

}  // namespace boxcal
