#pragma once

#include <string>
#include <vector>

#include "boxcal/geometry.hpp"
#include "boxcal/procrustes.hpp"
#include "boxcal/structure.hpp"

namespace boxcal {

/// Per-sample metric values with the summary statistics the evaluation
/// tables report: mean, standard deviation, and relative standard
/// deviation (STD/mean). STD is the population deviation.
struct MetricReport {
    std::string name;
    std::vector<double> values;

    double mean() const;
    double stddev() const;
    double rsd() const;  // stddev / mean; 0 when mean == 0
};

struct MiouOptions {
    bool include_background = false;
};

/// Mean intersection-over-union across the classes present in either
/// map. Background (class 0) is excluded unless asked for.
double miou(const LabelMap& a, const LabelMap& b, int class_count, const MiouOptions& opts = {});

/// Pose-aware segmentation score: re-render the structure's labels from
/// the estimated pose and compare with the prediction.
double miou_rerender(const LabelMap& predicted, const StructureModel& model,
                     const RigidPose& estimated_pose, const Intrinsics& k,
                     const MiouOptions& opts = {});

/// RMSE over visible columns between the aligned keypoints R·C+t and S.
double rmse_corr(const Correspondences& c, const Eigen::Matrix3Xd& s, const VisibilityMask& m,
                 const RigidPose& pose);

/// RMS point-cloud distance sqrt(1/N Σ_{v∈A} min_{u∈B} ||v−u||²), N = |A|.
/// Not symmetric; hausdorff_rms takes the max of both directions.
double rms_dist(const PointCloud& a, const PointCloud& b);
double hausdorff_rms(const PointCloud& a, const PointCloud& b);

/// Report serialization: one CSV row per sample plus a JSON summary with
/// mean/STD/RSD per metric.
void save_reports_csv(const std::string& path, const std::vector<MetricReport>& reports);
void save_reports_json(const std::string& path, const std::vector<MetricReport>& reports);

}  // namespace boxcal
