#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "boxcal/geometry.hpp"
#include "boxcal/procrustes.hpp"
#include "boxcal/segnet.hpp"
#include "boxcal/structure.hpp"

namespace boxcal {

struct View {
    std::string camera_id;
    DepthMap depth;
    Intrinsics intrinsics;
    std::optional<RigidPose> gt_pose;       // for evaluation only
    std::optional<LabelMap> gt_labels;      // for GT-label calibration runs
};

struct ViewSet {
    std::vector<View> views;
    void validate() const;  // unique camera ids, consistent dims per view
};

struct PoseEstimate {
    RigidPose pose;  // camera -> GCS
    int visible_sides = 0;
    double residual_rmse = 0.0;          // aligned keypoints vs side centers
    std::vector<int> side_pixel_counts;  // per class 1..K
};

/// Labels → hard correspondences → Kabsch against the model's side
/// centers. Throws DegenerateConfiguration when the view does not pin
/// down a pose.
PoseEstimate estimate_pose_from_labels(const LabelMap& labels, const DepthMap& depth,
                                       const Intrinsics& k, const StructureModel& model,
                                       int min_pixels);

/// Full pipeline: network forward → argmax labels → hard correspondences
/// → Kabsch. Identical to composing the stages by hand.
template <typename T>
PoseEstimate estimate_pose(const DepthMap& depth, const Intrinsics& k, nn::SegNet<T>& net,
                           const StructureModel& model, int min_pixels) {
    const nn::Tensor<T>& prob = net.forward(depth);
    return estimate_pose_from_labels(nn::argmax_labels(prob), depth, k, model, min_pixels);
}

struct IcpConfig {
    int max_iter = 30;
    double max_corr_dist = 0.05;      // m
    int normal_k = 12;                // neighbors for normal estimation
    double convergence_eps = 1e-5;    // max pose increment per sweep
    double anchor_resolution = 0.005;  // structure anchor sampling, m
};

struct CameraDiagnostics {
    bool initial_failed = false;
    std::string failure_reason;
    int visible_sides = 0;
    double kabsch_rmse = 0.0;
    int icp_iterations = 0;
    double icp_rms = 0.0;  // final point-to-plane RMS over accepted pairs
    bool lost_correspondences = false;
};

struct CalibrationResult {
    std::vector<std::string> camera_ids;
    std::vector<RigidPose> initial;
    std::vector<RigidPose> refined;
    std::vector<CameraDiagnostics> diagnostics;
    std::vector<double> sweep_residual_rms;  // global point-to-plane RMS per sweep

    bool any_failed() const {
        for (const auto& d : diagnostics)
            if (d.initial_failed) return true;
        return false;
    }
};

/// Multi-view point-to-plane ICP against the union of the other cameras'
/// clouds plus the structure model as a fixed anchor (which pins the
/// gauge). One sweep linearizes every camera against the rest and
/// applies all increments simultaneously, so the result does not depend
/// on camera order.
CalibrationResult refine_icp(const ViewSet& views, const std::vector<RigidPose>& initial,
                             const StructureModel& model, const IcpConfig& cfg = {});

struct CalibrationOptions {
    int min_pixels = 16;
    IcpConfig icp;
};

/// End-to-end calibration: label each view, estimate initial poses,
/// refine the successful ones. Failed cameras stay in the result with
/// diagnostics; they never disappear silently.
CalibrationResult calibrate(const ViewSet& views, const StructureModel& model,
                            const std::function<LabelMap(const View&)>& labeler,
                            const CalibrationOptions& opts = {});

// JSON document: per camera the initial and refined 4×4 row-major
// camera-to-GCS matrices plus the diagnostics block.
std::string calibration_to_json_text(const CalibrationResult& result);
CalibrationResult calibration_from_json_text(const std::string& text);
void save_calibration(const std::string& path, const CalibrationResult& result);
CalibrationResult load_calibration(const std::string& path);

}  // namespace boxcal
