#pragma once

#include <string>
#include <vector>

#include "boxcal/calibration.hpp"
#include "boxcal/geometry.hpp"
#include "boxcal/metrics.hpp"
#include "boxcal/segnet.hpp"
#include "boxcal/structure.hpp"

namespace boxcal {

/// A reasonable spread of synthetic pinhole intrinsics at the requested
/// resolution (the real sensor pool is configurable, not built in).
std::vector<Intrinsics> default_intrinsics_pool(int width, int height);

struct RenderedSample {
    DepthMap depth;       // augmented
    LabelMap labels;      // clean ground truth
    RigidPose gt_pose;    // camera -> GCS
    int intrinsics_index = 0;
};

/// Canonical per-seed sample generation: one RNG drives the intrinsics
/// pick, the pose, and the noise, so a recorded seed reproduces the
/// sample bit for bit.
RenderedSample render_sample(const StructureModel& model, const PoseSamplerConfig& sampler,
                             const NoiseConfig& noise, const std::vector<Intrinsics>& pool,
                             std::uint64_t seed);

struct SampleRecord {
    int id = 0;
    std::uint64_t seed = 0;
    int intrinsics_index = 0;
    std::string depth_file;
    std::string label_file;
    RigidPose gt_pose;
};

struct DatasetManifest {
    std::string dir;  // directory holding the rasters (not serialized)
    int width = 0;
    int height = 0;
    std::uint64_t master_seed = 0;
    std::string structure_file;
    std::vector<Intrinsics> intrinsics_pool;
    PoseSamplerConfig sampler;
    NoiseConfig noise;
    std::vector<SampleRecord> samples;
};

/// Render `count` samples into out_dir: depth rasters (16-bit mm), label
/// rasters (8-bit ids), the structure description, and manifest.json.
/// Deterministic per master seed, including across worker counts.
DatasetManifest gen_dataset(const StructureModel& model, const PoseSamplerConfig& sampler,
                            const NoiseConfig& noise, const std::vector<Intrinsics>& pool,
                            int count, std::uint64_t master_seed, const std::string& out_dir);

void save_manifest(const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& manifest_path);

DepthMap load_sample_depth(const DatasetManifest& m, const SampleRecord& s);
LabelMap load_sample_labels(const DatasetManifest& m, const SampleRecord& s);

/// Views (with GT poses and labels) from a recorded dataset.
ViewSet views_from_manifest(const DatasetManifest& manifest, const StructureModel& model);

/// Training sources for nn::train: live rendering or a recorded dataset
/// (indexed by seed).
nn::SampleSource live_sample_source(const StructureModel& model, const PoseSamplerConfig& sampler,
                                    const NoiseConfig& noise, std::vector<Intrinsics> pool);
nn::SampleSource dataset_sample_source(const DatasetManifest& manifest);

/// ASCII PLY of the given clouds, one fixed palette color per cloud.
void export_ply(const std::string& path, const std::vector<PointCloud>& per_camera_clouds);

/// Per-camera clouds under the given poses (skipping cameras whose
/// initial estimate failed when skip_failed is set).
std::vector<PointCloud> fuse_views(const ViewSet& views, const std::vector<RigidPose>& poses,
                                   const std::vector<CameraDiagnostics>& diagnostics,
                                   bool skip_failed = true);

struct EvalOptions {
    int min_pixels = 16;
    double structure_resolution = 0.005;  // m, reference cloud sampling
};

/// Score a calibration against a view set: Eq.-style RMS and Hausdorff
/// RMS of the fused cloud vs the structure, plus per-camera
/// mIoU-by-rerender and correspondence RMSE, for both the initial and
/// the refined poses.
std::vector<MetricReport> evaluate_calibration(const ViewSet& views,
                                               const CalibrationResult& calib,
                                               const StructureModel& model,
                                               const EvalOptions& opts = {});

}  // namespace boxcal
