#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include "boxcal/geometry.hpp"
#include "boxcal/procrustes.hpp"
#include "boxcal/rng.hpp"

namespace boxcal {

/// Axis-aligned box in the structure's global coordinate system (GCS:
/// origin at the structure center, y up).
struct BoxSpec {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    Eigen::Vector3d half_extents = Eigen::Vector3d::Zero();
};

/// Face of a box: +x, −x, +y, −y, +z, −z in this canonical order.
enum class Face : int { pos_x = 0, neg_x, pos_y, neg_y, pos_z, neg_z };

constexpr std::array<const char*, 6> kFaceNames = {"+x", "-x", "+y", "-y", "+z", "-z"};

inline int face_axis(Face f) { return static_cast<int>(f) / 2; }
inline double face_sign(Face f) { return (static_cast<int>(f) % 2 == 0) ? 1.0 : -1.0; }

struct FaceRef {
    int box = 0;
    Face face = Face::pos_x;
    bool operator==(const FaceRef&) const = default;
};

/// The virtual calibration structure: boxes, the ordered labeled sides
/// (box index major, face minor), and their centers S. Excluded faces
/// still occlude rays but render as background.
class StructureModel {
public:
    static StructureModel from_boxes(std::vector<BoxSpec> boxes, std::vector<FaceRef> excluded);

    /// Four 0.56×0.36×0.36 m boxes, three in an L on the floor and one
    /// stacked; the three floor-contacting faces are excluded, K = 21.
    static StructureModel default_structure();

    const std::vector<BoxSpec>& boxes() const { return boxes_; }
    const std::vector<FaceRef>& labeled_sides() const { return labeled_; }
    const std::vector<FaceRef>& excluded_sides() const { return excluded_; }

    int side_count() const { return static_cast<int>(labeled_.size()); }  // K
    const Eigen::Matrix3Xd& side_centers() const { return side_centers_; }  // S, 3×K

    /// Class id for a face: 1..K for labeled sides, 0 for excluded.
    int class_of(const FaceRef& face) const;
    FaceRef face_of_class(int class_id) const;  // class_id in 1..K

    Eigen::Vector3d face_center(const FaceRef& face) const;
    Eigen::Vector3d face_normal(const FaceRef& face) const;

    bool contains(const Eigen::Vector3d& p, double margin = 0.0) const;

private:
    std::vector<BoxSpec> boxes_;
    std::vector<FaceRef> labeled_;
    std::vector<FaceRef> excluded_;
    Eigen::Matrix3Xd side_centers_;
    std::vector<int> class_table_;  // per (box*6+face), 0 = excluded
};

// JSON structure description, schema "boxcal-structure-v1".
StructureModel structure_from_json_text(const std::string& text);
std::string structure_to_json_text(const StructureModel& model);
StructureModel load_structure(const std::string& path);
void save_structure(const std::string& path, const StructureModel& model);

/// Cylindrical camera pose sampler around the structure.
struct PoseSamplerConfig {
    double rho_min = 1.50, rho_max = 2.25;    // sensor-to-structure range, m
    double phi_min_deg = 0.0, phi_max_deg = 360.0;
    double z_min = -0.15, z_max = 0.75;       // height relative to GCS origin, m
    double look_radius = 0.20;                 // look-at target radius around origin, m
    double max_roll_deg = 5.0;

    void validate() const;
};

/// Sample a camera-to-GCS pose: position uniform in (ρ, φ, z), look-at
/// target uniform in a ball of look_radius around the origin, camera x
/// first made parallel to the GCS x–z plane (y down, z = look direction),
/// then a roll about camera z uniform in ±max_roll.
RigidPose sample_pose(const PoseSamplerConfig& cfg, Rng& rng);

/// Ray-cast depth and label maps. Depth is camera-space z in meters,
/// misses are depth 0 / background. Throws if the camera sits inside a
/// box.
std::pair<DepthMap, LabelMap> render(const StructureModel& model, const RigidPose& camera_to_gcs,
                                     const Intrinsics& k);

/// Depth-sensor noise model: zero-depth erosion around label
/// discontinuities plus circular dropout holes. Uniform distributions
/// over the closed ranges below; all-zero config is a no-op.
struct NoiseConfig {
    int erosion_min = 0, erosion_max = 0;      // border erosion width, px
    int holes_min = 0, holes_max = 0;          // hole count per image
    double hole_radius_min = 0.0, hole_radius_max = 0.0;  // px
    std::uint64_t seed = 0;

    void validate() const;
    bool is_zero() const {
        return erosion_max == 0 && holes_max == 0;
    }
};

/// Returns a copy of depth with noise applied. Labels stay untouched
/// (ground truth remains clean) and no zero pixel ever becomes nonzero.
DepthMap augment(const DepthMap& depth, const LabelMap& labels, const NoiseConfig& cfg, Rng& rng);

/// Ground-truth visibility: side k visible iff its pixel count reaches
/// min_pixels.
VisibilityMask visibility_mask(const LabelMap& labels, const StructureModel& model, int min_pixels);

/// Uniformly sample the structure's surface at the given spacing,
/// skipping points buried inside another box. Used as the fixed ICP
/// anchor and as the reference cloud for Eq.-style RMS metrics.
PointCloud sample_surface(const StructureModel& model, double resolution);

}  // namespace boxcal
