#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace boxcal {

/// Pinhole camera intrinsics. Image convention: u = column, v = row,
/// origin at the top-left pixel.
struct Intrinsics {
    double fx = 0.0;
    double fy = 0.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;

    Intrinsics() = default;
    Intrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h);

    /// Scale to a different resolution, keeping the field of view.
    Intrinsics scaled(int new_width, int new_height) const;
};

/// Rigid transform, rotation + translation in meters. Used both for
/// camera-to-GCS poses and for generic frame changes.
class RigidPose {
public:
    RigidPose() : rotation_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}
    RigidPose(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);

    static RigidPose identity() { return RigidPose(); }

    const Eigen::Matrix3d& rotation() const { return rotation_; }
    const Eigen::Vector3d& translation() const { return translation_; }

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation_ * p + translation_; }

    Eigen::Matrix4d matrix() const;
    static RigidPose from_matrix(const Eigen::Matrix4d& m);

    /// Nearest rotation (polar decomposition) for drift cleanup after
    /// iterative updates.
    RigidPose orthonormalized() const;

private:
    Eigen::Matrix3d rotation_;
    Eigen::Vector3d translation_;
};

RigidPose compose(const RigidPose& a, const RigidPose& b);  // (a ∘ b)(p) = a(b(p))
RigidPose invert(const RigidPose& a);

/// Geodesic distance between the rotations of two poses, radians.
double rotation_angle_between(const RigidPose& a, const RigidPose& b);

/// Depth values in meters, row-major H×W. 0 marks an invalid pixel.
class DepthMap {
public:
    DepthMap() = default;
    DepthMap(int width, int height, double fill = 0.0);

    int width() const { return width_; }
    int height() const { return height_; }
    double at(int v, int u) const { return data_[static_cast<size_t>(v) * width_ + u]; }
    double& at(int v, int u) { return data_[static_cast<size_t>(v) * width_ + u]; }
    bool valid(int v, int u) const { return at(v, u) > 0.0; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> data_;
};

/// Per-pixel 3D coordinates in camera space, with validity mirroring the
/// source depth map.
class VertexMap {
public:
    VertexMap() = default;
    VertexMap(int width, int height);

    int width() const { return width_; }
    int height() const { return height_; }
    bool valid(int v, int u) const { return valid_[static_cast<size_t>(v) * width_ + u] != 0; }
    void set_valid(int v, int u, bool ok) { valid_[static_cast<size_t>(v) * width_ + u] = ok ? 1 : 0; }

    Eigen::Vector3d point(int v, int u) const {
        const size_t i = (static_cast<size_t>(v) * width_ + u) * 3;
        return {coords_[i], coords_[i + 1], coords_[i + 2]};
    }
    void set_point(int v, int u, const Eigen::Vector3d& p) {
        const size_t i = (static_cast<size_t>(v) * width_ + u) * 3;
        coords_[i] = p.x();
        coords_[i + 1] = p.y();
        coords_[i + 2] = p.z();
    }

    size_t valid_count() const;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> coords_;      // interleaved xyz
    std::vector<std::uint8_t> valid_;
};

/// Per-pixel class ids, row-major H×W. 0 is background, 1..K are the
/// labeled box sides.
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(int width, int height, std::uint8_t fill = 0);

    int width() const { return width_; }
    int height() const { return height_; }
    std::uint8_t at(int v, int u) const { return data_[static_cast<size_t>(v) * width_ + u]; }
    std::uint8_t& at(int v, int u) { return data_[static_cast<size_t>(v) * width_ + u]; }

    const std::vector<std::uint8_t>& data() const { return data_; }
    std::vector<std::uint8_t>& data() { return data_; }

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Point list in meters with optional per-point unit normals.
struct PointCloud {
    std::vector<Eigen::Vector3d> points;
    std::vector<Eigen::Vector3d> normals;  // empty or same size as points

    bool has_normals() const { return !normals.empty(); }
    size_t size() const { return points.size(); }
};

/// De-project a depth map through the inverse pinhole model.
/// Zero-depth pixels are flagged invalid.
VertexMap deproject(const DepthMap& depth, const Intrinsics& k);

/// Apply a rigid pose to every point (and rotate normals, if present).
PointCloud transform(const RigidPose& pose, const PointCloud& cloud);

/// Collect the valid pixels of a vertex map into a point cloud.
PointCloud to_point_cloud(const VertexMap& vm);

// ---------------------------------------------------------------------------
// Depth raster I/O: little-endian 16-bit unsigned millimeters, row-major.
// Dimensions travel in the dataset manifest, not in the raster itself.
// ---------------------------------------------------------------------------

void save_depth_raster(const std::string& path, const DepthMap& depth);
DepthMap load_depth_raster(const std::string& path, int width, int height);

/// Label rasters are plain 8-bit class ids, row-major.
void save_label_raster(const std::string& path, const LabelMap& labels);
LabelMap load_label_raster(const std::string& path, int width, int height);

}  // namespace boxcal
