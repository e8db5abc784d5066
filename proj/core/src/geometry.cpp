#include "boxcal/geometry.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace boxcal {

Intrinsics::Intrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h)
    : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    if (fx <= 0.0 || fy <= 0.0)
        throw std::invalid_argument("Intrinsics: focal lengths must be positive");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
        throw std::invalid_argument("Intrinsics: principal point outside image");
}

Intrinsics Intrinsics::scaled(int new_width, int new_height) const {
    const double sx = static_cast<double>(new_width) / width;
    const double sy = static_cast<double>(new_height) / height;
    return Intrinsics(fx * sx, fy * sy, cx * sx, cy * sy, new_width, new_height);
}

RigidPose::RigidPose(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
    : rotation_(rotation), translation_(translation) {
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm();
    if (ortho > 1e-9)
        throw std::invalid_argument("RigidPose: rotation not orthonormal (||R'R - I|| = " +
                                    std::to_string(ortho) + ")");
    if (std::abs(rotation.determinant() - 1.0) > 1e-9)
        throw std::invalid_argument("RigidPose: rotation determinant is not +1");
}

Eigen::Matrix4d RigidPose::matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.block<3, 3>(0, 0) = rotation_;
    m.block<3, 1>(0, 3) = translation_;
    return m;
}

RigidPose RigidPose::from_matrix(const Eigen::Matrix4d& m) {
    return RigidPose(m.block<3, 3>(0, 0), m.block<3, 1>(0, 3));
}

RigidPose RigidPose::orthonormalized() const {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(rotation_, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
        Eigen::Matrix3d u = svd.matrixU();
        u.col(2) *= -1.0;
        r = u * svd.matrixV().transpose();
    }
    return RigidPose(r, translation_);
}

RigidPose compose(const RigidPose& a, const RigidPose& b) {
    return RigidPose(a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

RigidPose invert(const RigidPose& a) {
    Eigen::Matrix3d rt = a.rotation().transpose();
    return RigidPose(rt, -(rt * a.translation()));
}

double rotation_angle_between(const RigidPose& a, const RigidPose& b) {
    const Eigen::Matrix3d rel = a.rotation() * b.rotation().transpose();
    const double c = std::clamp((rel.trace() - 1.0) * 0.5, -1.0, 1.0);
    return std::acos(c);
}

DepthMap::DepthMap(int width, int height, double fill)
    : width_(width), height_(height), data_(static_cast<size_t>(width) * height, fill) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("DepthMap: non-positive dimensions");
}

LabelMap::LabelMap(int width, int height, std::uint8_t fill)
    : width_(width), height_(height), data_(static_cast<size_t>(width) * height, fill) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("LabelMap: non-positive dimensions");
}

VertexMap::VertexMap(int width, int height)
    : width_(width),
      height_(height),
      coords_(static_cast<size_t>(width) * height * 3, 0.0),
      valid_(static_cast<size_t>(width) * height, 0) {}

size_t VertexMap::valid_count() const {
    size_t n = 0;
    for (auto f : valid_) n += f;
    return n;
}

VertexMap deproject(const DepthMap& depth, const Intrinsics& k) {
    if (depth.width() != k.width || depth.height() != k.height)
        throw std::invalid_argument("deproject: depth map is " + std::to_string(depth.width()) +
                                    "x" + std::to_string(depth.height()) + " but intrinsics expect " +
                                    std::to_string(k.width) + "x" + std::to_string(k.height));
    VertexMap vm(depth.width(), depth.height());
    for (int v = 0; v < depth.height(); ++v) {
        for (int u = 0; u < depth.width(); ++u) {
            const double z = depth.at(v, u);
            if (z <= 0.0 || !std::isfinite(z)) continue;
            vm.set_point(v, u, {(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z});
            vm.set_valid(v, u, true);
        }
    }
    return vm;
}

PointCloud transform(const RigidPose& pose, const PointCloud& cloud) {
    PointCloud out;
    out.points.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.points.push_back(pose.apply(p));
    out.normals.reserve(cloud.normals.size());
    for (const auto& n : cloud.normals) out.normals.push_back(pose.rotation() * n);
    return out;
}

PointCloud to_point_cloud(const VertexMap& vm) {
    PointCloud out;
    out.points.reserve(vm.valid_count());
    for (int v = 0; v < vm.height(); ++v)
        for (int u = 0; u < vm.width(); ++u)
            if (vm.valid(v, u)) out.points.push_back(vm.point(v, u));
    return out;
}

void save_depth_raster(const std::string& path, const DepthMap& depth) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_depth_raster: cannot open " + path);
    std::vector<std::uint8_t> buf(static_cast<size_t>(depth.width()) * depth.height() * 2);
    size_t o = 0;
    for (int v = 0; v < depth.height(); ++v) {
        for (int u = 0; u < depth.width(); ++u) {
            double mm = depth.at(v, u) * 1000.0;
            if (mm < 0.0) mm = 0.0;
            if (mm > 65535.0) mm = 65535.0;
            const auto q = static_cast<std::uint16_t>(std::lround(mm));
            buf[o++] = static_cast<std::uint8_t>(q & 0xff);
            buf[o++] = static_cast<std::uint8_t>(q >> 8);
        }
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("save_depth_raster: write failed for " + path);
}

void save_label_raster(const std::string& path, const LabelMap& labels) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_label_raster: cannot open " + path);
    f.write(reinterpret_cast<const char*>(labels.data().data()),
            static_cast<std::streamsize>(labels.data().size()));
    if (!f) throw std::runtime_error("save_label_raster: write failed for " + path);
}

LabelMap load_label_raster(const std::string& path, int width, int height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_label_raster: cannot open " + path);
    LabelMap labels(width, height);
    f.read(reinterpret_cast<char*>(labels.data().data()),
           static_cast<std::streamsize>(labels.data().size()));
    if (f.gcount() != static_cast<std::streamsize>(labels.data().size()))
        throw std::runtime_error("load_label_raster: " + path + " truncated");
    return labels;
}

DepthMap load_depth_raster(const std::string& path, int width, int height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_depth_raster: cannot open " + path);
    std::vector<std::uint8_t> buf(static_cast<size_t>(width) * height * 2);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("load_depth_raster: " + path + " truncated");
    DepthMap depth(width, height);
    size_t o = 0;
    for (int v = 0; v < height; ++v) {
        for (int u = 0; u < width; ++u) {
            const std::uint16_t q = static_cast<std::uint16_t>(buf[o] | (buf[o + 1] << 8));
            o += 2;
            depth.at(v, u) = q / 1000.0;
        }
    }
    return depth;
}

}  // namespace boxcal
