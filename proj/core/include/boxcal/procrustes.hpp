#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <utility>
#include <vector>

#include "boxcal/geometry.hpp"
#include "boxcal/tensor.hpp"

namespace boxcal {

/// Thrown when a pose cannot be recovered: fewer than 3 usable
/// correspondences, or a collinear/rank-deficient configuration.
struct DegenerateConfiguration : std::runtime_error {
    explicit DegenerateConfiguration(const std::string& msg) : std::runtime_error(msg) {}
};

/// Extracted keypoints, one column per labeled box side, in camera space.
/// A column is valid when enough probability mass (or at least one pixel)
/// backed it.
struct Correspondences {
    Eigen::Matrix3Xd points;          // 3×K
    std::vector<std::uint8_t> valid;  // per column

    int columns() const { return static_cast<int>(points.cols()); }
    int valid_count() const {
        int n = 0;
        for (auto f : valid) n += f;
        return n;
    }
};

/// Per-side {0,1} visibility. Semantically a 3×K matrix whose three rows
/// are equal; stored as one flag per column.
struct VisibilityMask {
    std::vector<std::uint8_t> visible;

    VisibilityMask() = default;
    explicit VisibilityMask(int k, bool value = false)
        : visible(static_cast<size_t>(k), value ? 1 : 0) {}

    int columns() const { return static_cast<int>(visible.size()); }
    bool operator[](int k) const { return visible[static_cast<size_t>(k)] != 0; }
    void set(int k, bool v) { visible[static_cast<size_t>(k)] = v ? 1 : 0; }
    int visible_count() const {
        int n = 0;
        for (auto f : visible) n += f;
        return n;
    }

    Eigen::Matrix3Xd matrix() const {
        Eigen::Matrix3Xd m(3, columns());
        for (int k = 0; k < columns(); ++k) m.col(k).setConstant(visible[static_cast<size_t>(k)]);
        return m;
    }
};

/// Probability-weighted keypoints: C_{i,k} = Σ P_{k,h,w} V_{i,h,w} / Σ P_{k,h,w}
/// over valid pixels. prob has K+1 channels; channel 0 (background) never
/// produces a column. Columns whose mass is below eps_mass are invalid.
/// Sums run in double, row-major, so a one-hot prob reproduces
/// hard_correspondences bit for bit.
template <typename T>
Correspondences soft_correspondences(const nn::Tensor<T>& prob, const VertexMap& v,
                                     double eps_mass = 1e-6) {
    if (prob.rank() != 3)
        throw std::invalid_argument("soft_correspondences: prob must be (K+1)×H×W, got " +
                                    prob.shape_str());
    if (prob.dim(1) != v.height() || prob.dim(2) != v.width())
        throw std::invalid_argument("soft_correspondences: prob " + prob.shape_str() +
                                    " not co-registered with vertex map " +
                                    std::to_string(v.width()) + "x" + std::to_string(v.height()));
    const int k_sides = prob.dim(0) - 1;
    Correspondences out;
    out.points = Eigen::Matrix3Xd::Zero(3, k_sides);
    out.valid.assign(static_cast<size_t>(k_sides), 0);
    for (int k = 0; k < k_sides; ++k) {
        double mass = 0.0;
        Eigen::Vector3d num = Eigen::Vector3d::Zero();
        for (int y = 0; y < v.height(); ++y) {
            for (int x = 0; x < v.width(); ++x) {
                if (!v.valid(y, x)) continue;
                const double p = static_cast<double>(prob.at(k + 1, y, x));
                mass += p;
                num += p * v.point(y, x);
            }
        }
        if (mass >= eps_mass) {
            out.points.col(k) = num / mass;
            out.valid[static_cast<size_t>(k)] = 1;
        }
    }
    return out;
}

/// Per-class mean of valid-pixel vertices; classes with fewer than
/// min_pixels valid pixels are marked invisible. Equals
/// soft_correspondences(one_hot(labels), v) exactly.
std::pair<Correspondences, VisibilityMask> hard_correspondences(const LabelMap& labels,
                                                                const VertexMap& v, int min_pixels,
                                                                int k_sides);

/// Reflection-corrected orthogonal Procrustes (Kabsch). Returns the pose
/// mapping camera-space keypoints c onto the model side centers s, using
/// only columns that are both visible and valid. Throws
/// DegenerateConfiguration when fewer than 3 such columns exist or they
/// are collinear.
RigidPose kabsch(const Correspondences& c, const Eigen::Matrix3Xd& s, const VisibilityMask& m);

/// Rotation-only Kabsch on already centered 3×N point sets: returns the
/// rotation r minimizing ||s_centered - r * c_centered||_F.
Eigen::Matrix3d kabsch_rotation(const Eigen::Matrix3Xd& c_centered,
                                const Eigen::Matrix3Xd& s_centered);

struct Loss3dOptions {
    double eps_mass = 1e-6;
    /// Center C and S over all valid columns instead of only visible
    /// ones (comparison mode; the alignment itself still uses visible
    /// columns).
    bool center_all_columns = false;
};

template <typename T>
struct Loss3dResult {
    double value = 0.0;
    nn::Tensor<T> d_prob;    // gradient w.r.t. prob, same shape
    bool degenerate = false;  // too few/collinear columns: zero contribution
    int used_columns = 0;
};

/// The masked Procrustes loss ||M · (Ŝ − ΩĈ)||_F with Ĉ from
/// soft_correspondences and Ω the Kabsch rotation on the same columns.
/// The gradient w.r.t. prob treats Ω as stationary (it minimizes the
/// masked objective over rotations, so its first-order variation drops
/// out) but keeps the full chain rule through the centering and the
/// soft-correspondence ratio.
template <typename T>
Loss3dResult<T> loss_3d(const nn::Tensor<T>& prob, const VertexMap& v, const Eigen::Matrix3Xd& s,
                        const VisibilityMask& m, const Loss3dOptions& opts = {});

namespace detail {

struct SoftColumn {
    double mass = 0.0;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();  // C_k
    bool valid = false;
};

// Shared core of loss_3d evaluated in double regardless of T.
struct Loss3dCore {
    double value = 0.0;
    bool degenerate = true;
    int used = 0;
    Eigen::Matrix3Xd d_center;  // dL/dC, zero for unused columns
};

Loss3dCore loss_3d_core(const std::vector<SoftColumn>& cols, const Eigen::Matrix3Xd& s,
                        const VisibilityMask& m, bool center_all_columns);

}  // namespace detail

template <typename T>
Loss3dResult<T> loss_3d(const nn::Tensor<T>& prob, const VertexMap& v, const Eigen::Matrix3Xd& s,
                        const VisibilityMask& m, const Loss3dOptions& opts) {
    const int k_sides = prob.dim(0) - 1;
    if (static_cast<int>(s.cols()) != k_sides || m.columns() != k_sides)
        throw std::invalid_argument("loss_3d: prob " + prob.shape_str() + " implies K=" +
                                    std::to_string(k_sides) + " but S has " +
                                    std::to_string(s.cols()) + " and M has " +
                                    std::to_string(m.columns()) + " columns");

    std::vector<detail::SoftColumn> cols(static_cast<size_t>(k_sides));
    for (int k = 0; k < k_sides; ++k) {
        double mass = 0.0;
        Eigen::Vector3d num = Eigen::Vector3d::Zero();
        for (int y = 0; y < v.height(); ++y) {
            for (int x = 0; x < v.width(); ++x) {
                if (!v.valid(y, x)) continue;
                const double p = static_cast<double>(prob.at(k + 1, y, x));
                mass += p;
                num += p * v.point(y, x);
            }
        }
        if (mass >= opts.eps_mass) {
            cols[static_cast<size_t>(k)] = {mass, num / mass, true};
        }
    }

    const detail::Loss3dCore core = detail::loss_3d_core(cols, s, m, opts.center_all_columns);

    Loss3dResult<T> out;
    out.value = core.value;
    out.degenerate = core.degenerate;
    out.used_columns = core.used;
    out.d_prob = nn::Tensor<T>(prob.shape());
    if (core.degenerate) return out;

    // dL/dP_{k,h,w} = Σ_i dL/dC_{i,k} · (V_i − C_{i,k}) / W_k on valid pixels
    for (int k = 0; k < k_sides; ++k) {
        const auto& col = cols[static_cast<size_t>(k)];
        if (!col.valid) continue;
        const Eigen::Vector3d g = core.d_center.col(k);
        if (g.isZero(0.0)) continue;
        for (int y = 0; y < v.height(); ++y) {
            for (int x = 0; x < v.width(); ++x) {
                if (!v.valid(y, x)) continue;
                const double d = g.dot(v.point(y, x) - col.center) / col.mass;
                out.d_prob.at(k + 1, y, x) = static_cast<T>(d);
            }
        }
    }
    return out;
}

}  // namespace boxcal
