#include "boxcal/procrustes.hpp"

#include <cmath>

namespace boxcal {

std::pair<Correspondences, VisibilityMask> hard_correspondences(const LabelMap& labels,
                                                                const VertexMap& v, int min_pixels,
                                                                int k_sides) {
    if (labels.width() != v.width() || labels.height() != v.height())
        throw std::invalid_argument("hard_correspondences: labels " + std::to_string(labels.width()) +
                                    "x" + std::to_string(labels.height()) +
                                    " not co-registered with vertex map");
    Correspondences c;
    c.points = Eigen::Matrix3Xd::Zero(3, k_sides);
    c.valid.assign(static_cast<size_t>(k_sides), 0);
    VisibilityMask m(k_sides);

    // Accumulate in the exact row-major order soft_correspondences uses so
    // the one-hot identity holds bit for bit.
    for (int k = 0; k < k_sides; ++k) {
        double count = 0.0;
        Eigen::Vector3d sum = Eigen::Vector3d::Zero();
        for (int y = 0; y < labels.height(); ++y) {
            for (int x = 0; x < labels.width(); ++x) {
                if (!v.valid(y, x)) continue;
                if (labels.at(y, x) != k + 1) continue;
                count += 1.0;
                sum += v.point(y, x);
            }
        }
        if (count > 0.0) {
            c.points.col(k) = sum / count;
            c.valid[static_cast<size_t>(k)] = 1;
        }
        m.set(k, count >= static_cast<double>(min_pixels));
    }
    return {std::move(c), m};
}

Eigen::Matrix3d kabsch_rotation(const Eigen::Matrix3Xd& c_centered,
                                const Eigen::Matrix3Xd& s_centered) {
    const Eigen::Matrix3d h = c_centered * s_centered.transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix3d u = svd.matrixU();
    const Eigen::Matrix3d vmat = svd.matrixV();
    Eigen::Vector3d d = Eigen::Vector3d::Ones();
    d(2) = (vmat * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return vmat * d.asDiagonal() * u.transpose();
}

namespace {

// Columns usable for alignment: visible per the mask and backed by data.
std::vector<int> usable_columns(const std::vector<std::uint8_t>& valid, const VisibilityMask& m) {
    std::vector<int> idx;
    for (int k = 0; k < m.columns(); ++k)
        if (m[k] && valid[static_cast<size_t>(k)]) idx.push_back(k);
    return idx;
}

bool is_collinear(const Eigen::Matrix3Xd& centered) {
    Eigen::JacobiSVD<Eigen::Matrix3Xd> svd(centered);
    const auto& sv = svd.singularValues();
    return sv(1) <= 1e-12 + 1e-9 * sv(0);
}

}  // namespace

RigidPose kabsch(const Correspondences& c, const Eigen::Matrix3Xd& s, const VisibilityMask& m) {
    if (c.columns() != static_cast<int>(s.cols()) || c.columns() != m.columns())
        throw std::invalid_argument("kabsch: column counts disagree (C " +
                                    std::to_string(c.columns()) + ", S " + std::to_string(s.cols()) +
                                    ", M " + std::to_string(m.columns()) + ")");
    const std::vector<int> idx = usable_columns(c.valid, m);
    const int n = static_cast<int>(idx.size());
    if (n < 3)
        throw DegenerateConfiguration("kabsch: only " + std::to_string(n) +
                                      " usable correspondences, need at least 3");

    Eigen::Matrix3Xd cv(3, n), sv(3, n);
    for (int i = 0; i < n; ++i) {
        cv.col(i) = c.points.col(idx[static_cast<size_t>(i)]);
        sv.col(i) = s.col(idx[static_cast<size_t>(i)]);
    }
    const Eigen::Vector3d c_mean = cv.rowwise().mean();
    const Eigen::Vector3d s_mean = sv.rowwise().mean();
    cv.colwise() -= c_mean;
    sv.colwise() -= s_mean;
    if (is_collinear(cv) || is_collinear(sv))
        throw DegenerateConfiguration("kabsch: correspondence set is collinear");

    const Eigen::Matrix3d r = kabsch_rotation(cv, sv);
    return RigidPose(r, s_mean - r * c_mean);
}

namespace detail {

Loss3dCore loss_3d_core(const std::vector<SoftColumn>& cols, const Eigen::Matrix3Xd& s,
                        const VisibilityMask& m, bool center_all_columns) {
    const int k_sides = static_cast<int>(cols.size());
    Loss3dCore core;
    core.d_center = Eigen::Matrix3Xd::Zero(3, k_sides);

    std::vector<int> used;  // columns entering the masked residual
    for (int k = 0; k < k_sides; ++k)
        if (m[k] && cols[static_cast<size_t>(k)].valid) used.push_back(k);
    std::vector<int> centering = used;
    if (center_all_columns) {
        centering.clear();
        for (int k = 0; k < k_sides; ++k)
            if (cols[static_cast<size_t>(k)].valid) centering.push_back(k);
    }
    core.used = static_cast<int>(used.size());
    if (core.used < 3) return core;

    Eigen::Vector3d c_mean = Eigen::Vector3d::Zero();
    Eigen::Vector3d s_mean = Eigen::Vector3d::Zero();
    for (int k : centering) {
        c_mean += cols[static_cast<size_t>(k)].center;
        s_mean += s.col(k);
    }
    c_mean /= static_cast<double>(centering.size());
    s_mean /= static_cast<double>(centering.size());

    Eigen::Matrix3Xd c_hat(3, core.used), s_hat(3, core.used);
    for (int i = 0; i < core.used; ++i) {
        c_hat.col(i) = cols[static_cast<size_t>(used[static_cast<size_t>(i)])].center - c_mean;
        s_hat.col(i) = s.col(used[static_cast<size_t>(i)]) - s_mean;
    }
    if (is_collinear(c_hat) || is_collinear(s_hat)) return core;
    core.degenerate = false;

    const Eigen::Matrix3d omega = kabsch_rotation(c_hat, s_hat);
    const Eigen::Matrix3Xd residual = s_hat - omega * c_hat;
    core.value = residual.norm();  // Frobenius
    if (core.value < 1e-30) return core;  // exact alignment: flat optimum

    // dL/dĈ_k = −Ωᵀ r_k / L on used columns; the centering projection adds
    // (1/|B|) Ωᵀ Σ r_j / L on every centering column (Σ r_j vanishes when
    // the centering set equals the used set, but not in all-columns mode).
    Eigen::Matrix3Xd d_hat = Eigen::Matrix3Xd::Zero(3, k_sides);
    Eigen::Vector3d residual_sum = Eigen::Vector3d::Zero();
    for (int i = 0; i < core.used; ++i) {
        const Eigen::Vector3d g = -(omega.transpose() * residual.col(i)) / core.value;
        d_hat.col(used[static_cast<size_t>(i)]) = g;
        residual_sum += residual.col(i);
    }
    const Eigen::Vector3d mean_correction =
        (omega.transpose() * residual_sum) / (core.value * static_cast<double>(centering.size()));
    core.d_center = d_hat;
    for (int k : centering) core.d_center.col(k) += mean_correction;
    return core;
}

}  // namespace detail

}  // namespace boxcal
