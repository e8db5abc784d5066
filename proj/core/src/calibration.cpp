#include "boxcal/calibration.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "boxcal/kdtree.hpp"
#include "boxcal/metrics.hpp"

namespace boxcal {

void ViewSet::validate() const {
    std::set<std::string> ids;
    for (const auto& v : views) {
        if (!ids.insert(v.camera_id).second)
            throw std::invalid_argument("ViewSet: duplicate camera id '" + v.camera_id + "'");
        if (v.depth.width() != v.intrinsics.width || v.depth.height() != v.intrinsics.height)
            throw std::invalid_argument("ViewSet: camera '" + v.camera_id +
                                        "' depth does not match its intrinsics");
    }
}

PoseEstimate estimate_pose_from_labels(const LabelMap& labels, const DepthMap& depth,
                                       const Intrinsics& k, const StructureModel& model,
                                       int min_pixels) {
    const VertexMap vm = deproject(depth, k);
    auto [corr, vis] = hard_correspondences(labels, vm, min_pixels, model.side_count());

    PoseEstimate est;
    est.side_pixel_counts.assign(static_cast<size_t>(model.side_count()), 0);
    for (int y = 0; y < labels.height(); ++y)
        for (int x = 0; x < labels.width(); ++x) {
            const int c = labels.at(y, x);
            if (c >= 1 && c <= model.side_count() && vm.valid(y, x))
                est.side_pixel_counts[static_cast<size_t>(c - 1)]++;
        }
    est.visible_sides = vis.visible_count();
    est.pose = kabsch(corr, model.side_centers(), vis);  // throws when degenerate
    est.residual_rmse = rmse_corr(corr, model.side_centers(), vis, est.pose);
    return est;
}

// ---------------------------------------------------------------------------
// point-to-plane ICP
// ---------------------------------------------------------------------------

namespace {

// Normals from a PCA over the normal_k nearest neighbors, computed once
// per cloud in its own frame (k-NN geometry is rigid-invariant, so they
// just rotate with the pose).
std::vector<Eigen::Vector3d> estimate_normals(const std::vector<Eigen::Vector3d>& points,
                                              int normal_k) {
    const KdTree tree(points);
    std::vector<Eigen::Vector3d> normals(points.size(), Eigen::Vector3d::UnitZ());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(points.size()); ++i) {
        const auto idx = tree.knn(points[static_cast<size_t>(i)], normal_k);
        if (idx.size() < 3) continue;
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        for (int j : idx) mean += points[static_cast<size_t>(j)];
        mean /= static_cast<double>(idx.size());
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (int j : idx) {
            const Eigen::Vector3d d = points[static_cast<size_t>(j)] - mean;
            cov += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
        normals[static_cast<size_t>(i)] = eig.eigenvectors().col(0);  // smallest eigenvalue
    }
    return normals;
}

struct IcpCloud {
    std::vector<Eigen::Vector3d> points;   // camera frame (or GCS for the anchor)
    std::vector<Eigen::Vector3d> normals;  // same frame
};

// Residuals steeper than this normal disagreement are edge crossings or
// wrong-surface matches; drop them.
constexpr double kNormalGateCos = 0.5;  // 60 degrees

struct SweepStats {
    Eigen::Matrix<double, 6, 1> increment = Eigen::Matrix<double, 6, 1>::Zero();
    double rms = 0.0;
    long pairs = 0;
    bool lost = false;
};

}  // namespace

CalibrationResult refine_icp(const ViewSet& views, const std::vector<RigidPose>& initial,
                             const StructureModel& model, const IcpConfig& cfg) {
    views.validate();
    const int n_views = static_cast<int>(views.views.size());
    if (n_views < 2) throw std::invalid_argument("refine_icp: need at least 2 views");
    if (static_cast<int>(initial.size()) != n_views)
        throw std::invalid_argument("refine_icp: " + std::to_string(initial.size()) +
                                    " initial poses for " + std::to_string(n_views) + " views");
    if (cfg.max_iter < 1 || cfg.max_corr_dist <= 0.0 || cfg.normal_k < 3 ||
        cfg.convergence_eps <= 0.0)
        throw std::invalid_argument("refine_icp: invalid config");

    // camera-frame clouds with rigid-invariant normals
    std::vector<IcpCloud> clouds(static_cast<size_t>(n_views));
    for (int c = 0; c < n_views; ++c) {
        const View& view = views.views[static_cast<size_t>(c)];
        const VertexMap vm = deproject(view.depth, view.intrinsics);
        clouds[static_cast<size_t>(c)].points = to_point_cloud(vm).points;
        clouds[static_cast<size_t>(c)].normals =
            estimate_normals(clouds[static_cast<size_t>(c)].points, cfg.normal_k);
    }

    // fixed anchor: the virtual structure, which also pins the gauge
    IcpCloud anchor;
    anchor.points = sample_surface(model, cfg.anchor_resolution).points;
    anchor.normals = estimate_normals(anchor.points, cfg.normal_k);
    const KdTree anchor_tree(anchor.points);

    CalibrationResult result;
    result.camera_ids.reserve(static_cast<size_t>(n_views));
    for (const auto& v : views.views) result.camera_ids.push_back(v.camera_id);
    result.initial = initial;
    result.refined = initial;
    result.diagnostics.assign(static_cast<size_t>(n_views), {});

    int sweep = 0;
    for (; sweep < cfg.max_iter; ++sweep) {
        // world-frame clouds under the current poses
        std::vector<std::vector<Eigen::Vector3d>> world_pts(static_cast<size_t>(n_views));
        std::vector<std::vector<Eigen::Vector3d>> world_nrm(static_cast<size_t>(n_views));
        std::vector<KdTree> trees(static_cast<size_t>(n_views));
        for (int c = 0; c < n_views; ++c) {
            const RigidPose& pose = result.refined[static_cast<size_t>(c)];
            const auto& cloud = clouds[static_cast<size_t>(c)];
            auto& wp = world_pts[static_cast<size_t>(c)];
            auto& wn = world_nrm[static_cast<size_t>(c)];
            wp.resize(cloud.points.size());
            wn.resize(cloud.points.size());
#pragma omp parallel for schedule(static)
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(cloud.points.size()); ++i) {
                wp[static_cast<size_t>(i)] = pose.apply(cloud.points[static_cast<size_t>(i)]);
                wn[static_cast<size_t>(i)] = pose.rotation() * cloud.normals[static_cast<size_t>(i)];
            }
            trees[static_cast<size_t>(c)] = KdTree(wp);
        }

        // solve every camera against the others + anchor (Jacobi style:
        // all increments computed from the sweep-start poses)
        std::vector<SweepStats> stats(static_cast<size_t>(n_views));
        double global_sq = 0.0;
        long global_pairs = 0;
        for (int c = 0; c < n_views; ++c) {
            const auto& wp = world_pts[static_cast<size_t>(c)];
            const auto& wn = world_nrm[static_cast<size_t>(c)];
            Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
            Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
            double sq_sum = 0.0;
            long pairs = 0;
#pragma omp parallel
            {
                Eigen::Matrix<double, 6, 6> ata_l = Eigen::Matrix<double, 6, 6>::Zero();
                Eigen::Matrix<double, 6, 1> atb_l = Eigen::Matrix<double, 6, 1>::Zero();
                double sq_l = 0.0;
                long pairs_l = 0;
#pragma omp for schedule(static) nowait
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(wp.size()); ++i) {
                    const Eigen::Vector3d& p = wp[static_cast<size_t>(i)];
                    KdTree::Hit best;
                    int best_view = -1;
                    for (int o = 0; o < n_views; ++o) {
                        if (o == c) continue;
                        const auto hit = trees[static_cast<size_t>(o)].nearest(p, cfg.max_corr_dist);
                        if (hit.found() && hit.squared_dist < best.squared_dist) {
                            best = hit;
                            best_view = o;
                        }
                    }
                    const auto anchor_hit = anchor_tree.nearest(p, cfg.max_corr_dist);
                    Eigen::Vector3d q, nq;
                    if (anchor_hit.found() && anchor_hit.squared_dist < best.squared_dist) {
                        q = anchor.points[static_cast<size_t>(anchor_hit.index)];
                        nq = anchor.normals[static_cast<size_t>(anchor_hit.index)];
                    } else if (best.found()) {
                        q = world_pts[static_cast<size_t>(best_view)][static_cast<size_t>(best.index)];
                        nq = world_nrm[static_cast<size_t>(best_view)][static_cast<size_t>(best.index)];
                    } else {
                        continue;
                    }
                    if (std::abs(nq.dot(wn[static_cast<size_t>(i)])) < kNormalGateCos) continue;
                    const double r = nq.dot(p - q);
                    Eigen::Matrix<double, 6, 1> a;
                    a.template head<3>() = p.cross(nq);
                    a.template tail<3>() = nq;
                    ata_l.noalias() += a * a.transpose();
                    atb_l.noalias() += a * (-r);
                    sq_l += r * r;
                    pairs_l++;
                }
#pragma omp critical
                {
                    ata += ata_l;
                    atb += atb_l;
                    sq_sum += sq_l;
                    pairs += pairs_l;
                }
            }
            auto& st = stats[static_cast<size_t>(c)];
            st.pairs = pairs;
            st.rms = pairs > 0 ? std::sqrt(sq_sum / static_cast<double>(pairs)) : 0.0;
            global_sq += sq_sum;
            global_pairs += pairs;
            if (pairs < 6) {
                st.lost = true;
                continue;
            }
            st.increment = ata.ldlt().solve(atb);
            if (!st.increment.allFinite()) {
                st.increment.setZero();
                st.lost = true;
            }
        }
        result.sweep_residual_rms.push_back(
            global_pairs > 0 ? std::sqrt(global_sq / static_cast<double>(global_pairs)) : 0.0);

        // apply all increments at sweep end
        double max_increment = 0.0;
        for (int c = 0; c < n_views; ++c) {
            const auto& st = stats[static_cast<size_t>(c)];
            auto& diag = result.diagnostics[static_cast<size_t>(c)];
            diag.icp_rms = st.rms;
            diag.lost_correspondences = diag.lost_correspondences || st.lost;
            if (st.lost) continue;
            const Eigen::Vector3d omega = st.increment.head<3>();
            const Eigen::Vector3d t = st.increment.tail<3>();
            max_increment = std::max(max_increment, std::max(omega.norm(), t.norm()));
            Eigen::Matrix3d r_inc = Eigen::Matrix3d::Identity();
            if (omega.norm() > 0.0)
                r_inc = Eigen::AngleAxisd(omega.norm(), omega.normalized()).toRotationMatrix();
            const RigidPose& old = result.refined[static_cast<size_t>(c)];
            result.refined[static_cast<size_t>(c)] =
                RigidPose(r_inc * old.rotation(), r_inc * old.translation() + t)
                    .orthonormalized();
        }
        if (max_increment < cfg.convergence_eps) {
            sweep++;
            break;
        }
    }

    for (int c = 0; c < n_views; ++c) {
        result.refined[static_cast<size_t>(c)] =
            result.refined[static_cast<size_t>(c)].orthonormalized();
        result.diagnostics[static_cast<size_t>(c)].icp_iterations = sweep;
    }
    return result;
}

CalibrationResult calibrate(const ViewSet& views, const StructureModel& model,
                            const std::function<LabelMap(const View&)>& labeler,
                            const CalibrationOptions& opts) {
    views.validate();
    const int n = static_cast<int>(views.views.size());
    CalibrationResult result;
    result.camera_ids.reserve(static_cast<size_t>(n));
    result.initial.assign(static_cast<size_t>(n), RigidPose());
    result.refined.assign(static_cast<size_t>(n), RigidPose());
    result.diagnostics.assign(static_cast<size_t>(n), {});

    std::vector<int> ok;
    for (int c = 0; c < n; ++c) {
        const View& view = views.views[static_cast<size_t>(c)];
        result.camera_ids.push_back(view.camera_id);
        auto& diag = result.diagnostics[static_cast<size_t>(c)];
        try {
            const LabelMap labels = labeler(view);
            const PoseEstimate est = estimate_pose_from_labels(labels, view.depth, view.intrinsics,
                                                               model, opts.min_pixels);
            result.initial[static_cast<size_t>(c)] = est.pose;
            result.refined[static_cast<size_t>(c)] = est.pose;
            diag.visible_sides = est.visible_sides;
            diag.kabsch_rmse = est.residual_rmse;
            ok.push_back(c);
        } catch (const DegenerateConfiguration& e) {
            diag.initial_failed = true;
            diag.failure_reason = e.what();
        }
    }

    if (ok.size() >= 2) {
        ViewSet subset;
        std::vector<RigidPose> subset_init;
        for (int c : ok) {
            subset.views.push_back(views.views[static_cast<size_t>(c)]);
            subset_init.push_back(result.initial[static_cast<size_t>(c)]);
        }
        CalibrationResult refined = refine_icp(subset, subset_init, model, opts.icp);
        result.sweep_residual_rms = refined.sweep_residual_rms;
        for (size_t i = 0; i < ok.size(); ++i) {
            const int c = ok[i];
            result.refined[static_cast<size_t>(c)] = refined.refined[i];
            auto& diag = result.diagnostics[static_cast<size_t>(c)];
            diag.icp_iterations = refined.diagnostics[i].icp_iterations;
            diag.icp_rms = refined.diagnostics[i].icp_rms;
            diag.lost_correspondences = refined.diagnostics[i].lost_correspondences;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json pose_to_json(const RigidPose& pose) {
    const Eigen::Matrix4d m = pose.matrix();
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) rows.push_back(m(r, c));
    return rows;
}

RigidPose pose_from_json(const nlohmann::json& j) {
    Eigen::Matrix4d m;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = j.at(static_cast<size_t>(r * 4 + c)).get<double>();
    return RigidPose::from_matrix(m);
}

}  // namespace

std::string calibration_to_json_text(const CalibrationResult& result) {
    nlohmann::json j;
    j["format"] = "boxcal-calibration-v1";
    j["cameras"] = nlohmann::json::array();
    for (size_t i = 0; i < result.camera_ids.size(); ++i) {
        const auto& d = result.diagnostics[i];
        j["cameras"].push_back(
            {{"id", result.camera_ids[i]},
             {"initial_camera_to_gcs", pose_to_json(result.initial[i])},
             {"refined_camera_to_gcs", pose_to_json(result.refined[i])},
             {"diagnostics",
              {{"initial_failed", d.initial_failed},
               {"failure_reason", d.failure_reason},
               {"visible_sides", d.visible_sides},
               {"kabsch_rmse", d.kabsch_rmse},
               {"icp_iterations", d.icp_iterations},
               {"icp_rms", d.icp_rms},
               {"lost_correspondences", d.lost_correspondences}}}});
    }
    j["sweep_residual_rms"] = result.sweep_residual_rms;
    return j.dump(2) + "\n";
}

CalibrationResult calibration_from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("calibration: invalid JSON: ") + e.what());
    }
    if (j.value("format", "") != "boxcal-calibration-v1")
        throw std::runtime_error("calibration: unrecognized format field");
    CalibrationResult result;
    for (const auto& jc : j.at("cameras")) {
        result.camera_ids.push_back(jc.at("id").get<std::string>());
        result.initial.push_back(pose_from_json(jc.at("initial_camera_to_gcs")));
        result.refined.push_back(pose_from_json(jc.at("refined_camera_to_gcs")));
        CameraDiagnostics d;
        const auto& jd = jc.at("diagnostics");
        d.initial_failed = jd.at("initial_failed").get<bool>();
        d.failure_reason = jd.at("failure_reason").get<std::string>();
        d.visible_sides = jd.at("visible_sides").get<int>();
        d.kabsch_rmse = jd.at("kabsch_rmse").get<double>();
        d.icp_iterations = jd.at("icp_iterations").get<int>();
        d.icp_rms = jd.at("icp_rms").get<double>();
        d.lost_correspondences = jd.at("lost_correspondences").get<bool>();
        result.diagnostics.push_back(d);
    }
    result.sweep_residual_rms = j.value("sweep_residual_rms", std::vector<double>{});
    return result;
}

void save_calibration(const std::string& path, const CalibrationResult& result) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_calibration: cannot open " + path);
    f << calibration_to_json_text(result);
}

CalibrationResult load_calibration(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_calibration: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return calibration_from_json_text(ss.str());
}

}  // namespace boxcal
