#include "boxcal/structure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace boxcal {

namespace {

constexpr double kPi = 3.14159265358979323846;

int face_index(const FaceRef& f) { return f.box * 6 + static_cast<int>(f.face); }

Face face_from_name(const std::string& name) {
    for (int i = 0; i < 6; ++i)
        if (name == kFaceNames[static_cast<size_t>(i)]) return static_cast<Face>(i);
    throw std::invalid_argument("structure: unknown face name '" + name + "'");
}

}  // namespace

StructureModel StructureModel::from_boxes(std::vector<BoxSpec> boxes, std::vector<FaceRef> excluded) {
    if (boxes.empty()) throw std::invalid_argument("structure: no boxes");
    for (size_t b = 0; b < boxes.size(); ++b)
        if ((boxes[b].half_extents.array() <= 0.0).any())
            throw std::invalid_argument("structure: box " + std::to_string(b) +
                                        " has non-positive half extents");

    // Boxes may touch on shared faces but interiors must stay disjoint.
    for (size_t a = 0; a < boxes.size(); ++a) {
        for (size_t b = a + 1; b < boxes.size(); ++b) {
            bool overlap = true;
            for (int ax = 0; ax < 3; ++ax) {
                const double lo = std::max(boxes[a].center[ax] - boxes[a].half_extents[ax],
                                           boxes[b].center[ax] - boxes[b].half_extents[ax]);
                const double hi = std::min(boxes[a].center[ax] + boxes[a].half_extents[ax],
                                           boxes[b].center[ax] + boxes[b].half_extents[ax]);
                if (hi - lo <= 1e-9) overlap = false;
            }
            if (overlap)
                throw std::invalid_argument("structure: boxes " + std::to_string(a) + " and " +
                                            std::to_string(b) + " overlap beyond a shared face");
        }
    }

    std::set<int> excluded_set;
    for (const auto& f : excluded) {
        if (f.box < 0 || f.box >= static_cast<int>(boxes.size()))
            throw std::invalid_argument("structure: excluded face references box " +
                                        std::to_string(f.box) + " out of range");
        if (!excluded_set.insert(face_index(f)).second)
            throw std::invalid_argument("structure: face listed twice in excluded set");
    }

    StructureModel m;
    m.boxes_ = std::move(boxes);
    m.excluded_ = std::move(excluded);
    m.class_table_.assign(m.boxes_.size() * 6, 0);
    for (int b = 0; b < static_cast<int>(m.boxes_.size()); ++b) {
        for (int f = 0; f < 6; ++f) {
            const FaceRef ref{b, static_cast<Face>(f)};
            if (excluded_set.count(face_index(ref))) continue;
            m.labeled_.push_back(ref);
            m.class_table_[static_cast<size_t>(face_index(ref))] =
                static_cast<int>(m.labeled_.size());
        }
    }
    if (m.labeled_.empty()) throw std::invalid_argument("structure: every face is excluded, K = 0");
    if (m.labeled_.size() > 255)
        throw std::invalid_argument("structure: more than 255 labeled sides, label rasters are 8-bit");

    m.side_centers_.resize(3, static_cast<int>(m.labeled_.size()));
    for (size_t k = 0; k < m.labeled_.size(); ++k)
        m.side_centers_.col(static_cast<int>(k)) = m.face_center(m.labeled_[k]);
    return m;
}

StructureModel StructureModel::default_structure() {
    const Eigen::Vector3d half(0.28, 0.18, 0.18);
    std::vector<BoxSpec> boxes = {
        {{-0.28, -0.18, -0.18}, half},  // floor, L corner
        {{0.28, -0.18, -0.18}, half},   // floor, +x leg
        {{-0.28, -0.18, 0.18}, half},   // floor, +z leg
        {{-0.28, 0.18, -0.18}, half},   // stacked on the corner box
    };
    std::vector<FaceRef> excluded = {
        {0, Face::neg_y}, {1, Face::neg_y}, {2, Face::neg_y}};  // floor-contacting
    return from_boxes(std::move(boxes), std::move(excluded));
}

int StructureModel::class_of(const FaceRef& face) const {
    return class_table_[static_cast<size_t>(face_index(face))];
}

FaceRef StructureModel::face_of_class(int class_id) const {
    if (class_id < 1 || class_id > side_count())
        throw std::out_of_range("structure: class id " + std::to_string(class_id) +
                                " outside 1.." + std::to_string(side_count()));
    return labeled_[static_cast<size_t>(class_id - 1)];
}

Eigen::Vector3d StructureModel::face_center(const FaceRef& face) const {
    const BoxSpec& b = boxes_[static_cast<size_t>(face.box)];
    Eigen::Vector3d c = b.center;
    const int ax = face_axis(face.face);
    c[ax] += face_sign(face.face) * b.half_extents[ax];
    return c;
}

Eigen::Vector3d StructureModel::face_normal(const FaceRef& face) const {
    Eigen::Vector3d n = Eigen::Vector3d::Zero();
    n[face_axis(face.face)] = face_sign(face.face);
    return n;
}

bool StructureModel::contains(const Eigen::Vector3d& p, double margin) const {
    for (const auto& b : boxes_) {
        const Eigen::Vector3d d = (p - b.center).cwiseAbs() - b.half_extents;
        if ((d.array() < -margin).all()) return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// JSON description
// ---------------------------------------------------------------------------

StructureModel structure_from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("structure: invalid JSON: ") + e.what());
    }
    if (j.value("format", "") != "boxcal-structure-v1")
        throw std::invalid_argument("structure: unrecognized format field '" +
                                    j.value("format", std::string("<missing>")) + "'");
    std::vector<BoxSpec> boxes;
    for (const auto& jb : j.at("boxes")) {
        BoxSpec b;
        for (int i = 0; i < 3; ++i) {
            b.center[i] = jb.at("center").at(static_cast<size_t>(i)).get<double>();
            b.half_extents[i] = jb.at("half_extents").at(static_cast<size_t>(i)).get<double>();
        }
        boxes.push_back(b);
    }
    std::vector<FaceRef> excluded;
    for (const auto& jf : j.value("excluded_faces", nlohmann::json::array()))
        excluded.push_back({jf.at("box").get<int>(), face_from_name(jf.at("face").get<std::string>())});

    StructureModel model = StructureModel::from_boxes(std::move(boxes), std::move(excluded));

    // Optional explicit labeled list: must partition the faces together
    // with the excluded set.
    if (j.contains("labeled_faces")) {
        std::set<int> listed;
        for (const auto& jf : j.at("labeled_faces")) {
            const FaceRef ref{jf.at("box").get<int>(),
                              face_from_name(jf.at("face").get<std::string>())};
            if (model.class_of(ref) == 0)
                throw std::invalid_argument("structure: face listed as both labeled and excluded");
            if (!listed.insert(face_index(ref)).second)
                throw std::invalid_argument("structure: face listed twice in labeled set");
        }
        if (static_cast<int>(listed.size()) != model.side_count())
            throw std::invalid_argument("structure: labeled_faces does not cover all "
                                        "non-excluded faces");
    }
    return model;
}

std::string structure_to_json_text(const StructureModel& model) {
    nlohmann::json j;
    j["format"] = "boxcal-structure-v1";
    j["boxes"] = nlohmann::json::array();
    for (const auto& b : model.boxes()) {
        j["boxes"].push_back({{"center", {b.center.x(), b.center.y(), b.center.z()}},
                              {"half_extents",
                               {b.half_extents.x(), b.half_extents.y(), b.half_extents.z()}}});
    }
    j["excluded_faces"] = nlohmann::json::array();
    for (const auto& f : model.excluded_sides())
        j["excluded_faces"].push_back(
            {{"box", f.box}, {"face", kFaceNames[static_cast<size_t>(static_cast<int>(f.face))]}});
    return j.dump(2) + "\n";
}

StructureModel load_structure(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_structure: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return structure_from_json_text(ss.str());
}

void save_structure(const std::string& path, const StructureModel& model) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_structure: cannot open " + path);
    f << structure_to_json_text(model);
}

// ---------------------------------------------------------------------------
// pose sampling
// ---------------------------------------------------------------------------

void PoseSamplerConfig::validate() const {
    if (rho_min > rho_max || phi_min_deg > phi_max_deg || z_min > z_max)
        throw std::invalid_argument("PoseSamplerConfig: empty range");
    if (look_radius < 0.0 || max_roll_deg < 0.0)
        throw std::invalid_argument("PoseSamplerConfig: negative look radius or roll");
}

RigidPose sample_pose(const PoseSamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    const double rho = rng.uniform(cfg.rho_min, cfg.rho_max);
    const double phi = rng.uniform(cfg.phi_min_deg, cfg.phi_max_deg) * kPi / 180.0;
    const double height = rng.uniform(cfg.z_min, cfg.z_max);
    const Eigen::Vector3d position(rho * std::cos(phi), height, rho * std::sin(phi));

    Eigen::Vector3d target = Eigen::Vector3d::Zero();
    if (cfg.look_radius > 0.0) {
        // uniform in the ball by rejection
        do {
            target = {rng.uniform(-cfg.look_radius, cfg.look_radius),
                      rng.uniform(-cfg.look_radius, cfg.look_radius),
                      rng.uniform(-cfg.look_radius, cfg.look_radius)};
        } while (target.squaredNorm() > cfg.look_radius * cfg.look_radius);
    }

    // camera frame: z = look direction, y down, x right and parallel to
    // the GCS x–z plane before the roll
    const Eigen::Vector3d z_cam = (target - position).normalized();
    Eigen::Vector3d x_cam = z_cam.cross(Eigen::Vector3d::UnitY());
    if (x_cam.norm() < 1e-12) x_cam = Eigen::Vector3d::UnitX();  // looking straight up/down
    x_cam.normalize();
    const Eigen::Vector3d y_cam = z_cam.cross(x_cam);

    Eigen::Matrix3d r;
    r.col(0) = x_cam;
    r.col(1) = y_cam;
    r.col(2) = z_cam;
    const double roll = rng.uniform(-cfg.max_roll_deg, cfg.max_roll_deg) * kPi / 180.0;
    r = r * Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitZ()).toRotationMatrix();

    // Re-orthonormalize so the RigidPose invariants hold to machine
    // precision even after the trig round trip.
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    r = svd.matrixU() * svd.matrixV().transpose();
    return RigidPose(r, position);
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

struct RayHit {
    double depth = std::numeric_limits<double>::infinity();
    int box = -1;
    Face face = Face::pos_x;
};

// Slab intersection with camera-z parameterization: the ray is
// origin + s * dir with dir the world image ray whose camera z equals 1,
// so s is directly the rendered depth.
bool intersect_box(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir, const BoxSpec& box,
                   double& s_entry, int& entry_axis) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    entry_axis = -1;
    for (int ax = 0; ax < 3; ++ax) {
        const double lo = box.center[ax] - box.half_extents[ax];
        const double hi = box.center[ax] + box.half_extents[ax];
        if (dir[ax] == 0.0) {
            if (origin[ax] < lo || origin[ax] > hi) return false;
            continue;
        }
        double near = (lo - origin[ax]) / dir[ax];
        double far = (hi - origin[ax]) / dir[ax];
        if (near > far) std::swap(near, far);
        if (near > t0) {
            t0 = near;
            entry_axis = ax;
        }
        t1 = std::min(t1, far);
        if (t0 > t1) return false;
    }
    if (entry_axis < 0 || t0 <= 0.0) return false;  // inside or behind
    s_entry = t0;
    return true;
}

}  // namespace

std::pair<DepthMap, LabelMap> render(const StructureModel& model, const RigidPose& camera_to_gcs,
                                     const Intrinsics& k) {
    const Eigen::Vector3d origin = camera_to_gcs.translation();
    if (model.contains(origin))
        throw std::invalid_argument("render: camera position lies inside a structure box");

    DepthMap depth(k.width, k.height);
    LabelMap labels(k.width, k.height);
    const Eigen::Matrix3d rot = camera_to_gcs.rotation();

#pragma omp parallel for schedule(static)
    for (int v = 0; v < k.height; ++v) {
        for (int u = 0; u < k.width; ++u) {
            const Eigen::Vector3d dir_cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            const Eigen::Vector3d dir = rot * dir_cam;
            RayHit hit;
            for (int b = 0; b < static_cast<int>(model.boxes().size()); ++b) {
                double s;
                int ax;
                if (!intersect_box(origin, dir, model.boxes()[static_cast<size_t>(b)], s, ax))
                    continue;
                if (s < hit.depth) {
                    hit.depth = s;
                    hit.box = b;
                    hit.face = static_cast<Face>(2 * ax + (dir[ax] > 0.0 ? 1 : 0));
                }
            }
            if (hit.box >= 0) {
                depth.at(v, u) = hit.depth;
                labels.at(v, u) =
                    static_cast<std::uint8_t>(model.class_of({hit.box, hit.face}));
            }
        }
    }
    return {std::move(depth), std::move(labels)};
}

// ---------------------------------------------------------------------------
// noise augmentation
// ---------------------------------------------------------------------------

void NoiseConfig::validate() const {
    if (erosion_min < 0 || erosion_max < erosion_min)
        throw std::invalid_argument("NoiseConfig: bad erosion range");
    if (holes_min < 0 || holes_max < holes_min)
        throw std::invalid_argument("NoiseConfig: bad hole count range");
    if (hole_radius_min < 0.0 || hole_radius_max < hole_radius_min)
        throw std::invalid_argument("NoiseConfig: bad hole radius range");
}

DepthMap augment(const DepthMap& depth, const LabelMap& labels, const NoiseConfig& cfg, Rng& rng) {
    if (depth.width() != labels.width() || depth.height() != labels.height())
        throw std::invalid_argument("augment: depth and labels are not co-registered");
    cfg.validate();
    DepthMap out = depth;
    const int w = depth.width(), h = depth.height();

    // border erosion: zero depth within the sampled width of any label
    // discontinuity (Chebyshev distance, grown by 8-neighbor dilation)
    const int erosion = static_cast<int>(rng.uniform_int(cfg.erosion_min, cfg.erosion_max));
    if (erosion > 0) {
        std::vector<std::uint8_t> edge(static_cast<size_t>(w) * h, 0);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::uint8_t l = labels.at(y, x);
                const bool boundary = (x > 0 && labels.at(y, x - 1) != l) ||
                                      (x + 1 < w && labels.at(y, x + 1) != l) ||
                                      (y > 0 && labels.at(y - 1, x) != l) ||
                                      (y + 1 < h && labels.at(y + 1, x) != l);
                if (boundary) edge[static_cast<size_t>(y) * w + x] = 1;
            }
        }
        for (int step = 1; step < erosion; ++step) {
            std::vector<std::uint8_t> grown = edge;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    if (edge[static_cast<size_t>(y) * w + x]) continue;
                    for (int dy = -1; dy <= 1 && !grown[static_cast<size_t>(y) * w + x]; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int ny = y + dy, nx = x + dx;
                            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                            if (edge[static_cast<size_t>(ny) * w + nx]) {
                                grown[static_cast<size_t>(y) * w + x] = 1;
                                break;
                            }
                        }
                }
            edge.swap(grown);
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (edge[static_cast<size_t>(y) * w + x]) out.at(y, x) = 0.0;
    }

    // dropout holes centered on foreground pixels of the input
    const int holes = static_cast<int>(rng.uniform_int(cfg.holes_min, cfg.holes_max));
    if (holes > 0) {
        std::vector<int> foreground;
        foreground.reserve(static_cast<size_t>(w) * h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (depth.valid(y, x)) foreground.push_back(y * w + x);
        if (!foreground.empty()) {
            for (int i = 0; i < holes; ++i) {
                const int pick = static_cast<int>(
                    rng.uniform_int(0, static_cast<std::int64_t>(foreground.size()) - 1));
                const int cy = foreground[static_cast<size_t>(pick)] / w;
                const int cx = foreground[static_cast<size_t>(pick)] % w;
                const double r = rng.uniform(cfg.hole_radius_min, cfg.hole_radius_max);
                const int ri = static_cast<int>(std::ceil(r));
                for (int y = std::max(0, cy - ri); y <= std::min(h - 1, cy + ri); ++y)
                    for (int x = std::max(0, cx - ri); x <= std::min(w - 1, cx + ri); ++x) {
                        const double dy = y - cy, dx = x - cx;
                        if (dy * dy + dx * dx <= r * r) out.at(y, x) = 0.0;
                    }
            }
        }
    }
    return out;
}

VisibilityMask visibility_mask(const LabelMap& labels, const StructureModel& model, int min_pixels) {
    std::vector<int> counts(static_cast<size_t>(model.side_count()) + 1, 0);
    for (int y = 0; y < labels.height(); ++y)
        for (int x = 0; x < labels.width(); ++x) {
            const int c = labels.at(y, x);
            if (c <= model.side_count()) counts[static_cast<size_t>(c)]++;
        }
    VisibilityMask m(model.side_count());
    for (int k = 0; k < model.side_count(); ++k)
        m.set(k, counts[static_cast<size_t>(k) + 1] >= min_pixels);
    return m;
}

PointCloud sample_surface(const StructureModel& model, double resolution) {
    if (resolution <= 0.0) throw std::invalid_argument("sample_surface: non-positive resolution");
    PointCloud cloud;
    for (int b = 0; b < static_cast<int>(model.boxes().size()); ++b) {
        const BoxSpec& box = model.boxes()[static_cast<size_t>(b)];
        for (int f = 0; f < 6; ++f) {
            const FaceRef ref{b, static_cast<Face>(f)};
            const int ax = face_axis(ref.face);
            const int a1 = (ax + 1) % 3, a2 = (ax + 2) % 3;
            const double e1 = 2.0 * box.half_extents[a1];
            const double e2 = 2.0 * box.half_extents[a2];
            const int n1 = std::max(1, static_cast<int>(std::lround(e1 / resolution)));
            const int n2 = std::max(1, static_cast<int>(std::lround(e2 / resolution)));
            Eigen::Vector3d base = box.center;
            base[ax] += face_sign(ref.face) * box.half_extents[ax];
            const Eigen::Vector3d n = model.face_normal(ref);
            for (int i = 0; i < n1; ++i) {
                for (int j = 0; j < n2; ++j) {
                    Eigen::Vector3d p = base;
                    p[a1] += -box.half_extents[a1] + (i + 0.5) * e1 / n1;
                    p[a2] += -box.half_extents[a2] + (j + 0.5) * e2 / n2;
                    // skip samples buried inside a neighboring box
                    if (model.contains(p, 1e-9)) continue;
                    cloud.points.push_back(p);
                    cloud.normals.push_back(n);
                }
            }
        }
    }
    return cloud;
}

}  // namespace boxcal
