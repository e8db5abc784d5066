#include <doctest.h>

#include <cmath>
#include <set>

#include "boxcal/geometry.hpp"
#include "boxcal/structure.hpp"
#include "test_utils.hpp"

using namespace boxcal;

namespace {

// Test-local ray/box intersection, deliberately written differently from
// the renderer: intersect the ray with each of the six face planes and
// keep hits whose point lies inside the face rectangle.
bool oracle_hit(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const BoxSpec& box,
                double& best_s, Face& best_face) {
    best_s = std::numeric_limits<double>::infinity();
    bool any = false;
    for (int f = 0; f < 6; ++f) {
        const Face face = static_cast<Face>(f);
        const int ax = face_axis(face);
        const double plane = box.center[ax] + face_sign(face) * box.half_extents[ax];
        if (d[ax] == 0.0) continue;
        const double s = (plane - o[ax]) / d[ax];
        if (s <= 0.0 || s >= best_s) continue;
        const Eigen::Vector3d p = o + s * d;
        bool inside = true;
        for (int other = 0; other < 3; ++other) {
            if (other == ax) continue;
            if (std::abs(p[other] - box.center[other]) > box.half_extents[other] + 1e-12)
                inside = false;
        }
        if (inside) {
            best_s = s;
            best_face = face;
            any = true;
        }
    }
    return any;
}

StructureModel unit_cube_no_bottom() {
    return StructureModel::from_boxes({{{0, 0, 0}, {0.5, 0.5, 0.5}}}, {{0, Face::neg_y}});
}

RigidPose look_at_origin_from(const Eigen::Vector3d& pos) {
    const Eigen::Vector3d z = (-pos).normalized();
    Eigen::Vector3d x = z.cross(Eigen::Vector3d::UnitY()).normalized();
    const Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix3d r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return RigidPose(svd.matrixU() * svd.matrixV().transpose(), pos);
}

}  // namespace

TEST_CASE("structure: unit cube with the bottom excluded has K=5") {
    const StructureModel m = unit_cube_no_bottom();
    CHECK(m.side_count() == 5);
    bool found_top = false;
    for (int k = 0; k < 5; ++k)
        if (m.side_centers().col(k).isApprox(Eigen::Vector3d(0, 0.5, 0), 1e-15)) found_top = true;
    CHECK(found_top);
}

TEST_CASE("structure: default build exposes 21 labeled sides") {
    const StructureModel m = StructureModel::default_structure();
    CHECK(m.boxes().size() == 4);
    CHECK(m.side_count() == 21);
    CHECK(m.side_centers().cols() == 21);
    // ordering is box-major, face-minor
    CHECK(m.labeled_sides()[0].box == 0);
    CHECK(m.labeled_sides()[0].face == Face::pos_x);
}

TEST_CASE("structure: validation failures") {
    // duplicate excluded face
    CHECK_THROWS_AS(StructureModel::from_boxes({{{0, 0, 0}, {0.5, 0.5, 0.5}}},
                                               {{0, Face::neg_y}, {0, Face::neg_y}}),
                    std::invalid_argument);
    // overlapping interiors
    CHECK_THROWS_AS(StructureModel::from_boxes(
                        {{{0, 0, 0}, {0.5, 0.5, 0.5}}, {{0.3, 0, 0}, {0.5, 0.5, 0.5}}}, {}),
                    std::invalid_argument);
    // K = 0
    CHECK_THROWS_AS(StructureModel::from_boxes({{{0, 0, 0}, {0.5, 0.5, 0.5}}},
                                               {{0, Face::pos_x},
                                                {0, Face::neg_x},
                                                {0, Face::pos_y},
                                                {0, Face::neg_y},
                                                {0, Face::pos_z},
                                                {0, Face::neg_z}}),
                    std::invalid_argument);
    // touching on a shared face is fine
    CHECK_NOTHROW(StructureModel::from_boxes(
        {{{0, 0, 0}, {0.5, 0.5, 0.5}}, {{1.0, 0, 0}, {0.5, 0.5, 0.5}}}, {}));
}

TEST_CASE("structure: JSON description round trip and validation") {
    const StructureModel m = StructureModel::default_structure();
    const std::string text = structure_to_json_text(m);
    const StructureModel back = structure_from_json_text(text);
    CHECK(back.side_count() == m.side_count());
    CHECK((back.side_centers() - m.side_centers()).norm() == 0.0);

    CHECK_THROWS_AS(structure_from_json_text("{\"format\": \"nope\"}"), std::invalid_argument);
    CHECK_THROWS_AS(structure_from_json_text("not json at all"), std::invalid_argument);

    // a face listed as both labeled and excluded is rejected
    const std::string contradictory = R"({
      "format": "boxcal-structure-v1",
      "boxes": [{"center": [0,0,0], "half_extents": [0.5,0.5,0.5]}],
      "excluded_faces": [{"box": 0, "face": "-y"}],
      "labeled_faces": [{"box": 0, "face": "-y"}]
    })";
    CHECK_THROWS_WITH_AS(structure_from_json_text(contradictory),
                         doctest::Contains("both labeled and excluded"), std::invalid_argument);
}

TEST_CASE("sample_pose: degenerate ranges give a deterministic look-at-origin pose") {
    PoseSamplerConfig cfg;
    cfg.rho_min = cfg.rho_max = 1.65;
    cfg.phi_min_deg = cfg.phi_max_deg = 0.0;
    cfg.z_min = cfg.z_max = 0.0;
    cfg.look_radius = 0.0;
    cfg.max_roll_deg = 0.0;
    Rng rng(1);
    const RigidPose pose = sample_pose(cfg, rng);
    CHECK(pose.translation().isApprox(Eigen::Vector3d(1.65, 0, 0), 1e-12));
    // optical axis points at the origin
    const Eigen::Vector3d z_world = pose.rotation().col(2);
    CHECK(z_world.isApprox(Eigen::Vector3d(-1, 0, 0), 1e-12));
    // y axis points down
    CHECK(pose.rotation().col(1).isApprox(Eigen::Vector3d(0, -1, 0), 1e-12));
}

TEST_CASE("sample_pose: Table-1 style range lands inside [rho_min, rho_max]") {
    PoseSamplerConfig cfg;  // defaults are the 150-225 cm preset
    Rng rng(42);
    for (int i = 0; i < 200; ++i) {
        const RigidPose pose = sample_pose(cfg, rng);
        const Eigen::Vector3d p = pose.translation();
        const double rho = std::hypot(p.x(), p.z());
        CHECK(rho >= 1.50);
        CHECK(rho <= 2.25);
        CHECK(p.y() >= cfg.z_min);
        CHECK(p.y() <= cfg.z_max);
        // valid rigid pose
        CHECK((pose.rotation().transpose() * pose.rotation() - Eigen::Matrix3d::Identity())
                  .norm() < 1e-9);
        CHECK(std::abs(pose.rotation().determinant() - 1.0) < 1e-9);
        // x axis parallel to the floor plane up to the configured roll
        const double roll_component = std::abs(pose.rotation().col(0).y());
        CHECK(roll_component <= std::sin(cfg.max_roll_deg * M_PI / 180.0) + 1e-9);
    }
}

TEST_CASE("sample_pose: deterministic per seed") {
    PoseSamplerConfig cfg;
    Rng a(123), b(123);
    const RigidPose pa = sample_pose(cfg, a);
    const RigidPose pb = sample_pose(cfg, b);
    CHECK((pa.matrix() - pb.matrix()).norm() == 0.0);
}

TEST_CASE("render: camera facing away sees background only") {
    const StructureModel m = unit_cube_no_bottom();
    // at +x looking further along +x
    Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
    r.col(0) = Eigen::Vector3d(0, 0, -1);
    r.col(1) = Eigen::Vector3d(0, -1, 0);
    r.col(2) = Eigen::Vector3d(1, 0, 0);
    const RigidPose pose(r, {2, 0, 0});
    const Intrinsics k(40, 40, 16, 12, 32, 24);
    const auto [depth, labels] = render(m, pose, k);
    for (int v = 0; v < 24; ++v)
        for (int u = 0; u < 32; ++u) {
            CHECK(depth.at(v, u) == 0.0);
            CHECK(labels.at(v, u) == 0);
        }
}

TEST_CASE("render: principal ray hits the near face of a unit cube at depth 1.5") {
    const StructureModel m = unit_cube_no_bottom();
    Eigen::Matrix3d r = Eigen::Matrix3d::Identity();  // camera axes = GCS axes: looking +z
    const RigidPose pose(r, {0, 0, -2});
    const Intrinsics k(100, 100, 10, 10, 21, 21);
    const auto [depth, labels] = render(m, pose, k);
    CHECK(depth.at(10, 10) == doctest::Approx(1.5).epsilon(1e-12));
    // the hit face is -z of the cube
    CHECK(labels.at(10, 10) == m.class_of({0, Face::neg_z}));
}

TEST_CASE("render: camera inside a box is rejected") {
    const StructureModel m = unit_cube_no_bottom();
    const RigidPose pose(Eigen::Matrix3d::Identity(), {0, 0, 0});
    const Intrinsics k(10, 10, 4, 4, 8, 8);
    CHECK_THROWS_AS(render(m, pose, k), std::invalid_argument);
}

TEST_CASE("render: every labeled pixel lies on its face plane after the GT transform") {
    const StructureModel m = StructureModel::default_structure();
    PoseSamplerConfig cfg;
    Rng rng(900);
    const Intrinsics k(251.0, 252.5, 160.2, 119.6, 320, 240);
    for (int trial = 0; trial < 4; ++trial) {
        const RigidPose pose = sample_pose(cfg, rng);
        const auto [depth, labels] = render(m, pose, k);
        const VertexMap vm = deproject(depth, k);
        long checked = 0;
        for (int v = 0; v < 240; ++v) {
            for (int u = 0; u < 320; ++u) {
                const int c = labels.at(v, u);
                if (c == 0) continue;
                REQUIRE(vm.valid(v, u));
                const FaceRef face = m.face_of_class(c);
                const BoxSpec& box = m.boxes()[static_cast<size_t>(face.box)];
                const int ax = face_axis(face.face);
                const double plane = box.center[ax] + face_sign(face.face) * box.half_extents[ax];
                const Eigen::Vector3d world = pose.apply(vm.point(v, u));
                REQUIRE(std::abs(world[ax] - plane) < 1e-6);
                // and inside the face rectangle
                for (int other = 0; other < 3; ++other) {
                    if (other == ax) continue;
                    REQUIRE(std::abs(world[other] - box.center[other]) <=
                            box.half_extents[other] + 1e-6);
                }
                checked++;
            }
        }
        CHECK(checked > 1000);  // the structure is actually in view
    }
}

TEST_CASE("render: depth equals the brute-force minimum over per-box intersections") {
    const StructureModel m = StructureModel::default_structure();
    PoseSamplerConfig cfg;
    Rng rng(31);
    const Intrinsics k(24.0, 24.0, 15.5, 15.5, 32, 32);
    for (int trial = 0; trial < 6; ++trial) {
        const RigidPose pose = sample_pose(cfg, rng);
        const auto [depth, labels] = render(m, pose, k);
        for (int v = 0; v < 32; ++v) {
            for (int u = 0; u < 32; ++u) {
                const Eigen::Vector3d dir =
                    pose.rotation() *
                    Eigen::Vector3d((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
                double best = std::numeric_limits<double>::infinity();
                Face face = Face::pos_x;
                int best_box = -1;
                for (int b = 0; b < static_cast<int>(m.boxes().size()); ++b) {
                    double s;
                    Face f;
                    if (oracle_hit(pose.translation(), dir, m.boxes()[static_cast<size_t>(b)], s,
                                   f) &&
                        s < best) {
                        best = s;
                        face = f;
                        best_box = b;
                    }
                }
                if (best_box < 0) {
                    REQUIRE(depth.at(v, u) == 0.0);
                    REQUIRE(labels.at(v, u) == 0);
                } else {
                    REQUIRE(depth.at(v, u) == doctest::Approx(best).epsilon(1e-10));
                    REQUIRE(labels.at(v, u) == m.class_of({best_box, face}));
                }
            }
        }
    }
}

TEST_CASE("augment: all-zero noise config is a no-op") {
    const StructureModel m = unit_cube_no_bottom();
    const RigidPose pose = look_at_origin_from({0, 0.3, -2});
    const Intrinsics k(40, 40, 16, 12, 32, 24);
    const auto [depth, labels] = render(m, pose, k);
    Rng rng(4);
    const DepthMap out = augment(depth, labels, NoiseConfig{}, rng);
    CHECK(out.data() == depth.data());
}

TEST_CASE("augment: erosion width 1 zeroes exactly the label-discontinuity pixels") {
    // synthetic 6x6: left half class 1 (depth 2), right half background (depth 0)
    DepthMap depth(6, 6);
    LabelMap labels(6, 6);
    for (int v = 0; v < 6; ++v)
        for (int u = 0; u < 3; ++u) {
            depth.at(v, u) = 2.0;
            labels.at(v, u) = 1;
        }
    NoiseConfig cfg;
    cfg.erosion_min = cfg.erosion_max = 1;
    Rng rng(9);
    const DepthMap out = augment(depth, labels, cfg, rng);
    for (int v = 0; v < 6; ++v) {
        CHECK(out.at(v, 2) == 0.0);   // foreground side of the edge
        CHECK(out.at(v, 1) == 2.0);   // one pixel further in, untouched
        CHECK(out.at(v, 0) == 2.0);
    }
}

TEST_CASE("augment: erosion never grows depth and labels stay clean") {
    const StructureModel m = StructureModel::default_structure();
    PoseSamplerConfig pcfg;
    Rng prng(55);
    const RigidPose pose = sample_pose(pcfg, prng);
    const Intrinsics k(80.0, 80.0, 39.5, 29.5, 80, 60);
    const auto [depth, labels] = render(m, pose, k);
    NoiseConfig cfg;
    cfg.erosion_min = 1;
    cfg.erosion_max = 3;
    cfg.holes_min = 2;
    cfg.holes_max = 5;
    cfg.hole_radius_min = 1.0;
    cfg.hole_radius_max = 4.0;
    Rng rng(77);
    const LabelMap labels_before = labels;
    const DepthMap out = augment(depth, labels, cfg, rng);
    for (int v = 0; v < 60; ++v)
        for (int u = 0; u < 80; ++u) {
            if (depth.at(v, u) == 0.0) CHECK(out.at(v, u) == 0.0);
            // values are either kept verbatim or zeroed
            CHECK((out.at(v, u) == depth.at(v, u) || out.at(v, u) == 0.0));
        }
    CHECK(labels.data() == labels_before.data());
}

TEST_CASE("augment: hole dropout area matches the analytic expectation") {
    // flat foreground, one hole of fixed radius; expectation computed by
    // brute-force integration over all possible centers
    const int w = 64, h = 48;
    DepthMap depth(w, h, 2.0);
    LabelMap labels(w, h, 1);
    NoiseConfig cfg;
    cfg.holes_min = cfg.holes_max = 1;
    cfg.hole_radius_min = cfg.hole_radius_max = 3.0;

    double expected = 0.0;  // mean zeroed pixels per run
    {
        const double r2 = 3.0 * 3.0;
        for (int cy = 0; cy < h; ++cy)
            for (int cx = 0; cx < w; ++cx) {
                long count = 0;
                const int ri = 3;
                for (int y = std::max(0, cy - ri); y <= std::min(h - 1, cy + ri); ++y)
                    for (int x = std::max(0, cx - ri); x <= std::min(w - 1, cx + ri); ++x)
                        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r2) count++;
                expected += static_cast<double>(count);
            }
        expected /= static_cast<double>(w) * h;
    }

    double observed = 0.0;
    Rng rng(321);
    const int runs = 100;
    for (int i = 0; i < runs; ++i) {
        const DepthMap out = augment(depth, labels, cfg, rng);
        long zeroed = 0;
        for (int v = 0; v < h; ++v)
            for (int u = 0; u < w; ++u)
                if (out.at(v, u) == 0.0) zeroed++;
        observed += static_cast<double>(zeroed);
    }
    observed /= runs;
    // hole area ~29 px; the run mean has std ~ sqrt over 100 runs
    CHECK(observed == doctest::Approx(expected).epsilon(0.15));
}

TEST_CASE("visibility_mask: thresholds and shape") {
    const StructureModel m = StructureModel::default_structure();
    LabelMap labels(64, 48);  // empty view
    VisibilityMask mask = visibility_mask(labels, m, 16);
    CHECK(mask.columns() == m.side_count());
    CHECK(mask.visible_count() == 0);

    // exactly min_pixels pixels of class 3 -> visible
    for (int i = 0; i < 16; ++i) labels.at(0, i) = 3;
    mask = visibility_mask(labels, m, 16);
    CHECK(mask[2]);
    CHECK(mask.visible_count() == 1);
    // one fewer -> invisible
    labels.at(0, 15) = 0;
    mask = visibility_mask(labels, m, 16);
    CHECK_FALSE(mask[2]);

    // the 3xK broadcast view has uniform columns
    const Eigen::Matrix3Xd mm = mask.matrix();
    CHECK(mm.cols() == m.side_count());
    for (int k = 0; k < mm.cols(); ++k) {
        CHECK(mm(0, k) == mm(1, k));
        CHECK(mm(1, k) == mm(2, k));
    }
}

TEST_CASE("sample_surface: points sit on box surfaces, buried samples dropped") {
    const StructureModel m = StructureModel::default_structure();
    const PointCloud cloud = sample_surface(m, 0.02);
    CHECK(cloud.size() > 1000);
    CHECK(cloud.has_normals());
    for (size_t i = 0; i < cloud.points.size(); i += 97) {
        const Eigen::Vector3d& p = cloud.points[i];
        // on some box boundary: distance zero to the box surface
        bool on_surface = false;
        for (const auto& b : m.boxes()) {
            const Eigen::Vector3d d = (p - b.center).cwiseAbs() - b.half_extents;
            if (d.maxCoeff() == 0.0 && (d.array() <= 0.0).all()) on_surface = true;
        }
        CHECK(on_surface);
        CHECK_FALSE(m.contains(p, 1e-9));
        CHECK(cloud.normals[i].norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
}
