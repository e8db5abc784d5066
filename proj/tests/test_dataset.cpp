#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "boxcal/dataset.hpp"
#include "test_utils.hpp"

using namespace boxcal;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("gen_dataset: count 0 produces a valid empty manifest") {
    TempDir dir("boxcal_ds_empty");
    const StructureModel model = StructureModel::default_structure();
    const auto pool = default_intrinsics_pool(64, 48);
    const DatasetManifest m =
        gen_dataset(model, PoseSamplerConfig{}, NoiseConfig{}, pool, 0, 1, dir.path.string());
    CHECK(m.samples.empty());
    const DatasetManifest back = load_manifest((dir.path / "manifest.json").string());
    CHECK(back.samples.empty());
    CHECK(back.width == 64);
    CHECK(back.height == 48);
}

TEST_CASE("gen_dataset: same seed twice is byte-identical") {
    TempDir a("boxcal_ds_a"), b("boxcal_ds_b");
    const StructureModel model = StructureModel::default_structure();
    const auto pool = default_intrinsics_pool(64, 48);
    NoiseConfig noise;
    noise.erosion_min = 1;
    noise.erosion_max = 2;
    noise.holes_min = 1;
    noise.holes_max = 3;
    noise.hole_radius_min = 1.0;
    noise.hole_radius_max = 3.0;
    gen_dataset(model, PoseSamplerConfig{}, noise, pool, 3, 99, a.path.string());
    gen_dataset(model, PoseSamplerConfig{}, noise, pool, 3, 99, b.path.string());
    for (const auto& name : {"manifest.json", "structure.json", "view_000000_depth.u16",
                             "view_000002_labels.u8", "view_000001_depth.u16"}) {
        CHECK(read_bytes(a.path / name) == read_bytes(b.path / name));
    }
}

TEST_CASE("gen_dataset: recorded per-sample seed regenerates the raster byte for byte") {
    TempDir dir("boxcal_ds_regen");
    const StructureModel model = StructureModel::default_structure();
    const auto pool = default_intrinsics_pool(64, 48);
    NoiseConfig noise;
    noise.erosion_min = 1;
    noise.erosion_max = 2;
    noise.holes_min = 0;
    noise.holes_max = 2;
    noise.hole_radius_min = 1.0;
    noise.hole_radius_max = 2.5;
    PoseSamplerConfig sampler;
    const DatasetManifest m = gen_dataset(model, sampler, noise, pool, 4, 7, dir.path.string());

    for (const auto& rec : m.samples) {
        const RenderedSample regen = render_sample(model, sampler, noise, pool, rec.seed);
        CHECK(regen.intrinsics_index == rec.intrinsics_index);
        CHECK((regen.gt_pose.matrix() - rec.gt_pose.matrix()).norm() == 0.0);
        const fs::path tmp = dir.path / "regen.bin";
        save_depth_raster(tmp.string(), regen.depth);
        CHECK(read_bytes(tmp) == read_bytes(dir.path / rec.depth_file));
        save_label_raster(tmp.string(), regen.labels);
        CHECK(read_bytes(tmp) == read_bytes(dir.path / rec.label_file));
    }
}

TEST_CASE("manifest: missing raster files are rejected on load") {
    TempDir dir("boxcal_ds_missing");
    const StructureModel model = StructureModel::default_structure();
    const auto pool = default_intrinsics_pool(32, 24);
    gen_dataset(model, PoseSamplerConfig{}, NoiseConfig{}, pool, 2, 5, dir.path.string());
    fs::remove(dir.path / "view_000001_depth.u16");
    CHECK_THROWS_AS(load_manifest((dir.path / "manifest.json").string()), std::runtime_error);
}

TEST_CASE("views_from_manifest: GT poses and labels travel along") {
    TempDir dir("boxcal_ds_views");
    const StructureModel model = StructureModel::default_structure();
    const auto pool = default_intrinsics_pool(64, 48);
    const DatasetManifest m =
        gen_dataset(model, PoseSamplerConfig{}, NoiseConfig{}, pool, 3, 21, dir.path.string());
    const ViewSet views = views_from_manifest(m, model);
    REQUIRE(views.views.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(views.views[i].gt_pose.has_value());
        CHECK(views.views[i].gt_labels.has_value());
        CHECK(views.views[i].depth.width() == 64);
        // depth quantization to millimeters only
        const DepthMap original = load_sample_depth(m, m.samples[i]);
        CHECK(views.views[i].depth.data() == original.data());
    }
}

TEST_CASE("dataset_sample_source: deterministic lookup by seed") {
    TempDir dir("boxcal_ds_source");
    const StructureModel model = StructureModel::default_structure();
    const auto pool = default_intrinsics_pool(32, 24);
    const DatasetManifest m =
        gen_dataset(model, PoseSamplerConfig{}, NoiseConfig{}, pool, 3, 33, dir.path.string());
    const auto source = dataset_sample_source(m);
    const auto s1 = source(5);
    const auto s2 = source(5);
    CHECK(s1.depth.data() == s2.depth.data());
    CHECK(s1.labels.data() == s2.labels.data());
}

TEST_CASE("export_ply: point conservation and parseable header") {
    TempDir dir("boxcal_ply");
    const StructureModel model = StructureModel::default_structure();
    const Intrinsics k(60.0, 60.0, 31.5, 23.5, 64, 48);
    PoseSamplerConfig cfg;
    Rng rng(3);
    size_t expected = 0;
    std::vector<PointCloud> clouds;
    for (int i = 0; i < 2; ++i) {
        const RigidPose pose = sample_pose(cfg, rng);
        const auto [depth, labels] = render(model, pose, k);
        const VertexMap vm = deproject(depth, k);
        expected += vm.valid_count();
        clouds.push_back(transform(pose, to_point_cloud(vm)));
    }
    const fs::path out = dir.path / "fused.ply";
    export_ply(out.string(), clouds);

    std::ifstream f(out);
    std::string line;
    std::getline(f, line);
    CHECK(line == "ply");
    size_t vertex_count = 0;
    while (std::getline(f, line)) {
        if (line.rfind("element vertex ", 0) == 0)
            vertex_count = std::stoul(line.substr(15));
        if (line == "end_header") break;
    }
    CHECK(vertex_count == expected);
    size_t rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) rows++;
    CHECK(rows == expected);
}

TEST_CASE("evaluate_calibration: identity calibration on misaligned views stays finite") {
    const StructureModel model = StructureModel::default_structure();
    const Intrinsics k(60.0, 60.0, 31.5, 23.5, 64, 48);
    PoseSamplerConfig cfg;
    ViewSet views;
    for (int i = 0; i < 2; ++i) {
        Rng rng(static_cast<std::uint64_t>(i) + 40);
        View v;
        v.camera_id = "cam" + std::to_string(i);
        v.gt_pose = sample_pose(cfg, rng);
        auto [depth, labels] = render(model, *v.gt_pose, k);
        v.depth = std::move(depth);
        v.gt_labels = std::move(labels);
        v.intrinsics = k;
        views.views.push_back(std::move(v));
    }
    CalibrationResult identity;
    identity.camera_ids = {"cam0", "cam1"};
    identity.initial = {RigidPose(), RigidPose()};
    identity.refined = {RigidPose(), RigidPose()};
    identity.diagnostics.resize(2);

    const auto reports = evaluate_calibration(views, identity, model);
    REQUIRE(!reports.empty());
    bool found = false;
    for (const auto& r : reports) {
        if (r.name == "rms_initial") {
            REQUIRE(r.values.size() == 1);
            CHECK(r.values[0] > 0.1);  // badly misaligned
            CHECK(std::isfinite(r.values[0]));
            found = true;
        }
    }
    CHECK(found);
}

TEST_CASE("metric reports: csv and json sinks") {
    TempDir dir("boxcal_reports");
    std::vector<MetricReport> reports = {{"alpha", {1.0, 2.0}}, {"beta", {0.5}}};
    const auto csv_path = dir.path / "r.csv";
    const auto json_path = dir.path / "r.json";
    save_reports_csv(csv_path.string(), reports);
    save_reports_json(json_path.string(), reports);
    const std::string csv = read_bytes(csv_path);
    CHECK(csv.find("sample,alpha,beta") != std::string::npos);
    const std::string js = read_bytes(json_path);
    CHECK(js.find("\"mean\": 1.5") != std::string::npos);
}
