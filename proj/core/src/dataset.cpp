#include "boxcal/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace boxcal {

std::vector<Intrinsics> default_intrinsics_pool(int width, int height) {
    // spread of focal lengths around typical commodity depth sensors
    const std::vector<Intrinsics> base = {
        Intrinsics(252.0, 252.0, 159.5, 119.5, 320, 240),
        Intrinsics(290.0, 290.0, 160.2, 120.1, 320, 240),
        Intrinsics(230.0, 231.5, 158.8, 119.2, 320, 240),
    };
    std::vector<Intrinsics> out;
    out.reserve(base.size());
    for (const auto& k : base) out.push_back(k.scaled(width, height));
    return out;
}

RenderedSample render_sample(const StructureModel& model, const PoseSamplerConfig& sampler,
                             const NoiseConfig& noise, const std::vector<Intrinsics>& pool,
                             std::uint64_t seed) {
    if (pool.empty()) throw std::invalid_argument("render_sample: empty intrinsics pool");
    Rng rng(seed);
    RenderedSample s;
    s.intrinsics_index =
        static_cast<int>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1));
    s.gt_pose = sample_pose(sampler, rng);
    auto [depth, labels] = render(model, s.gt_pose, pool[static_cast<size_t>(s.intrinsics_index)]);
    s.labels = std::move(labels);
    s.depth = noise.is_zero() ? std::move(depth) : augment(depth, s.labels, noise, rng);
    return s;
}

namespace {

std::string sample_stem(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "view_%06d", id);
    return buf;
}

nlohmann::json intrinsics_to_json(const Intrinsics& k) {
    return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}

Intrinsics intrinsics_from_json(const nlohmann::json& j, int width, int height) {
    return Intrinsics(j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                      j.at("cy").get<double>(), width, height);
}

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

DatasetManifest gen_dataset(const StructureModel& model, const PoseSamplerConfig& sampler,
                            const NoiseConfig& noise, const std::vector<Intrinsics>& pool,
                            int count, std::uint64_t master_seed, const std::string& out_dir) {
    if (count < 0) throw std::invalid_argument("gen_dataset: negative sample count");
    if (pool.empty()) throw std::invalid_argument("gen_dataset: empty intrinsics pool");
    sampler.validate();
    noise.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        throw std::runtime_error("gen_dataset: cannot create output directory " + out_dir);

    DatasetManifest m;
    m.dir = out_dir;
    m.width = pool.front().width;
    m.height = pool.front().height;
    for (const auto& k : pool)
        if (k.width != m.width || k.height != m.height)
            throw std::invalid_argument("gen_dataset: intrinsics pool mixes resolutions");
    m.master_seed = master_seed;
    m.structure_file = "structure.json";
    m.intrinsics_pool = pool;
    m.sampler = sampler;
    m.noise = noise;

    save_structure((fs::path(out_dir) / m.structure_file).string(), model);

    for (int i = 0; i < count; ++i) {
        const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(i));
        const RenderedSample sample = render_sample(model, sampler, noise, pool, seed);
        SampleRecord rec;
        rec.id = i;
        rec.seed = seed;
        rec.intrinsics_index = sample.intrinsics_index;
        rec.depth_file = sample_stem(i) + "_depth.u16";
        rec.label_file = sample_stem(i) + "_labels.u8";
        rec.gt_pose = sample.gt_pose;
        save_depth_raster((fs::path(out_dir) / rec.depth_file).string(), sample.depth);
        save_label_raster((fs::path(out_dir) / rec.label_file).string(), sample.labels);
        m.samples.push_back(std::move(rec));
    }
    save_manifest(m);
    return m;
}

void save_manifest(const DatasetManifest& m) {
    nlohmann::json j;
    j["format"] = "boxcal-dataset-v1";
    j["width"] = m.width;
    j["height"] = m.height;
    j["master_seed"] = m.master_seed;
    j["structure"] = m.structure_file;
    j["intrinsics_pool"] = nlohmann::json::array();
    for (const auto& k : m.intrinsics_pool) j["intrinsics_pool"].push_back(intrinsics_to_json(k));
    j["sampler"] = {{"rho_min", m.sampler.rho_min},
                    {"rho_max", m.sampler.rho_max},
                    {"phi_min_deg", m.sampler.phi_min_deg},
                    {"phi_max_deg", m.sampler.phi_max_deg},
                    {"z_min", m.sampler.z_min},
                    {"z_max", m.sampler.z_max},
                    {"look_radius", m.sampler.look_radius},
                    {"max_roll_deg", m.sampler.max_roll_deg}};
    j["noise"] = {{"erosion_min", m.noise.erosion_min},
                  {"erosion_max", m.noise.erosion_max},
                  {"holes_min", m.noise.holes_min},
                  {"holes_max", m.noise.holes_max},
                  {"hole_radius_min", m.noise.hole_radius_min},
                  {"hole_radius_max", m.noise.hole_radius_max},
                  {"seed", m.noise.seed}};
    j["samples"] = nlohmann::json::array();
    for (const auto& s : m.samples) {
        j["samples"].push_back({{"id", s.id},
                                {"seed", s.seed},
                                {"intrinsics_index", s.intrinsics_index},
                                {"depth_file", s.depth_file},
                                {"label_file", s.label_file},
                                {"gt_pose_camera_to_gcs", pose_to_json(s.gt_pose)}});
    }
    std::ofstream f(fs::path(m.dir) / "manifest.json");
    if (!f) throw std::runtime_error("save_manifest: cannot open manifest.json in " + m.dir);
    f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw std::runtime_error("load_manifest: cannot open " + manifest_path);
    std::stringstream ss;
    ss << f.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("load_manifest: invalid JSON: ") + e.what());
    }
    if (j.value("format", "") != "boxcal-dataset-v1")
        throw std::runtime_error("load_manifest: unrecognized format field");

    DatasetManifest m;
    m.dir = fs::path(manifest_path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.structure_file = j.at("structure").get<std::string>();
    for (const auto& jk : j.at("intrinsics_pool"))
        m.intrinsics_pool.push_back(intrinsics_from_json(jk, m.width, m.height));
    const auto& js = j.at("sampler");
    m.sampler.rho_min = js.at("rho_min").get<double>();
    m.sampler.rho_max = js.at("rho_max").get<double>();
    m.sampler.phi_min_deg = js.at("phi_min_deg").get<double>();
    m.sampler.phi_max_deg = js.at("phi_max_deg").get<double>();
    m.sampler.z_min = js.at("z_min").get<double>();
    m.sampler.z_max = js.at("z_max").get<double>();
    m.sampler.look_radius = js.at("look_radius").get<double>();
    m.sampler.max_roll_deg = js.at("max_roll_deg").get<double>();
    const auto& jn = j.at("noise");
    m.noise.erosion_min = jn.at("erosion_min").get<int>();
    m.noise.erosion_max = jn.at("erosion_max").get<int>();
    m.noise.holes_min = jn.at("holes_min").get<int>();
    m.noise.holes_max = jn.at("holes_max").get<int>();
    m.noise.hole_radius_min = jn.at("hole_radius_min").get<double>();
    m.noise.hole_radius_max = jn.at("hole_radius_max").get<double>();
    m.noise.seed = jn.at("seed").get<std::uint64_t>();
    for (const auto& jsample : j.at("samples")) {
        SampleRecord s;
        s.id = jsample.at("id").get<int>();
        s.seed = jsample.at("seed").get<std::uint64_t>();
        s.intrinsics_index = jsample.at("intrinsics_index").get<int>();
        s.depth_file = jsample.at("depth_file").get<std::string>();
        s.label_file = jsample.at("label_file").get<std::string>();
        s.gt_pose = pose_from_json(jsample.at("gt_pose_camera_to_gcs"));
        if (!fs::exists(fs::path(m.dir) / s.depth_file) ||
            !fs::exists(fs::path(m.dir) / s.label_file))
            throw std::runtime_error("load_manifest: missing raster for sample " +
                                     std::to_string(s.id));
        m.samples.push_back(std::move(s));
    }
    return m;
}

DepthMap load_sample_depth(const DatasetManifest& m, const SampleRecord& s) {
    return load_depth_raster((fs::path(m.dir) / s.depth_file).string(), m.width, m.height);
}

LabelMap load_sample_labels(const DatasetManifest& m, const SampleRecord& s) {
    return load_label_raster((fs::path(m.dir) / s.label_file).string(), m.width, m.height);
}

ViewSet views_from_manifest(const DatasetManifest& manifest, const StructureModel&) {
    ViewSet set;
    for (const auto& s : manifest.samples) {
        View v;
        v.camera_id = "cam" + std::to_string(s.id);
        v.depth = load_sample_depth(manifest, s);
        v.intrinsics = manifest.intrinsics_pool[static_cast<size_t>(s.intrinsics_index)];
        v.gt_pose = s.gt_pose;
        v.gt_labels = load_sample_labels(manifest, s);
        set.views.push_back(std::move(v));
    }
    set.validate();
    return set;
}

nn::SampleSource live_sample_source(const StructureModel& model, const PoseSamplerConfig& sampler,
                                    const NoiseConfig& noise, std::vector<Intrinsics> pool) {
    if (pool.empty()) throw std::invalid_argument("live_sample_source: empty intrinsics pool");
    return [&model, sampler, noise, pool = std::move(pool)](std::uint64_t seed) {
        RenderedSample s = render_sample(model, sampler, noise, pool, seed);
        return nn::TrainSample{std::move(s.depth), std::move(s.labels),
                               pool[static_cast<size_t>(s.intrinsics_index)]};
    };
}

nn::SampleSource dataset_sample_source(const DatasetManifest& manifest) {
    if (manifest.samples.empty())
        throw std::invalid_argument("dataset_sample_source: empty dataset");
    return [&manifest](std::uint64_t seed) {
        const auto& rec = manifest.samples[static_cast<size_t>(
            seed % static_cast<std::uint64_t>(manifest.samples.size()))];
        return nn::TrainSample{
            load_sample_depth(manifest, rec), load_sample_labels(manifest, rec),
            manifest.intrinsics_pool[static_cast<size_t>(rec.intrinsics_index)]};
    };
}

void export_ply(const std::string& path, const std::vector<PointCloud>& per_camera_clouds) {
    static constexpr std::array<std::array<int, 3>, 8> palette = {{{230, 25, 75},
                                                                   {60, 180, 75},
                                                                   {0, 130, 200},
                                                                   {245, 130, 48},
                                                                   {145, 30, 180},
                                                                   {70, 240, 240},
                                                                   {240, 50, 230},
                                                                   {128, 128, 0}}};
    size_t total = 0;
    for (const auto& c : per_camera_clouds) total += c.points.size();
    std::ofstream f(path);
    if (!f) throw std::runtime_error("export_ply: cannot open " + path);
    f << "ply\nformat ascii 1.0\nelement vertex " << total
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    f.precision(8);
    for (size_t c = 0; c < per_camera_clouds.size(); ++c) {
        const auto& col = palette[c % palette.size()];
        for (const auto& p : per_camera_clouds[c].points)
            f << p.x() << " " << p.y() << " " << p.z() << " " << col[0] << " " << col[1] << " "
              << col[2] << "\n";
    }
    if (!f) throw std::runtime_error("export_ply: write failed for " + path);
}

std::vector<PointCloud> fuse_views(const ViewSet& views, const std::vector<RigidPose>& poses,
                                   const std::vector<CameraDiagnostics>& diagnostics,
                                   bool skip_failed) {
    std::vector<PointCloud> out;
    for (size_t i = 0; i < views.views.size(); ++i) {
        if (skip_failed && i < diagnostics.size() && diagnostics[i].initial_failed) continue;
        const VertexMap vm = deproject(views.views[i].depth, views.views[i].intrinsics);
        out.push_back(transform(poses[i], to_point_cloud(vm)));
    }
    return out;
}

std::vector<MetricReport> evaluate_calibration(const ViewSet& views,
                                               const CalibrationResult& calib,
                                               const StructureModel& model,
                                               const EvalOptions& opts) {
    if (views.views.size() != calib.camera_ids.size())
        throw std::invalid_argument("evaluate_calibration: view/calibration size mismatch");
    const PointCloud reference = sample_surface(model, opts.structure_resolution);

    MetricReport rms_initial{"rms_initial", {}}, rms_refined{"rms_refined", {}};
    MetricReport haus_initial{"hausdorff_initial", {}}, haus_refined{"hausdorff_refined", {}};
    MetricReport miou_initial{"miou_rerender_initial", {}}, miou_refined{"miou_rerender_refined", {}};
    MetricReport corr_initial{"rmse_corr_initial", {}}, corr_refined{"rmse_corr_refined", {}};

    for (int phase = 0; phase < 2; ++phase) {
        const auto& poses = phase == 0 ? calib.initial : calib.refined;
        auto clouds = fuse_views(views, poses, calib.diagnostics, /*skip_failed=*/true);
        PointCloud fused;
        for (auto& c : clouds)
            fused.points.insert(fused.points.end(), c.points.begin(), c.points.end());
        double rms = 0.0, haus = 0.0;
        if (!fused.points.empty()) {
            rms = rms_dist(fused, reference);
            haus = hausdorff_rms(fused, reference);
        }
        (phase == 0 ? rms_initial : rms_refined).values.push_back(rms);
        (phase == 0 ? haus_initial : haus_refined).values.push_back(haus);

        for (size_t i = 0; i < views.views.size(); ++i) {
            const View& view = views.views[i];
            if (!view.gt_labels) continue;
            auto& miou_rep = phase == 0 ? miou_initial : miou_refined;
            auto& corr_rep = phase == 0 ? corr_initial : corr_refined;
            if (calib.diagnostics[i].initial_failed) {
                miou_rep.values.push_back(0.0);  // degenerate pose scores 0 by convention
                continue;
            }
            miou_rep.values.push_back(
                miou_rerender(*view.gt_labels, model, poses[i], view.intrinsics));
            const VertexMap vm = deproject(view.depth, view.intrinsics);
            auto [corr, vis] =
                hard_correspondences(*view.gt_labels, vm, opts.min_pixels, model.side_count());
            if (vis.visible_count() > 0)
                corr_rep.values.push_back(rmse_corr(corr, model.side_centers(), vis, poses[i]));
        }
    }
    return {rms_initial,  rms_refined,  haus_initial, haus_refined,
            miou_initial, miou_refined, corr_initial, corr_refined};
}

}  // namespace boxcal
