#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "boxcal/dataset.hpp"
#include "boxcal/segnet.hpp"
#include "test_utils.hpp"

using namespace boxcal;
using namespace boxcal::nn;

namespace {

struct Scene16 {
    StructureModel model = StructureModel::default_structure();
    NetworkConfig cfg = NetworkConfig::micro(16, 16, 22);
    Intrinsics k = Intrinsics(12.0, 12.0, 7.5, 7.5, 16, 16);
    DepthMap depth;
    LabelMap labels;

    explicit Scene16(std::uint64_t seed) {
        PoseSamplerConfig pcfg;
        pcfg.rho_min = 1.2;
        pcfg.rho_max = 1.4;  // close in, so several sides stay visible at 16px
        Rng rng(seed);
        const RigidPose pose = sample_pose(pcfg, rng);
        auto [d, l] = render(model, pose, k);
        depth = std::move(d);
        labels = std::move(l);
    }
};

}  // namespace

TEST_CASE("segnet config: presets and validation") {
    const NetworkConfig micro = NetworkConfig::micro(128, 96, 22);
    CHECK(micro.pool_stages() == 3);
    const NetworkConfig paper = NetworkConfig::paper(320, 240, 22);
    CHECK(paper.pool_stages() == 4);
    // stated layer counts: 14 encoder convs, 4 residual blocks, 14 decoder convs
    int enc = 0, dec = 0;
    for (int n : paper.encoder_convs) enc += n;
    for (int n : paper.decoder_convs) dec += n;
    CHECK(enc == 14);
    CHECK(dec == 14);
    CHECK(paper.residual_blocks == 4);

    CHECK_THROWS_AS(NetworkConfig::micro(100, 96, 22), std::invalid_argument);  // 100 % 8 != 0
    CHECK_THROWS_AS(NetworkConfig::from_preset("huge", 128, 96, 22), std::invalid_argument);
}

TEST_CASE("segnet forward: shapes, probability mass, attention range") {
    SegNet<float> net(NetworkConfig::micro(64, 32, 22), /*init_seed=*/1);
    DepthMap depth(64, 32);
    Rng rng(2);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 64; ++x)
            depth.at(y, x) = rng.uniform01() < 0.3 ? 0.0 : rng.uniform(0.5, 3.0);
    const Tensor<float>& prob = net.forward(depth);
    REQUIRE(prob.shape() == std::vector<int>{22, 32, 64});
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 64; ++x) {
            float sum = 0.0f;
            for (int c = 0; c < 22; ++c) {
                sum += prob.at(c, y, x);
                CHECK(prob.at(c, y, x) >= 0.0f);
                CHECK(prob.at(c, y, x) <= 1.0f);
            }
            CHECK(std::abs(sum - 1.0f) < 1e-5f);
        }
    const Tensor<float>& mask = net.attention_mask();
    REQUIRE(mask.shape() == std::vector<int>{1, 4, 8});  // 3 pools
    for (size_t i = 0; i < mask.numel(); ++i) {
        CHECK(mask[i] >= 0.0f);
        CHECK(mask[i] <= 1.0f);
    }
    // deterministic forward
    Tensor<float> again = net.forward(depth);
    for (size_t i = 0; i < again.numel(); ++i) CHECK(again[i] == prob[i]);
}

TEST_CASE("segnet: paper preset forward smoke test") {
    SegNet<float> net(NetworkConfig::paper(160, 96, 22), 3);
    DepthMap depth(160, 96, 2.0);
    const Tensor<float>& prob = net.forward(depth);
    REQUIRE(prob.shape() == std::vector<int>{22, 96, 160});
    float sum = 0.0f;
    for (int c = 0; c < 22; ++c) sum += prob.at(c, 48, 80);
    CHECK(std::abs(sum - 1.0f) < 1e-5f);
}

TEST_CASE("segnet: closing the attention mask zeroes the decoder and yields uniform output") {
    SegNet<float> net(NetworkConfig::micro(32, 32, 22), 4);
    DepthMap depth(32, 32, 1.5);
    net.shift_attention_bias(-1e4f);  // sigmoid underflows to exactly 0
    const Tensor<float>& prob = net.forward(depth);
    const Tensor<float>& mask = net.attention_mask();
    for (size_t i = 0; i < mask.numel(); ++i) CHECK(mask[i] == 0.0f);
    const Tensor<float>& act = net.last_decoder_activation();
    for (size_t i = 0; i < act.numel(); ++i) CHECK(act[i] == 0.0f);
    const float uniform = 1.0f / 22.0f;
    for (size_t i = 0; i < prob.numel(); ++i) CHECK(prob[i] == doctest::Approx(uniform));
}

TEST_CASE("loss_seg: perfect one-hot prediction scores zero") {
    LabelMap gt(4, 4);
    gt.at(1, 2) = 9;
    Tensor<double> prob({22, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) prob.at(gt.at(y, x), y, x) = 1.0;
    const auto loss = loss_seg(prob, gt);
    CHECK(loss.value <= 1e-6);
}

TEST_CASE("loss_seg: uniform prediction scores ln(22)") {
    LabelMap gt(8, 8);
    gt.at(0, 0) = 21;
    Tensor<double> prob({22, 8, 8}, 1.0 / 22.0);
    const auto loss = loss_seg(prob, gt);
    CHECK(loss.value == doctest::Approx(std::log(22.0)).epsilon(1e-12));
    CHECK(loss.value == doctest::Approx(3.0910).epsilon(1e-4));
}

TEST_CASE("loss_seg: logit gradient matches finite differences") {
    Rng rng(5);
    LabelMap gt(6, 6);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x)
            gt.at(y, x) = static_cast<std::uint8_t>(rng.uniform_int(0, 21));
    Tensor<double> logits({22, 6, 6});
    testutil::fill_uniform(logits, rng, -1.0, 1.0);
    Tensor<double> prob;
    channel_softmax_forward(logits, prob);
    const auto loss = loss_seg(prob, gt);
    auto eval = [&] {
        Tensor<double> p;
        channel_softmax_forward(logits, p);
        return loss_seg(p, gt).value;
    };
    const auto check = testutil::gradient_check(logits.values(), eval, loss.d_logits.values());
    CHECK(check.max_violation <= 1.0);
}

TEST_CASE("segnet: end-to-end parameter gradients match finite differences") {
    const Scene16 scene(77);
    SegNet<double> net(scene.cfg, 6);
    const StructureModel& model = scene.model;
    const VertexMap vm = deproject(scene.depth, scene.k);
    const VisibilityMask vis = visibility_mask(scene.labels, model, 1);
    REQUIRE(vis.visible_count() >= 3);  // the 3D loss actually engages
    const double lambda = 0.1;

    auto eval = [&] {
        const Tensor<double>& prob = net.forward(scene.depth);
        const double seg = loss_seg(prob, scene.labels).value;
        const auto l3d = loss_3d(prob, vm, model.side_centers(), vis);
        return seg + lambda * l3d.value;
    };

    // analytic gradients
    net.zero_grad();
    const Tensor<double>& prob = net.forward(scene.depth);
    auto seg = loss_seg(prob, scene.labels);
    const auto l3d = loss_3d(prob, vm, model.side_centers(), vis);
    REQUIRE_FALSE(l3d.degenerate);
    Tensor<double> d_logits = seg.d_logits;
    const Tensor<double> d3d_logits = net.prob_grad_to_logit_grad(l3d.d_prob);
    for (size_t i = 0; i < d_logits.numel(); ++i) d_logits[i] += lambda * d3d_logits[i];
    net.backward(d_logits);

    // spot-check a deterministic sample of entries in every parameter
    Rng pick(99);
    for (auto& p : net.parameters()) {
        const auto& analytic = p.tensor->grad();
        const size_t n = p.tensor->numel();
        const int samples = static_cast<int>(std::min<size_t>(n, 10));
        for (int s = 0; s < samples; ++s) {
            const size_t i = static_cast<size_t>(pick.uniform_int(0, static_cast<int>(n) - 1));
            auto& x = p.tensor->values();
            const double saved = x[i];
            const double eps = 1e-6;
            x[i] = saved + eps;
            const double fp = eval();
            x[i] = saved - eps;
            const double fm = eval();
            x[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double tol = 1e-8 + 1e-4 * std::max(std::abs(a), std::abs(fd));
            INFO(p.name << "[" << i << "]: analytic " << a << " fd " << fd);
            REQUIRE(std::abs(a - fd) <= tol);
        }
    }
}

TEST_CASE("train: paper preset hyperparameters") {
    const TrainConfig cfg = TrainConfig::paper_defaults();
    CHECK(cfg.lambda == 0.1);
    CHECK(cfg.learning_rate == 2e-4);
    CHECK(cfg.beta1 == 0.9);
    CHECK(cfg.beta2 == 0.99);
    CHECK(cfg.batch_size == 16);
}

TEST_CASE("train: lambda = 0 reduces exactly to segmentation-only") {
    const StructureModel model = StructureModel::default_structure();
    PoseSamplerConfig sampler;
    const auto pool = default_intrinsics_pool(32, 32);
    const auto source = live_sample_source(model, sampler, NoiseConfig{}, pool);

    const NetworkConfig ncfg = NetworkConfig::micro(32, 32, model.side_count() + 1);
    SegNet<double> trained(ncfg, 8);
    SegNet<double> manual = trained;  // identical weights

    TrainConfig tcfg;
    tcfg.lambda = 0.0;
    tcfg.batch_size = 1;
    tcfg.iterations = 1;
    tcfg.seed = 42;
    tcfg.learning_rate = 1e-3;
    const auto log = train(trained, model, source, tcfg);
    REQUIRE(log.size() == 1);
    CHECK(log[0].l_3d >= 0.0);  // computed and logged even though unused
    CHECK(log[0].l_total == log[0].l_seg);

    // replicate by hand: pure segmentation step, no 3D term anywhere
    const TrainSample sample = source(derive_seed(tcfg.seed, 0));
    manual.zero_grad();
    const Tensor<double>& prob = manual.forward(sample.depth);
    auto seg = loss_seg(prob, sample.labels);
    manual.backward(seg.d_logits);
    OptimizerState<double> opt;
    opt.learning_rate = tcfg.learning_rate;
    opt.beta1 = tcfg.beta1;
    opt.beta2 = tcfg.beta2;
    auto params = manual.parameter_tensors();
    opt.reset(params);
    adam_step(params, opt);

    auto pa = trained.parameters();
    auto pb = manual.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        for (size_t j = 0; j < pa[i].tensor->numel(); ++j)
            REQUIRE((*pa[i].tensor)[j] == (*pb[i].tensor)[j]);
}

TEST_CASE("train: one Adam step decreases the batch loss (descent check)") {
    const StructureModel model = StructureModel::default_structure();
    PoseSamplerConfig sampler;
    const auto pool = default_intrinsics_pool(32, 32);
    const auto source = live_sample_source(model, sampler, NoiseConfig{}, pool);
    const NetworkConfig ncfg = NetworkConfig::micro(32, 32, model.side_count() + 1);
    const double lambda = 0.1;

    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SegNet<double> net(ncfg, seed + 1000);
        std::vector<TrainSample> batch;
        for (int b = 0; b < 2; ++b) batch.push_back(source(derive_seed(seed, b)));

        auto batch_loss = [&] {
            double total = 0.0;
            for (const auto& s : batch) {
                const Tensor<double>& prob = net.forward(s.depth);
                total += loss_seg(prob, s.labels).value;
                const VertexMap vm = deproject(s.depth, s.intrinsics);
                const VisibilityMask vis = visibility_mask(s.labels, model, 1);
                total += lambda * loss_3d(prob, vm, model.side_centers(), vis).value;
            }
            return total / static_cast<double>(batch.size());
        };

        const double before = batch_loss();
        net.zero_grad();
        for (const auto& s : batch) {
            const Tensor<double>& prob = net.forward(s.depth);
            auto seg = loss_seg(prob, s.labels);
            const VertexMap vm = deproject(s.depth, s.intrinsics);
            const VisibilityMask vis = visibility_mask(s.labels, model, 1);
            const auto l3d = loss_3d(prob, vm, model.side_centers(), vis);
            Tensor<double> d_logits = seg.d_logits;
            if (!l3d.degenerate) {
                const Tensor<double> d3 = net.prob_grad_to_logit_grad(l3d.d_prob);
                for (size_t i = 0; i < d_logits.numel(); ++i) d_logits[i] += lambda * d3[i];
            }
            for (size_t i = 0; i < d_logits.numel(); ++i) d_logits[i] *= 0.5;
            net.backward(d_logits);
        }
        OptimizerState<double> opt;
        opt.learning_rate = 1e-4;
        auto params = net.parameter_tensors();
        opt.reset(params);
        adam_step(params, opt);
        if (batch_loss() < before) decreased++;
    }
    CHECK(decreased >= 9);
}

TEST_CASE("train: deterministic given the seed") {
    const StructureModel model = StructureModel::default_structure();
    PoseSamplerConfig sampler;
    const auto pool = default_intrinsics_pool(32, 32);
    const auto source = live_sample_source(model, sampler, NoiseConfig{}, pool);
    const NetworkConfig ncfg = NetworkConfig::micro(32, 32, model.side_count() + 1);

    TrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.iterations = 2;
    tcfg.seed = 7;
    SegNet<float> a(ncfg, 1), b(ncfg, 1);
    const auto log_a = train(a, model, source, tcfg);
    const auto log_b = train(b, model, source, tcfg);
    REQUIRE(log_a.size() == log_b.size());
    for (size_t i = 0; i < log_a.size(); ++i) {
        CHECK(log_a[i].l_seg == log_b[i].l_seg);
        CHECK(log_a[i].l_3d == log_b[i].l_3d);
    }
    auto pa = a.parameters();
    auto pb = b.parameters();
    for (size_t i = 0; i < pa.size(); ++i)
        for (size_t j = 0; j < pa[i].tensor->numel(); ++j)
            REQUIRE((*pa[i].tensor)[j] == (*pb[i].tensor)[j]);
}

TEST_CASE("checkpoint: save/load round trip preserves the forward pass") {
    const auto tmp = std::filesystem::temp_directory_path() / "boxcal_ckpt_test.bin";
    const NetworkConfig ncfg = NetworkConfig::micro(32, 32, 22);
    SegNet<float> net(ncfg, 9);
    DepthMap depth(32, 32, 1.8);
    const Tensor<float> before = net.forward(depth);
    net.save(tmp.string());

    SegNet<float> loaded(ncfg, 12345);  // different init, then overwritten
    loaded.load(tmp.string());
    const Tensor<float> after = loaded.forward(depth);
    REQUIRE(before.numel() == after.numel());
    for (size_t i = 0; i < before.numel(); ++i) REQUIRE(before[i] == after[i]);

    // wrong architecture is rejected
    SegNet<float> other(NetworkConfig::micro(32, 32, 23), 1);
    CHECK_THROWS_AS(other.load(tmp.string()), std::runtime_error);
    std::filesystem::remove(tmp);
}

TEST_CASE("checkpoint: format round trip with raw tensors") {
    const auto tmp = std::filesystem::temp_directory_path() / "boxcal_ckpt_raw.bin";
    Rng rng(10);
    Tensor<float> t({2, 3, 4});
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-1, 1));
    save_checkpoint(tmp.string(), {{"alpha", t}});
    const auto back = load_checkpoint(tmp.string());
    REQUIRE(back.size() == 1);
    CHECK(back[0].first == "alpha");
    REQUIRE(back[0].second.shape() == t.shape());
    for (size_t i = 0; i < t.numel(); ++i) CHECK(back[0].second[i] == t[i]);
    std::filesystem::remove(tmp);
}
