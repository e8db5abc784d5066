#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "boxcal/checkpoint.hpp"
#include "boxcal/geometry.hpp"
#include "boxcal/kernels.hpp"
#include "boxcal/procrustes.hpp"
#include "boxcal/rng.hpp"
#include "boxcal/structure.hpp"
#include "boxcal/tensor.hpp"

namespace boxcal::nn {

/// Encoder–bottleneck–decoder topology. Each encoder stage is a run of
/// 3×3 convolutions followed by a 2×2 max pool; the bottleneck is a run
/// of pre-activated residual blocks; the decoder mirrors the encoder
/// with nearest-neighbor upsampling, additive skip connections, and the
/// soft-attention gate re-applied after every upsampling. Decoder
/// convolutions are bias-free so a fully closed attention mask silences
/// the decoder and the output falls back to the uniform distribution.
struct NetworkConfig {
    std::string preset = "micro";
    int width = 128;
    int height = 96;
    int class_count = 22;            // K sides + background
    std::vector<int> stage_widths;   // encoder stage channels, pool after each
    std::vector<int> encoder_convs;  // convs per encoder stage
    std::vector<int> decoder_convs;  // convs per decoder stage; stage 0 ends in the classifier
    int residual_blocks = 2;
    double depth_normalization = 3.5;  // meters mapped to input value 1.0

    int pool_stages() const { return static_cast<int>(stage_widths.size()); }

    static NetworkConfig micro(int width, int height, int class_count) {
        NetworkConfig c;
        c.preset = "micro";
        c.width = width;
        c.height = height;
        c.class_count = class_count;
        c.stage_widths = {8, 16, 32};
        c.encoder_convs = {1, 1, 1};
        c.decoder_convs = {2, 1, 1};
        c.residual_blocks = 2;
        c.validate();
        return c;
    }

    /// Mirrors the published layer counts: 14 encoder convs over 4 pool
    /// stages, 4 residual blocks, 14 decoder convs. Channel widths are a
    /// stand-in, the original ones were never published.
    static NetworkConfig paper(int width, int height, int class_count) {
        NetworkConfig c;
        c.preset = "paper";
        c.width = width;
        c.height = height;
        c.class_count = class_count;
        c.stage_widths = {32, 64, 128, 256};
        c.encoder_convs = {3, 3, 4, 4};
        c.decoder_convs = {3, 3, 4, 4};
        c.residual_blocks = 4;
        c.validate();
        return c;
    }

    static NetworkConfig from_preset(const std::string& name, int width, int height,
                                     int class_count) {
        if (name == "micro") return micro(width, height, class_count);
        if (name == "paper") return paper(width, height, class_count);
        throw std::invalid_argument("NetworkConfig: unknown preset '" + name + "'");
    }

    void validate() const {
        if (stage_widths.empty() || encoder_convs.size() != stage_widths.size() ||
            decoder_convs.size() != stage_widths.size())
            throw std::invalid_argument("NetworkConfig: stage lists must have equal length");
        if (class_count < 2) throw std::invalid_argument("NetworkConfig: class_count must be >= 2");
        const int div = 1 << pool_stages();
        if (width % div != 0 || height % div != 0)
            throw std::invalid_argument("NetworkConfig: " + std::to_string(width) + "x" +
                                        std::to_string(height) + " not divisible by 2^" +
                                        std::to_string(pool_stages()));
        for (size_t s = 0; s < decoder_convs.size(); ++s)
            if (encoder_convs[s] < 1 || decoder_convs[s] < 1)
                throw std::invalid_argument("NetworkConfig: every stage needs at least one conv");
        if (decoder_convs[0] < 2)
            throw std::invalid_argument(
                "NetworkConfig: decoder stage 0 needs a conv plus the classifier");
        if (depth_normalization <= 0.0)
            throw std::invalid_argument("NetworkConfig: depth_normalization must be positive");
    }
};

/// Normalize a depth map into the network input tensor: depth divided by
/// the configured range, clamped to [0,1], invalid pixels as 0.
template <typename T>
Tensor<T> depth_to_input(const DepthMap& depth, const NetworkConfig& cfg) {
    if (depth.width() != cfg.width || depth.height() != cfg.height)
        throw std::invalid_argument("depth_to_input: depth " + std::to_string(depth.width()) + "x" +
                                    std::to_string(depth.height()) + " does not match network " +
                                    std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
    Tensor<T> in({1, cfg.height, cfg.width});
    for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x) {
            const double z = depth.at(y, x);
            in.at(0, y, x) = static_cast<T>(std::clamp(z / cfg.depth_normalization, 0.0, 1.0));
        }
    return in;
}

/// Argmax class per pixel; ties resolve to the lowest class id.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& prob) {
    const int c = prob.dim(0), h = prob.dim(1), w = prob.dim(2);
    LabelMap labels(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int best = 0;
            T best_v = prob.at(0, y, x);
            for (int ch = 1; ch < c; ++ch)
                if (prob.at(ch, y, x) > best_v) {
                    best_v = prob.at(ch, y, x);
                    best = ch;
                }
            labels.at(y, x) = static_cast<std::uint8_t>(best);
        }
    return labels;
}

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
class SegNet {
public:
    explicit SegNet(const NetworkConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(init_seed, 0xb0c5));
        const int stages = cfg_.pool_stages();
        enc_.resize(static_cast<size_t>(stages));
        int in_ch = 1;
        for (int s = 0; s < stages; ++s) {
            for (int i = 0; i < cfg_.encoder_convs[static_cast<size_t>(s)]; ++i) {
                const int out_ch = cfg_.stage_widths[static_cast<size_t>(s)];
                enc_[static_cast<size_t>(s)].convs.push_back(
                    make_conv("enc" + std::to_string(s) + ".conv" + std::to_string(i), in_ch,
                              out_ch, 3, /*bias=*/true, rng));
                in_ch = out_ch;
            }
        }
        const int bw = cfg_.stage_widths.back();
        for (int r = 0; r < cfg_.residual_blocks; ++r) {
            ResBlock rb;
            rb.conv0 = make_conv("res" + std::to_string(r) + ".conv0", bw, bw, 3, true, rng);
            rb.conv1 = make_conv("res" + std::to_string(r) + ".conv1", bw, bw, 3, true, rng);
            res_.push_back(std::move(rb));
        }
        att_ = make_conv("att.conv", bw, 1, 1, /*bias=*/true, rng);

        dec_.resize(static_cast<size_t>(stages));
        // decoder stage s consumes encoder stage s's skip and runs at its
        // resolution; built deepest first to mirror the forward order
        for (int s = stages - 1; s >= 0; --s) {
            const int n = cfg_.decoder_convs[static_cast<size_t>(s)];
            int ch = cfg_.stage_widths[static_cast<size_t>(s)];
            const int target =
                s > 0 ? cfg_.stage_widths[static_cast<size_t>(s) - 1] : cfg_.stage_widths[0];
            for (int i = 0; i < n; ++i) {
                const bool is_classifier = (s == 0 && i == n - 1);
                const int out_ch = is_classifier ? cfg_.class_count
                                   : (i == n - 1) ? target
                                                  : ch;
                dec_[static_cast<size_t>(s)].convs.push_back(
                    make_conv("dec" + std::to_string(s) + ".conv" + std::to_string(i), ch, out_ch,
                              is_classifier ? 1 : 3, /*bias=*/false, rng));
                ch = out_ch;
            }
        }
    }

    const NetworkConfig& config() const { return cfg_; }

    const Tensor<T>& forward(const DepthMap& depth) {
        return forward_tensor(depth_to_input<T>(depth, cfg_));
    }

    const Tensor<T>& forward_tensor(const Tensor<T>& input) {
        if (input.shape() != std::vector<int>{1, cfg_.height, cfg_.width})
            throw std::invalid_argument("SegNet: input shape " + input.shape_str() +
                                        " does not match config (1," + std::to_string(cfg_.height) +
                                        "," + std::to_string(cfg_.width) + ")");
        input_ = input;
        const int stages = cfg_.pool_stages();

        const Tensor<T>* x = &input_;
        for (int s = 0; s < stages; ++s) {
            auto& st = enc_[static_cast<size_t>(s)];
            st.conv_out.resize(st.convs.size());
            st.relu_out.resize(st.convs.size());
            for (size_t i = 0; i < st.convs.size(); ++i) {
                conv2d_forward(*x, st.convs[i].weight, &st.convs[i].bias, st.conv_out[i]);
                relu_forward(st.conv_out[i], st.relu_out[i]);
                x = &st.relu_out[i];
            }
            maxpool2x2_forward(*x, st.pooled, st.argmax);
            x = &st.pooled;
        }

        for (auto& rb : res_) {
            rb.input = *x;
            relu_forward(rb.input, rb.relu0_out);
            conv2d_forward(rb.relu0_out, rb.conv0.weight, &rb.conv0.bias, rb.conv0_out);
            relu_forward(rb.conv0_out, rb.relu1_out);
            conv2d_forward(rb.relu1_out, rb.conv1.weight, &rb.conv1.bias, rb.conv1_out);
            elementwise_add_forward(rb.input, rb.conv1_out, rb.output);
            x = &rb.output;
        }
        bottleneck_out_ = *x;

        conv2d_forward(bottleneck_out_, att_.weight, &att_.bias, att_logits_);
        sigmoid_forward(att_logits_, mask_);
        elementwise_mul_forward(bottleneck_out_, mask_, gated0_);

        x = &gated0_;
        const Tensor<T>* mask = &mask_;
        for (int s = stages - 1; s >= 0; --s) {
            auto& st = dec_[static_cast<size_t>(s)];
            upsample2x_forward(*x, st.upsampled);
            upsample2x_forward(*mask, st.mask_up);
            elementwise_add_forward(st.upsampled, enc_[static_cast<size_t>(s)].relu_out.back(),
                                    st.joined);
            elementwise_mul_forward(st.joined, st.mask_up, st.gated);
            st.conv_out.resize(st.convs.size());
            st.relu_out.resize(st.convs.size());
            x = &st.gated;
            for (size_t i = 0; i < st.convs.size(); ++i) {
                conv2d_forward(*x, st.convs[i].weight,
                               st.convs[i].use_bias ? &st.convs[i].bias : nullptr, st.conv_out[i]);
                const bool is_classifier = (s == 0 && i == st.convs.size() - 1);
                if (is_classifier) {
                    x = &st.conv_out[i];
                } else {
                    relu_forward(st.conv_out[i], st.relu_out[i]);
                    x = &st.relu_out[i];
                }
            }
            mask = &st.mask_up;
        }
        logits_ = *x;
        channel_softmax_forward(logits_, prob_);
        return prob_;
    }

    const Tensor<T>& probabilities() const { return prob_; }
    const Tensor<T>& logits() const { return logits_; }
    const Tensor<T>& attention_mask() const { return mask_; }

    /// Classifier input of the last forward (the final decoder
    /// activation), exposed for the closed-mask invariant test.
    const Tensor<T>& last_decoder_activation() const {
        const auto& st = dec_[0];
        return st.convs.size() > 1 ? st.relu_out[st.relu_out.size() - 2] : st.gated;
    }

    /// Directly bias the attention logits (test hook for forcing the
    /// mask open or closed).
    void shift_attention_bias(T delta) { att_.bias[0] += delta; }

    /// Convert a gradient w.r.t. the probabilities into one w.r.t. the
    /// logits of the last forward.
    Tensor<T> prob_grad_to_logit_grad(const Tensor<T>& d_prob) const {
        Tensor<T> d_logits(prob_.shape());
        channel_softmax_backward(prob_, d_prob, d_logits);
        return d_logits;
    }

    /// Accumulate parameter gradients for the last forward pass.
    void backward(const Tensor<T>& d_logits) {
        if (!d_logits.same_shape(logits_))
            throw std::invalid_argument("SegNet::backward: d_logits shape " + d_logits.shape_str() +
                                        " does not match logits " + logits_.shape_str());
        const int stages = cfg_.pool_stages();

        // Decoder, finest stage first (reverse of the forward chain).
        // d_mask_up[s] collects the gate gradient at stage s; the
        // upsampling chain is folded afterwards, fine to coarse.
        Tensor<T> d = d_logits;
        std::vector<Tensor<T>> d_mask_up(static_cast<size_t>(stages));
        std::vector<Tensor<T>> d_skip(static_cast<size_t>(stages));
        for (int s = 0; s < stages; ++s) {
            auto& st = dec_[static_cast<size_t>(s)];
            for (int i = static_cast<int>(st.convs.size()) - 1; i >= 0; --i) {
                auto& conv = st.convs[static_cast<size_t>(i)];
                const bool is_classifier = (s == 0 && i == static_cast<int>(st.convs.size()) - 1);
                Tensor<T> d_pre;
                if (is_classifier) {
                    d_pre = d;
                } else {
                    d_pre = Tensor<T>(st.conv_out[static_cast<size_t>(i)].shape());
                    relu_backward(st.conv_out[static_cast<size_t>(i)], d, d_pre);
                }
                const Tensor<T>& conv_in =
                    i > 0 ? st.relu_out[static_cast<size_t>(i) - 1] : st.gated;
                Tensor<T> d_in(conv_in.shape());
                conv2d_backward(conv_in, conv.weight, d_pre, &d_in, conv.weight.grad(),
                                conv.use_bias ? &conv.bias.grad() : nullptr);
                d = std::move(d_in);
            }
            Tensor<T> d_joined(st.joined.shape());
            d_mask_up[static_cast<size_t>(s)] = Tensor<T>(st.mask_up.shape());
            elementwise_mul_backward(st.joined, st.mask_up, d, d_joined,
                                     d_mask_up[static_cast<size_t>(s)]);
            d_skip[static_cast<size_t>(s)] = d_joined;  // add passes through
            Tensor<T> d_x(s == stages - 1 ? gated0_.shape()
                                          : dec_[static_cast<size_t>(s) + 1].conv_out.back().shape());
            upsample2x_backward(d_joined, d_x);
            d = std::move(d_x);
        }

        // mask chain: dec_[s].mask_up = upsample(dec_[s+1].mask_up),
        // dec_[stages-1].mask_up = upsample(mask_)
        Tensor<T> d_mask0(mask_.shape());
        for (int s = 0; s < stages; ++s) {
            Tensor<T>& coarse =
                (s == stages - 1) ? d_mask0 : d_mask_up[static_cast<size_t>(s) + 1];
            upsample2x_backward(d_mask_up[static_cast<size_t>(s)], coarse);
        }

        // bottleneck gate; d currently holds the gradient w.r.t. gated0
        Tensor<T> d_bottleneck(bottleneck_out_.shape());
        elementwise_mul_backward(bottleneck_out_, mask_, d, d_bottleneck, d_mask0);

        // attention branch joins back into the bottleneck gradient
        Tensor<T> d_att_logits(att_logits_.shape());
        sigmoid_backward(mask_, d_mask0, d_att_logits);
        conv2d_backward(bottleneck_out_, att_.weight, d_att_logits, &d_bottleneck,
                        att_.weight.grad(), &att_.bias.grad());

        Tensor<T> d_res = std::move(d_bottleneck);
        for (int r = static_cast<int>(res_.size()) - 1; r >= 0; --r) {
            auto& rb = res_[static_cast<size_t>(r)];
            Tensor<T> d_relu1(rb.relu1_out.shape());
            conv2d_backward(rb.relu1_out, rb.conv1.weight, d_res, &d_relu1, rb.conv1.weight.grad(),
                            &rb.conv1.bias.grad());
            Tensor<T> d_conv0_out(rb.conv0_out.shape());
            relu_backward(rb.conv0_out, d_relu1, d_conv0_out);
            Tensor<T> d_relu0(rb.relu0_out.shape());
            conv2d_backward(rb.relu0_out, rb.conv0.weight, d_conv0_out, &d_relu0,
                            rb.conv0.weight.grad(), &rb.conv0.bias.grad());
            Tensor<T> d_in(rb.input.shape());
            relu_backward(rb.input, d_relu0, d_in);
            for (size_t i = 0; i < d_in.numel(); ++i) d_in[i] += d_res[i];  // identity branch
            d_res = std::move(d_in);
        }

        Tensor<T> d_enc = std::move(d_res);
        for (int s = stages - 1; s >= 0; --s) {
            auto& st = enc_[static_cast<size_t>(s)];
            Tensor<T> d_act(st.relu_out.back().shape());
            maxpool2x2_backward(d_enc, st.argmax, d_act);
            for (size_t i = 0; i < d_act.numel(); ++i)
                d_act[i] += d_skip[static_cast<size_t>(s)][i];
            for (int i = static_cast<int>(st.convs.size()) - 1; i >= 0; --i) {
                auto& conv = st.convs[static_cast<size_t>(i)];
                Tensor<T> d_pre(st.conv_out[static_cast<size_t>(i)].shape());
                relu_backward(st.conv_out[static_cast<size_t>(i)], d_act, d_pre);
                const Tensor<T>& conv_in =
                    i > 0 ? st.relu_out[static_cast<size_t>(i) - 1]
                          : (s > 0 ? enc_[static_cast<size_t>(s) - 1].pooled : input_);
                const bool need_d_in = !(s == 0 && i == 0);
                Tensor<T> d_in;
                if (need_d_in) d_in = Tensor<T>(conv_in.shape());
                conv2d_backward(conv_in, conv.weight, d_pre, need_d_in ? &d_in : nullptr,
                                conv.weight.grad(), &conv.bias.grad());
                d_act = std::move(d_in);
            }
            d_enc = std::move(d_act);
        }
    }

    std::vector<NamedParam<T>> parameters() {
        std::vector<NamedParam<T>> out;
        auto add = [&out](ConvParam& c) {
            out.push_back({c.name + ".weight", &c.weight});
            if (c.use_bias) out.push_back({c.name + ".bias", &c.bias});
        };
        for (auto& st : enc_)
            for (auto& c : st.convs) add(c);
        for (auto& rb : res_) {
            add(rb.conv0);
            add(rb.conv1);
        }
        add(att_);
        for (int s = cfg_.pool_stages() - 1; s >= 0; --s)
            for (auto& c : dec_[static_cast<size_t>(s)].convs) add(c);
        return out;
    }

    std::vector<Tensor<T>*> parameter_tensors() {
        std::vector<Tensor<T>*> out;
        for (auto& p : parameters()) out.push_back(p.tensor);
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) {
            p.tensor->grad();  // ensure allocated
            p.tensor->zero_grad();
        }
    }

    void save(const std::string& path) {
        std::vector<std::pair<std::string, Tensor<float>>> tensors;
        for (auto& p : parameters())
            tensors.emplace_back(p.name, p.tensor->template cast<float>());
        save_checkpoint(path, tensors);
    }

    void load(const std::string& path) {
        auto tensors = load_checkpoint(path);
        auto params = parameters();
        if (tensors.size() != params.size())
            throw std::runtime_error("SegNet::load: checkpoint has " +
                                     std::to_string(tensors.size()) + " tensors, network needs " +
                                     std::to_string(params.size()));
        for (size_t i = 0; i < params.size(); ++i) {
            if (tensors[i].first != params[i].name)
                throw std::runtime_error("SegNet::load: tensor '" + tensors[i].first +
                                         "' does not match parameter '" + params[i].name + "'");
            if (tensors[i].second.shape() != params[i].tensor->shape())
                throw std::runtime_error("SegNet::load: shape mismatch for '" + params[i].name +
                                         "'");
            *params[i].tensor = tensors[i].second.template cast<T>();
        }
    }

private:
    struct ConvParam {
        std::string name;
        Tensor<T> weight;
        Tensor<T> bias;
        bool use_bias = true;
    };
    struct EncStage {
        std::vector<ConvParam> convs;
        std::vector<Tensor<T>> conv_out;
        std::vector<Tensor<T>> relu_out;
        Tensor<T> pooled;
        std::vector<std::int32_t> argmax;
    };
    struct ResBlock {
        ConvParam conv0;
        ConvParam conv1;
        Tensor<T> input, relu0_out, conv0_out, relu1_out, conv1_out, output;
    };
    struct DecStage {
        std::vector<ConvParam> convs;
        Tensor<T> upsampled, mask_up, joined, gated;
        std::vector<Tensor<T>> conv_out;
        std::vector<Tensor<T>> relu_out;
    };

    ConvParam make_conv(const std::string& name, int in_ch, int out_ch, int k, bool bias,
                        Rng& rng) {
        ConvParam c;
        c.name = name;
        c.weight = xavier_init<T>({out_ch, in_ch, k, k}, rng);
        c.use_bias = bias;
        c.bias = Tensor<T>({out_ch});
        return c;
    }

    NetworkConfig cfg_;
    Tensor<T> input_;
    std::vector<EncStage> enc_;
    std::vector<ResBlock> res_;
    ConvParam att_;
    Tensor<T> att_logits_, mask_, gated0_, bottleneck_out_;
    std::vector<DecStage> dec_;
    Tensor<T> logits_, prob_;
};

// ---------------------------------------------------------------------------
// losses and training
// ---------------------------------------------------------------------------

template <typename T>
struct SegLoss {
    double value = 0.0;
    Tensor<T> d_logits;  // gradient w.r.t. the pre-softmax logits
};

/// Mean per-pixel negative log-likelihood of the ground-truth class,
/// normalized over all H·W pixels. The logit gradient is the usual
/// softmax/NLL shortcut (P − onehot)/(H·W).
template <typename T>
SegLoss<T> loss_seg(const Tensor<T>& prob, const LabelMap& gt) {
    if (prob.dim(1) != gt.height() || prob.dim(2) != gt.width())
        throw std::invalid_argument("loss_seg: prob " + prob.shape_str() +
                                    " does not match labels " + std::to_string(gt.width()) + "x" +
                                    std::to_string(gt.height()));
    const int c = prob.dim(0), h = prob.dim(1), w = prob.dim(2);
    constexpr double kLogClamp = 1e-12;
    SegLoss<T> out;
    out.d_logits = Tensor<T>(prob.shape());
    const double inv_n = 1.0 / (static_cast<double>(h) * w);
    double sum = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int g = gt.at(y, x);
            if (g >= c)
                throw std::invalid_argument("loss_seg: label " + std::to_string(g) +
                                            " exceeds class count " + std::to_string(c));
            sum -= std::log(std::max(static_cast<double>(prob.at(g, y, x)), kLogClamp));
            for (int ch = 0; ch < c; ++ch) {
                const double p = prob.at(ch, y, x);
                out.d_logits.at(ch, y, x) =
                    static_cast<T>((p - (ch == g ? 1.0 : 0.0)) * inv_n);
            }
        }
    }
    out.value = sum * inv_n;
    return out;
}

struct TrainConfig {
    double lambda = 0.1;
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    int batch_size = 16;
    std::int64_t iterations = 1000;
    std::uint64_t seed = 0;
    int visibility_min_pixels = 16;  // mask threshold for the 3D loss
    std::string log_path;            // optional CSV sink

    /// λ=0.1, lr 2e-4, β1 0.9, β2 0.99, batch 16.
    static TrainConfig paper_defaults() { return TrainConfig{}; }
};

struct TrainLogRow {
    std::int64_t iteration = 0;
    double l_seg = 0.0;
    double l_3d = 0.0;
    double l_total = 0.0;
    double wall_ms = 0.0;
};

struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainSample {
    DepthMap depth;
    LabelMap labels;
    Intrinsics intrinsics;
};

/// Produces the sample for a derived seed: either a live renderer or a
/// recorded-dataset lookup (see dataset.hpp for both).
using SampleSource = std::function<TrainSample(std::uint64_t seed)>;

/// Minimize L_total = L_seg + λ·L_3D with Adam. L_3D is always computed
/// for the log; with λ = 0, training is exactly segmentation-only.
/// Deterministic given the seed: batch sample seeds derive from
/// (seed, iteration·batch + index) regardless of worker count.
template <typename T>
std::vector<TrainLogRow> train(SegNet<T>& net, const StructureModel& model,
                               const SampleSource& source, const TrainConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("train: lambda must be >= 0");
    if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    const Eigen::Matrix3Xd& s = model.side_centers();

    OptimizerState<T> opt;
    opt.learning_rate = cfg.learning_rate;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    auto params = net.parameter_tensors();
    opt.reset(params);

    std::vector<TrainLogRow> log;
    log.reserve(static_cast<size_t>(cfg.iterations));
    const T inv_batch = static_cast<T>(1.0 / cfg.batch_size);

    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        net.zero_grad();
        double sum_seg = 0.0, sum_3d = 0.0;
        std::vector<std::uint64_t> batch_seeds;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::uint64_t sample_seed =
                derive_seed(cfg.seed, static_cast<std::uint64_t>(it) * cfg.batch_size +
                                          static_cast<std::uint64_t>(b));
            batch_seeds.push_back(sample_seed);
            const TrainSample sample = source(sample_seed);
            const Tensor<T>& prob = net.forward(sample.depth);

            SegLoss<T> seg = loss_seg(prob, sample.labels);
            const VertexMap vm = deproject(sample.depth, sample.intrinsics);
            const VisibilityMask vis =
                visibility_mask(sample.labels, model, cfg.visibility_min_pixels);
            const Loss3dResult<T> l3d = loss_3d(prob, vm, s, vis);
            sum_seg += seg.value;
            sum_3d += l3d.value;

            Tensor<T> d_logits = std::move(seg.d_logits);
            if (cfg.lambda > 0.0 && !l3d.degenerate) {
                Tensor<T> d_from_3d = net.prob_grad_to_logit_grad(l3d.d_prob);
                for (size_t i = 0; i < d_logits.numel(); ++i)
                    d_logits[i] += static_cast<T>(cfg.lambda) * d_from_3d[i];
            }
            for (size_t i = 0; i < d_logits.numel(); ++i) d_logits[i] *= inv_batch;
            net.backward(d_logits);
        }
        const double l_seg = sum_seg / cfg.batch_size;
        const double l_3d = sum_3d / cfg.batch_size;
        const double l_total = l_seg + cfg.lambda * l_3d;
        if (!std::isfinite(l_total)) {
            std::string seeds;
            for (auto sd : batch_seeds) seeds += std::to_string(sd) + " ";
            throw TrainingDiverged("train: non-finite loss at iteration " + std::to_string(it) +
                                   " (batch seeds: " + seeds + ")");
        }
        adam_step(params, opt);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        log.push_back({it, l_seg, l_3d, l_total, ms});
    }

    if (!cfg.log_path.empty()) {
        std::ofstream f(cfg.log_path);
        if (!f) throw std::runtime_error("train: cannot open log " + cfg.log_path);
        f << "iteration,L_seg,L_3D,L_total,wall_ms\n";
        f.precision(17);
        for (const auto& row : log)
            f << row.iteration << "," << row.l_seg << "," << row.l_3d << "," << row.l_total << ","
              << row.wall_ms << "\n";
    }
    return log;
}

}  // namespace boxcal::nn
