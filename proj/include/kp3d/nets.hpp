#pragma once

// Fully convolutional encoder (K confidence + K depth maps at S = H/4),
// Gaussian-map decoder, and the small first-frame feature encoder.

#include <array>
#include <string>
#include <utility>

#include "kp3d/conv.hpp"
#include "kp3d/geometry.hpp"
#include "kp3d/optim.hpp"
#include "kp3d/random.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

struct NetsConfig {
    int image_channels = 3;
    int image_size = 64;           // H == W, divisible by 4
    int num_keypoints = 6;         // K
    int ff_channels = 8;           // F, first-frame feature channels
    std::array<int, 3> enc_channels{32, 32, 64};
    std::array<int, 3> dec_channels{64, 32, 32};

    int map_size() const { return image_size / 4; }  // S

    void validate() const {
        require(image_size % 4 == 0,
                "image size must be divisible by 4, got " + std::to_string(image_size));
        require(num_keypoints >= 1, "K must be >= 1");
    }
};

template <typename T>
struct ConvLayer {
    Tensor<T> w, b;
    int stride = 1;

    void init(int cout, int cin, int k, int stride_, Rng& rng) {
        stride = stride_;
        double bound = std::sqrt(1.0 / (cin * k * k));
        std::vector<T> wv(static_cast<std::size_t>(cout) * cin * k * k);
        for (auto& x : wv) x = static_cast<T>(rng.uniform(-bound, bound));
        w = Tensor<T>::from({cout, cin, k, k}, std::move(wv), true);
        // Random (not zero) bias init: with zero biases, any unit whose
        // receptive field is entirely zeroed by an upstream ReLU sits
        // exactly at its own ReLU kink, which is numerically fragile.
        std::vector<T> bv(static_cast<std::size_t>(cout));
        for (auto& x : bv) x = static_cast<T>(rng.uniform(-bound, bound));
        b = Tensor<T>::from({cout}, std::move(bv), true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride); }

    void register_params(ParamList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

template <typename T>
struct EncoderOutput {
    Tensor<T> confidence;  // (K,S,S) raw logits
    Tensor<T> depth;       // (K,S,S) strictly positive
};

template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const NetsConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const auto& c = cfg.enc_channels;
        conv_[0].init(c[0], cfg.image_channels, 3, 2, rng);
        conv_[1].init(c[1], c[0], 3, 2, rng);
        conv_[2].init(c[2], c[1], 3, 1, rng);
        conv_[3].init(2 * cfg.num_keypoints, c[2], 3, 1, rng);
    }

    EncoderOutput<T> forward(const Tensor<T>& image) const {
        const Shape& s = image.shape();
        require(s.size() == 3, "encoder: image must be (C,H,W)");
        require(s[1] % 4 == 0 && s[2] % 4 == 0,
                "encoder: spatial size must be divisible by 4, got " + shape_str(s));
        Tensor<T> h = relu(conv_[0].forward(image));
        h = relu(conv_[1].forward(h));
        h = relu(conv_[2].forward(h));
        h = conv_[3].forward(h);
        int K = cfg_.num_keypoints;
        Tensor<T> conf = slice0(h, 0, K);
        Tensor<T> depth_raw = slice0(h, K, K);
        Tensor<T> depth = add_scalar(softplus(depth_raw), static_cast<T>(kDepthMin));
        return {conf, depth};
    }

    void register_params(ParamList<T>& out) const {
        conv_[0].register_params(out, "enc.conv1");
        conv_[1].register_params(out, "enc.conv2");
        conv_[2].register_params(out, "enc.conv3");
        conv_[3].register_params(out, "enc.conv4");
    }

    const NetsConfig& config() const { return cfg_; }

private:
    NetsConfig cfg_;
    std::array<ConvLayer<T>, 4> conv_;
};

template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(const NetsConfig& cfg, Rng& rng) : cfg_(cfg) {
        const auto& d = cfg.dec_channels;
        conv_[0].init(d[0], cfg.num_keypoints + cfg.ff_channels, 3, 1, rng);
        conv_[1].init(d[1], d[0], 3, 1, rng);
        conv_[2].init(d[2], d[1], 3, 1, rng);
        conv_[3].init(cfg.image_channels, d[2], 3, 1, rng);
    }

    // gaussians (K,S,S) stacked with ff (F,S,S) -> (C,H,W)
    Tensor<T> forward(const Tensor<T>& gaussians, const Tensor<T>& ff) const {
        require(gaussians.shape()[0] == cfg_.num_keypoints,
                "decoder: expected " + std::to_string(cfg_.num_keypoints) +
                    " gaussian channels, got " + shape_str(gaussians.shape()));
        require(ff.shape()[0] == cfg_.ff_channels,
                "decoder: expected " + std::to_string(cfg_.ff_channels) +
                    " first-frame channels, got " + shape_str(ff.shape()));
        Tensor<T> h = concat0(std::vector<Tensor<T>>{gaussians, ff});
        h = relu(conv_[0].forward(h));
        h = relu(conv_[1].forward(h));
        h = upsample2(h);
        h = relu(conv_[2].forward(h));
        h = upsample2(h);
        return conv_[3].forward(h);
    }

    void register_params(ParamList<T>& out) const {
        conv_[0].register_params(out, "dec.conv1");
        conv_[1].register_params(out, "dec.conv2");
        conv_[2].register_params(out, "dec.conv3");
        conv_[3].register_params(out, "dec.conv4");
    }

private:
    NetsConfig cfg_;
    std::array<ConvLayer<T>, 4> conv_;
};

// Features of a canonical frame, computed once per episode.
template <typename T>
class FirstFrameEncoder {
public:
    FirstFrameEncoder() = default;
    FirstFrameEncoder(const NetsConfig& cfg, Rng& rng) : cfg_(cfg) {
        conv_[0].init(cfg.ff_channels, cfg.image_channels, 3, 2, rng);
        conv_[1].init(cfg.ff_channels, cfg.ff_channels, 3, 2, rng);
    }

    Tensor<T> forward(const Tensor<T>& canonical) const {
        Tensor<T> h = relu(conv_[0].forward(canonical));
        return conv_[1].forward(h);
    }

    void register_params(ParamList<T>& out) const {
        conv_[0].register_params(out, "ff.conv1");
        conv_[1].register_params(out, "ff.conv2");
    }

private:
    NetsConfig cfg_;
    std::array<ConvLayer<T>, 2> conv_;
};

// The per-camera autoencoder stack. Encoders and decoders are stored per
// camera; the first-frame encoder is shared.
template <typename T>
struct AutoencoderParams {
    NetsConfig cfg;
    std::vector<Encoder<T>> encoders;
    std::vector<Decoder<T>> decoders;
    FirstFrameEncoder<T> ff_encoder;

    AutoencoderParams() = default;
    AutoencoderParams(const NetsConfig& cfg_, int num_cameras, Rng& rng) : cfg(cfg_) {
        // All cameras start from identical weights: with similar views,
        // channel k then responds to the same visual feature in every
        // camera from the first step, which seeds the cross-camera
        // channel correspondence the multi-view consistency loss needs.
        // (The per-camera parameters still diverge freely during
        // training.)
        std::uint64_t shared_seed = rng.uniform_int(0, 1 << 30);
        for (int n = 0; n < num_cameras; ++n) {
            Rng cam_rng(shared_seed);
            encoders.emplace_back(cfg, cam_rng);
            decoders.emplace_back(cfg, cam_rng);
        }
        ff_encoder = FirstFrameEncoder<T>(cfg, rng);
    }

    ParamList<T> params() const {
        ParamList<T> out;
        for (std::size_t n = 0; n < encoders.size(); ++n) {
            ParamList<T> tmp;
            encoders[n].register_params(tmp);
            decoders[n].register_params(tmp);
            for (auto& p : tmp) out.push_back({"cam" + std::to_string(n) + "." + p.name, p.tensor});
        }
        ff_encoder.register_params(out);
        return out;
    }
};

// Copies parameter values between scalar types (float model -> double
// shadow for gradient checking).
template <typename Dst, typename Src>
void copy_params(const ParamList<Src>& src, const ParamList<Dst>& dst) {
    require(src.size() == dst.size(), "copy_params: parameter count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
        require(src[i].tensor.shape() == dst[i].tensor.shape(),
                "copy_params: shape mismatch for " + src[i].name);
        auto& d = const_cast<Tensor<Dst>&>(dst[i].tensor).data();
        const auto& s = src[i].tensor.data();
        for (std::size_t j = 0; j < s.size(); ++j) d[j] = static_cast<Dst>(s[j]);
    }
}

}  // namespace kp3d
