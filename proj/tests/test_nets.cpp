#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "kp3d/bottleneck.hpp"
#include "kp3d/nets.hpp"
#include "kp3d/random.hpp"

using namespace kp3d;

using FT = Tensor<float>;

namespace {

FT random_image(Rng& rng, int size) {
    std::vector<float> v(static_cast<std::size_t>(3) * size * size);
    for (auto& x : v) x = static_cast<float>(rng.uniform(0.0, 1.0));
    return FT::from({3, size, size}, std::move(v));
}

void zero_all(const ParamList<float>& params) {
    for (const auto& p : params) {
        auto& d = const_cast<FT&>(p.tensor).data();
        std::fill(d.begin(), d.end(), 0.0f);
    }
}

}  // namespace

TEST(Nets, EncoderOutputShapes) {
    NetsConfig cfg;  // 64x64, K = 6
    Rng rng(1);
    Encoder<float> enc(cfg, rng);
    auto out = enc.forward(random_image(rng, 64));
    EXPECT_EQ(out.confidence.shape(), Shape({6, 16, 16}));
    EXPECT_EQ(out.depth.shape(), Shape({6, 16, 16}));
}

TEST(Nets, DecoderOutputShape) {
    NetsConfig cfg;
    Rng rng(2);
    Decoder<float> dec(cfg, rng);
    FT gauss = FT::zeros({6, 16, 16});
    FT ff = FT::zeros({8, 16, 16});
    EXPECT_EQ(dec.forward(gauss, ff).shape(), Shape({3, 64, 64}));
}

TEST(Nets, FirstFrameEncoderShape) {
    NetsConfig cfg;
    Rng rng(3);
    FirstFrameEncoder<float> ff(cfg, rng);
    EXPECT_EQ(ff.forward(random_image(rng, 64)).shape(), Shape({8, 16, 16}));
}

TEST(Nets, DepthIsStrictlyPositive) {
    NetsConfig cfg;
    Rng rng(4);
    Encoder<float> enc(cfg, rng);
    auto out = enc.forward(random_image(rng, 64));
    for (float d : out.depth.data()) EXPECT_GT(d, 0.0f);
}

TEST(Nets, ZeroWeightEncoderGivesUniformHeatmap) {
    NetsConfig cfg;
    Rng rng(5);
    Encoder<float> enc(cfg, rng);
    ParamList<float> params;
    enc.register_params(params);
    zero_all(params);
    auto out = enc.forward(random_image(rng, 64));
    FT heat = spatial_softmax(out.confidence);
    float expect = 1.0f / (16 * 16);
    for (float h : heat.data()) EXPECT_NEAR(h, expect, 1e-7);
}

TEST(Nets, TranslationCovariance4PxToOneCell) {
    // Shifting the input right by 4 pixels shifts the confidence maps
    // right by exactly one cell away from the borders.
    NetsConfig cfg;
    Rng rng(6);
    Encoder<float> enc(cfg, rng);
    FT img = random_image(rng, 64);
    FT shifted = shift_image(img, ShiftSpec{4, 0});
    auto base = enc.forward(img);
    auto moved = enc.forward(shifted);
    int S = 16, K = cfg.num_keypoints;
    int checked = 0;
    for (int k = 0; k < K; ++k)
        for (int i = 4; i < S - 4; ++i)
            for (int j = 4; j < S - 4; ++j) {
                float a = moved.confidence.data()[(k * S + i) * S + j];
                float b = base.confidence.data()[(k * S + i) * S + j - 1];
                EXPECT_NEAR(a, b, 1e-5f);
                ++checked;
            }
    EXPECT_GT(checked, 0);
}

TEST(Nets, InitializationIsSeedDeterministic) {
    NetsConfig cfg;
    Rng r1(9), r2(9);
    AutoencoderParams<float> a(cfg, 2, r1), b(cfg, 2, r2);
    auto pa = a.params(), pb = b.params();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].name, pb[i].name);
        EXPECT_EQ(pa[i].tensor.data(), pb[i].tensor.data());
    }
}

TEST(Nets, ParamNamesAreUniqueAndPrefixed) {
    NetsConfig cfg;
    Rng rng(10);
    AutoencoderParams<float> ae(cfg, 3, rng);
    auto params = ae.params();
    std::set<std::string> names;
    for (const auto& p : params) names.insert(p.name);
    EXPECT_EQ(names.size(), params.size());  // unique
    // per-camera encoder/decoder stacks plus the shared first-frame net
    EXPECT_TRUE(names.count("cam0.enc.conv1.w"));
    EXPECT_TRUE(names.count("cam2.dec.conv4.b"));
    EXPECT_TRUE(names.count("ff.conv1.w"));
    EXPECT_TRUE(names.count("ff.conv2.b"));
}

TEST(Nets, EncoderRejectsBadSpatialSize) {
    NetsConfig cfg;
    Rng rng(11);
    Encoder<float> enc(cfg, rng);
    FT bad = FT::zeros({3, 30, 30});
    EXPECT_THROW(enc.forward(bad), ContractViolation);
}

TEST(Nets, ConfigValidation) {
    NetsConfig cfg;
    cfg.image_size = 30;
    EXPECT_THROW(cfg.validate(), ContractViolation);
    NetsConfig cfg2;
    cfg2.num_keypoints = 0;
    EXPECT_THROW(cfg2.validate(), ContractViolation);
}

TEST(Nets, CopyParamsFloatToDouble) {
    NetsConfig cfg;
    cfg.enc_channels = {4, 4, 8};
    cfg.dec_channels = {8, 4, 4};
    Rng r1(12), r2(12);
    AutoencoderParams<float> src(cfg, 1, r1);
    AutoencoderParams<double> dst(cfg, 1, r2);
    copy_params(src.params(), dst.params());
    auto ps = src.params();
    auto pd = dst.params();
    for (std::size_t i = 0; i < ps.size(); ++i)
        for (std::size_t j = 0; j < ps[i].tensor.numel(); ++j)
            EXPECT_DOUBLE_EQ(pd[i].tensor.data()[j],
                             static_cast<double>(ps[i].tensor.data()[j]));
}
