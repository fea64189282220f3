#pragma once

// PPO with the 3D keypoint bottleneck: rollout/observation buffers,
// keypoint renormalization, temporal frame stacking, the per-update
// unsupervised phase, and the joint training loop.

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <deque>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kp3d/bottleneck.hpp"
#include "kp3d/checkpoint.hpp"
#include "kp3d/config.hpp"
#include "kp3d/losses.hpp"
#include "kp3d/nets.hpp"
#include "kp3d/optim.hpp"
#include "kp3d/random.hpp"
#include "kp3d/simenv.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

struct NumericFailure : std::runtime_error {
    explicit NumericFailure(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Observation storage: views quantized to 8 bits, canonical episode
// frame shared between all observations of the episode.

using CanonFrames = std::vector<std::vector<std::uint8_t>>;  // per camera

inline std::vector<std::uint8_t> quantize_view(const Tensor<float>& img) {
    std::vector<std::uint8_t> out(img.numel());
    const auto& d = img.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        float x = std::min(1.0f, std::max(0.0f, d[i]));
        out[i] = static_cast<std::uint8_t>(std::lround(x * 255.0f));
    }
    return out;
}

inline Tensor<float> dequantize_view(const std::vector<std::uint8_t>& bytes, int image_size) {
    std::vector<float> out(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i] / 255.0f;
    return Tensor<float>::from({3, image_size, image_size}, std::move(out));
}

struct StoredObs {
    std::vector<std::vector<std::uint8_t>> views;
    std::shared_ptr<const CanonFrames> canonical;
    std::vector<float> extra;
};

inline StoredObs store_observation(const Observation& obs,
                                   std::shared_ptr<const CanonFrames> canonical) {
    StoredObs s;
    for (const auto& v : obs.views) s.views.push_back(quantize_view(v));
    s.canonical = std::move(canonical);
    s.extra = obs.extra_state;
    return s;
}

inline std::vector<Tensor<float>> stored_images(const std::vector<std::vector<std::uint8_t>>& views,
                                                int image_size) {
    std::vector<Tensor<float>> out;
    for (const auto& v : views) out.push_back(dequantize_view(v, image_size));
    return out;
}

class ObservationBuffer {
public:
    explicit ObservationBuffer(int capacity) : capacity_(capacity) {
        require(capacity >= 1, "observation buffer capacity must be >= 1");
    }

    void push(StoredObs obs) {
        if (static_cast<int>(data_.size()) < capacity_) {
            data_.push_back(std::move(obs));
        } else {
            data_[head_] = std::move(obs);
            head_ = (head_ + 1) % capacity_;
        }
    }

    bool empty() const { return data_.empty(); }
    int size() const { return static_cast<int>(data_.size()); }
    int capacity() const { return capacity_; }
    const StoredObs& at(int i) const { return data_[i]; }

    const StoredObs& sample(Rng& rng) const {
        require(!data_.empty(), "sampling from empty observation buffer");
        return data_[rng.uniform_int(0, size() - 1)];
    }

private:
    int capacity_;
    int head_ = 0;
    std::vector<StoredObs> data_;
};

// ---------------------------------------------------------------------------
// Keypoint renormalization (running standardization).

struct NormSnapshot {
    std::vector<float> mean, invstd;
};

class KeypointNormalizer {
public:
    static constexpr double kEps = 1e-6;

    explicit KeypointNormalizer(int dim = 0) : dim_(dim), mean_(dim, 0.0), m2_(dim, 0.0) {}

    int dim() const { return dim_; }
    long long count() const { return count_; }
    double mean(int i) const { return mean_[i]; }
    double variance(int i) const { return count_ > 0 ? m2_[i] / count_ : 1.0; }

    void update(const std::vector<float>& x) {
        require(static_cast<int>(x.size()) == dim_, "normalizer: dimension mismatch");
        ++count_;
        for (int i = 0; i < dim_; ++i) {
            double d = x[i] - mean_[i];
            mean_[i] += d / count_;
            m2_[i] += d * (x[i] - mean_[i]);
        }
    }

    std::vector<float> normalize(const std::vector<float>& x, bool update_stats) {
        if (update_stats) update(x);
        std::vector<float> out(x.size());
        for (int i = 0; i < dim_; ++i)
            out[i] = static_cast<float>((x[i] - mean_[i]) / std::sqrt(variance(i) + kEps));
        return out;
    }

    NormSnapshot snapshot() const {
        NormSnapshot s;
        s.mean.resize(dim_);
        s.invstd.resize(dim_);
        for (int i = 0; i < dim_; ++i) {
            s.mean[i] = static_cast<float>(mean_[i]);
            s.invstd[i] = static_cast<float>(1.0 / std::sqrt(variance(i) + kEps));
        }
        return s;
    }

    std::string serialize() const {
        std::string out;
        auto push = [&](const void* p, std::size_t n) {
            out.append(reinterpret_cast<const char*>(p), n);
        };
        std::int64_t c = count_;
        std::int32_t d = dim_;
        push(&d, 4);
        push(&c, 8);
        push(mean_.data(), mean_.size() * 8);
        push(m2_.data(), m2_.size() * 8);
        return out;
    }

    void deserialize(const std::string& s) {
        std::int32_t d;
        std::int64_t c;
        require(s.size() >= 12, "normalizer state truncated");
        std::memcpy(&d, s.data(), 4);
        std::memcpy(&c, s.data() + 4, 8);
        require(s.size() == 12 + 2 * static_cast<std::size_t>(d) * 8,
                "normalizer state length mismatch");
        dim_ = d;
        count_ = c;
        mean_.resize(d);
        m2_.resize(d);
        std::memcpy(mean_.data(), s.data() + 12, static_cast<std::size_t>(d) * 8);
        std::memcpy(m2_.data(), s.data() + 12 + static_cast<std::size_t>(d) * 8,
                    static_cast<std::size_t>(d) * 8);
    }

private:
    int dim_;
    long long count_ = 0;
    std::vector<double> mean_, m2_;
};

// Frozen-statistics renormalization as a graph op (affine in the input).
inline Tensor<float> renormalize_t(const Tensor<float>& flat, const NormSnapshot& snap) {
    int D = static_cast<int>(snap.mean.size());
    require(flat.shape() == Shape({D}), "renormalize_t: dimension mismatch");
    Tensor<float> mean_c = Tensor<float>::from({D}, snap.mean);
    Tensor<float> invstd_c = Tensor<float>::from({D}, snap.invstd);
    return mul(sub(flat, mean_c), invstd_c);
}

// concat(renormalized current, renorm(current) - renorm(previous)) as a
// 1-D feature vector; extra state appended verbatim.
inline Tensor<float> temporal_features(const Tensor<float>& current_kp,
                                       const std::vector<float>& previous_kp,
                                       const NormSnapshot& snap,
                                       const std::vector<float>& extra = {}) {
    const Shape& s = current_kp.shape();
    require(s.size() == 2 && s[1] == 3, "temporal_features: keypoints must be (K,3)");
    int D = s[0] * 3;
    require(static_cast<int>(previous_kp.size()) == D,
            "temporal_features: previous keypoint count mismatch");
    Tensor<float> flat = reshape(current_kp, {D});
    Tensor<float> rn = renormalize_t(flat, snap);
    std::vector<float> prev_rn(D);
    for (int i = 0; i < D; ++i) prev_rn[i] = (previous_kp[i] - snap.mean[i]) * snap.invstd[i];
    Tensor<float> diff = sub(rn, Tensor<float>::from({D}, prev_rn));
    std::vector<Tensor<float>> parts{rn, diff};
    if (!extra.empty())
        parts.push_back(Tensor<float>::from({static_cast<int>(extra.size())}, extra));
    return concat0(parts);
}

// ---------------------------------------------------------------------------
// Gaussian MLP policy.

template <typename T>
struct LinearLayer {
    Tensor<T> w, b;  // w is (in, out)

    void init(int in, int out, double scale, Rng& rng) {
        double bound = scale * std::sqrt(1.0 / in);
        std::vector<T> wv(static_cast<std::size_t>(in) * out);
        for (auto& x : wv) x = static_cast<T>(rng.uniform(-bound, bound));
        w = Tensor<T>::from({in, out}, std::move(wv), true);
        b = Tensor<T>::zeros({out}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        int B = x.shape()[0];
        Tensor<T> ones = Tensor<T>::filled({B, 1}, T(1));
        return add(matmul(x, w), matmul(ones, reshape(b, {1, b.shape()[0]})));
    }

    void register_params(ParamList<T>& out, const std::string& prefix) const {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

struct PolicyNet {
    static constexpr int kHidden = 64;
    static constexpr float kLogStdMin = -5.0f;
    static constexpr float kLogStdMax = 2.0f;

    int in_dim = 0, action_dim = 0;
    LinearLayer<float> a1, a2, a3, c1, c2, c3;
    Tensor<float> log_std;

    PolicyNet() = default;
    PolicyNet(int in, int actions, double init_log_std, Rng& rng)
        : in_dim(in), action_dim(actions) {
        a1.init(in, kHidden, 1.0, rng);
        a2.init(kHidden, kHidden, 1.0, rng);
        a3.init(kHidden, actions, 0.01, rng);
        c1.init(in, kHidden, 1.0, rng);
        c2.init(kHidden, kHidden, 1.0, rng);
        c3.init(kHidden, 1, 1.0, rng);
        log_std = Tensor<float>::filled({actions}, static_cast<float>(init_log_std), true);
    }

    Tensor<float> actor_mean(const Tensor<float>& x) const {
        return a3.forward(tanh_t(a2.forward(tanh_t(a1.forward(x)))));
    }

    Tensor<float> value(const Tensor<float>& x) const {
        Tensor<float> v = c3.forward(tanh_t(c2.forward(tanh_t(c1.forward(x)))));
        return reshape(v, {x.shape()[0]});
    }

    Tensor<float> log_std_clamped() const { return clamp_t(log_std, kLogStdMin, kLogStdMax); }

    ParamList<float> params() const {
        ParamList<float> out;
        a1.register_params(out, "actor.l1");
        a2.register_params(out, "actor.l2");
        a3.register_params(out, "actor.l3");
        c1.register_params(out, "critic.l1");
        c2.register_params(out, "critic.l2");
        c3.register_params(out, "critic.l3");
        out.push_back({"actor.log_std", log_std});
        return out;
    }
};

// log N(actions; mean, diag exp(log_std)^2) per row -> (B)
inline Tensor<float> gaussian_logp(const Tensor<float>& mean, const Tensor<float>& log_std_c,
                                   const Tensor<float>& actions) {
    int B = mean.shape()[0], A = mean.shape()[1];
    Tensor<float> ones_b = Tensor<float>::filled({B, 1}, 1.0f);
    Tensor<float> ones_a = Tensor<float>::filled({A}, 1.0f);
    Tensor<float> lsb = matmul(ones_b, reshape(log_std_c, {1, A}));
    Tensor<float> z = div(sub(actions, mean), exp_t(lsb));
    Tensor<float> q = mul_scalar(matmul(square(z), ones_a), -0.5f);
    Tensor<float> ls_sum = matmul(lsb, ones_a);
    return add_scalar(sub(q, ls_sum),
                      static_cast<float>(-0.5 * A * std::log(2.0 * M_PI)));
}

inline Tensor<float> gaussian_entropy(const Tensor<float>& log_std_c) {
    int A = log_std_c.shape()[0];
    return add_scalar(sum(log_std_c), static_cast<float>(0.5 * A * (1.0 + std::log(2.0 * M_PI))));
}

inline double gaussian_logp_plain(const std::vector<double>& mean, const std::vector<double>& stddev,
                                  const std::vector<double>& action) {
    double lp = -0.5 * mean.size() * std::log(2.0 * M_PI);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        double z = (action[i] - mean[i]) / stddev[i];
        lp += -0.5 * z * z - std::log(stddev[i]);
    }
    return lp;
}

// ---------------------------------------------------------------------------
// GAE. values carries one bootstrap entry beyond the last step.

inline void compute_gae(const std::vector<float>& rewards, const std::vector<float>& values,
                        const std::vector<std::uint8_t>& dones, double gamma, double lambda,
                        std::vector<float>* advantages, std::vector<float>* returns) {
    std::size_t T = rewards.size();
    require(dones.size() == T && values.size() == T + 1,
            "compute_gae: sequence lengths misaligned");
    advantages->assign(T, 0.0f);
    returns->assign(T, 0.0f);
    double acc = 0.0;
    for (std::size_t t = T; t-- > 0;) {
        double not_done = dones[t] ? 0.0 : 1.0;
        double delta = rewards[t] + gamma * values[t + 1] * not_done - values[t];
        acc = delta + gamma * lambda * not_done * acc;
        (*advantages)[t] = static_cast<float>(acc);
        (*returns)[t] = static_cast<float>(acc + values[t]);
    }
}

inline void standardize(std::vector<float>& x) {
    if (x.empty()) return;
    double m = 0;
    for (float v : x) m += v;
    m /= x.size();
    double var = 0;
    for (float v : x) var += (v - m) * (v - m);
    var /= x.size();
    double inv = 1.0 / std::sqrt(var + 1e-8);
    for (float& v : x) v = static_cast<float>((v - m) * inv);
}

// ---------------------------------------------------------------------------
// PPO clipped-surrogate loss over a minibatch.

struct PPOStats {
    double approx_kl = 0;
    double clip_fraction = 0;
    double policy_term = 0;
    double value_term = 0;
    int excluded = 0;
};

inline Tensor<float> ppo_loss(const Tensor<float>& logp_new, const std::vector<float>& logp_old,
                              const std::vector<float>& advantages_std,
                              const Tensor<float>& values, const std::vector<float>& returns,
                              const Tensor<float>& entropy, double eps_clip, double c_v,
                              double c_ent, PPOStats* stats) {
    int B = logp_new.shape()[0];
    require(static_cast<int>(logp_old.size()) == B &&
                static_cast<int>(advantages_std.size()) == B &&
                static_cast<int>(returns.size()) == B && values.shape() == Shape({B}),
            "ppo_loss: batch size mismatch");

    Tensor<float> old_c = Tensor<float>::from({B}, logp_old);
    Tensor<float> ratio = exp_t(sub(logp_new, old_c));

    // Non-finite ratios are excluded from the surrogate and counted.
    std::vector<float> mask(B, 1.0f);
    int valid = B, clipped = 0;
    double kl = 0;
    for (int i = 0; i < B; ++i) {
        float r = ratio.data()[i];
        if (!std::isfinite(r)) {
            mask[i] = 0.0f;
            --valid;
            continue;
        }
        if (std::abs(r - 1.0f) > eps_clip) ++clipped;
        kl += logp_old[i] - logp_new.data()[i];
    }
    require(valid > 0, "ppo_loss: all samples excluded as non-finite");
    Tensor<float> mask_c = Tensor<float>::from({B}, mask);
    Tensor<float> adv_c = Tensor<float>::from({B}, advantages_std);

    Tensor<float> surr1 = mul(ratio, adv_c);
    Tensor<float> surr2 = mul(clamp_t(ratio, static_cast<float>(1.0 - eps_clip),
                                      static_cast<float>(1.0 + eps_clip)),
                              adv_c);
    Tensor<float> surr = minimum(surr1, surr2);
    Tensor<float> policy = mul_scalar(sum(mul(surr, mask_c)), -1.0f / valid);

    Tensor<float> ret_c = Tensor<float>::from({B}, returns);
    Tensor<float> vdiff = square(sub(values, ret_c));
    Tensor<float> vloss = mul_scalar(sum(mul(vdiff, mask_c)), 1.0f / valid);

    Tensor<float> total = add(policy, mul_scalar(vloss, static_cast<float>(c_v)));
    total = add(total, mul_scalar(entropy, static_cast<float>(-c_ent)));

    if (stats) {
        stats->approx_kl = kl / valid;
        stats->clip_fraction = static_cast<double>(clipped) / valid;
        stats->policy_term = policy.item();
        stats->value_term = vloss.item();
        stats->excluded = B - valid;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Shared unsupervised step: accumulates gradients of the mean L_unsup
// over the batch into the autoencoder parameters.

struct UnsupBatchResult {
    double ae = 0, multi = 0, sep = 0, total = 0;
    int behind_camera_events = 0;
};

inline UnsupBatchResult unsup_loss_and_backward(const AutoencoderParams<float>& params,
                                                const std::vector<const StoredObs*>& batch,
                                                const std::vector<Camera>& cams,
                                                const RunConfig& cfg, Rng& rng,
                                                bool do_backward = true) {
    UnsupBatchResult res;
    LossWeights w = cfg.weights();
    int N = cfg.num_cameras;
    float inv_b = 1.0f / static_cast<float>(batch.size());
    for (const StoredObs* obs : batch) {
        std::vector<Tensor<float>> images = stored_images(obs->views, cfg.image_size);
        std::vector<ShiftSpec> shifts;
        if (cfg.augmentation) {
            for (int n = 0; n < N; ++n)
                shifts.push_back({rng.uniform_int(-cfg.max_shift_px, cfg.max_shift_px),
                                  rng.uniform_int(-cfg.max_shift_px, cfg.max_shift_px)});
            for (int n = 0; n < N; ++n) images[n] = shift_image(images[n], shifts[n]);
        }
        std::vector<Tensor<float>> ff;
        require(obs->canonical != nullptr, "unsup step: observation has no canonical frame");
        for (int n = 0; n < N; ++n)
            ff.push_back(params.ff_encoder.forward(
                dequantize_view((*obs->canonical)[n], cfg.image_size)));

        BottleneckOptions opt;
        opt.training = true;
        opt.nu = cfg.nu;
        opt.offset_correction = !cfg.no_offset_correction;
        opt.decode = true;
        opt.image_size = cfg.image_size;
        BottleneckOutput<float> bo = full_bottleneck(images, params, ff, cams, shifts, opt, &rng);

        std::vector<Tensor<float>> worlds;
        for (auto& v : bo.views) worlds.push_back(v.world);
        UnsupLossParts<float> parts = loss_unsup(bo.reconstructions, images, worlds, bo.fused, w);

        res.ae += parts.ae.item() * inv_b;
        res.multi += parts.multiview.item() * inv_b;
        res.sep += parts.separation.item() * inv_b;
        res.total += parts.total.item() * inv_b;
        res.behind_camera_events += bo.behind_camera_events;
        if (do_backward) backward(mul_scalar(parts.total, inv_b));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Rollout storage.

struct Transition {
    StoredObs obs;
    std::vector<float> prev_kp;  // raw fused keypoints of the previous frame
    NormSnapshot norm;           // statistics used for this step's features
    std::vector<float> action;
    float reward = 0;
    std::uint8_t done = 0;
    float value = 0;
    float logp = 0;
    float advantage = 0;
    float ret = 0;
};

class RolloutBuffer {
public:
    explicit RolloutBuffer(int num_actors, int capacity)
        : capacity_(capacity), seqs_(num_actors) {}

    void clear() {
        for (auto& s : seqs_) s.clear();
        boot_.assign(seqs_.size(), 0.0f);
    }

    void push(int actor, Transition t) {
        require(total() < capacity_, "rollout buffer capacity exceeded");
        seqs_[actor].push_back(std::move(t));
    }

    void set_bootstrap(int actor, float v) {
        if (boot_.size() != seqs_.size()) boot_.assign(seqs_.size(), 0.0f);
        boot_[actor] = v;
    }

    int total() const {
        int n = 0;
        for (const auto& s : seqs_) n += static_cast<int>(s.size());
        return n;
    }

    std::vector<std::vector<Transition>>& sequences() { return seqs_; }

    void compute_advantages(double gamma, double lambda) {
        for (std::size_t a = 0; a < seqs_.size(); ++a) {
            auto& seq = seqs_[a];
            if (seq.empty()) continue;
            std::vector<float> rewards, values;
            std::vector<std::uint8_t> dones;
            for (auto& t : seq) {
                rewards.push_back(t.reward);
                values.push_back(t.value);
                dones.push_back(t.done);
            }
            values.push_back(boot_[a]);
            std::vector<float> adv, ret;
            compute_gae(rewards, values, dones, gamma, lambda, &adv, &ret);
            for (std::size_t t = 0; t < seq.size(); ++t) {
                seq[t].advantage = adv[t];
                seq[t].ret = ret[t];
            }
        }
    }

    std::vector<Transition*> flatten() {
        std::vector<Transition*> out;
        for (auto& s : seqs_)
            for (auto& t : s) out.push_back(&t);
        return out;
    }

private:
    int capacity_;
    std::vector<std::vector<Transition>> seqs_;
    std::vector<float> boot_;
};

// ---------------------------------------------------------------------------
// Byte packing for full-state checkpoints.

namespace detail {

struct ByteWriter {
    std::string buf;
    void raw(const void* p, std::size_t n) { buf.append(reinterpret_cast<const char*>(p), n); }
    void f64(double v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void i64(std::int64_t v) { raw(&v, 8); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void bytes(const std::vector<std::uint8_t>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        raw(v.data(), v.size());
    }
    void floats(const std::vector<float>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        raw(v.data(), v.size() * 4);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
};

struct ByteReader {
    const std::string& s;
    std::size_t pos = 0;
    explicit ByteReader(const std::string& src) : s(src) {}
    void raw(void* p, std::size_t n) {
        require(pos + n <= s.size(), "checkpoint state blob truncated");
        std::memcpy(p, s.data() + pos, n);
        pos += n;
    }
    double f64() { double v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::vector<std::uint8_t> bytes() {
        std::vector<std::uint8_t> v(u32());
        raw(v.data(), v.size());
        return v;
    }
    std::vector<float> floats() {
        std::vector<float> v(u32());
        raw(v.data(), v.size() * 4);
        return v;
    }
    std::string str() {
        std::string v(u32(), '\0');
        raw(v.data(), v.size());
        return v;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop.

struct UpdateLog {
    int update = 0;
    long long env_steps = 0;
    double mean_return = 0;
    double l_policy = 0, l_ae = 0, l_multi = 0, l_sep = 0;
    double approx_kl = 0, clip_fraction = 0;
};

struct ReturnStats {
    double mean = 0, stddev = 0;
    int episodes = 0;
};

struct GradProbe {
    double encoder_policy_grad_norm = 0;
    double encoder_unsup_grad_norm = 0;
};

inline ReturnStats eval_random_policy(const RunConfig& cfg, int episodes, std::uint64_t seed) {
    PusherConfig pc;
    pc.image_size = cfg.image_size;
    pc.num_cameras = cfg.num_cameras;
    pc.colorless = cfg.colorless;
    pc.append_goal_state = cfg.append_goal_state;
    PusherEnv env(pc, default_camera_rig(cfg.num_cameras));
    Rng rng(seed);
    std::vector<double> rets;
    for (int e = 0; e < episodes; ++e) {
        env.reset(rng.next_seed());
        double total = 0;
        bool done = false;
        while (!done) {
            double ax = rng.uniform(-pc.action_limit, pc.action_limit);
            double ay = rng.uniform(-pc.action_limit, pc.action_limit);
            auto res = env.step(ax, ay);
            total += res.reward;
            done = res.done;
        }
        rets.push_back(total);
    }
    ReturnStats out;
    out.episodes = episodes;
    for (double r : rets) out.mean += r;
    out.mean /= episodes;
    for (double r : rets) out.stddev += (r - out.mean) * (r - out.mean);
    out.stddev = std::sqrt(out.stddev / episodes);
    return out;
}

class RLTrainer {
public:
    explicit RLTrainer(const RunConfig& cfg)
        : cfg_(cfg),
          cams_(default_camera_rig(cfg.num_cameras)),
          obs_buffer_(cfg.obs_buffer_capacity),
          rollout_(cfg.num_actors, cfg.rollout_buffer_capacity),
          normalizer_(cfg.num_keypoints * 3),
          train_rng_(cfg.seed) {
        cfg_.validate();
        require(cfg_.env == "pusher", "RL training supports the pusher environment");
        feat_dim_ = cfg.num_keypoints * 3 * 2 + (cfg.append_goal_state ? 2 : 0);

        Rng init_rng(cfg.seed + 1);
        ae_ = AutoencoderParams<float>(cfg.nets(), cfg.num_cameras, init_rng);
        policy_ = PolicyNet(feat_dim_, kActionDim, cfg.init_log_std, init_rng);
        if (!cfg.pretrained_checkpoint.empty()) load_ae_params(cfg.pretrained_checkpoint);
        adam_ae_ = std::make_unique<Adam<float>>(ae_.params());
        adam_policy_ = std::make_unique<Adam<float>>(policy_.params());

        PusherConfig pc;
        pc.image_size = cfg.image_size;
        pc.num_cameras = cfg.num_cameras;
        pc.colorless = cfg.colorless;
        pc.append_goal_state = cfg.append_goal_state;
        for (int a = 0; a < cfg.num_actors; ++a) {
            actors_.push_back(Actor{PusherEnv(pc, cams_), Rng(cfg.seed + 100 + a)});
        }
        for (auto& a : actors_) reset_actor(a);
    }

    const RunConfig& config() const { return cfg_; }
    int update_count() const { return update_; }
    long long env_steps() const { return env_steps_; }
    PolicyNet& policy() { return policy_; }
    AutoencoderParams<float>& autoencoder() { return ae_; }
    KeypointNormalizer& normalizer() { return normalizer_; }
    ObservationBuffer& observation_buffer() { return obs_buffer_; }
    const std::deque<double>& recent_returns() const { return recent_returns_; }

    double mean_recent_return() const {
        if (recent_returns_.empty()) return 0.0;
        double m = 0;
        for (double r : recent_returns_) m += r;
        return m / recent_returns_.size();
    }

    // Inference helper: fused keypoints + mean attention for one stored
    // observation (no gradients).
    BottleneckOutput<float> infer(const StoredObs& obs) {
        NoGradGuard ng;
        std::vector<Tensor<float>> images = stored_images(obs.views, cfg_.image_size);
        std::vector<EncoderOutput<float>> enc;
        for (int n = 0; n < cfg_.num_cameras; ++n) enc.push_back(ae_.encoders[n].forward(images[n]));
        BottleneckOptions opt;
        opt.training = false;
        opt.decode = false;
        opt.image_size = cfg_.image_size;
        return run_bottleneck(enc, cams_, {}, opt);
    }

    // Collects one rollout of T steps per actor, updating the
    // normalizer and both buffers.
    void collect_rollout() {
        rollout_.clear();
        for (int a = 0; a < cfg_.num_actors; ++a) {
            Actor& actor = actors_[a];
            for (int t = 0; t < cfg_.rollout_length; ++t) {
                NoGradGuard ng;
                std::vector<float> fused = fused_of(actor.obs);
                normalizer_.update(fused);
                NormSnapshot snap = normalizer_.snapshot();
                std::vector<float> feat = plain_features(fused, actor.prev_kp, snap, actor.obs.extra);

                std::vector<double> mean, stddev;
                double value;
                policy_forward_plain(feat, &mean, &stddev, &value);
                std::vector<double> action(kActionDim);
                for (int j = 0; j < kActionDim; ++j)
                    action[j] = mean[j] + stddev[j] * actor.rng.normal();
                double logp = gaussian_logp_plain(mean, stddev, action);

                auto res = actor.env.step(action[0], action[1]);
                actor.ep_return += res.reward;
                ++actor.ep_len;
                ++env_steps_;

                obs_buffer_.push(actor.obs);
                Transition tr;
                tr.obs = actor.obs;
                tr.prev_kp = actor.prev_kp;
                tr.norm = snap;
                tr.action = {static_cast<float>(action[0]), static_cast<float>(action[1])};
                tr.reward = static_cast<float>(res.reward);
                tr.done = res.done ? 1 : 0;
                tr.value = static_cast<float>(value);
                tr.logp = static_cast<float>(logp);
                rollout_.push(a, std::move(tr));

                actor.prev_kp = fused;
                if (res.done) {
                    push_episode_return(actor.ep_return);
                    reset_actor(actor);
                } else {
                    actor.obs = store_observation(res.obs, actor.canonical);
                }
            }
            // bootstrap value of the state after the last stored step
            NoGradGuard ng;
            std::vector<float> fused = fused_of(actor.obs);
            NormSnapshot snap = normalizer_.snapshot();
            std::vector<float> feat = plain_features(fused, actor.prev_kp, snap, actor.obs.extra);
            std::vector<double> mean, stddev;
            double value;
            policy_forward_plain(feat, &mean, &stddev, &value);
            rollout_.set_bootstrap(a, static_cast<float>(value));
        }
    }

    // Exactly p optimizer steps on L_unsup; policy parameters untouched.
    void unsup_phase() {
        if (cfg_.two_stage || cfg_.unsup_steps_per_update <= 0) return;
        if (obs_buffer_.empty()) {
            std::fprintf(stderr, "[rl] observation buffer empty, unsupervised phase skipped\n");
            return;
        }
        for (int s = 0; s < cfg_.unsup_steps_per_update; ++s) {
            std::vector<const StoredObs*> batch;
            for (int b = 0; b < cfg_.unsup_batch_size; ++b)
                batch.push_back(&obs_buffer_.sample(train_rng_));
            adam_ae_->zero_grad();
            UnsupBatchResult r =
                unsup_loss_and_backward(ae_, batch, cams_, cfg_, train_rng_);
            if (!std::isfinite(r.total))
                throw NumericFailure("non-finite unsupervised loss at update " +
                                     std::to_string(update_));
            adam_ae_->clip_global_norm(cfg_.grad_clip);
            adam_ae_->step(cfg_.unsup_lr);
            last_unsup_ = r;
        }
    }

    // Gradient probe on one minibatch: encoder gradient norms due to the
    // policy loss alone and the unsupervised loss alone.
    GradProbe probe_gradients() {
        GradProbe probe;
        auto all = rollout_.flatten();
        if (all.empty() || obs_buffer_.empty()) return probe;
        int B = std::min<int>(cfg_.minibatch_size, static_cast<int>(all.size()));
        std::vector<Transition*> mb(all.begin(), all.begin() + B);

        adam_ae_->zero_grad();
        adam_policy_->zero_grad();
        PPOStats stats;
        Tensor<float> lp = policy_loss_graph(mb, &stats);
        backward(lp);
        probe.encoder_policy_grad_norm = encoder_grad_norm();

        adam_ae_->zero_grad();
        adam_policy_->zero_grad();
        std::vector<const StoredObs*> batch{&obs_buffer_.sample(train_rng_)};
        unsup_loss_and_backward(ae_, batch, cams_, cfg_, train_rng_);
        probe.encoder_unsup_grad_norm = encoder_grad_norm();

        adam_ae_->zero_grad();
        adam_policy_->zero_grad();
        return probe;
    }

    // One full update: rollout, unsup phase, GAE, joint epochs.
    UpdateLog update() {
        collect_rollout();
        unsup_phase();
        rollout_.compute_advantages(cfg_.gamma, cfg_.gae_lambda);

        auto all = rollout_.flatten();
        double sum_kl = 0, sum_clip = 0, sum_policy = 0;
        double sum_ae = 0, sum_multi = 0, sum_sep = 0;
        int n_mb = 0, n_unsup_mb = 0;
        bool stop = false;
        for (int epoch = 0; epoch < cfg_.epochs_per_update && !stop; ++epoch) {
            shuffle(all);
            for (std::size_t begin = 0; begin < all.size() && !stop;
                 begin += cfg_.minibatch_size) {
                std::size_t end = std::min(all.size(), begin + cfg_.minibatch_size);
                std::vector<Transition*> mb(all.begin() + begin, all.begin() + end);

                adam_ae_->zero_grad();
                adam_policy_->zero_grad();

                PPOStats stats;
                Tensor<float> total = policy_loss_graph(mb, &stats);
                if (!cfg_.two_stage && cfg_.unsup_samples_per_minibatch > 0 &&
                    !obs_buffer_.empty()) {
                    std::vector<const StoredObs*> ub;
                    for (int b = 0; b < cfg_.unsup_samples_per_minibatch; ++b)
                        ub.push_back(&obs_buffer_.sample(train_rng_));
                    float inv = 1.0f / static_cast<float>(ub.size());
                    for (const StoredObs* o : ub) {
                        Tensor<float> ul = unsup_loss_graph(*o);
                        total = add(total, mul_scalar(ul, inv));
                        sum_ae += last_graph_parts_.ae;
                        sum_multi += last_graph_parts_.multi;
                        sum_sep += last_graph_parts_.sep;
                        ++n_unsup_mb;
                    }
                }
                if (!std::isfinite(total.item())) {
                    save_checkpoint(cfg_.out_dir + "/abort.kp3d");
                    throw NumericFailure("non-finite joint loss at update " +
                                         std::to_string(update_ + 1) +
                                         " (checkpoint preserved)");
                }
                backward(total);
                adam_policy_->clip_global_norm(cfg_.grad_clip);
                adam_policy_->step(cfg_.lr);
                if (!cfg_.two_stage) {
                    adam_ae_->clip_global_norm(cfg_.grad_clip);
                    adam_ae_->step(cfg_.lr);
                }
                sum_kl += stats.approx_kl;
                sum_clip += stats.clip_fraction;
                sum_policy += stats.policy_term;
                ++n_mb;
                if (stats.approx_kl > cfg_.target_kl) stop = true;
            }
        }

        ++update_;
        UpdateLog log;
        log.update = update_;
        log.env_steps = env_steps_;
        log.mean_return = mean_recent_return();
        log.l_policy = n_mb ? sum_policy / n_mb : 0;
        if (n_unsup_mb) {
            log.l_ae = sum_ae / n_unsup_mb;
            log.l_multi = sum_multi / n_unsup_mb;
            log.l_sep = sum_sep / n_unsup_mb;
        } else {
            log.l_ae = last_unsup_.ae;
            log.l_multi = last_unsup_.multi;
            log.l_sep = last_unsup_.sep;
        }
        log.approx_kl = n_mb ? sum_kl / n_mb : 0;
        log.clip_fraction = n_mb ? sum_clip / n_mb : 0;
        return log;
    }

    // Runs updates until the step budget is exhausted; callback may stop
    // the loop early by returning false.
    void run(const std::function<bool(const UpdateLog&)>& cb = nullptr) {
        open_log(update_ == 0);
        while (env_steps_ < cfg_.total_env_steps) {
            UpdateLog log = update();
            write_log_row(log);
            if (cfg_.checkpoint_every > 0 && update_ % cfg_.checkpoint_every == 0)
                save_checkpoint(cfg_.out_dir + "/ckpt_latest.kp3d");
            if (cb && !cb(log)) break;
            if (cfg_.use_early_exit && !recent_returns_.empty() &&
                log.mean_return >= cfg_.early_exit_return)
                break;
        }
        save_checkpoint(cfg_.out_dir + "/ckpt_final.kp3d");
    }

    // Greedy (mean-action) policy evaluation on fresh episodes.
    ReturnStats evaluate(int episodes, std::uint64_t seed) {
        NoGradGuard ng;
        PusherConfig pc = actors_[0].env.config();
        PusherEnv env(pc, cams_);
        Rng rng(seed);
        std::vector<double> rets;
        for (int e = 0; e < episodes; ++e) {
            Observation obs = env.reset(rng.next_seed());
            auto canonical = std::make_shared<CanonFrames>();
            for (const auto& v : obs.views) canonical->push_back(quantize_view(v));
            StoredObs cur = store_observation(obs, canonical);
            std::vector<float> prev = fused_of(cur);
            double total = 0;
            bool done = false;
            while (!done) {
                std::vector<float> fused = fused_of(cur);
                NormSnapshot snap = normalizer_.snapshot();
                std::vector<float> feat = plain_features(fused, prev, snap, cur.extra);
                std::vector<double> mean, stddev;
                double value;
                policy_forward_plain(feat, &mean, &stddev, &value);
                auto res = env.step(mean[0], mean[1]);
                total += res.reward;
                done = res.done;
                prev = fused;
                cur = store_observation(res.obs, canonical);
            }
            rets.push_back(total);
        }
        ReturnStats out;
        out.episodes = episodes;
        for (double r : rets) out.mean += r;
        out.mean /= std::max<std::size_t>(1, rets.size());
        for (double r : rets) out.stddev += (r - out.mean) * (r - out.mean);
        out.stddev = std::sqrt(out.stddev / std::max<std::size_t>(1, rets.size()));
        return out;
    }

    // ------------------------------------------------------------------
    // Persistence

    void save_checkpoint(const std::string& path) const {
        Checkpoint ck;
        ck.put("meta", {4},
               {static_cast<float>(update_), static_cast<float>(env_steps_),
                static_cast<float>(cfg_.full_state_checkpoints ? 1 : 0),
                static_cast<float>(feat_dim_)});
        for (const auto& p : ae_.params()) ck.put_tensor("ae." + p.name, p.tensor);
        for (const auto& p : policy_.params()) ck.put_tensor("policy." + p.name, p.tensor);
        save_adam(ck, "adam_ae", *adam_ae_);
        save_adam(ck, "adam_policy", *adam_policy_);
        ck.put_bytes("normalizer", normalizer_.serialize());
        ck.put_bytes("rng.train", train_rng_.serialize());
        for (std::size_t a = 0; a < actors_.size(); ++a)
            ck.put_bytes("rng.actor" + std::to_string(a), actors_[a].rng.serialize());
        if (cfg_.full_state_checkpoints) ck.put_bytes("full_state", pack_full_state());
        ck.save(path);
    }

    void load_checkpoint(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        const auto& meta = ck.get("meta");
        update_ = static_cast<int>(meta.data[0]);
        env_steps_ = static_cast<long long>(meta.data[1]);
        for (const auto& p : ae_.params())
            ck.load_into("ae." + p.name, const_cast<Tensor<float>&>(p.tensor));
        for (const auto& p : policy_.params())
            ck.load_into("policy." + p.name, const_cast<Tensor<float>&>(p.tensor));
        load_adam(ck, "adam_ae", *adam_ae_);
        load_adam(ck, "adam_policy", *adam_policy_);
        normalizer_.deserialize(ck.get_bytes("normalizer"));
        train_rng_.deserialize(ck.get_bytes("rng.train"));
        for (std::size_t a = 0; a < actors_.size(); ++a)
            actors_[a].rng.deserialize(ck.get_bytes("rng.actor" + std::to_string(a)));
        if (meta.data[2] != 0.0f && ck.has("full_state"))
            unpack_full_state(ck.get_bytes("full_state"));
    }

private:
    static constexpr int kActionDim = 2;

    struct Actor {
        PusherEnv env;
        Rng rng;
        StoredObs obs;
        std::shared_ptr<const CanonFrames> canonical;
        std::vector<float> prev_kp;
        double ep_return = 0;
        int ep_len = 0;
    };

    void reset_actor(Actor& a) {
        Observation obs = a.env.reset(a.rng.next_seed());
        auto canonical = std::make_shared<CanonFrames>();
        for (const auto& v : obs.views) canonical->push_back(quantize_view(v));
        a.canonical = canonical;
        a.obs = store_observation(obs, a.canonical);
        a.prev_kp = fused_of(a.obs);
        a.ep_return = 0;
        a.ep_len = 0;
    }

    void push_episode_return(double r) {
        recent_returns_.push_back(r);
        while (recent_returns_.size() > 20) recent_returns_.pop_front();
    }

    std::vector<float> fused_of(const StoredObs& obs) {
        NoGradGuard ng;
        std::vector<Tensor<float>> images = stored_images(obs.views, cfg_.image_size);
        std::vector<EncoderOutput<float>> enc;
        for (int n = 0; n < cfg_.num_cameras; ++n)
            enc.push_back(ae_.encoders[n].forward(images[n]));
        BottleneckOptions opt;
        opt.training = false;
        opt.decode = false;
        opt.image_size = cfg_.image_size;
        return run_bottleneck(enc, cams_, {}, opt).fused.data();
    }

    std::vector<float> plain_features(const std::vector<float>& fused,
                                      const std::vector<float>& prev, const NormSnapshot& snap,
                                      const std::vector<float>& extra) const {
        int D = static_cast<int>(fused.size());
        std::vector<float> out;
        out.reserve(2 * D + extra.size());
        for (int i = 0; i < D; ++i) out.push_back((fused[i] - snap.mean[i]) * snap.invstd[i]);
        for (int i = 0; i < D; ++i)
            out.push_back((fused[i] - prev[i]) * snap.invstd[i]);
        out.insert(out.end(), extra.begin(), extra.end());
        return out;
    }

    void policy_forward_plain(const std::vector<float>& feat, std::vector<double>* mean,
                              std::vector<double>* stddev, double* value) {
        NoGradGuard ng;
        Tensor<float> x =
            Tensor<float>::from({1, static_cast<int>(feat.size())}, feat);
        Tensor<float> m = policy_.actor_mean(x);
        Tensor<float> v = policy_.value(x);
        Tensor<float> ls = policy_.log_std_clamped();
        mean->assign(m.data().begin(), m.data().end());
        stddev->resize(kActionDim);
        for (int j = 0; j < kActionDim; ++j) (*stddev)[j] = std::exp(ls.data()[j]);
        *value = v.data()[0];
    }

    // Differentiable feature row for one transition (1, D_feat).
    Tensor<float> feature_row(const Transition& t) {
        std::vector<Tensor<float>> images = stored_images(t.obs.views, cfg_.image_size);
        std::vector<EncoderOutput<float>> enc;
        for (int n = 0; n < cfg_.num_cameras; ++n)
            enc.push_back(ae_.encoders[n].forward(images[n]));
        BottleneckOptions opt;
        opt.training = false;
        opt.decode = false;
        opt.image_size = cfg_.image_size;
        Tensor<float> fused = run_bottleneck(enc, cams_, {}, opt).fused;
        if (cfg_.stop_policy_gradient) fused = stop_gradient(fused);
        Tensor<float> row = temporal_features(fused, t.prev_kp, t.norm, t.obs.extra);
        return reshape(row, {1, row.shape()[0]});
    }

    Tensor<float> policy_loss_graph(const std::vector<Transition*>& mb, PPOStats* stats) {
        int B = static_cast<int>(mb.size());
        std::vector<Tensor<float>> rows;
        std::vector<float> actions, logp_old, adv, rets;
        for (Transition* t : mb) {
            rows.push_back(feature_row(*t));
            actions.insert(actions.end(), t->action.begin(), t->action.end());
            logp_old.push_back(t->logp);
            adv.push_back(t->advantage);
            rets.push_back(t->ret);
        }
        standardize(adv);
        Tensor<float> F = concat0(rows);
        Tensor<float> act_c = Tensor<float>::from({B, kActionDim}, actions);
        Tensor<float> mean = policy_.actor_mean(F);
        Tensor<float> ls = policy_.log_std_clamped();
        Tensor<float> lp = gaussian_logp(mean, ls, act_c);
        Tensor<float> vals = policy_.value(F);
        Tensor<float> ent = gaussian_entropy(ls);
        return ppo_loss(lp, logp_old, adv, vals, rets, ent, cfg_.clip_range, cfg_.value_coef,
                        cfg_.entropy_coef, stats);
    }

    Tensor<float> unsup_loss_graph(const StoredObs& obs) {
        std::vector<Tensor<float>> images = stored_images(obs.views, cfg_.image_size);
        std::vector<ShiftSpec> shifts;
        if (cfg_.augmentation) {
            for (int n = 0; n < cfg_.num_cameras; ++n)
                shifts.push_back({train_rng_.uniform_int(-cfg_.max_shift_px, cfg_.max_shift_px),
                                  train_rng_.uniform_int(-cfg_.max_shift_px, cfg_.max_shift_px)});
            for (int n = 0; n < cfg_.num_cameras; ++n)
                images[n] = shift_image(images[n], shifts[n]);
        }
        std::vector<Tensor<float>> ff;
        for (int n = 0; n < cfg_.num_cameras; ++n)
            ff.push_back(ae_.ff_encoder.forward(
                dequantize_view((*obs.canonical)[n], cfg_.image_size)));
        BottleneckOptions opt;
        opt.training = true;
        opt.nu = cfg_.nu;
        opt.offset_correction = !cfg_.no_offset_correction;
        opt.decode = true;
        opt.image_size = cfg_.image_size;
        BottleneckOutput<float> bo =
            full_bottleneck(images, ae_, ff, cams_, shifts, opt, &train_rng_);
        std::vector<Tensor<float>> worlds;
        for (auto& v : bo.views) worlds.push_back(v.world);
        UnsupLossParts<float> parts =
            loss_unsup(bo.reconstructions, images, worlds, bo.fused, cfg_.weights());
        last_graph_parts_ = {parts.ae.item(), parts.multiview.item(), parts.separation.item()};
        return parts.total;
    }

    double encoder_grad_norm() const {
        double sq = 0;
        for (const auto& p : ae_.params()) {
            if (p.name.find(".enc.") == std::string::npos) continue;
            for (float g : const_cast<Tensor<float>&>(p.tensor).grad())
                sq += static_cast<double>(g) * g;
        }
        return std::sqrt(sq);
    }

    void shuffle(std::vector<Transition*>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = train_rng_.uniform_int(0, i);
            std::swap(v[i], v[j]);
        }
    }

    void open_log(bool fresh) {
        std::string path = cfg_.out_dir + "/train_log.csv";
        log_.open(path, fresh ? std::ios::trunc : std::ios::app);
        require(static_cast<bool>(log_), "cannot open training log " + path);
        if (fresh) {
            log_ << "update,env_steps,mean_return,L_policy,L_ae,L_multi,L_sep,approx_kl,"
                    "clip_fraction\n";
            log_.flush();
        }
    }

    void write_log_row(const UpdateLog& l) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%d,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", l.update,
                      l.env_steps, l.mean_return, l.l_policy, l.l_ae, l.l_multi, l.l_sep,
                      l.approx_kl, l.clip_fraction);
        log_ << buf;
        log_.flush();
    }

    static void save_adam(Checkpoint& ck, const std::string& prefix, const Adam<float>& adam) {
        auto& a = const_cast<Adam<float>&>(adam);
        const auto& ps = a.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            ck.put(prefix + ".m." + ps[i].name, ps[i].tensor.shape(), a.moment1(i));
            ck.put(prefix + ".v." + ps[i].name, ps[i].tensor.shape(), a.moment2(i));
        }
        detail::ByteWriter w;
        w.i64(a.step_count());
        ck.put_bytes(prefix + ".t", w.buf);
    }

    static void load_adam(const Checkpoint& ck, const std::string& prefix, Adam<float>& adam) {
        const auto& ps = adam.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            adam.moment1(i) = ck.get(prefix + ".m." + ps[i].name).data;
            adam.moment2(i) = ck.get(prefix + ".v." + ps[i].name).data;
        }
        detail::ByteReader r(ck.get_bytes(prefix + ".t"));
        adam.set_step_count(r.i64());
    }

    void load_ae_params(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        for (const auto& p : ae_.params())
            ck.load_into("ae." + p.name, const_cast<Tensor<float>&>(p.tensor));
    }

    // Full-state serialization (canonical frames deduplicated by id).
    std::string pack_full_state() const {
        std::vector<std::shared_ptr<const CanonFrames>> table;
        auto canon_id = [&](const std::shared_ptr<const CanonFrames>& p) -> std::uint32_t {
            for (std::size_t i = 0; i < table.size(); ++i)
                if (table[i] == p) return static_cast<std::uint32_t>(i);
            table.push_back(p);
            return static_cast<std::uint32_t>(table.size() - 1);
        };

        // body first so the canonical-frame table is complete, then the
        // table is emitted ahead of it
        detail::ByteWriter body;
        auto pack_obs_body = [&](const StoredObs& o) {
            body.u32(static_cast<std::uint32_t>(o.views.size()));
            for (const auto& v : o.views) body.bytes(v);
            body.u32(canon_id(o.canonical));
            body.floats(o.extra);
        };
        body.u32(static_cast<std::uint32_t>(actors_.size()));
        for (const auto& a : actors_) {
            const PusherState& st = a.env.state();
            body.f64(st.rx);
            body.f64(st.ry);
            body.f64(st.bx);
            body.f64(st.by);
            body.f64(st.gx);
            body.f64(st.gy);
            body.i64(st.step);
            body.f64(a.ep_return);
            body.i64(a.ep_len);
            body.floats(a.prev_kp);
            pack_obs_body(a.obs);
        }
        body.u32(static_cast<std::uint32_t>(obs_buffer_.size()));
        for (int i = 0; i < obs_buffer_.size(); ++i) pack_obs_body(obs_buffer_.at(i));
        body.u32(static_cast<std::uint32_t>(recent_returns_.size()));
        for (double r : recent_returns_) body.f64(r);

        detail::ByteWriter out;
        out.u32(static_cast<std::uint32_t>(table.size()));
        for (const auto& c : table) {
            out.u32(static_cast<std::uint32_t>(c->size()));
            for (const auto& v : *c) out.bytes(v);
        }
        out.buf += body.buf;
        return out.buf;
    }

    void unpack_full_state(const std::string& blob) {
        detail::ByteReader r(blob);
        std::vector<std::shared_ptr<const CanonFrames>> table;
        std::uint32_t ntab = r.u32();
        for (std::uint32_t i = 0; i < ntab; ++i) {
            auto c = std::make_shared<CanonFrames>();
            std::uint32_t nv = r.u32();
            for (std::uint32_t j = 0; j < nv; ++j) c->push_back(r.bytes());
            table.push_back(c);
        }
        auto unpack_obs = [&]() {
            StoredObs o;
            std::uint32_t nv = r.u32();
            for (std::uint32_t j = 0; j < nv; ++j) o.views.push_back(r.bytes());
            std::uint32_t id = r.u32();
            require(id < table.size(), "full state: bad canonical frame id");
            o.canonical = table[id];
            o.extra = r.floats();
            return o;
        };
        std::uint32_t na = r.u32();
        require(na == actors_.size(), "full state: actor count mismatch");
        for (auto& a : actors_) {
            PusherState st;
            st.rx = r.f64();
            st.ry = r.f64();
            st.bx = r.f64();
            st.by = r.f64();
            st.gx = r.f64();
            st.gy = r.f64();
            st.step = static_cast<int>(r.i64());
            a.env.set_state(st);
            a.ep_return = r.f64();
            a.ep_len = static_cast<int>(r.i64());
            a.prev_kp = r.floats();
            a.obs = unpack_obs();
            a.canonical = a.obs.canonical;
        }
        std::uint32_t nobs = r.u32();
        obs_buffer_ = ObservationBuffer(cfg_.obs_buffer_capacity);
        for (std::uint32_t i = 0; i < nobs; ++i) obs_buffer_.push(unpack_obs());
        recent_returns_.clear();
        std::uint32_t nret = r.u32();
        for (std::uint32_t i = 0; i < nret; ++i) recent_returns_.push_back(r.f64());
    }

    struct GraphParts {
        double ae = 0, multi = 0, sep = 0;
    };

    RunConfig cfg_;
    std::vector<Camera> cams_;
    AutoencoderParams<float> ae_;
    PolicyNet policy_;
    std::unique_ptr<Adam<float>> adam_ae_, adam_policy_;
    ObservationBuffer obs_buffer_;
    RolloutBuffer rollout_;
    KeypointNormalizer normalizer_;
    Rng train_rng_;
    std::vector<Actor> actors_;
    std::deque<double> recent_returns_;
    int feat_dim_ = 0;
    int update_ = 0;
    long long env_steps_ = 0;
    UnsupBatchResult last_unsup_;
    GraphParts last_graph_parts_;
    std::ofstream log_;
};

}  // namespace kp3d
