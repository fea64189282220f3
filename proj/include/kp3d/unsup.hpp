#pragma once

// Unsupervised-only training on the built-in validation scene: a cached
// dataset of rendered multi-view frames, L_unsup optimization, and
// keypoint-tracking evaluation over the orbiting variant.

#include <algorithm>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kp3d/checkpoint.hpp"
#include "kp3d/config.hpp"
#include "kp3d/rl.hpp"
#include "kp3d/simenv.hpp"

namespace kp3d {

inline BottleneckOutput<float> infer_keypoints(const AutoencoderParams<float>& ae,
                                               const std::vector<Camera>& cams,
                                               const StoredObs& obs, int image_size) {
    NoGradGuard ng;
    std::vector<Tensor<float>> images = stored_images(obs.views, image_size);
    std::vector<EncoderOutput<float>> enc;
    for (std::size_t n = 0; n < cams.size(); ++n)
        enc.push_back(ae.encoders[n].forward(images[n]));
    BottleneckOptions opt;
    opt.training = false;
    opt.decode = false;
    opt.image_size = image_size;
    return run_bottleneck(enc, cams, {}, opt);
}

inline StoredObs render_validation_obs(const ValidationSceneSpec& spec, double t,
                                       const std::vector<Camera>& cams, int image_size,
                                       std::shared_ptr<const CanonFrames> canonical) {
    Scene scene = spec.scene(t);
    StoredObs obs;
    for (const auto& cam : cams)
        obs.views.push_back(quantize_view(render(scene, cam, image_size, image_size)));
    obs.canonical = std::move(canonical);
    return obs;
}

class UnsupTrainer {
public:
    explicit UnsupTrainer(const RunConfig& cfg)
        : cfg_(cfg), cams_(default_camera_rig(cfg.num_cameras)), rng_(cfg.seed) {
        cfg_.validate();
        require(cfg_.env == "validation" || cfg_.env == "validation-orbit",
                "unsupervised training supports the validation scenes");
        spec_.orbiting = cfg_.env == "validation-orbit";
        spec_.colorless = cfg_.colorless;

        Rng init_rng(cfg.seed + 1);
        ae_ = AutoencoderParams<float>(cfg.nets(), cfg.num_cameras, init_rng);
        adam_ = std::make_unique<Adam<float>>(ae_.params());
        build_dataset();
    }

    const RunConfig& config() const { return cfg_; }

    // Linear decay from unsup_lr to unsup_lr_final over
    // unsup_total_steps (constant when unsup_lr_final <= 0).
    double current_lr() const {
        if (cfg_.unsup_lr_final <= 0.0) return cfg_.unsup_lr;
        double f = std::min(1.0, static_cast<double>(step_) /
                                     std::max(1, cfg_.unsup_total_steps));
        return cfg_.unsup_lr + f * (cfg_.unsup_lr_final - cfg_.unsup_lr);
    }

    const std::vector<Camera>& cameras() const { return cams_; }
    const ValidationSceneSpec& scene_spec() const { return spec_; }
    AutoencoderParams<float>& autoencoder() { return ae_; }
    const std::vector<StoredObs>& dataset() const { return dataset_; }
    int steps_done() const { return step_; }

    // Loss of a fixed probe batch, for before/after comparisons.
    UnsupBatchResult probe_loss() {
        std::vector<const StoredObs*> batch;
        int n = std::min<int>(8, static_cast<int>(dataset_.size()));
        for (int i = 0; i < n; ++i)
            batch.push_back(&dataset_[i * dataset_.size() / n]);
        Rng probe_rng(12345);
        RunConfig probe_cfg = cfg_;
        probe_cfg.nu = 0.0;          // deterministic probe
        probe_cfg.augmentation = false;
        NoGradGuard ng;
        return unsup_loss_and_backward(ae_, batch, cams_, probe_cfg, probe_rng,
                                       /*do_backward=*/false);
    }

    // Runs `steps` optimizer steps; callback (if set) is invoked per
    // step with the batch losses.
    void train(int steps, const std::function<void(int, const UnsupBatchResult&)>& cb = nullptr) {
        for (int s = 0; s < steps; ++s) {
            std::vector<const StoredObs*> batch;
            for (int b = 0; b < cfg_.unsup_batch_size; ++b)
                batch.push_back(&dataset_[rng_.uniform_int(
                    0, static_cast<int>(dataset_.size()) - 1)]);
            adam_->zero_grad();
            UnsupBatchResult r = unsup_loss_and_backward(ae_, batch, cams_, cfg_, rng_);
            if (!std::isfinite(r.total))
                throw NumericFailure("non-finite unsupervised loss at step " +
                                     std::to_string(step_));
            adam_->clip_global_norm(cfg_.grad_clip);
            adam_->step(current_lr());
            ++step_;
            if (cb) cb(step_, r);
        }
    }

    // Fused keypoints + attention over `frames` frames of the orbiting
    // variant, spaced `dt` seconds apart.
    struct TrackedFrame {
        double t;
        std::vector<float> fused;      // (K*3)
        std::vector<float> attention;  // (K)
        std::vector<Vec3> truth;       // sphere centers
    };

    std::vector<TrackedFrame> track(int frames, double dt, double t0 = 0.0) {
        ValidationSceneSpec orbit = spec_;
        orbit.orbiting = true;
        std::vector<TrackedFrame> out;
        for (int f = 0; f < frames; ++f) {
            double t = t0 + f * dt;
            StoredObs obs = render_validation_obs(orbit, t, cams_, cfg_.image_size, canonical_);
            BottleneckOutput<float> bo = infer_keypoints(ae_, cams_, obs, cfg_.image_size);
            TrackedFrame tf;
            tf.t = t;
            tf.fused = bo.fused.data();
            tf.attention = bo.attention_avg.data();
            tf.truth = orbit.centers(t);
            out.push_back(std::move(tf));
        }
        return out;
    }

    void save_checkpoint(const std::string& path) const {
        Checkpoint ck;
        ck.put("meta", {1}, {static_cast<float>(step_)});
        for (const auto& p : ae_.params()) ck.put_tensor("ae." + p.name, p.tensor);
        const auto& ps = adam_->params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            ck.put("adam.m." + ps[i].name, ps[i].tensor.shape(),
                   const_cast<Adam<float>&>(*adam_).moment1(i));
            ck.put("adam.v." + ps[i].name, ps[i].tensor.shape(),
                   const_cast<Adam<float>&>(*adam_).moment2(i));
        }
        detail::ByteWriter w;
        w.i64(adam_->step_count());
        ck.put_bytes("adam.t", w.buf);
        ck.put_bytes("rng", rng_.serialize());
        ck.save(path);
    }

    void load_checkpoint(const std::string& path) {
        Checkpoint ck = Checkpoint::load(path);
        step_ = static_cast<int>(ck.get("meta").data[0]);
        for (const auto& p : ae_.params())
            ck.load_into("ae." + p.name, const_cast<Tensor<float>&>(p.tensor));
        const auto& ps = adam_->params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            adam_->moment1(i) = ck.get("adam.m." + ps[i].name).data;
            adam_->moment2(i) = ck.get("adam.v." + ps[i].name).data;
        }
        detail::ByteReader r(ck.get_bytes("adam.t"));
        adam_->set_step_count(r.i64());
        rng_.deserialize(ck.get_bytes("rng"));
    }

private:
    void build_dataset() {
        // canonical frame: the scene at t = 0
        auto canonical = std::make_shared<CanonFrames>();
        Scene s0 = spec_.scene(0.0);
        for (const auto& cam : cams_)
            canonical->push_back(quantize_view(render(s0, cam, cfg_.image_size, cfg_.image_size)));
        canonical_ = canonical;
        int frames = spec_.orbiting ? cfg_.unsup_dataset_frames : 1;
        for (int f = 0; f < frames; ++f) {
            double t = 40.0 * f / std::max(1, frames);
            dataset_.push_back(
                render_validation_obs(spec_, t, cams_, cfg_.image_size, canonical_));
        }
    }

    RunConfig cfg_;
    std::vector<Camera> cams_;
    ValidationSceneSpec spec_;
    AutoencoderParams<float> ae_;
    std::unique_ptr<Adam<float>> adam_;
    std::vector<StoredObs> dataset_;
    std::shared_ptr<const CanonFrames> canonical_;
    Rng rng_;
    int step_ = 0;
};

}  // namespace kp3d
