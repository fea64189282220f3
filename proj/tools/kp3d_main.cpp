// Command-line entry point: configuration, gradient checking, training,
// evaluation, and keypoint visualization.
//
// Exit codes: 0 success, 1 validation failure, 2 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kp3d/checkpoint.hpp"
#include "kp3d/config.hpp"
#include "kp3d/gradcheck_suite.hpp"
#include "kp3d/rl.hpp"
#include "kp3d/simenv.hpp"
#include "kp3d/unsup.hpp"
#include "kp3d/visualize.hpp"

namespace {

using namespace kp3d;

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::int64_t seed = -1;
    std::vector<std::string> ablations;
    bool colorless = false;
};

RunConfig make_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg = load_config(f.config_path);
    if (f.seed >= 0) cfg.seed = static_cast<std::uint64_t>(f.seed);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (f.colorless) cfg.colorless = true;
    for (const std::string& a : f.ablations) {
        if (a == "no-multiview")
            cfg.no_multiview = true;
        else if (a == "no-offset-correction")
            cfg.no_offset_correction = true;
        else if (a == "stop-policy-gradient")
            cfg.stop_policy_gradient = true;
        else if (a == "two-stage")
            cfg.two_stage = true;
        else
            throw ContractViolation("unknown ablation '" + a +
                                    "' (expected no-multiview, no-offset-correction, "
                                    "stop-policy-gradient, or two-stage)");
    }
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    return cfg;
}

int cmd_gradcheck(int num_seeds, double tol, bool inject_fault) {
    auto results = run_gradcheck_suite(num_seeds, tol);
    if (inject_fault) {
        // deliberately wrong analytic gradient, used by the test suite to
        // confirm failures are detected and reported
        auto broken = [](std::uint64_t seed) {
            Rng rng(seed);
            std::vector<double> v(6);
            for (auto& x : v) x = rng.uniform(-1, 1);
            auto a = Tensor<double>::from({6}, std::move(v), true);
            return gradient_check(
                [](const std::vector<Tensor<double>>& in) {
                    auto y = detail::make_op<double>(
                        "broken_scale", in[0].shape(),
                        [&] {
                            std::vector<double> out(in[0].data());
                            for (auto& x : out) x *= 2.0;
                            return out;
                        }(),
                        {in[0]}, [](Node<double>& n) {
                            auto& p = *n.parents[0];
                            for (std::size_t i = 0; i < n.grad.size(); ++i)
                                p.grad[i] -= 2.0 * n.grad[i];  // wrong sign
                        });
                    return sum(y);
                },
                {a});
        };
        SuiteResult r;
        r.name = "injected_fault";
        r.passed = true;
        for (int s = 0; s < num_seeds; ++s) {
            auto rep = broken(55 + s);
            r.worst_error = std::max(r.worst_error, rep.max_rel_error);
            if (!rep.passed(tol)) r.passed = false;
        }
        results.push_back(r);
    }
    bool all_ok = true;
    for (const auto& r : results) {
        std::printf("%-20s worst_rel_error=%.3e  %s\n", r.name.c_str(), r.worst_error,
                    r.passed ? "PASS" : "FAIL");
        all_ok = all_ok && r.passed;
    }
    std::printf("gradcheck: %zu ops, %s\n", results.size(), all_ok ? "all passed" : "FAILURES");
    return all_ok ? 0 : 2;
}

int cmd_train_unsup(const CommonFlags& flags, double lambda_multi_override) {
    RunConfig cfg = make_config(flags);
    if (cfg.env == "pusher") cfg.env = "validation-orbit";
    if (lambda_multi_override >= 0.0) cfg.lambda_multi = lambda_multi_override;

    UnsupTrainer trainer(cfg);
    std::ofstream log(cfg.out_dir + "/unsup_log.csv");
    require(static_cast<bool>(log), "cannot open unsupervised training log");
    log << "step,L_ae,L_multi,L_sep,L_total\n";
    log.flush();

    trainer.train(cfg.unsup_total_steps, [&](int step, const UnsupBatchResult& r) {
        if (step % cfg.unsup_log_every == 0 || step == 1) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", step, r.ae, r.multi,
                          r.sep, r.total);
            log << buf;
            log.flush();
            std::printf("step %6d  L_ae %.4f  L_multi %.5f  L_sep %.5f\n", step, r.ae, r.multi,
                        r.sep);
        }
        if (cfg.unsup_overlay_every > 0 && step % cfg.unsup_overlay_every == 0) {
            const StoredObs& obs = trainer.dataset()[0];
            BottleneckOutput<float> bo =
                infer_keypoints(trainer.autoencoder(), trainer.cameras(), obs, cfg.image_size);
            for (int n = 0; n < cfg.num_cameras; ++n) {
                Tensor<float> img = dequantize_view(obs.views[n], cfg.image_size);
                Tensor<float> ov = overlay_frame(img, bo.fused.data(), bo.attention_avg.data(),
                                                 trainer.cameras()[n], cfg.attention_thresh());
                write_ppm(cfg.out_dir + "/overlay_s" + std::to_string(step) + "_cam" +
                              std::to_string(n) + ".ppm",
                          ov);
            }
        }
    });
    trainer.save_checkpoint(cfg.out_dir + "/unsup_final.kp3d");
    std::printf("done: %d steps, checkpoint at %s/unsup_final.kp3d\n", trainer.steps_done(),
                cfg.out_dir.c_str());
    return 0;
}

int cmd_train_rl(const CommonFlags& flags, const std::string& resume_path) {
    RunConfig cfg = make_config(flags);
    cfg.env = "pusher";
    RLTrainer trainer(cfg);
    if (!resume_path.empty()) trainer.load_checkpoint(resume_path);
    trainer.run([&](const UpdateLog& l) {
        std::printf("update %4d  steps %7lld  return %8.3f  kl %.4f  clip %.3f\n", l.update,
                    l.env_steps, l.mean_return, l.approx_kl, l.clip_fraction);
        if (cfg.stop_policy_gradient || l.update == 1) {
            GradProbe probe = trainer.probe_gradients();
            std::printf("probe: encoder_policy_grad_norm=%.6g encoder_unsup_grad_norm=%.6g\n",
                        probe.encoder_policy_grad_norm, probe.encoder_unsup_grad_norm);
        }
        return true;
    });
    return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& ckpt, int episodes) {
    RunConfig cfg = make_config(flags);
    if (cfg.env == "pusher") {
        RLTrainer trainer(cfg);
        trainer.load_checkpoint(ckpt);
        ReturnStats stats = trainer.evaluate(episodes, cfg.seed + 777);
        std::printf("return: %.4f +/- %.4f over %d episodes\n", stats.mean, stats.stddev,
                    stats.episodes);

        // keypoint accuracy vs ground-truth object centers
        PusherConfig pc;
        pc.image_size = cfg.image_size;
        pc.num_cameras = cfg.num_cameras;
        pc.colorless = cfg.colorless;
        PusherEnv env(pc, default_camera_rig(cfg.num_cameras));
        Rng rng(cfg.seed + 778);
        double acc = 0;
        int count = 0;
        for (int e = 0; e < std::min(episodes, 5); ++e) {
            Observation obs = env.reset(rng.next_seed());
            auto canonical = std::make_shared<CanonFrames>();
            for (const auto& v : obs.views) canonical->push_back(quantize_view(v));
            StoredObs so = store_observation(obs, canonical);
            BottleneckOutput<float> bo = trainer.infer(so);
            const auto& fused = bo.fused.data();
            const auto& att = bo.attention_avg.data();
            for (const WorldPoint& truth : env.ground_truth_points()) {
                double best = 1e9;
                for (int k = 0; k < cfg.num_keypoints; ++k) {
                    if (att[k] < cfg.attention_thresh()) continue;
                    Vec3 p{fused[3 * k], fused[3 * k + 1], fused[3 * k + 2]};
                    best = std::min(best, (p - truth).norm());
                }
                if (best < 1e9) {
                    acc += best;
                    ++count;
                }
            }
        }
        if (count)
            std::printf("keypoint accuracy: mean nearest-truth distance %.4f (%d pairs)\n",
                        acc / count, count);
        else
            std::printf("keypoint accuracy: no keypoints above attention threshold\n");
    } else {
        UnsupTrainer trainer(cfg);
        trainer.load_checkpoint(ckpt);
        auto frames = trainer.track(10, 0.5);
        double acc = 0;
        int count = 0;
        for (const auto& f : frames)
            for (const Vec3& truth : f.truth) {
                double best = 1e9;
                for (std::size_t k = 0; k < f.attention.size(); ++k) {
                    if (f.attention[k] < cfg.attention_thresh()) continue;
                    Vec3 p{f.fused[3 * k], f.fused[3 * k + 1], f.fused[3 * k + 2]};
                    best = std::min(best, (p - truth).norm());
                }
                if (best < 1e9) {
                    acc += best;
                    ++count;
                }
            }
        if (count)
            std::printf("keypoint accuracy: mean nearest-truth distance %.4f (%d pairs)\n",
                        acc / count, count);
        else
            std::printf("keypoint accuracy: no keypoints above attention threshold\n");
    }
    return 0;
}

int cmd_visualize(const CommonFlags& flags, const std::string& ckpt, int frames,
                  double attention_override) {
    RunConfig cfg = make_config(flags);
    double thresh = attention_override >= 0 ? attention_override : cfg.attention_thresh();
    if (cfg.env == "pusher") {
        RLTrainer trainer(cfg);
        if (!ckpt.empty()) trainer.load_checkpoint(ckpt);
        PusherConfig pc;
        pc.image_size = cfg.image_size;
        pc.num_cameras = cfg.num_cameras;
        pc.colorless = cfg.colorless;
        PusherEnv env(pc, default_camera_rig(cfg.num_cameras));
        Rng rng(cfg.seed + 555);
        Observation obs = env.reset(rng.next_seed());
        auto canonical = std::make_shared<CanonFrames>();
        for (const auto& v : obs.views) canonical->push_back(quantize_view(v));
        StoredObs so = store_observation(obs, canonical);
        for (int f = 0; f < frames; ++f) {
            BottleneckOutput<float> bo = trainer.infer(so);
            for (int n = 0; n < cfg.num_cameras; ++n) {
                Tensor<float> img = dequantize_view(so.views[n], cfg.image_size);
                Tensor<float> ov = overlay_frame(img, bo.fused.data(), bo.attention_avg.data(),
                                                 default_camera_rig(cfg.num_cameras)[n], thresh);
                write_ppm(cfg.out_dir + "/frame" + std::to_string(f) + "_cam" +
                              std::to_string(n) + ".ppm",
                          ov);
            }
            auto res = env.step(rng.uniform(-pc.action_limit, pc.action_limit),
                                rng.uniform(-pc.action_limit, pc.action_limit));
            so = store_observation(res.obs, canonical);
            if (res.done) break;
        }
    } else {
        UnsupTrainer trainer(cfg);
        if (!ckpt.empty()) trainer.load_checkpoint(ckpt);
        auto tracked = trainer.track(frames, 0.25);
        ValidationSceneSpec orbit = trainer.scene_spec();
        orbit.orbiting = true;
        for (int f = 0; f < static_cast<int>(tracked.size()); ++f) {
            Scene scene = orbit.scene(tracked[f].t);
            for (int n = 0; n < cfg.num_cameras; ++n) {
                Tensor<float> img =
                    render(scene, trainer.cameras()[n], cfg.image_size, cfg.image_size);
                Tensor<float> ov = overlay_frame(img, tracked[f].fused, tracked[f].attention,
                                                 trainer.cameras()[n], thresh);
                write_ppm(cfg.out_dir + "/frame" + std::to_string(f) + "_cam" +
                              std::to_string(n) + ".ppm",
                          ov);
            }
        }
    }
    std::printf("wrote overlay frames to %s\n", cfg.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D keypoint discovery and control"};
    app.require_subcommand(1);

    std::function<int()> run;

    // init-config
    auto* init = app.add_subcommand("init-config", "Write a full default configuration");
    auto init_out = std::make_shared<std::string>();
    init->add_option("--out", *init_out, "Output path (stdout if omitted)");
    init->callback([init_out, &run] {
        run = [init_out] {
            RunConfig cfg;
            nlohmann::json j = cfg;
            if (init_out->empty()) {
                std::cout << j.dump(2) << "\n";
            } else {
                save_config(cfg, *init_out);
            }
            return 0;
        };
    });

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of all registered ops");
    auto gc_seeds = std::make_shared<int>(10);
    auto gc_tol = std::make_shared<double>(1e-3);
    auto gc_fault = std::make_shared<bool>(false);
    gc->add_option("--seeds", *gc_seeds, "Seeds per op");
    gc->add_option("--tol", *gc_tol, "Relative error tolerance");
    gc->add_flag("--inject-fault", *gc_fault, "Add a deliberately broken op (for testing)")
        ->group("");
    gc->callback([=, &run] { run = [=] { return cmd_gradcheck(*gc_seeds, *gc_tol, *gc_fault); }; });

    auto add_common = [](CLI::App* sub, const std::shared_ptr<CommonFlags>& f) {
        sub->add_option("--config", f->config_path, "Path to a JSON run configuration");
        sub->add_option("--seed", f->seed, "Override the configured seed");
        sub->add_option("--out", f->out_dir, "Override the configured output directory");
        sub->add_option("--ablation", f->ablations, "Ablation name (repeatable)");
        sub->add_flag("--colorless", f->colorless, "Render all objects in gray");
    };

    // train-unsup
    auto* tu = app.add_subcommand("train-unsup", "Unsupervised keypoint training");
    auto tu_flags = std::make_shared<CommonFlags>();
    auto tu_lm = std::make_shared<double>(-1.0);
    add_common(tu, tu_flags);
    tu->add_option("--lambda-multi", *tu_lm, "Override the multi-view loss weight");
    tu->callback([=, &run] { run = [=] { return cmd_train_unsup(*tu_flags, *tu_lm); }; });

    // train-rl
    auto* tr = app.add_subcommand("train-rl", "Joint PPO + unsupervised training");
    auto tr_flags = std::make_shared<CommonFlags>();
    auto tr_resume = std::make_shared<std::string>();
    add_common(tr, tr_flags);
    tr->add_option("--resume", *tr_resume, "Checkpoint to resume from");
    tr->callback([=, &run] { run = [=] { return cmd_train_rl(*tr_flags, *tr_resume); }; });

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    auto ev_flags = std::make_shared<CommonFlags>();
    auto ev_ckpt = std::make_shared<std::string>();
    auto ev_eps = std::make_shared<int>(10);
    add_common(ev, ev_flags);
    ev->add_option("--checkpoint", *ev_ckpt, "Checkpoint path")->required();
    ev->add_option("--episodes", *ev_eps, "Number of evaluation episodes");
    ev->callback([=, &run] { run = [=] { return cmd_eval(*ev_flags, *ev_ckpt, *ev_eps); }; });

    // visualize
    auto* vz = app.add_subcommand("visualize", "Write keypoint overlay frames");
    auto vz_flags = std::make_shared<CommonFlags>();
    auto vz_ckpt = std::make_shared<std::string>();
    auto vz_frames = std::make_shared<int>(10);
    auto vz_att = std::make_shared<double>(-1.0);
    add_common(vz, vz_flags);
    vz->add_option("--checkpoint", *vz_ckpt, "Checkpoint path (random weights if omitted)");
    vz->add_option("--frames", *vz_frames, "Number of frames");
    vz->add_option("--attention-threshold", *vz_att, "Marker attention filter");
    vz->callback([=, &run] {
        run = [=] { return cmd_visualize(*vz_flags, *vz_ckpt, *vz_frames, *vz_att); };
    });

    CLI11_PARSE(app, argc, argv);
    try {
        return run();
    } catch (const kp3d::NumericFailure& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 2;
    } catch (const kp3d::CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 1;
    } catch (const kp3d::ContractViolation& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
