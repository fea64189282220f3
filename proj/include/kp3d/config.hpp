#pragma once

// Run configuration as a single JSON document. Doubles are written with
// shortest round-trip formatting, so save/load is value-exact.

#include <array>
#include <fstream>
#include <string>

#include <json.hpp>

#include "kp3d/losses.hpp"
#include "kp3d/nets.hpp"
#include "kp3d/tensor.hpp"

namespace kp3d {

struct RunConfig {
    // environment
    std::string env = "pusher";  // pusher | validation | validation-orbit
    int image_size = 64;
    int num_cameras = 3;
    bool colorless = false;
    bool append_goal_state = false;

    // model
    int num_keypoints = 6;
    int ff_channels = 8;
    std::array<int, 3> enc_channels{8, 12, 24};
    std::array<int, 3> dec_channels{24, 24, 12};

    // losses
    double lambda_ae = 5.0;
    double lambda_multi = 0.05;
    double lambda_sep = 0.0025;
    double separation_sharpness = 1000.0;

    // augmentation / resampling
    bool augmentation = false;
    int max_shift_px = 4;
    double nu = 5e-4;  // resampling noise level (std scale)

    // unsupervised-only training
    int unsup_total_steps = 5000;
    int unsup_batch_size = 4;
    double unsup_lr = 1e-3;
    // linear decay toward this value over unsup_total_steps; <= 0 means
    // constant unsup_lr
    double unsup_lr_final = 0.0;
    int unsup_dataset_frames = 192;  // cached rendered frames
    int unsup_log_every = 50;
    int unsup_overlay_every = 1000;

    // PPO
    int num_actors = 4;
    int rollout_length = 128;  // T per actor
    int minibatch_size = 128;
    int epochs_per_update = 8;
    double lr = 3e-4;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    double clip_range = 0.2;
    double value_coef = 0.5;
    double entropy_coef = 0.0;
    double target_kl = 0.12;
    double grad_clip = 0.5;
    double init_log_std = -3.5;
    int unsup_steps_per_update = 20;       // p
    int unsup_samples_per_minibatch = 1;   // L_unsup obs samples inside joint epochs
    int rollout_buffer_capacity = 100000;
    int obs_buffer_capacity = 2000;
    int total_env_steps = 300000;
    int checkpoint_every = 20;  // updates
    bool full_state_checkpoints = false;
    double early_exit_return = 0.0;  // stop once mean return exceeds this (0 = off)
    bool use_early_exit = false;

    // general
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    double attention_threshold = -1.0;  // < 0 selects 1/(2K)

    // ablations
    bool no_multiview = false;
    bool no_offset_correction = false;
    bool stop_policy_gradient = false;
    bool two_stage = false;
    std::string pretrained_checkpoint;  // two-stage: frozen encoder weights

    int map_size() const { return image_size / 4; }

    double attention_thresh() const {
        return attention_threshold >= 0 ? attention_threshold : 1.0 / (2.0 * num_keypoints);
    }

    NetsConfig nets() const {
        NetsConfig n;
        n.image_channels = 3;
        n.image_size = image_size;
        n.num_keypoints = num_keypoints;
        n.ff_channels = ff_channels;
        n.enc_channels = enc_channels;
        n.dec_channels = dec_channels;
        return n;
    }

    LossWeights weights() const {
        LossWeights w;
        w.lambda_ae = lambda_ae;
        w.lambda_multi = no_multiview ? 0.0 : lambda_multi;
        w.lambda_sep = lambda_sep;
        w.separation_sharpness = separation_sharpness;
        return w;
    }

    void validate() const {
        require(env == "pusher" || env == "validation" || env == "validation-orbit",
                "config field 'env': unknown environment '" + env + "'");
        require(num_keypoints >= 1, "config field 'num_keypoints': must be >= 1");
        require(image_size % 4 == 0, "config field 'image_size': must be divisible by 4");
        require(num_cameras >= 1, "config field 'num_cameras': must be >= 1");
        require(lambda_ae >= 0 && lambda_multi >= 0 && lambda_sep >= 0,
                "config field 'lambda_*': loss weights must be >= 0");
        require(nu >= 0, "config field 'nu': must be >= 0");
        require(num_actors >= 1, "config field 'num_actors': must be >= 1");
        require(rollout_length >= 1, "config field 'rollout_length': must be >= 1");
        require(minibatch_size >= 1, "config field 'minibatch_size': must be >= 1");
        require(epochs_per_update >= 1, "config field 'epochs_per_update': must be >= 1");
        require(rollout_buffer_capacity >= num_actors * rollout_length,
                "config field 'rollout_buffer_capacity': smaller than one update");
        require(obs_buffer_capacity >= 1, "config field 'obs_buffer_capacity': must be >= 1");
        if (!pretrained_checkpoint.empty()) {
            std::ifstream f(pretrained_checkpoint);
            require(static_cast<bool>(f), "config field 'pretrained_checkpoint': path '" +
                                              pretrained_checkpoint + "' does not exist");
        }
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{
        {"env", c.env},
        {"image_size", c.image_size},
        {"num_cameras", c.num_cameras},
        {"colorless", c.colorless},
        {"append_goal_state", c.append_goal_state},
        {"num_keypoints", c.num_keypoints},
        {"ff_channels", c.ff_channels},
        {"enc_channels", c.enc_channels},
        {"dec_channels", c.dec_channels},
        {"lambda_ae", c.lambda_ae},
        {"lambda_multi", c.lambda_multi},
        {"lambda_sep", c.lambda_sep},
        {"separation_sharpness", c.separation_sharpness},
        {"augmentation", c.augmentation},
        {"max_shift_px", c.max_shift_px},
        {"nu", c.nu},
        {"unsup_total_steps", c.unsup_total_steps},
        {"unsup_batch_size", c.unsup_batch_size},
        {"unsup_lr", c.unsup_lr},
        {"unsup_lr_final", c.unsup_lr_final},
        {"unsup_dataset_frames", c.unsup_dataset_frames},
        {"unsup_log_every", c.unsup_log_every},
        {"unsup_overlay_every", c.unsup_overlay_every},
        {"num_actors", c.num_actors},
        {"rollout_length", c.rollout_length},
        {"minibatch_size", c.minibatch_size},
        {"epochs_per_update", c.epochs_per_update},
        {"lr", c.lr},
        {"gamma", c.gamma},
        {"gae_lambda", c.gae_lambda},
        {"clip_range", c.clip_range},
        {"value_coef", c.value_coef},
        {"entropy_coef", c.entropy_coef},
        {"target_kl", c.target_kl},
        {"grad_clip", c.grad_clip},
        {"init_log_std", c.init_log_std},
        {"unsup_steps_per_update", c.unsup_steps_per_update},
        {"unsup_samples_per_minibatch", c.unsup_samples_per_minibatch},
        {"rollout_buffer_capacity", c.rollout_buffer_capacity},
        {"obs_buffer_capacity", c.obs_buffer_capacity},
        {"total_env_steps", c.total_env_steps},
        {"checkpoint_every", c.checkpoint_every},
        {"full_state_checkpoints", c.full_state_checkpoints},
        {"early_exit_return", c.early_exit_return},
        {"use_early_exit", c.use_early_exit},
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"attention_threshold", c.attention_threshold},
        {"no_multiview", c.no_multiview},
        {"no_offset_correction", c.no_offset_correction},
        {"stop_policy_gradient", c.stop_policy_gradient},
        {"two_stage", c.two_stage},
        {"pretrained_checkpoint", c.pretrained_checkpoint},
    };
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig defaults;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    c = defaults;
    get("env", c.env);
    get("image_size", c.image_size);
    get("num_cameras", c.num_cameras);
    get("colorless", c.colorless);
    get("append_goal_state", c.append_goal_state);
    get("num_keypoints", c.num_keypoints);
    get("ff_channels", c.ff_channels);
    get("enc_channels", c.enc_channels);
    get("dec_channels", c.dec_channels);
    get("lambda_ae", c.lambda_ae);
    get("lambda_multi", c.lambda_multi);
    get("lambda_sep", c.lambda_sep);
    get("separation_sharpness", c.separation_sharpness);
    get("augmentation", c.augmentation);
    get("max_shift_px", c.max_shift_px);
    get("nu", c.nu);
    get("unsup_total_steps", c.unsup_total_steps);
    get("unsup_batch_size", c.unsup_batch_size);
    get("unsup_lr", c.unsup_lr);
    get("unsup_lr_final", c.unsup_lr_final);
    get("unsup_dataset_frames", c.unsup_dataset_frames);
    get("unsup_log_every", c.unsup_log_every);
    get("unsup_overlay_every", c.unsup_overlay_every);
    get("num_actors", c.num_actors);
    get("rollout_length", c.rollout_length);
    get("minibatch_size", c.minibatch_size);
    get("epochs_per_update", c.epochs_per_update);
    get("lr", c.lr);
    get("gamma", c.gamma);
    get("gae_lambda", c.gae_lambda);
    get("clip_range", c.clip_range);
    get("value_coef", c.value_coef);
    get("entropy_coef", c.entropy_coef);
    get("target_kl", c.target_kl);
    get("grad_clip", c.grad_clip);
    get("init_log_std", c.init_log_std);
    get("unsup_steps_per_update", c.unsup_steps_per_update);
    get("unsup_samples_per_minibatch", c.unsup_samples_per_minibatch);
    get("rollout_buffer_capacity", c.rollout_buffer_capacity);
    get("obs_buffer_capacity", c.obs_buffer_capacity);
    get("total_env_steps", c.total_env_steps);
    get("checkpoint_every", c.checkpoint_every);
    get("full_state_checkpoints", c.full_state_checkpoints);
    get("early_exit_return", c.early_exit_return);
    get("use_early_exit", c.use_early_exit);
    get("seed", c.seed);
    get("out_dir", c.out_dir);
    get("attention_threshold", c.attention_threshold);
    get("no_multiview", c.no_multiview);
    get("no_offset_correction", c.no_offset_correction);
    get("stop_policy_gradient", c.stop_policy_gradient);
    get("two_stage", c.two_stage);
    get("pretrained_checkpoint", c.pretrained_checkpoint);
}

inline void save_config(const RunConfig& c, const std::string& path) {
    std::ofstream f(path);
    require(static_cast<bool>(f), "cannot write config to " + path);
    nlohmann::json j = c;
    f << j.dump(2) << "\n";
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), "cannot read config from " + path);
    nlohmann::json j;
    f >> j;
    return j.get<RunConfig>();
}

}  // namespace kp3d
