#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "harness/dataset.hpp"
#include "harness/pipeline.hpp"
#include <json.hpp>

namespace tmg::harness {

struct TrainOptions {
    head::Task task = head::Task::ground;
    int64_t epochs = -1;   // -1: take from the config
    double lr = -1;        // -1: take from the config
    uint64_t seed = 0;
    bool seed_set = false;  // CLI distinguishes "given 0" from "not given"
    int64_t max_steps = -1;  // stop mid-epoch once reached (>=0)
    bool use_garf = true;
    bool use_2d = true;
    std::string log_path;     // JSON lines, one per step
    std::string ckpt_path;    // checkpoint written after the last step
    std::string report_path;  // parameter accounting table
    // called after every epoch with the mean step loss; return true to stop
    std::function<bool(int64_t epoch, double mean_loss)> epoch_hook;
};

struct TrainResult {
    int64_t steps = 0;
    double initial_loss = 0;  // first step
    double final_loss = 0;    // last step
    std::vector<double> epoch_mean;
};

inline TrainResult train(Model& m, const std::vector<Scene>& scenes, const TrainOptions& opts) {
    check(!scenes.empty(), "train: empty dataset");
    int64_t epochs = opts.epochs > 0 ? opts.epochs : m.cfg.train.epochs;
    double lr = opts.lr >= 0 ? opts.lr : m.cfg.train.lr;
    uint64_t seed = opts.seed_set ? opts.seed : m.cfg.train.seed;

    std::vector<SceneInput> inputs;
    inputs.reserve(scenes.size());
    for (const auto& s : scenes) inputs.push_back(make_scene_input(s, m.cfg, m.cfg.data.views_train));

    // an example is one optimizer step: a (scene, prompt) pair when grounding,
    // a whole scene when detecting
    std::vector<std::pair<int64_t, int64_t>> examples;
    for (size_t si = 0; si < scenes.size(); ++si) {
        if (opts.task == head::Task::ground) {
            for (size_t pi = 0; pi < scenes[si].prompts.size(); ++pi)
                examples.push_back({int64_t(si), int64_t(pi)});
        } else {
            examples.push_back({int64_t(si), -1});
        }
    }
    check(!examples.empty(), "train: dataset has no training examples for this task");

    ta::AdamW<double> opt(lr, 0.9, 0.999, 1e-8, m.cfg.train.weight_decay);
    std::ofstream log;
    if (!opts.log_path.empty()) {
        log.open(opts.log_path);
        check(log.good(), "cannot open for write: " + opts.log_path);
    }

    std::vector<std::string> trainable;
    for (const auto& [name, t] : m.ps.params())
        if (!m.ps.is_frozen(name)) trainable.push_back(name);

    TrainResult res;
    RunFlags flags{opts.task, opts.use_garf, opts.use_2d, true};
    bool done = false;
    for (int64_t epoch = 0; epoch < epochs && !done; ++epoch) {
        Rng shuffle_rng(seed * 0x100000001b3ull + uint64_t(epoch));
        for (size_t i = examples.size(); i > 1; --i)
            std::swap(examples[i - 1], examples[size_t(shuffle_rng.randint(int64_t(i)))]);

        double epoch_sum = 0;
        int64_t epoch_n = 0;
        for (const auto& [si, pi] : examples) {
            const Scene& sc = scenes[size_t(si)];
            std::string prompt = pi >= 0 ? sc.prompts[size_t(pi)].text : std::string();
            std::vector<head::BoxTarget> targets =
                pi >= 0 ? std::vector<head::BoxTarget>{{sc.objects[size_t(sc.prompts[size_t(pi)].target)].box, 0}}
                        : detect_targets(sc);

            ta::Graph<double> g;
            auto out = forward(m, inputs[size_t(si)], prompt, &targets, flags);
            double total = out.loss.total.item();
            if (!std::isfinite(total))
                fail("training aborted at step " + std::to_string(res.steps) + " (epoch " +
                     std::to_string(epoch) + ", scene " + sc.id + ", prompt " + std::to_string(pi) +
                     "): non-finite loss, cls=" + std::to_string(out.loss.cls) +
                     " box=" + std::to_string(out.loss.box) +
                     " center=" + std::to_string(out.loss.center));
            g.backward(out.loss.total);
            // branches this task never exercises (the class head when
            // grounding, text attention when detecting, the idle fusion arm)
            // still need explicit zero gradients
            for (const auto& name : trainable) m.ps.ensure_zero_grad(name);
            opt.step(m.ps);

            if (res.steps == 0) res.initial_loss = total;
            res.final_loss = total;
            epoch_sum += total;
            ++epoch_n;
            if (log.is_open()) {
                nlohmann::json line = {{"step", res.steps}, {"epoch", epoch},
                                       {"scene", sc.id},    {"prompt", pi},
                                       {"loss", total},     {"cls", out.loss.cls},
                                       {"box", out.loss.box}, {"center", out.loss.center},
                                       {"lr", lr}};
                log << line.dump() << "\n";
            }
            ++res.steps;
            if (opts.max_steps >= 0 && res.steps >= opts.max_steps) {
                done = true;
                break;
            }
        }
        res.epoch_mean.push_back(epoch_n ? epoch_sum / double(epoch_n) : 0.0);
        if (!done && opts.epoch_hook && opts.epoch_hook(epoch, res.epoch_mean.back())) done = true;
    }

    if (log.is_open()) {
        log.flush();
        check(log.good(), "write failed: " + opts.log_path);
    }
    if (!opts.ckpt_path.empty()) ta::save_checkpoint(m.ps, opts.ckpt_path);
    if (!opts.report_path.empty()) {
        std::ofstream rep(opts.report_path);
        check(rep.good(), "cannot open for write: " + opts.report_path);
        rep << enc::param_report(m.ps).table();
        check(rep.good(), "write failed: " + opts.report_path);
    }
    return res;
}

}  // namespace tmg::harness
