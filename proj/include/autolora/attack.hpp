#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "autolora/nn.hpp"

namespace autolora {

struct AttackConfig {
    double epsilon = 8.0 / 255.0;    // L-inf radius in input units
    double step_size = 2.0 / 255.0;  // per-step magnitude
    int steps = 10;
    bool random_start = false;
    double box_low = 0.0;
    double box_high = 1.0;

    // epsilon = 0 is the degenerate ball: the attack returns its input.
    void validate() const {
        if (epsilon < 0.0) throw ConfigError("attack epsilon must be >= 0");
        if (steps < 1) throw ConfigError("attack steps must be >= 1");
        if (step_size <= 0.0) throw ConfigError("attack step_size must be > 0");
        if (epsilon > 0.0 && step_size > epsilon) {
            throw ConfigError("attack step_size must not exceed epsilon");
        }
        if (box_low >= box_high) throw ConfigError("attack box bounds must satisfy low < high");
    }
};

/// PGD on the cross-entropy loss: `steps` iterations of signed-gradient
/// ascent, each projected onto the epsilon ball around x intersected with
/// the box. Parameters receive no gradients; BN runs on stored statistics.
inline Tensor pgd(ParamSet& params, ForwardMode mode, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg, std::mt19937_64* rng = nullptr) {
    cfg.validate();
    if (x.rank() != 2) {
        throw DimensionError("pgd input must be [b x d], got " + shape_to_string(x.shape()));
    }
    if (y.size() != x.dim(0)) {
        throw DimensionError("pgd got " + std::to_string(y.size()) + " labels for batch " +
                             std::to_string(x.dim(0)));
    }
    if (cfg.epsilon == 0.0) return x.clone();
    if (cfg.random_start && rng == nullptr) {
        throw ContractError("pgd with random_start needs a random generator");
    }

    const std::size_t n = x.size();
    Tensor adv = x.clone();
    auto project = [&](Tensor& t) {
        for (std::size_t i = 0; i < n; ++i) {
            const double lo = std::max(x.at(i) - cfg.epsilon, cfg.box_low);
            const double hi = std::min(x.at(i) + cfg.epsilon, cfg.box_high);
            t.at(i) = std::clamp(t.at(i), lo, hi);
        }
    };

    if (cfg.random_start) {
        std::uniform_real_distribution<double> noise(-cfg.epsilon, cfg.epsilon);
        for (std::size_t i = 0; i < n; ++i) adv.at(i) += noise(*rng);
        project(adv);
    }

    for (int step = 0; step < cfg.steps; ++step) {
        Tape tape;
        Tensor tracked = tape.watch(adv);
        ForwardOptions opts;
        opts.train = false;
        opts.tape = &tape;
        opts.track_params = false;
        Tensor logits = forward(params, tracked, mode, opts);
        Tensor loss = nll(log_softmax(logits), y);
        Tensor grad = tape.backward(loss).wrt(tracked);

        Tensor next = adv.clone();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad.at(i);
            const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
            next.at(i) += cfg.step_size * s;
        }
        project(next);
        adv = next;
    }
    return adv;
}

}  // namespace autolora
