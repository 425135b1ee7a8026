#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "autolora/attack.hpp"
#include "autolora/data.hpp"
#include "autolora/nn.hpp"
#include "autolora/schedulers.hpp"

namespace autolora {

enum class Method { kVanilla, kTwins, kAutoLoRa };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::kVanilla: return "vanilla";
        case Method::kTwins: return "twins";
        case Method::kAutoLoRa: return "autolora";
    }
    return "unknown";
}

inline Method method_from_string(const std::string& s) {
    if (s == "vanilla") return Method::kVanilla;
    if (s == "twins") return Method::kTwins;
    if (s == "autolora") return Method::kAutoLoRa;
    throw ConfigError("unknown method '" + s + "'");
}

/// Direction of the distillation KL between natural and adversarial logits.
/// kNatToAdv is KL(p_nat || p_adv), the convention the losses default to.
enum class KlDirection { kNatToAdv, kAdvToNat };

struct TwinsConfig {
    double beta = 1.0;
    double gamma = 1.0;

    void validate() const {
        if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("twins beta must be finite and >= 0");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("twins gamma must be finite and >= 0");
    }
};

/// Mean cross-entropy of integer labels under the logits.
inline Tensor ce_loss(const Tensor& logits, const std::vector<int>& y) {
    return nll(log_softmax(logits), y);
}

/// Mean KL divergence between the softmax distributions of two logit
/// batches; by default KL(p_nat || p_adv).
inline Tensor kl_loss(const Tensor& adv_logits, const Tensor& nat_logits,
                      KlDirection dir = KlDirection::kNatToAdv) {
    if (adv_logits.shape() != nat_logits.shape()) {
        throw DimensionError("kl_loss shapes differ: " + shape_to_string(adv_logits.shape()) +
                             " vs " + shape_to_string(nat_logits.shape()));
    }
    const Tensor& p_logits = dir == KlDirection::kNatToAdv ? nat_logits : adv_logits;
    const Tensor& q_logits = dir == KlDirection::kNatToAdv ? adv_logits : nat_logits;
    Tensor logp = log_softmax(p_logits);
    Tensor logq = log_softmax(q_logits);
    Tensor pointwise = mul(exp(logp), sub(logp, logq));
    return scale(sum(pointwise), 1.0 / static_cast<double>(adv_logits.dim(0)));
}

/// Per-batch loss value, its unweighted sub-terms, and the gradients of the
/// weighted total. `gs` and `natural_grads` are filled only on request.
struct LossBundle {
    double total = 0.0;
    double natural = 0.0;
    double adv_ce = 0.0;
    double kl = 0.0;
    GradMap grads;
    std::optional<double> gs;
    std::optional<GradMap> natural_grads;
};

struct LossOptions {
    bool train = true;
    KlDirection kl_dir = KlDirection::kNatToAdv;
    bool want_gs = false;             // cosine of theta1 gradients, natural vs adversarial
    bool want_natural_grads = false;  // gradients of the natural term alone
};

namespace detail {

/// Cosine similarity of the theta1 gradients of two scalar objectives on one
/// tape. Undefined (nullopt) when either gradient has zero norm.
inline std::optional<double> theta1_gradient_cosine(const Tape& tape, const Tensor& natural_obj,
                                                    const Tensor& adversarial_obj) {
    const GradMap g_nat = tape.backward(natural_obj).param_grads();
    const GradMap g_adv = tape.backward(adversarial_obj).param_grads();
    double dot = 0.0;
    double nn_ = 0.0;
    double na = 0.0;
    for (const auto& [name, gn] : g_nat) {
        if (name.rfind("theta1.", 0) != 0) continue;
        const Tensor& ga = g_adv.at(name);
        for (std::size_t i = 0; i < gn.size(); ++i) {
            dot += gn.at(i) * ga.at(i);
            nn_ += gn.at(i) * gn.at(i);
            na += ga.at(i) * ga.at(i);
        }
    }
    if (nn_ == 0.0 || na == 0.0) return std::nullopt;
    return dot / (std::sqrt(nn_) * std::sqrt(na));
}

}  // namespace detail

/// Natural CE plus beta times the distillation KL, both through the live
/// parameterization. Gradients reach theta1 and theta2 from both terms.
inline LossBundle vanilla_rft_loss_on(ParamSet& params, const Batch& batch, const Tensor& x_adv,
                                      double beta, const LossOptions& opts = {}) {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
    Tape tape;
    ForwardOptions fwd{opts.train, &tape, true};
    Tensor nat_logits = forward(params, batch.x, ForwardMode::kBase, fwd);
    Tensor adv_logits = forward(params, x_adv, ForwardMode::kBase, fwd);
    Tensor natural = ce_loss(nat_logits, batch.y);
    Tensor kl = kl_loss(adv_logits, nat_logits, opts.kl_dir);
    Tensor total = add(natural, scale(kl, beta));

    LossBundle bundle;
    bundle.total = total.item();
    bundle.natural = natural.item();
    bundle.kl = kl.item();
    bundle.grads = tape.backward(total).param_grads();
    if (opts.want_gs) bundle.gs = detail::theta1_gradient_cosine(tape, natural, kl);
    if (opts.want_natural_grads) bundle.natural_grads = tape.backward(natural).param_grads();
    return bundle;
}

inline LossBundle vanilla_rft_loss(ParamSet& params, const Batch& batch, double beta,
                                   const AttackConfig& attack, std::mt19937_64* rng = nullptr,
                                   const LossOptions& opts = {}) {
    Tensor x_adv = pgd(params, ForwardMode::kBase, batch.x, batch.y, attack, rng);
    return vanilla_rft_loss_on(params, batch, x_adv, beta, opts);
}

/// Frozen-statistics branch plus gamma times the live branch, sharing one
/// adversarial batch and all non-BN-statistics parameters. Reported terms
/// fold the branch pair: natural = ce_frozen + gamma * ce_live and likewise
/// for kl, so total = natural + beta * kl.
inline LossBundle twins_loss_on(ParamSet& params, const Batch& batch, const Tensor& x_adv,
                                const TwinsConfig& cfg, const LossOptions& opts = {}) {
    cfg.validate();
    if (!params.bn_stats_frozen) {
        throw ConfigError("twins loss requires frozen BN statistics");
    }
    Tape tape;
    ForwardOptions fwd{opts.train, &tape, true};
    Tensor nat_frozen = forward(params, batch.x, ForwardMode::kFrozenBn, fwd);
    Tensor adv_frozen = forward(params, x_adv, ForwardMode::kFrozenBn, fwd);
    Tensor nat_live = forward(params, batch.x, ForwardMode::kBase, fwd);
    Tensor adv_live = forward(params, x_adv, ForwardMode::kBase, fwd);

    Tensor ce_frozen = ce_loss(nat_frozen, batch.y);
    Tensor ce_live = ce_loss(nat_live, batch.y);
    Tensor kl_frozen = kl_loss(adv_frozen, nat_frozen, opts.kl_dir);
    Tensor kl_live = kl_loss(adv_live, nat_live, opts.kl_dir);

    Tensor natural = add(ce_frozen, scale(ce_live, cfg.gamma));
    Tensor kl = add(kl_frozen, scale(kl_live, cfg.gamma));
    Tensor total = add(natural, scale(kl, cfg.beta));

    LossBundle bundle;
    bundle.total = total.item();
    bundle.natural = natural.item();
    bundle.kl = kl.item();
    bundle.grads = tape.backward(total).param_grads();
    if (opts.want_gs) bundle.gs = detail::theta1_gradient_cosine(tape, natural, kl);
    if (opts.want_natural_grads) bundle.natural_grads = tape.backward(natural).param_grads();
    return bundle;
}

inline LossBundle twins_loss(ParamSet& params, const Batch& batch, const TwinsConfig& cfg,
                             const AttackConfig& attack, std::mt19937_64* rng = nullptr,
                             const LossOptions& opts = {}) {
    Tensor x_adv = pgd(params, ForwardMode::kBase, batch.x, batch.y, attack, rng);
    return twins_loss_on(params, batch, x_adv, cfg, opts);
}

/// Disentangled objective: natural CE through the low-rank branch (gradients
/// to B, A, theta2 only), adversarial CE and distillation KL through the live
/// parameterization on x_adv (gradients to theta1, theta2). With
/// kl_teacher_grad = false the low-rank logits inside the KL act as constant
/// soft labels.
inline LossBundle autolora_loss_on(ParamSet& params, const Batch& batch, const Tensor& x_adv,
                                   const ScalarPair& scalars, bool kl_teacher_grad = false,
                                   const LossOptions& opts = {}) {
    if (!params.lora) throw ConfigError("autolora loss requires LoRA factors");
    Tape tape;
    ForwardOptions fwd{opts.train, &tape, true};
    Tensor nat_logits = forward(params, batch.x, ForwardMode::kLoRa, fwd);
    Tensor adv_logits = forward(params, x_adv, ForwardMode::kBase, fwd);

    Tensor natural = ce_loss(nat_logits, batch.y);
    Tensor adv_ce = ce_loss(adv_logits, batch.y);
    Tensor teacher = kl_teacher_grad ? nat_logits : nat_logits.detach();
    Tensor kl = kl_loss(adv_logits, teacher, opts.kl_dir);
    Tensor total = add(add(scale(natural, scalars.lambda1), scale(adv_ce, 1.0 - scalars.lambda1)),
                       scale(kl, scalars.lambda2));

    LossBundle bundle;
    bundle.total = total.item();
    bundle.natural = natural.item();
    bundle.adv_ce = adv_ce.item();
    bundle.kl = kl.item();
    bundle.grads = tape.backward(total).param_grads();
    if (opts.want_gs) {
        // The natural objective never reaches theta1, so this is the
        // undefined sentinel by construction.
        Tensor adversarial = add(scale(adv_ce, 1.0 - scalars.lambda1), scale(kl, scalars.lambda2));
        bundle.gs = detail::theta1_gradient_cosine(tape, natural, adversarial);
    }
    if (opts.want_natural_grads) bundle.natural_grads = tape.backward(natural).param_grads();
    return bundle;
}

inline LossBundle autolora_loss(ParamSet& params, const Batch& batch, const ScalarPair& scalars,
                                const AttackConfig& attack, bool kl_teacher_grad = false,
                                std::mt19937_64* rng = nullptr, const LossOptions& opts = {}) {
    Tensor x_adv = pgd(params, ForwardMode::kBase, batch.x, batch.y, attack, rng);
    return autolora_loss_on(params, batch, x_adv, scalars, kl_teacher_grad, opts);
}

/// Cosine similarity between the theta1 gradients of the natural and the
/// adversarial objective on one batch, under training-time forwards. Returns
/// nullopt when undefined (the disentangled method, or a zero-norm gradient).
/// Works on a scratch copy, so the caller's parameters are untouched.
inline std::optional<double> gradient_similarity(const ParamSet& params, const Batch& batch,
                                                 Method method, const AttackConfig& attack,
                                                 double twins_gamma = 1.0,
                                                 KlDirection dir = KlDirection::kNatToAdv) {
    ParamSet scratch = params.clone();
    LossOptions opts;
    opts.want_gs = true;
    opts.kl_dir = dir;
    switch (method) {
        case Method::kVanilla: {
            return vanilla_rft_loss(scratch, batch, 1.0, attack, nullptr, opts).gs;
        }
        case Method::kTwins: {
            TwinsConfig cfg{1.0, twins_gamma};
            return twins_loss(scratch, batch, cfg, attack, nullptr, opts).gs;
        }
        case Method::kAutoLoRa: {
            ScalarPair scalars{0.5, 3.0};
            return autolora_loss(scratch, batch, scalars, attack, false, nullptr, opts).gs;
        }
    }
    return std::nullopt;
}

}  // namespace autolora
