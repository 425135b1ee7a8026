#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "autolora/checkpoint.hpp"
#include "autolora/data.hpp"
#include "autolora/objectives.hpp"
#include "autolora/schedulers.hpp"

namespace autolora {

struct TrainConfig {
    Method method = Method::kAutoLoRa;
    ModelSpec model;
    int max_epochs = 60;      // E
    std::size_t batch_size = 128;  // tau
    double weight_decay = 1e-4;
    AttackConfig attack;       // training and validation attack
    AttackConfig eval_attack;  // final test attack

    // Baselines take an explicit fixed learning rate and loss scalars.
    double fixed_lr = 0.01;
    std::optional<double> beta;   // vanilla and twins
    std::optional<double> gamma;  // twins
    bool use_lr_scheduler_for_baselines = false;

    // Disentangled method: everything scheduled automatically.
    LoRaConfig lora;
    ScalarSchedulerConfig scalars;
    LrSchedulerConfig lr;
    bool kl_teacher_grad = false;

    KlDirection kl_dir = KlDirection::kNatToAdv;
    bool log_gs = true;                  // per-batch gradient similarity for baselines
    int disentangle_check_every = 1;     // batches between exact theta1-zero checks
    std::uint64_t seed = 0;

    void validate() const {
        model.validate();
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        attack.validate();
        eval_attack.validate();
        if (method == Method::kVanilla && !beta) {
            throw ConfigError("method vanilla requires beta");
        }
        if (method == Method::kTwins && (!beta || !gamma)) {
            throw ConfigError("method twins requires beta and gamma");
        }
        if (method == Method::kAutoLoRa) {
            scalars.validate();
            lr.validate();
        }
        if (disentangle_check_every < 1) {
            throw ConfigError("disentangle_check_every must be >= 1");
        }
    }
};

struct EpochLog {
    int epoch = 0;
    double eta = 0.0;
    std::optional<double> lambda1;
    std::optional<double> lambda2;
    double sa_train = 0.0;
    double sa_val = 0.0;
    double ra_val = 0.0;
    std::optional<double> gs;
    double loss_total = 0.0;
    double loss_nat = 0.0;
    double loss_adv_ce = 0.0;
    double loss_kl = 0.0;
    double seconds = 0.0;
};

enum class RunStatus { kOk, kNumericalAbort };

struct RunResult {
    RunStatus status = RunStatus::kOk;
    ParamSet best_params;
    std::vector<EpochLog> log;
    std::vector<std::pair<int, HalveReason>> halve_log;
    int best_epoch = -1;
    double best_ra = 0.0;
    double test_sa = 0.0;
    double test_ra = 0.0;
    std::size_t total_batches = 0;
};

/// One SGD update: p <- p - eta * (g + weight_decay * p) for weight matrices
/// and low-rank factors; biases and BN affine parameters decay-free. Only the
/// method's trainable tensors move; BN statistics and frozen copies are never
/// touched here.
inline void sgd_step(ParamSet& params, const GradMap& grads, Method method, double eta,
                     double weight_decay) {
    auto update = [&](const std::string& name, Tensor& p) {
        if (!grads.contains(name)) {
            throw ContractError("missing gradient for trainable tensor '" + name + "'");
        }
        const Tensor& g = grads.at(name);
        const bool decayed = name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
        const bool lora_factor = name.rfind("lora.", 0) == 0;
        const double wd = decayed || lora_factor ? weight_decay : 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            p.at(i) -= eta * (g.at(i) + wd * p.at(i));
        }
    };
    params.for_each_theta1(update);
    params.for_each_theta2(update);
    if (method == Method::kAutoLoRa) params.for_each_lora(update);
}

namespace detail {

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    const std::size_t z = logits.dim(1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < z; ++j) {
        if (logits.at(row, j) > logits.at(row, best)) best = j;
    }
    return best;
}

inline double accuracy(const Tensor& logits, const std::vector<int>& y) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (argmax_row(logits, i) == static_cast<std::size_t>(y[i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(y.size());
}

// Fixed-order evaluation chunks keep attack tapes small.
inline constexpr std::size_t kEvalChunk = 256;

}  // namespace detail

/// Fraction of correctly classified natural inputs under stored statistics.
/// subsample < 1 scans a seeded random subset.
inline double standard_accuracy(ParamSet& params, const Dataset& ds, ForwardMode mode,
                                double subsample = 1.0, std::uint64_t subsample_seed = 0) {
    std::vector<std::size_t> rows(ds.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    if (subsample < 1.0) {
        std::mt19937_64 rng(subsample_seed);
        std::shuffle(rows.begin(), rows.end(), rng);
        const std::size_t keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(subsample * static_cast<double>(ds.size()))));
        rows.resize(keep);
    }
    const std::size_t d = ds.dims();
    std::size_t correct = 0;
    for (std::size_t start = 0; start < rows.size(); start += detail::kEvalChunk) {
        const std::size_t stop = std::min(rows.size(), start + detail::kEvalChunk);
        std::vector<double> data((stop - start) * d);
        std::vector<int> labels(stop - start);
        for (std::size_t i = start; i < stop; ++i) {
            const double* src = ds.x.data() + rows[i] * d;
            std::copy(src, src + d, data.begin() + static_cast<std::ptrdiff_t>((i - start) * d));
            labels[i - start] = ds.y[rows[i]];
        }
        Tensor x({stop - start, d}, std::move(data));
        Tensor logits = forward(params, x, mode, ForwardOptions{false, nullptr, false});
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (detail::argmax_row(logits, i) == static_cast<std::size_t>(labels[i])) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(rows.size());
}

/// Standard and robust accuracy of the live parameterization. The robust
/// side attacks each chunk with PGD and scores the perturbed inputs.
inline std::pair<double, double> evaluate(ParamSet& params, const Dataset& ds,
                                          const AttackConfig& attack) {
    const std::size_t n = ds.size();
    const std::size_t d = ds.dims();
    std::size_t nat_correct = 0;
    std::size_t adv_correct = 0;
    for (std::size_t start = 0; start < n; start += detail::kEvalChunk) {
        const std::size_t stop = std::min(n, start + detail::kEvalChunk);
        std::vector<double> data((stop - start) * d);
        std::vector<int> labels(stop - start);
        for (std::size_t i = start; i < stop; ++i) {
            const double* src = ds.x.data() + i * d;
            std::copy(src, src + d, data.begin() + static_cast<std::ptrdiff_t>((i - start) * d));
            labels[i - start] = ds.y[i];
        }
        Tensor x({stop - start, d}, std::move(data));
        ForwardOptions eval_opts{false, nullptr, false};
        Tensor nat_logits = forward(params, x, ForwardMode::kBase, eval_opts);
        Tensor x_adv = pgd(params, ForwardMode::kBase, x, labels, attack);
        Tensor adv_logits = forward(params, x_adv, ForwardMode::kBase, eval_opts);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const auto y = static_cast<std::size_t>(labels[i]);
            if (detail::argmax_row(nat_logits, i) == y) ++nat_correct;
            if (detail::argmax_row(adv_logits, i) == y) ++adv_correct;
        }
    }
    return {static_cast<double>(nat_correct) / static_cast<double>(n),
            static_cast<double>(adv_correct) / static_cast<double>(n)};
}

/// Trains a fresh model on a source task with plain CE (or CE on PGD inputs
/// when adversarial), then freezes the final BN statistics as the
/// pre-trained copy. Stands in for an externally pre-trained extractor.
inline ParamSet pretrain(const ModelSpec& spec, const Dataset& ds, int epochs, bool adversarial,
                         const AttackConfig& attack, double lr = 0.01, double weight_decay = 1e-4,
                         std::uint64_t seed = 0) {
    if (epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
    ParamSet ps = ParamSet::init(spec, derive_seed(seed, 0));
    for (int e = 0; e < epochs; ++e) {
        for (const Batch& batch : batches(ds, 128, derive_seed(seed, 1000 + static_cast<std::uint64_t>(e)))) {
            Tensor x_in = adversarial
                              ? pgd(ps, ForwardMode::kBase, batch.x, batch.y, attack)
                              : batch.x;
            Tape tape;
            Tensor logits = forward(ps, x_in, ForwardMode::kBase, ForwardOptions{true, &tape, true});
            Tensor loss = ce_loss(logits, batch.y);
            if (!std::isfinite(loss.item())) {
                throw NumericalError("non-finite pretraining loss at epoch " + std::to_string(e));
            }
            sgd_step(ps, tape.backward(loss).param_grads(), Method::kVanilla, lr, weight_decay);
        }
    }
    ps.freeze_bn_stats();
    return ps;
}

namespace detail {

/// Fine-tuning initialization: keep the pre-trained extractor and its
/// statistics, reinitialize the classifier for the downstream label space,
/// and attach the low-rank branch for the disentangled method.
inline ParamSet make_finetune_params(const ParamSet& pretrained, const TrainConfig& cfg) {
    if (!pretrained.spec.same_feature_extractor(cfg.model)) {
        throw ConfigError("pretrained feature extractor does not match the configured model");
    }
    ParamSet ps = pretrained.clone();
    ps.spec = cfg.model;
    std::mt19937_64 rng(derive_seed(cfg.seed, 2));
    ps.head.weight = randn({cfg.model.feature_dim, cfg.model.num_classes}, rng,
                           std::sqrt(1.0 / static_cast<double>(cfg.model.feature_dim)));
    ps.head.bias = Tensor({cfg.model.num_classes}, 0.0);
    if (!ps.bn_stats_frozen) ps.freeze_bn_stats();
    ps.lora.reset();
    if (cfg.method == Method::kAutoLoRa) {
        ps.attach_lora(cfg.lora, derive_seed(cfg.seed, 3));
    }
    return ps;
}

inline void check_disentangled(const GradMap& natural_grads) {
    for (const auto& [name, g] : natural_grads) {
        if (name.rfind("theta1.", 0) != 0) continue;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g.at(i) != 0.0) {
                throw ContractError("natural-term gradient leaked into " + name);
            }
        }
    }
}

}  // namespace detail

/// Full fine-tuning loop. The disentangled method follows the automated
/// schedule (per-epoch scalar update, checkpoint-conditioned LR halving with
/// best-checkpoint restarts, stop below min_eta); baselines run at the fixed
/// learning rate unless the scheduler is explicitly attached. Returns the
/// checkpoint with the highest robust validation accuracy plus the full log.
inline RunResult run(const TrainConfig& cfg, const ParamSet& pretrained, const DataSplit& data) {
    cfg.validate();
    if (data.train.num_classes != cfg.model.num_classes) {
        throw ConfigError("dataset classes do not match the configured model");
    }
    ParamSet ps = detail::make_finetune_params(pretrained, cfg);

    const bool autolora = cfg.method == Method::kAutoLoRa;
    const bool scheduled = autolora || cfg.use_lr_scheduler_for_baselines;
    LrScheduler<std::shared_ptr<const ParamSet>> sched(
        scheduled ? cfg.lr
                  : LrSchedulerConfig{cfg.fixed_lr, cfg.lr.checkpoint_interval,
                                      cfg.lr.halving_factor, cfg.lr.min_eta, cfg.lr.cond1_fraction,
                                      cfg.lr.cond1_mode});
    double eta = scheduled ? cfg.lr.eta0 : cfg.fixed_lr;
    std::mt19937_64 attack_rng(derive_seed(cfg.seed, 4));

    RunResult result;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochLog row;
        row.epoch = epoch;
        row.eta = eta;

        ScalarPair scalars{1.0, 0.0};
        if (autolora) {
            row.sa_train = standard_accuracy(ps, data.train, ForwardMode::kLoRa,
                                             cfg.scalars.sa_subsample,
                                             derive_seed(cfg.seed, 500 + static_cast<std::uint64_t>(epoch)));
            scalars = compute_scalars(row.sa_train, cfg.scalars);
            row.lambda1 = scalars.lambda1;
            row.lambda2 = scalars.lambda2;
        } else {
            row.sa_train = standard_accuracy(ps, data.train, ForwardMode::kBase);
        }

        double sum_total = 0.0;
        double sum_nat = 0.0;
        double sum_adv = 0.0;
        double sum_kl = 0.0;
        double sum_gs = 0.0;
        std::size_t gs_count = 0;
        std::size_t batch_count = 0;
        bool aborted = false;

        for (const Batch& batch :
             batches(data.train, cfg.batch_size,
                     derive_seed(cfg.seed, 10000 + static_cast<std::uint64_t>(epoch)))) {
            LossOptions opts;
            opts.kl_dir = cfg.kl_dir;
            opts.want_gs = cfg.log_gs && !autolora;
            opts.want_natural_grads =
                autolora && batch_count % static_cast<std::size_t>(cfg.disentangle_check_every) == 0;

            LossBundle bundle;
            switch (cfg.method) {
                case Method::kVanilla:
                    bundle = vanilla_rft_loss(ps, batch, *cfg.beta, cfg.attack, &attack_rng, opts);
                    break;
                case Method::kTwins:
                    bundle = twins_loss(ps, batch, TwinsConfig{*cfg.beta, *cfg.gamma}, cfg.attack,
                                        &attack_rng, opts);
                    break;
                case Method::kAutoLoRa:
                    bundle = autolora_loss(ps, batch, scalars, cfg.attack, cfg.kl_teacher_grad,
                                           &attack_rng, opts);
                    break;
            }
            ++batch_count;
            ++result.total_batches;
            sum_total += bundle.total;
            sum_nat += bundle.natural;
            sum_adv += bundle.adv_ce;
            sum_kl += bundle.kl;
            if (bundle.gs) {
                sum_gs += *bundle.gs;
                ++gs_count;
            }
            if (bundle.natural_grads) detail::check_disentangled(*bundle.natural_grads);
            if (!std::isfinite(bundle.total)) {
                // Diagnostic row records the blown-up values before aborting.
                row.loss_total = bundle.total;
                row.loss_nat = bundle.natural;
                row.loss_adv_ce = bundle.adv_ce;
                row.loss_kl = bundle.kl;
                aborted = true;
                break;
            }
            sgd_step(ps, bundle.grads, cfg.method, eta, cfg.weight_decay);
        }

        if (aborted) {
            row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.log.push_back(row);
            result.status = RunStatus::kNumericalAbort;
            break;
        }

        row.loss_total = sum_total / static_cast<double>(batch_count);
        row.loss_nat = sum_nat / static_cast<double>(batch_count);
        row.loss_adv_ce = sum_adv / static_cast<double>(batch_count);
        row.loss_kl = sum_kl / static_cast<double>(batch_count);
        if (gs_count > 0) row.gs = sum_gs / static_cast<double>(gs_count);

        const auto [sa_val, ra_val] = evaluate(ps, data.val, cfg.attack);
        row.sa_val = sa_val;
        row.ra_val = ra_val;
        sched.record_epoch(ra_val, [&] { return std::make_shared<const ParamSet>(ps.clone()); });

        bool stop = false;
        if (scheduled && sched.at_checkpoint()) {
            if (auto reason = sched.advance_checkpoint()) {
                // Restart from the best checkpoint at the halved rate.
                ps = sched.best_checkpoint()->clone();
                eta = sched.eta();
                if (sched.below_min_eta()) stop = true;
            }
        }

        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(row);
        if (stop) break;
    }

    result.halve_log = sched.halve_log();
    if (sched.has_best()) {
        result.best_epoch = sched.best_epoch();
        result.best_ra = sched.best_ra();
        result.best_params = sched.best_checkpoint()->clone();
    } else {
        result.best_params = ps.clone();
    }
    if (result.status == RunStatus::kOk && data.test.size() > 0) {
        auto [test_sa, test_ra] = evaluate(result.best_params, data.test, cfg.eval_attack);
        result.test_sa = test_sa;
        result.test_ra = test_ra;
    }
    return result;
}

}  // namespace autolora
