#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "autolora/errors.hpp"

namespace autolora {

/// Loss-term weights for the low-rank objective. lambda1 weights the natural
/// CE through the low-rank branch, lambda2 the distillation KL.
struct ScalarPair {
    double lambda1 = 1.0;
    double lambda2 = 0.0;
};

struct ScalarSchedulerConfig {
    double alpha = 1.0;        // sharpening exponent on the training accuracy
    double lambda2_max = 6.0;
    double sa_subsample = 1.0;  // fraction of the training set scanned for SA

    void validate() const {
        if (alpha <= 0.0) throw ConfigError("scalar scheduler alpha must be > 0");
        if (lambda2_max < 0.0) throw ConfigError("scalar scheduler lambda2_max must be >= 0");
        if (sa_subsample <= 0.0 || sa_subsample > 1.0) {
            throw ConfigError("scalar scheduler sa_subsample must be in (0, 1]");
        }
    }
};

/// lambda1 = 1 - sa^alpha, lambda2 = lambda2_max * sa^alpha.
inline ScalarPair compute_scalars(double sa_train, const ScalarSchedulerConfig& cfg) {
    cfg.validate();
    if (!(sa_train >= 0.0 && sa_train <= 1.0)) {
        throw ContractError("standard accuracy " + std::to_string(sa_train) +
                            " outside [0, 1]");
    }
    const double sharpened = std::pow(sa_train, cfg.alpha);
    return ScalarPair{1.0 - sharpened, cfg.lambda2_max * sharpened};
}

enum class HalveReason { kCond1, kCond2 };

inline const char* halve_reason_name(HalveReason r) {
    return r == HalveReason::kCond1 ? "cond1" : "cond2";
}

/// Condition 1 has two readings of the same counting rule; both are kept.
///   kPaper:       halve when the count of strict per-epoch RA decreases over
///                 the window is at most fraction * W.
///   kImprovement: halve when the count of strict per-epoch RA increases over
///                 the window is at most (1 - fraction) * W.
enum class Cond1Mode { kPaper, kImprovement };

struct LrSchedulerConfig {
    double eta0 = 0.01;
    int checkpoint_interval = 5;    // W, epochs between condition checks
    double halving_factor = 0.5;
    double min_eta = 1e-5;          // training stops once eta drops below this
    double cond1_fraction = 0.75;   // rho
    Cond1Mode cond1_mode = Cond1Mode::kPaper;

    void validate() const {
        if (eta0 <= 0.0) throw ConfigError("lr scheduler eta0 must be > 0");
        if (checkpoint_interval < 1) throw ConfigError("lr checkpoint interval must be >= 1");
        if (halving_factor <= 0.0 || halving_factor >= 1.0) {
            throw ConfigError("lr halving factor must be in (0, 1)");
        }
        if (min_eta <= 0.0) throw ConfigError("lr min_eta must be > 0");
        if (cond1_fraction <= 0.0 || cond1_fraction >= 1.0) {
            throw ConfigError("lr cond1_fraction must be in (0, 1)");
        }
    }
};

/// Validation-accuracy-driven learning-rate halving with best-checkpoint
/// restarts. Epochs are recorded one at a time; at every checkpoint epoch
/// (multiples of the interval) the two halving conditions are evaluated
/// against the window since the previous checkpoint.
///
/// Snapshot is an opaque checkpoint handle owned by the caller (the trainer
/// uses a shared pointer to a deep parameter copy).
template <class Snapshot>
class LrScheduler {
public:
    explicit LrScheduler(LrSchedulerConfig cfg) : cfg_(cfg), eta_(cfg.eta0) {
        cfg_.validate();
    }

    double eta() const { return eta_; }
    const LrSchedulerConfig& config() const { return cfg_; }
    int epochs_recorded() const { return static_cast<int>(ra_history_.size()); }
    const std::vector<double>& ra_history() const { return ra_history_; }
    const std::vector<std::pair<int, HalveReason>>& halve_log() const { return halve_log_; }
    int num_halvings() const { return static_cast<int>(halve_log_.size()); }
    bool below_min_eta() const { return eta_ < cfg_.min_eta; }

    bool has_best() const { return best_snapshot_.has_value(); }

    double best_ra() const {
        require_best();
        return best_ra_;
    }

    int best_epoch() const {
        require_best();
        return best_epoch_;
    }

    const Snapshot& best_checkpoint() const {
        require_best();
        return *best_snapshot_;
    }

    /// Appends the robust validation accuracy of the epoch just finished.
    /// The snapshot factory is invoked only on strict improvement.
    template <class MakeSnapshot>
    void record_epoch(double ra_val, MakeSnapshot&& make_snapshot) {
        if (!(ra_val >= 0.0 && ra_val <= 1.0)) {
            throw ContractError("robust accuracy " + std::to_string(ra_val) +
                                " outside [0, 1]");
        }
        ra_history_.push_back(ra_val);
        if (!best_snapshot_ || ra_val > best_ra_) {
            best_ra_ = ra_val;
            best_epoch_ = static_cast<int>(ra_history_.size()) - 1;
            best_snapshot_ = make_snapshot();
        }
    }

    /// True right after recording a checkpoint epoch (W, 2W, ...).
    bool at_checkpoint() const {
        const int e = epochs_recorded() - 1;
        return e >= cfg_.checkpoint_interval && e % cfg_.checkpoint_interval == 0;
    }

    /// Evaluates both halving conditions over the current window. Pure:
    /// identical traces give identical decisions.
    std::optional<HalveReason> check_conditions() const {
        if (!at_checkpoint()) {
            throw ContractError("check_conditions called off a checkpoint epoch");
        }
        const int window = cfg_.checkpoint_interval;
        const std::size_t e = ra_history_.size() - 1;

        int decreases = 0;
        int increases = 0;
        for (std::size_t k = e - static_cast<std::size_t>(window); k < e; ++k) {
            if (ra_history_[k + 1] < ra_history_[k]) ++decreases;
            if (ra_history_[k + 1] > ra_history_[k]) ++increases;
        }
        const bool cond1 =
            cfg_.cond1_mode == Cond1Mode::kPaper
                ? static_cast<double>(decreases) <= cfg_.cond1_fraction * window
                : static_cast<double>(increases) <= (1.0 - cfg_.cond1_fraction) * window;
        const bool cond2 = eta_ == mark_eta() && best_ra_ == mark_best_ra();
        // Stagnation is the more specific diagnosis when both fire.
        if (cond2) return HalveReason::kCond2;
        if (cond1) return HalveReason::kCond1;
        return std::nullopt;
    }

    /// Halves the learning rate and logs the reason. The caller restores its
    /// parameters from best_checkpoint().
    void apply_halve(HalveReason reason) {
        require_best();
        eta_ *= cfg_.halving_factor;
        halve_log_.emplace_back(epochs_recorded() - 1, reason);
    }

    /// Per-checkpoint transition: evaluate conditions against the previous
    /// checkpoint mark, advance the mark, halve on trigger. Returns the
    /// reason when a halving fired.
    std::optional<HalveReason> advance_checkpoint() {
        const std::optional<HalveReason> decision = check_conditions();
        // The mark keeps the pre-halve learning rate, so a halving blocks
        // condition 2 for exactly one window.
        mark_ = Mark{eta_, best_ra_};
        if (decision) apply_halve(*decision);
        return decision;
    }

private:
    struct Mark {
        double eta;
        double best_ra;
    };

    void require_best() const {
        if (!best_snapshot_) throw ContractError("no best checkpoint recorded yet");
    }

    double mark_eta() const { return mark_ ? mark_->eta : cfg_.eta0; }

    // Reference for the first checkpoint window is the epoch-0 entry.
    double mark_best_ra() const { return mark_ ? mark_->best_ra : ra_history_.front(); }

    LrSchedulerConfig cfg_;
    double eta_;
    std::vector<double> ra_history_;
    double best_ra_ = 0.0;
    int best_epoch_ = -1;
    std::optional<Snapshot> best_snapshot_;
    std::optional<Mark> mark_;
    std::vector<std::pair<int, HalveReason>> halve_log_;
};

}  // namespace autolora
