#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "autolora/trainer.hpp"

namespace autolora {

namespace detail {

inline std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt_seconds(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

}  // namespace detail

inline constexpr const char* kRunLogHeader =
    "epoch,eta,lambda1,lambda2,sa_train,sa_val,ra_val,gs,"
    "loss_total,loss_nat,loss_adv_ce,loss_kl,seconds";

/// Optional columns (the scheduler scalars and the gradient similarity) stay
/// empty when undefined.
inline std::string run_log_to_csv(const std::vector<EpochLog>& log) {
    std::string out = kRunLogHeader;
    out += '\n';
    for (const EpochLog& row : log) {
        out += std::to_string(row.epoch);
        out += ',' + detail::fmt_full(row.eta);
        out += ',';
        if (row.lambda1) out += detail::fmt_full(*row.lambda1);
        out += ',';
        if (row.lambda2) out += detail::fmt_full(*row.lambda2);
        out += ',' + detail::fmt_full(row.sa_train);
        out += ',' + detail::fmt_full(row.sa_val);
        out += ',' + detail::fmt_full(row.ra_val);
        out += ',';
        if (row.gs) out += detail::fmt_full(*row.gs);
        out += ',' + detail::fmt_full(row.loss_total);
        out += ',' + detail::fmt_full(row.loss_nat);
        out += ',' + detail::fmt_full(row.loss_adv_ce);
        out += ',' + detail::fmt_full(row.loss_kl);
        out += ',' + detail::fmt_seconds(row.seconds);
        out += '\n';
    }
    return out;
}

inline void write_run_log_csv(const std::filesystem::path& path,
                              const std::vector<EpochLog>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open run log for writing: " + path.string());
    out << run_log_to_csv(log);
}

inline nlohmann::json summary_to_json(const RunResult& result, Method method,
                                      std::uint64_t seed) {
    nlohmann::json halves = nlohmann::json::array();
    for (const auto& [epoch, reason] : result.halve_log) {
        halves.push_back({{"epoch", epoch}, {"reason", halve_reason_name(reason)}});
    }
    return nlohmann::json{
        {"method", method_name(method)},
        {"seed", seed},
        {"status", result.status == RunStatus::kOk ? "ok" : "numerical_abort"},
        {"best_epoch", result.best_epoch},
        {"best_ra_val", result.best_ra},
        {"test_sa", result.test_sa},
        {"test_ra", result.test_ra},
        {"epochs_run", result.log.size()},
        {"halve_log", halves},
    };
}

inline void write_summary_json(const std::filesystem::path& path, const RunResult& result,
                               Method method, std::uint64_t seed) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open summary for writing: " + path.string());
    out << summary_to_json(result, method, seed).dump(2) << '\n';
}

}  // namespace autolora
