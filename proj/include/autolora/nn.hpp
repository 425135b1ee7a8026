#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "autolora/tensor.hpp"

namespace autolora {

/// Feature extractor f: R^d -> R^v as a chain of linear layers (each followed
/// by batch norm when enabled, then ReLU), plus a linear classifier
/// g: R^v -> R^z.
struct ModelSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    std::size_t feature_dim = 0;
    std::size_t num_classes = 0;
    bool use_batchnorm = true;

    void validate() const {
        if (input_dim < 1) throw ConfigError("model input_dim must be >= 1");
        if (feature_dim < 1) throw ConfigError("model feature_dim must be >= 1");
        if (num_classes < 2) throw ConfigError("model num_classes must be >= 2");
        if (hidden_dims.empty()) throw ConfigError("model hidden_dims must be non-empty");
        for (std::size_t h : hidden_dims) {
            if (h < 1) throw ConfigError("model hidden widths must be >= 1");
        }
    }

    /// (in, out) of every feature-extractor linear layer, input to feature.
    std::vector<std::pair<std::size_t, std::size_t>> fe_layer_shapes() const {
        std::vector<std::pair<std::size_t, std::size_t>> shapes;
        std::size_t in = input_dim;
        for (std::size_t h : hidden_dims) {
            shapes.emplace_back(in, h);
            in = h;
        }
        shapes.emplace_back(in, feature_dim);
        return shapes;
    }

    bool same_feature_extractor(const ModelSpec& other) const {
        return input_dim == other.input_dim && hidden_dims == other.hidden_dims &&
               feature_dim == other.feature_dim && use_batchnorm == other.use_batchnorm;
    }
};

struct LoRaConfig {
    std::size_t rank = 8;
    double init_std = 0.01;
};

/// Which parameterization a forward pass runs through.
///   kBase:     live weights, live BN statistics; gradients to theta1+theta2.
///   kLoRa:     effective weights W + B*A with W constant; gradients to
///              B, A, theta2 only.
///   kFrozenBn: live weights with the frozen pre-trained BN statistics;
///              gradients to theta1+theta2 (shared with kBase).
enum class ForwardMode { kBase, kLoRa, kFrozenBn };

struct LinearLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
};

struct BnAffine {
    Tensor gamma;  // [f]
    Tensor beta;   // [f]
};

struct BnStats {
    Tensor mean;  // [f]
    Tensor var;   // [f]
};

struct LoRaFactors {
    Tensor B;  // [in x rank], zero-initialized
    Tensor A;  // [rank x out], Gaussian-initialized
};

/// All trainable parameters plus BN running statistics.
class ParamSet {
public:
    ModelSpec spec;
    std::vector<LinearLayer> fe;                       // theta1 linear layers
    std::vector<BnAffine> fe_bn;                       // theta1 BN affine params
    LinearLayer head;                                  // theta2
    std::vector<BnStats> bn_stats;                     // running statistics
    std::optional<std::vector<BnStats>> bn_stats_frozen;  // never mutated after set
    std::optional<std::vector<LoRaFactors>> lora;

    static ParamSet init(const ModelSpec& spec, std::uint64_t seed) {
        spec.validate();
        ParamSet ps;
        ps.spec = spec;
        std::mt19937_64 rng(seed);
        for (auto [in, out] : spec.fe_layer_shapes()) {
            LinearLayer layer;
            layer.weight = randn({in, out}, rng, std::sqrt(2.0 / static_cast<double>(in)));
            layer.bias = Tensor({out}, 0.0);
            ps.fe.push_back(std::move(layer));
            if (spec.use_batchnorm) {
                ps.fe_bn.push_back(BnAffine{Tensor({out}, 1.0), Tensor({out}, 0.0)});
                ps.bn_stats.push_back(BnStats{Tensor({out}, 0.0), Tensor({out}, 1.0)});
            }
        }
        ps.head.weight = randn({spec.feature_dim, spec.num_classes}, rng,
                               std::sqrt(1.0 / static_cast<double>(spec.feature_dim)));
        ps.head.bias = Tensor({spec.num_classes}, 0.0);
        return ps;
    }

    /// Adds the low-rank branch: per FE layer, A ~ N(0, init_std), B = 0.
    void attach_lora(const LoRaConfig& cfg, std::uint64_t seed) {
        if (cfg.rank < 1) throw ConfigError("LoRA rank must be >= 1");
        if (cfg.init_std <= 0.0) throw ConfigError("LoRA init_std must be > 0");
        std::mt19937_64 rng(seed);
        std::vector<LoRaFactors> factors;
        for (const auto& [in, out] : spec.fe_layer_shapes()) {
            if (cfg.rank > std::min(in, out)) {
                throw ConfigError("LoRA rank " + std::to_string(cfg.rank) +
                                  " exceeds min layer dimension " +
                                  std::to_string(std::min(in, out)));
            }
            LoRaFactors f;
            f.B = Tensor({in, cfg.rank}, 0.0);
            f.A = randn({cfg.rank, out}, rng, cfg.init_std);
            factors.push_back(std::move(f));
        }
        lora = std::move(factors);
    }

    /// Snapshots the current running statistics as the frozen copy.
    void freeze_bn_stats() {
        std::vector<BnStats> frozen;
        frozen.reserve(bn_stats.size());
        for (const auto& s : bn_stats) frozen.push_back(BnStats{s.mean.clone(), s.var.clone()});
        bn_stats_frozen = std::move(frozen);
    }

    ParamSet clone() const {
        ParamSet out;
        out.spec = spec;
        for (const auto& l : fe) out.fe.push_back(LinearLayer{l.weight.clone(), l.bias.clone()});
        for (const auto& b : fe_bn) out.fe_bn.push_back(BnAffine{b.gamma.clone(), b.beta.clone()});
        out.head = LinearLayer{head.weight.clone(), head.bias.clone()};
        for (const auto& s : bn_stats) out.bn_stats.push_back(BnStats{s.mean.clone(), s.var.clone()});
        if (bn_stats_frozen) {
            std::vector<BnStats> frozen;
            for (const auto& s : *bn_stats_frozen) {
                frozen.push_back(BnStats{s.mean.clone(), s.var.clone()});
            }
            out.bn_stats_frozen = std::move(frozen);
        }
        if (lora) {
            std::vector<LoRaFactors> factors;
            for (const auto& f : *lora) factors.push_back(LoRaFactors{f.B.clone(), f.A.clone()});
            out.lora = std::move(factors);
        }
        return out;
    }

    using NamedVisitor = std::function<void(const std::string&, Tensor&)>;

    void for_each_theta1(const NamedVisitor& visit) {
        for (std::size_t i = 0; i < fe.size(); ++i) {
            const std::string p = "theta1." + std::to_string(i);
            visit(p + ".weight", fe[i].weight);
            visit(p + ".bias", fe[i].bias);
            if (spec.use_batchnorm) {
                visit(p + ".bn.gamma", fe_bn[i].gamma);
                visit(p + ".bn.beta", fe_bn[i].beta);
            }
        }
    }

    void for_each_theta2(const NamedVisitor& visit) {
        visit("theta2.weight", head.weight);
        visit("theta2.bias", head.bias);
    }

    void for_each_lora(const NamedVisitor& visit) {
        if (!lora) return;
        for (std::size_t i = 0; i < lora->size(); ++i) {
            const std::string p = "lora." + std::to_string(i);
            visit(p + ".B", (*lora)[i].B);
            visit(p + ".A", (*lora)[i].A);
        }
    }

    void for_each_stats(const NamedVisitor& visit) {
        for (std::size_t i = 0; i < bn_stats.size(); ++i) {
            const std::string p = "bn_stats." + std::to_string(i);
            visit(p + ".mean", bn_stats[i].mean);
            visit(p + ".var", bn_stats[i].var);
        }
        if (bn_stats_frozen) {
            for (std::size_t i = 0; i < bn_stats_frozen->size(); ++i) {
                const std::string p = "bn_frozen." + std::to_string(i);
                visit(p + ".mean", (*bn_stats_frozen)[i].mean);
                visit(p + ".var", (*bn_stats_frozen)[i].var);
            }
        }
    }

    /// Every tensor in the set, trainable or not, in canonical order.
    void for_each_named(const NamedVisitor& visit) {
        for_each_theta1(visit);
        for_each_theta2(visit);
        for_each_lora(visit);
        for_each_stats(visit);
    }

    std::size_t theta1_count() const {
        std::size_t n = 0;
        for (const auto& l : fe) n += l.weight.size() + l.bias.size();
        for (const auto& b : fe_bn) n += b.gamma.size() + b.beta.size();
        return n;
    }
};

// BN defaults; the normalization epsilon and the running-stat momentum.
inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

namespace detail {

struct BnTrainResult {
    Tensor out;
    std::vector<double> batch_mean;
    std::vector<double> batch_var;  // biased
};

/// Batch normalization over the batch dimension of [b x f] using batch
/// statistics. Gradients flow to x, gamma and beta.
inline BnTrainResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                      double eps) {
    const std::size_t b = x.dim(0);
    const std::size_t f = x.dim(1);
    std::vector<double> mu(f, 0.0);
    std::vector<double> var(f, 0.0);
    const double* xv = x.data();
    for (std::size_t j = 0; j < f; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < b; ++i) acc += xv[i * f + j];
        mu[j] = acc / static_cast<double>(b);
    }
    for (std::size_t j = 0; j < f; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const double d = xv[i * f + j] - mu[j];
            acc += d * d;
        }
        var[j] = acc / static_cast<double>(b);
    }
    auto inv = std::make_shared<std::vector<double>>(f);
    for (std::size_t j = 0; j < f; ++j) (*inv)[j] = 1.0 / std::sqrt(var[j] + eps);
    auto xhat = std::make_shared<std::vector<double>>(b * f);
    std::vector<double> out(b * f);
    const double* gv = gamma.data();
    const double* bv = beta.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < f; ++j) {
            const double h = (xv[i * f + j] - mu[j]) * (*inv)[j];
            (*xhat)[i * f + j] = h;
            out[i * f + j] = gv[j] * h + bv[j];
        }
    }
    Tape* tape = result_tape({&x, &gamma, &beta});
    if (tape == nullptr) {
        return BnTrainResult{Tensor({b, f}, std::move(out)), std::move(mu), std::move(var)};
    }
    const int px = parent_of(x);
    const int pg = parent_of(gamma);
    const int pb = parent_of(beta);
    auto gbuf = gamma.buffer();
    BackwardFn fn = [b, f, px, pg, pb, xhat, inv, gbuf](const double* g, GradSink& sink) {
        double* dx = sink.buffer(px);
        double* dgamma = sink.buffer(pg);
        double* dbeta = sink.buffer(pb);
        const double* gam = gbuf->data();
        for (std::size_t j = 0; j < f; ++j) {
            double sum_g = 0.0;
            double sum_gx = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
                sum_g += g[i * f + j];
                sum_gx += g[i * f + j] * (*xhat)[i * f + j];
            }
            if (dbeta) dbeta[j] += sum_g;
            if (dgamma) dgamma[j] += sum_gx;
            if (dx) {
                const double mean_dh = gam[j] * sum_g / static_cast<double>(b);
                const double mean_dh_h = gam[j] * sum_gx / static_cast<double>(b);
                for (std::size_t i = 0; i < b; ++i) {
                    const double dh = gam[j] * g[i * f + j];
                    dx[i * f + j] +=
                        (*inv)[j] * (dh - mean_dh - (*xhat)[i * f + j] * mean_dh_h);
                }
            }
        }
    };
    Tensor tracked = tape->record({b, f}, std::move(out), {px, pg, pb}, std::move(fn));
    return BnTrainResult{std::move(tracked), std::move(mu), std::move(var)};
}

/// Batch normalization of [b x f] with fixed statistics (running or frozen).
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const Tensor& mean, const Tensor& var, double eps) {
    const std::size_t b = x.dim(0);
    const std::size_t f = x.dim(1);
    auto inv = std::make_shared<std::vector<double>>(f);
    for (std::size_t j = 0; j < f; ++j) (*inv)[j] = 1.0 / std::sqrt(var.at(j) + eps);
    auto xhat = std::make_shared<std::vector<double>>(b * f);
    std::vector<double> out(b * f);
    const double* xv = x.data();
    const double* gv = gamma.data();
    const double* bv = beta.data();
    const double* mv = mean.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < f; ++j) {
            const double h = (xv[i * f + j] - mv[j]) * (*inv)[j];
            (*xhat)[i * f + j] = h;
            out[i * f + j] = gv[j] * h + bv[j];
        }
    }
    Tape* tape = result_tape({&x, &gamma, &beta});
    if (tape == nullptr) return Tensor({b, f}, std::move(out));
    const int px = parent_of(x);
    const int pg = parent_of(gamma);
    const int pb = parent_of(beta);
    auto gbuf = gamma.buffer();
    BackwardFn fn = [b, f, px, pg, pb, xhat, inv, gbuf](const double* g, GradSink& sink) {
        double* dx = sink.buffer(px);
        double* dgamma = sink.buffer(pg);
        double* dbeta = sink.buffer(pb);
        const double* gam = gbuf->data();
        for (std::size_t j = 0; j < f; ++j) {
            for (std::size_t i = 0; i < b; ++i) {
                const double gij = g[i * f + j];
                if (dx) dx[i * f + j] += gij * gam[j] * (*inv)[j];
                if (dgamma) dgamma[j] += gij * (*xhat)[i * f + j];
                if (dbeta) dbeta[j] += gij;
            }
        }
    };
    return tape->record({b, f}, std::move(out), {px, pg, pb}, std::move(fn));
}

}  // namespace detail

struct ForwardOptions {
    bool train = false;
    Tape* tape = nullptr;
    bool track_params = true;  // when false, parameters stay constants (attack use)
};

/// Logits h(x) for a [b x d] batch through the requested parameterization.
/// train=true normalizes with batch statistics and updates the running
/// statistics of non-frozen paths; train=false uses the stored statistics.
inline Tensor forward(ParamSet& params, const Tensor& x, ForwardMode mode,
                      const ForwardOptions& opts = {}) {
    if (x.rank() != 2 || x.dim(1) != params.spec.input_dim) {
        throw DimensionError("forward input " + shape_to_string(x.shape()) +
                             " does not match input_dim " +
                             std::to_string(params.spec.input_dim));
    }
    if (mode == ForwardMode::kLoRa && !params.lora) {
        throw ConfigError("LoRa forward mode requires LoRA factors");
    }
    if (mode == ForwardMode::kFrozenBn && params.spec.use_batchnorm && !params.bn_stats_frozen) {
        throw ConfigError("FrozenBn forward mode requires frozen BN statistics");
    }

    auto track = [&](const std::string& name, const Tensor& t) -> Tensor {
        if (opts.tape != nullptr && opts.track_params) return opts.tape->watch(t, name);
        return t;
    };

    const std::size_t batch = x.dim(0);
    Tensor h = x;
    for (std::size_t i = 0; i < params.fe.size(); ++i) {
        const std::string prefix = "theta1." + std::to_string(i);
        Tensor weight;
        Tensor bias;
        if (mode == ForwardMode::kLoRa) {
            // Stop-gradient on theta1: the stored weight enters as a constant
            // and only the low-rank factors are differentiable.
            const std::string lp = "lora." + std::to_string(i);
            Tensor factor_b = track(lp + ".B", (*params.lora)[i].B);
            Tensor factor_a = track(lp + ".A", (*params.lora)[i].A);
            weight = add(params.fe[i].weight.detach(), matmul(factor_b, factor_a));
            bias = params.fe[i].bias.detach();
        } else {
            weight = track(prefix + ".weight", params.fe[i].weight);
            bias = track(prefix + ".bias", params.fe[i].bias);
        }
        h = add(matmul(h, weight), bias);
        if (params.spec.use_batchnorm) {
            Tensor gamma = mode == ForwardMode::kLoRa
                               ? params.fe_bn[i].gamma.detach()
                               : track(prefix + ".bn.gamma", params.fe_bn[i].gamma);
            Tensor beta = mode == ForwardMode::kLoRa
                              ? params.fe_bn[i].beta.detach()
                              : track(prefix + ".bn.beta", params.fe_bn[i].beta);
            if (mode == ForwardMode::kFrozenBn) {
                h = detail::batch_norm_eval(h, gamma, beta, (*params.bn_stats_frozen)[i].mean,
                                            (*params.bn_stats_frozen)[i].var, kBnEps);
            } else if (opts.train) {
                auto bn = detail::batch_norm_train(h, gamma, beta, kBnEps);
                h = bn.out;
                // Unbiased variance feeds the running estimate when possible.
                const double unbias = batch > 1 ? static_cast<double>(batch) /
                                                      static_cast<double>(batch - 1)
                                                : 1.0;
                Tensor& rmean = params.bn_stats[i].mean;
                Tensor& rvar = params.bn_stats[i].var;
                for (std::size_t j = 0; j < rmean.size(); ++j) {
                    rmean.at(j) = (1.0 - kBnMomentum) * rmean.at(j) +
                                  kBnMomentum * bn.batch_mean[j];
                    rvar.at(j) = (1.0 - kBnMomentum) * rvar.at(j) +
                                 kBnMomentum * bn.batch_var[j] * unbias;
                }
            } else {
                h = detail::batch_norm_eval(h, gamma, beta, params.bn_stats[i].mean,
                                            params.bn_stats[i].var, kBnEps);
            }
        }
        h = relu(h);
    }
    Tensor w2 = track("theta2.weight", params.head.weight);
    Tensor b2 = track("theta2.bias", params.head.bias);
    return add(matmul(h, w2), b2);
}

/// Folds the low-rank factors into the stored weights (W <- W + B*A) and
/// drops the branch, so Base-mode forwards reproduce LoRa-mode logits.
inline ParamSet merge_lora(const ParamSet& params) {
    if (!params.lora) throw ConfigError("merge_lora requires LoRA factors");
    ParamSet merged = params.clone();
    for (std::size_t i = 0; i < merged.fe.size(); ++i) {
        Tensor product = matmul((*merged.lora)[i].B, (*merged.lora)[i].A);
        Tensor& w = merged.fe[i].weight;
        for (std::size_t k = 0; k < w.size(); ++k) w.at(k) += product.at(k);
    }
    merged.lora.reset();
    return merged;
}

/// Ratio of low-rank branch parameters to the adapted weight parameters.
inline double param_ratio(const std::vector<std::pair<std::size_t, std::size_t>>& layer_shapes,
                          std::size_t rank) {
    std::size_t lora_params = 0;
    std::size_t fe_params = 0;
    for (auto [in, out] : layer_shapes) {
        lora_params += rank * (in + out);
        fe_params += in * out;
    }
    if (fe_params == 0) throw ConfigError("param_ratio requires a non-empty layer list");
    return static_cast<double>(lora_params) / static_cast<double>(fe_params);
}

inline double param_ratio(const ModelSpec& spec, const LoRaConfig& cfg) {
    spec.validate();
    return param_ratio(spec.fe_layer_shapes(), cfg.rank);
}

}  // namespace autolora
