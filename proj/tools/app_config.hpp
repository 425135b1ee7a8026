#pragma once

// Resolution of config files and command-line overrides into the typed
// configuration the library consumes, plus the manifest materialization.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autolora/data.hpp"
#include "autolora/trainer.hpp"
#include "config_file.hpp"

namespace autolora::cli {

inline constexpr const char* kToolVersion = "0.1.0";

struct DataConfig {
    std::string kind = "rings";  // blobs | rings | moons | csv | idx
    std::size_t n = 2500;
    std::size_t dims = 8;
    std::size_t classes = 3;
    double margin = 0.35;
    double noise = 0.04;
    std::uint64_t gen_seed = 4321;
    std::string path;    // csv
    bool header = false;
    std::string images;  // idx
    std::string labels;
    double val_fraction = 0.05;
    double test_fraction = 0.2;
};

struct PretrainConfig {
    std::string kind = "blobs";
    std::size_t n = 4000;
    std::size_t classes = 5;
    double margin = 0.8;
    double noise = 0.06;
    std::uint64_t gen_seed = 1234;
    int epochs = 10;
    double lr = 0.05;
    double weight_decay = 1e-4;
    bool adversarial = false;
    AttackConfig attack;  // pre-training budget
};

struct AppConfig {
    ModelSpec model;
    DataConfig data;
    PretrainConfig pretrain;
    TrainConfig train;
    std::vector<std::uint64_t> seeds = {0};
};

inline AppConfig default_app_config() {
    AppConfig app;
    app.model.input_dim = 8;
    app.model.hidden_dims = {32, 32};
    app.model.feature_dim = 16;
    app.model.num_classes = 3;
    app.model.use_batchnorm = true;
    app.data.dims = 8;
    app.pretrain.attack.epsilon = 4.0 / 255.0;
    app.pretrain.attack.step_size = 1.0 / 255.0;
    app.train.model = app.model;
    return app;
}

inline AppConfig resolve_config(const std::optional<std::filesystem::path>& config_path) {
    AppConfig app = default_app_config();
    if (!config_path) return app;
    ConfigFile file = ConfigFile::load(*config_path);

    app.data.kind = file.get_string("data.kind", app.data.kind);
    app.data.n = static_cast<std::size_t>(file.get_int("data.n", static_cast<std::int64_t>(app.data.n)));
    app.data.dims = static_cast<std::size_t>(file.get_int("data.dims", static_cast<std::int64_t>(app.data.dims)));
    app.data.classes = static_cast<std::size_t>(file.get_int("data.classes", static_cast<std::int64_t>(app.data.classes)));
    app.data.margin = file.get_number("data.margin", app.data.margin);
    app.data.noise = file.get_number("data.noise", app.data.noise);
    app.data.gen_seed = static_cast<std::uint64_t>(file.get_int("data.seed", static_cast<std::int64_t>(app.data.gen_seed)));
    app.data.path = file.get_string("data.path", app.data.path);
    app.data.header = file.get_flag("data.header", app.data.header);
    app.data.images = file.get_string("data.images", app.data.images);
    app.data.labels = file.get_string("data.labels", app.data.labels);
    app.data.val_fraction = file.get_number("data.val_fraction", app.data.val_fraction);
    app.data.test_fraction = file.get_number("data.test_fraction", app.data.test_fraction);

    app.model.input_dim = static_cast<std::size_t>(file.get_int("model.input_dim", static_cast<std::int64_t>(app.data.dims)));
    app.model.hidden_dims = file.get_sizes("model.hidden_dims", app.model.hidden_dims);
    app.model.feature_dim = static_cast<std::size_t>(file.get_int("model.feature_dim", static_cast<std::int64_t>(app.model.feature_dim)));
    app.model.num_classes = static_cast<std::size_t>(file.get_int("model.num_classes", static_cast<std::int64_t>(app.data.classes)));
    app.model.use_batchnorm = file.get_flag("model.batchnorm", app.model.use_batchnorm);

    app.train.method = method_from_string(file.get_string("method.name", "autolora"));
    if (file.has("method.beta")) app.train.beta = file.get_number("method.beta", 0.0);
    if (file.has("method.gamma")) app.train.gamma = file.get_number("method.gamma", 0.0);
    app.train.kl_teacher_grad = file.get_flag("method.kl_teacher_grad", app.train.kl_teacher_grad);
    const std::string kl_dir = file.get_string("method.kl_direction", "nat_to_adv");
    if (kl_dir == "nat_to_adv") {
        app.train.kl_dir = KlDirection::kNatToAdv;
    } else if (kl_dir == "adv_to_nat") {
        app.train.kl_dir = KlDirection::kAdvToNat;
    } else {
        throw ConfigError(file.path() + ": key method.kl_direction: unknown value '" + kl_dir + "'");
    }

    app.train.attack.epsilon = file.get_number("attack.epsilon", app.train.attack.epsilon);
    app.train.attack.step_size = file.get_number("attack.step_size", app.train.attack.step_size);
    app.train.attack.steps = static_cast<int>(file.get_int("attack.steps", app.train.attack.steps));
    app.train.attack.random_start = file.get_flag("attack.random_start", app.train.attack.random_start);
    app.train.attack.box_low = file.get_number("attack.box_low", app.train.attack.box_low);
    app.train.attack.box_high = file.get_number("attack.box_high", app.train.attack.box_high);
    app.train.eval_attack = app.train.attack;
    app.train.eval_attack.epsilon = file.get_number("eval_attack.epsilon", app.train.eval_attack.epsilon);
    app.train.eval_attack.step_size = file.get_number("eval_attack.step_size", app.train.eval_attack.step_size);
    app.train.eval_attack.steps = static_cast<int>(file.get_int("eval_attack.steps", app.train.eval_attack.steps));
    app.train.eval_attack.random_start = file.get_flag("eval_attack.random_start", app.train.eval_attack.random_start);

    app.train.max_epochs = static_cast<int>(file.get_int("train.epochs", app.train.max_epochs));
    app.train.batch_size = static_cast<std::size_t>(file.get_int("train.batch_size", static_cast<std::int64_t>(app.train.batch_size)));
    app.train.weight_decay = file.get_number("train.weight_decay", app.train.weight_decay);
    app.train.fixed_lr = file.get_number("train.lr", app.train.fixed_lr);
    app.train.log_gs = file.get_flag("train.log_gs", app.train.log_gs);
    app.train.disentangle_check_every = static_cast<int>(
        file.get_int("train.disentangle_check_every", app.train.disentangle_check_every));

    app.train.lora.rank = static_cast<std::size_t>(file.get_int("lora.rank", static_cast<std::int64_t>(app.train.lora.rank)));
    app.train.lora.init_std = file.get_number("lora.init_std", app.train.lora.init_std);

    app.train.lr.eta0 = file.get_number("scheduler.eta0", app.train.lr.eta0);
    app.train.lr.checkpoint_interval = static_cast<int>(
        file.get_int("scheduler.interval", app.train.lr.checkpoint_interval));
    app.train.lr.min_eta = file.get_number("scheduler.min_eta", app.train.lr.min_eta);
    app.train.lr.cond1_fraction = file.get_number("scheduler.cond1_fraction", app.train.lr.cond1_fraction);
    const std::string cond1 = file.get_string("scheduler.cond1_mode", "paper");
    if (cond1 == "paper") {
        app.train.lr.cond1_mode = Cond1Mode::kPaper;
    } else if (cond1 == "improvement") {
        app.train.lr.cond1_mode = Cond1Mode::kImprovement;
    } else {
        throw ConfigError(file.path() + ": key scheduler.cond1_mode: unknown value '" + cond1 + "'");
    }
    app.train.use_lr_scheduler_for_baselines =
        file.get_flag("scheduler.baseline_auto_lr", app.train.use_lr_scheduler_for_baselines);
    app.train.scalars.alpha = file.get_number("scheduler.alpha", app.train.scalars.alpha);
    app.train.scalars.lambda2_max = file.get_number("scheduler.lambda2_max", app.train.scalars.lambda2_max);
    app.train.scalars.sa_subsample = file.get_number("scheduler.sa_subsample", app.train.scalars.sa_subsample);

    app.pretrain.kind = file.get_string("pretrain.kind", app.pretrain.kind);
    app.pretrain.n = static_cast<std::size_t>(file.get_int("pretrain.n", static_cast<std::int64_t>(app.pretrain.n)));
    app.pretrain.classes = static_cast<std::size_t>(file.get_int("pretrain.classes", static_cast<std::int64_t>(app.pretrain.classes)));
    app.pretrain.margin = file.get_number("pretrain.margin", app.pretrain.margin);
    app.pretrain.noise = file.get_number("pretrain.noise", app.pretrain.noise);
    app.pretrain.gen_seed = static_cast<std::uint64_t>(file.get_int("pretrain.seed", static_cast<std::int64_t>(app.pretrain.gen_seed)));
    app.pretrain.epochs = static_cast<int>(file.get_int("pretrain.epochs", app.pretrain.epochs));
    app.pretrain.lr = file.get_number("pretrain.lr", app.pretrain.lr);
    app.pretrain.weight_decay = file.get_number("pretrain.weight_decay", app.pretrain.weight_decay);
    app.pretrain.adversarial = file.get_flag("pretrain.adversarial", app.pretrain.adversarial);
    app.pretrain.attack.epsilon = file.get_number("pretrain.epsilon", app.pretrain.attack.epsilon);
    app.pretrain.attack.step_size = file.get_number("pretrain.step_size", app.pretrain.attack.step_size);
    app.pretrain.attack.steps = static_cast<int>(file.get_int("pretrain.steps", app.pretrain.attack.steps));

    const std::string seeds = file.get_string("train.seed", "");
    if (!seeds.empty()) {
        app.seeds.clear();
        std::stringstream ss(seeds);
        std::string field;
        while (std::getline(ss, field, ',')) {
            app.seeds.push_back(static_cast<std::uint64_t>(std::stoull(detail::trim(field))));
        }
    }

    file.finish();
    app.train.model = app.model;
    return app;
}

/// Loads or generates the dataset the config describes.
inline Dataset resolve_dataset(const DataConfig& cfg) {
    if (cfg.kind == "csv") {
        if (cfg.path.empty()) throw ConfigError("data.kind = csv requires data.path");
        return load_csv(cfg.path, cfg.dims, cfg.classes, cfg.header);
    }
    if (cfg.kind == "idx") {
        if (cfg.images.empty() || cfg.labels.empty()) {
            throw ConfigError("data.kind = idx requires data.images and data.labels");
        }
        return load_idx(cfg.images, cfg.labels, cfg.classes);
    }
    return make_synthetic(synthetic_kind_from_string(cfg.kind), cfg.n, cfg.dims, cfg.classes,
                          cfg.margin, cfg.noise, cfg.gen_seed);
}

inline Dataset resolve_pretrain_dataset(const PretrainConfig& cfg, std::size_t dims) {
    return make_synthetic(synthetic_kind_from_string(cfg.kind), cfg.n, dims, cfg.classes,
                          cfg.margin, cfg.noise, cfg.gen_seed);
}

inline std::string fnv1a64_hex(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "missing";
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    char c;
    while (in.get(c)) {
        hash ^= static_cast<unsigned char>(c);
        hash *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

inline nlohmann::json attack_to_json(const AttackConfig& cfg) {
    return {{"epsilon", cfg.epsilon},
            {"step_size", cfg.step_size},
            {"steps", cfg.steps},
            {"random_start", cfg.random_start},
            {"box", {cfg.box_low, cfg.box_high}}};
}

inline nlohmann::json app_config_to_json(const AppConfig& app) {
    nlohmann::json model{{"input_dim", app.model.input_dim},
                         {"hidden_dims", app.model.hidden_dims},
                         {"feature_dim", app.model.feature_dim},
                         {"num_classes", app.model.num_classes},
                         {"batchnorm", app.model.use_batchnorm}};
    nlohmann::json data{{"kind", app.data.kind},
                        {"n", app.data.n},
                        {"dims", app.data.dims},
                        {"classes", app.data.classes},
                        {"margin", app.data.margin},
                        {"noise", app.data.noise},
                        {"seed", app.data.gen_seed},
                        {"path", app.data.path},
                        {"header", app.data.header},
                        {"val_fraction", app.data.val_fraction},
                        {"test_fraction", app.data.test_fraction}};
    nlohmann::json method{{"name", method_name(app.train.method)},
                          {"kl_teacher_grad", app.train.kl_teacher_grad},
                          {"kl_direction", app.train.kl_dir == KlDirection::kNatToAdv
                                               ? "nat_to_adv"
                                               : "adv_to_nat"}};
    if (app.train.beta) method["beta"] = *app.train.beta;
    if (app.train.gamma) method["gamma"] = *app.train.gamma;
    nlohmann::json scheduler{{"eta0", app.train.lr.eta0},
                             {"interval", app.train.lr.checkpoint_interval},
                             {"min_eta", app.train.lr.min_eta},
                             {"cond1_fraction", app.train.lr.cond1_fraction},
                             {"cond1_mode", app.train.lr.cond1_mode == Cond1Mode::kPaper
                                                ? "paper"
                                                : "improvement"},
                             {"baseline_auto_lr", app.train.use_lr_scheduler_for_baselines},
                             {"alpha", app.train.scalars.alpha},
                             {"lambda2_max", app.train.scalars.lambda2_max},
                             {"sa_subsample", app.train.scalars.sa_subsample}};
    nlohmann::json train{{"epochs", app.train.max_epochs},
                         {"batch_size", app.train.batch_size},
                         {"weight_decay", app.train.weight_decay},
                         {"lr", app.train.fixed_lr},
                         {"log_gs", app.train.log_gs},
                         {"disentangle_check_every", app.train.disentangle_check_every}};
    nlohmann::json pretrain{{"kind", app.pretrain.kind},
                            {"n", app.pretrain.n},
                            {"classes", app.pretrain.classes},
                            {"margin", app.pretrain.margin},
                            {"noise", app.pretrain.noise},
                            {"seed", app.pretrain.gen_seed},
                            {"epochs", app.pretrain.epochs},
                            {"lr", app.pretrain.lr},
                            {"weight_decay", app.pretrain.weight_decay},
                            {"adversarial", app.pretrain.adversarial},
                            {"attack", attack_to_json(app.pretrain.attack)}};
    return {{"model", model},
            {"data", data},
            {"method", method},
            {"attack", attack_to_json(app.train.attack)},
            {"eval_attack", attack_to_json(app.train.eval_attack)},
            {"scheduler", scheduler},
            {"train", train},
            {"lora", {{"rank", app.train.lora.rank}, {"init_std", app.train.lora.init_std}}},
            {"pretrain", pretrain},
            {"seeds", app.seeds}};
}

}  // namespace autolora::cli
