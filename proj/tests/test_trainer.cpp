#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <random>

#include "autolora/run_io.hpp"
#include "autolora/trainer.hpp"

using namespace autolora;

namespace {

ModelSpec bench_spec(std::size_t classes = 3) {
    ModelSpec spec;
    spec.input_dim = 4;
    spec.hidden_dims = {12};
    spec.feature_dim = 8;
    spec.num_classes = classes;
    spec.use_batchnorm = true;
    return spec;
}

AttackConfig bench_attack(int steps = 3) {
    AttackConfig cfg;
    cfg.epsilon = 8.0 / 255.0;
    cfg.step_size = 2.0 / 255.0;
    cfg.steps = steps;
    return cfg;
}

bool params_bitwise_equal(ParamSet& a, ParamSet& b) {
    bool equal = true;
    a.for_each_named([&](const std::string& name, Tensor& t) {
        Tensor* other = nullptr;
        b.for_each_named([&](const std::string& n2, Tensor& t2) {
            if (n2 == name) other = &t2;
        });
        if (other == nullptr || other->size() != t.size()) {
            equal = false;
            return;
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (std::bit_cast<std::uint64_t>(t.at(i)) !=
                std::bit_cast<std::uint64_t>(other->at(i))) {
                equal = false;
            }
        }
    });
    return equal;
}

TrainConfig bench_config(Method method, std::uint64_t seed, int epochs = 2) {
    TrainConfig cfg;
    cfg.method = method;
    cfg.model = bench_spec();
    cfg.max_epochs = epochs;
    cfg.batch_size = 64;
    cfg.attack = bench_attack();
    cfg.eval_attack = bench_attack();
    cfg.seed = seed;
    if (method != Method::kAutoLoRa) {
        cfg.beta = 6.0;
        cfg.gamma = 1.0;
    }
    cfg.lora.rank = 4;
    return cfg;
}

struct BenchData {
    ParamSet pretrained;
    DataSplit parts;
};

BenchData make_bench(std::uint64_t seed) {
    Dataset source = make_synthetic(SyntheticKind::kBlobs, 400, 4, 5, 0.8, 0.06, 1234);
    ParamSet fe = pretrain(bench_spec(5), source, 2, false, bench_attack(), 0.05, 1e-4, seed);
    Dataset target = make_synthetic(SyntheticKind::kRings, 500, 4, 3, 0.35, 0.04, 4321);
    SplitSpec split_spec;
    split_spec.val_fraction = 0.05;
    split_spec.test_fraction = 0.2;
    split_spec.shuffle_seed = seed;
    return BenchData{std::move(fe), split(target, split_spec)};
}

}  // namespace

TEST_CASE("sgd closed-form steps") {
    ModelSpec spec;
    spec.input_dim = 1;
    spec.hidden_dims = {1};
    spec.feature_dim = 1;
    spec.num_classes = 2;
    spec.use_batchnorm = false;
    ParamSet ps = ParamSet::init(spec, 0);
    ps.fe[0].weight = Tensor({1, 1}, {1.0});

    GradMap grads;
    ps.for_each_theta1([&](const std::string& name, Tensor& t) {
        grads.insert(name, Tensor(t.shape(), 0.0));
    });
    ps.for_each_theta2([&](const std::string& name, Tensor& t) {
        grads.insert(name, Tensor(t.shape(), 0.0));
    });

    SECTION("zero rate leaves parameters untouched") {
        ParamSet before = ps.clone();
        sgd_step(ps, grads, Method::kVanilla, 0.0, 0.1);
        CHECK(params_bitwise_equal(ps, before));
    }

    SECTION("plain gradient step") {
        GradMap g2 = grads;
        g2.insert("theta1.0.weight", Tensor({1, 1}, {1.0}));
        sgd_step(ps, g2, Method::kVanilla, 0.1, 0.0);
        CHECK(ps.fe[0].weight.at(0) == Catch::Approx(0.9).margin(1e-15));
    }

    SECTION("decay-only step") {
        sgd_step(ps, grads, Method::kVanilla, 1.0, 0.1);
        CHECK(ps.fe[0].weight.at(0) == Catch::Approx(0.9).margin(1e-15));
    }

    SECTION("biases are decay-free") {
        ps.fe[0].bias = Tensor({1}, {1.0});
        sgd_step(ps, grads, Method::kVanilla, 1.0, 0.1);
        CHECK(ps.fe[0].bias.at(0) == 1.0);
    }

    SECTION("missing gradient is a contract error") {
        GradMap incomplete;
        CHECK_THROWS_AS(sgd_step(ps, incomplete, Method::kVanilla, 0.1, 0.0), ContractError);
    }

    SECTION("statistics never move") {
        ModelSpec bn_spec = bench_spec();
        ParamSet with_bn = ParamSet::init(bn_spec, 3);
        with_bn.freeze_bn_stats();
        GradMap g;
        with_bn.for_each_theta1([&](const std::string& name, Tensor& t) {
            g.insert(name, Tensor(t.shape(), 1.0));
        });
        with_bn.for_each_theta2([&](const std::string& name, Tensor& t) {
            g.insert(name, Tensor(t.shape(), 1.0));
        });
        ParamSet before = with_bn.clone();
        sgd_step(with_bn, g, Method::kVanilla, 0.1, 0.0);
        for (std::size_t l = 0; l < with_bn.bn_stats.size(); ++l) {
            for (std::size_t i = 0; i < with_bn.bn_stats[l].mean.size(); ++i) {
                CHECK(with_bn.bn_stats[l].mean.at(i) == before.bn_stats[l].mean.at(i));
                CHECK(with_bn.bn_stats[l].var.at(i) == before.bn_stats[l].var.at(i));
            }
        }
    }
}

TEST_CASE("pretraining") {
    Dataset source = make_synthetic(SyntheticKind::kBlobs, 300, 4, 5, 0.8, 0.05, 55);

    SECTION("zero epochs returns the initialization with frozen stats") {
        ParamSet ps = pretrain(bench_spec(5), source, 0, false, bench_attack(), 0.05, 1e-4, 7);
        ParamSet fresh = ParamSet::init(bench_spec(5), derive_seed(7, 0));
        bool weights_equal = true;
        for (std::size_t l = 0; l < ps.fe.size(); ++l) {
            for (std::size_t i = 0; i < ps.fe[l].weight.size(); ++i) {
                if (ps.fe[l].weight.at(i) != fresh.fe[l].weight.at(i)) weights_equal = false;
            }
        }
        CHECK(weights_equal);
        CHECK(ps.bn_stats_frozen.has_value());
    }

    SECTION("adversarial pretraining with zero budget equals standard bit for bit") {
        AttackConfig degenerate = bench_attack();
        degenerate.epsilon = 0.0;
        ParamSet standard = pretrain(bench_spec(5), source, 2, false, degenerate, 0.05, 1e-4, 7);
        ParamSet adversarial = pretrain(bench_spec(5), source, 2, true, degenerate, 0.05, 1e-4, 7);
        CHECK(params_bitwise_equal(standard, adversarial));
    }

    SECTION("source accuracy beats chance") {
        ParamSet ps = pretrain(bench_spec(5), source, 6, false, bench_attack(), 0.05, 1e-4, 7);
        const double sa = standard_accuracy(ps, source, ForwardMode::kBase);
        CHECK(sa > 1.0 / 5.0 + 0.15);
    }
}

TEST_CASE("evaluation") {
    BenchData bench = make_bench(9);

    SECTION("zero budget makes robust equal standard accuracy") {
        AttackConfig degenerate = bench_attack();
        degenerate.epsilon = 0.0;
        auto [sa, ra] = evaluate(bench.pretrained, bench.parts.test, degenerate);
        CHECK(sa == ra);
    }

    SECTION("an untrained head scores near chance") {
        Dataset big = make_synthetic(SyntheticKind::kBlobs, 2000, 4, 4, 0.8, 0.05, 66);
        ParamSet ps = ParamSet::init(bench_spec(4), 77);
        const double sa = standard_accuracy(ps, big, ForwardMode::kBase);
        CHECK(sa >= 0.25 - 0.05);
        CHECK(sa <= 0.25 + 0.05);
    }

    SECTION("the attack can only reduce accuracy") {
        auto [sa, ra] = evaluate(bench.pretrained, bench.parts.test, bench_attack());
        CHECK(ra <= sa);
    }
}

TEST_CASE("a one-epoch run logs one row and covers every batch") {
    BenchData bench = make_bench(11);
    TrainConfig cfg = bench_config(Method::kVanilla, 11, 1);
    RunResult result = run(cfg, bench.pretrained, bench.parts);
    REQUIRE(result.log.size() == 1);
    const std::size_t n = bench.parts.train.size();
    CHECK(result.total_batches == (n + cfg.batch_size - 1) / cfg.batch_size);
    CHECK(result.status == RunStatus::kOk);
    CHECK(result.best_epoch == 0);
    // Baseline rows carry gradient similarity but no scheduler scalars.
    CHECK(result.log[0].gs.has_value());
    CHECK_FALSE(result.log[0].lambda1.has_value());
}

TEST_CASE("fixed seeds reproduce runs bit for bit") {
    for (Method method : {Method::kVanilla, Method::kAutoLoRa}) {
        BenchData bench = make_bench(13);
        TrainConfig cfg = bench_config(method, 13, 2);
        RunResult a = run(cfg, bench.pretrained, bench.parts);
        RunResult b = run(cfg, bench.pretrained, bench.parts);
        REQUIRE(a.log.size() == b.log.size());
        for (std::size_t e = 0; e < a.log.size(); ++e) {
            CHECK(std::bit_cast<std::uint64_t>(a.log[e].ra_val) ==
                  std::bit_cast<std::uint64_t>(b.log[e].ra_val));
            CHECK(std::bit_cast<std::uint64_t>(a.log[e].loss_total) ==
                  std::bit_cast<std::uint64_t>(b.log[e].loss_total));
            CHECK(std::bit_cast<std::uint64_t>(a.log[e].sa_train) ==
                  std::bit_cast<std::uint64_t>(b.log[e].sa_train));
        }
        CHECK(params_bitwise_equal(a.best_params, b.best_params));
        CHECK(save_checkpoint(a.best_params) == save_checkpoint(b.best_params));
    }
}

TEST_CASE("the disentangled run schedules scalars and logs no similarity") {
    BenchData bench = make_bench(17);
    TrainConfig cfg = bench_config(Method::kAutoLoRa, 17, 2);
    RunResult result = run(cfg, bench.pretrained, bench.parts);
    REQUIRE(result.log.size() == 2);
    for (const EpochLog& row : result.log) {
        REQUIRE(row.lambda1.has_value());
        REQUIRE(row.lambda2.has_value());
        CHECK(*row.lambda1 == Catch::Approx(1.0 - std::pow(row.sa_train, 1.0)).margin(1e-12));
        CHECK(*row.lambda2 == Catch::Approx(6.0 * std::pow(row.sa_train, 1.0)).margin(1e-12));
        CHECK_FALSE(row.gs.has_value());
    }
}

TEST_CASE("trainable parameter counts follow the method") {
    BenchData bench = make_bench(19);

    TrainConfig cfg = bench_config(Method::kAutoLoRa, 19, 1);
    RunResult result = run(cfg, bench.pretrained, bench.parts);
    REQUIRE(result.best_params.lora.has_value());
    std::size_t lora_params = 0;
    for (const auto& f : *result.best_params.lora) lora_params += f.A.size() + f.B.size();
    CHECK(lora_params == 4 * (4 + 12) + 4 * (12 + 8));

    TrainConfig vcfg = bench_config(Method::kVanilla, 19, 1);
    RunResult vres = run(vcfg, bench.pretrained, bench.parts);
    CHECK_FALSE(vres.best_params.lora.has_value());
}

TEST_CASE("best checkpoint matches the log maximum") {
    BenchData bench = make_bench(23);
    TrainConfig cfg = bench_config(Method::kVanilla, 23, 4);
    RunResult result = run(cfg, bench.pretrained, bench.parts);
    double max_ra = 0.0;
    for (const EpochLog& row : result.log) max_ra = std::max(max_ra, row.ra_val);
    CHECK(result.best_ra == max_ra);
    CHECK(result.log[static_cast<std::size_t>(result.best_epoch)].ra_val == max_ra);
}

TEST_CASE("a diverging run aborts with a diagnostic row") {
    // Without batch normalization an absurd rate blows the logits up to
    // overflow; with it the re-normalization masks the divergence.
    ModelSpec spec = bench_spec();
    spec.use_batchnorm = false;
    Dataset source = make_synthetic(SyntheticKind::kBlobs, 300, 4, 5, 0.8, 0.06, 31);
    ModelSpec src_spec = spec;
    src_spec.num_classes = 5;
    ParamSet fe = pretrain(src_spec, source, 1, false, bench_attack(), 0.05, 1e-4, 31);
    Dataset target = make_synthetic(SyntheticKind::kRings, 400, 4, 3, 0.35, 0.04, 32);
    DataSplit parts = split(target, SplitSpec{0.05, 0.2, 31});

    TrainConfig cfg = bench_config(Method::kVanilla, 31, 8);
    cfg.model = spec;
    cfg.fixed_lr = 1e8;
    RunResult result = run(cfg, fe, parts);
    CHECK(result.status == RunStatus::kNumericalAbort);
    REQUIRE(!result.log.empty());
    CHECK_FALSE(std::isfinite(result.log.back().loss_total));
}

TEST_CASE("config validation") {
    TrainConfig cfg = bench_config(Method::kVanilla, 0, 1);
    cfg.beta.reset();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = bench_config(Method::kTwins, 0, 1);
    cfg.gamma.reset();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = bench_config(Method::kAutoLoRa, 0, 1);
    cfg.max_epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("run log CSV renders optional fields as empty") {
    std::vector<EpochLog> log(2);
    log[0].epoch = 0;
    log[0].eta = 0.01;
    log[0].gs = 0.25;
    log[1].epoch = 1;
    log[1].lambda1 = 0.5;
    log[1].lambda2 = 3.0;
    const std::string csv = run_log_to_csv(log);
    CHECK(csv.find(kRunLogHeader) == 0);
    CHECK(csv.find("\n0,0.01") != std::string::npos);
    CHECK(csv.find(",,") != std::string::npos);
    // Exactly one header plus two rows.
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
