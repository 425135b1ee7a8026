#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cstdint>
#include <random>

#include "autolora/checkpoint.hpp"
#include "autolora/nn.hpp"
#include "test_support.hpp"

using namespace autolora;

namespace {

ModelSpec small_spec(bool batchnorm = true) {
    ModelSpec spec;
    spec.input_dim = 6;
    spec.hidden_dims = {10, 8};
    spec.feature_dim = 5;
    spec.num_classes = 3;
    spec.use_batchnorm = batchnorm;
    return spec;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a.at(i)) != std::bit_cast<std::uint64_t>(b.at(i))) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("at initialization the low-rank path reproduces the base path bitwise") {
    ParamSet ps = ParamSet::init(small_spec(), 17);
    ps.attach_lora(LoRaConfig{4, 0.01}, 18);
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = rand_uniform({3, 6}, rng);
        Tensor base = forward(ps, x, ForwardMode::kBase);
        Tensor lora = forward(ps, x, ForwardMode::kLoRa);
        CHECK(bitwise_equal(base, lora));
    }
}

TEST_CASE("low-rank mode sends no gradient to the extractor") {
    ParamSet ps = ParamSet::init(small_spec(), 23);
    ps.attach_lora(LoRaConfig{3, 0.05}, 24);
    // Move B off zero so the low-rank product is active.
    std::mt19937_64 rng(25);
    for (auto& f : *ps.lora) f.B = randn(f.B.shape(), rng, 0.1);

    Tensor x = rand_uniform({4, 6}, rng);
    Tape tape;
    Tensor logits = forward(ps, x, ForwardMode::kLoRa, ForwardOptions{true, &tape, true});
    Tensor loss = mean(logits);
    GradMap grads = tape.backward(loss).param_grads();

    for (const auto& [name, g] : grads) {
        if (name.rfind("theta1.", 0) == 0) {
            FAIL_CHECK("unexpected theta1 gradient entry: " << name);
        }
    }
    // B, A and the head do receive gradients.
    CHECK(grads.contains("lora.0.A"));
    CHECK(grads.contains("lora.0.B"));
    CHECK(grads.contains("theta2.weight"));
}

TEST_CASE("single-layer low-rank logits equal the dense (W + BA) composition") {
    ModelSpec spec;
    spec.input_dim = 4;
    spec.hidden_dims = {4};
    spec.feature_dim = 4;
    spec.num_classes = 2;
    spec.use_batchnorm = false;

    ParamSet ps = ParamSet::init(spec, 31);
    // Identity weights isolate the low-rank term.
    for (auto& layer : ps.fe) {
        layer.weight = Tensor({4, 4}, 0.0);
        for (std::size_t i = 0; i < 4; ++i) layer.weight.at(i, i) = 1.0;
        layer.bias = Tensor({4}, 0.0);
    }
    ps.attach_lora(LoRaConfig{1, 0.5}, 32);
    std::mt19937_64 rng(33);
    (*ps.lora)[0].B = randn({4, 1}, rng, 0.5);
    (*ps.lora)[1].B = Tensor({4, 1}, 0.0);

    Tensor x = rand_uniform({5, 4}, rng, 0.2, 0.8);
    Tensor lora_logits = forward(ps, x, ForwardMode::kLoRa);

    // Dense oracle: compose (W + B*A) per layer explicitly.
    Tensor w0 = ps.fe[0].weight.clone();
    Tensor ba = matmul((*ps.lora)[0].B, (*ps.lora)[0].A);
    for (std::size_t i = 0; i < w0.size(); ++i) w0.at(i) += ba.at(i);
    Tensor h = relu(matmul(x, w0));
    h = relu(matmul(h, ps.fe[1].weight));
    Tensor expected = add(matmul(h, ps.head.weight), ps.head.bias);

    REQUIRE(lora_logits.shape() == expected.shape());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(lora_logits.at(i) == Catch::Approx(expected.at(i)).margin(1e-12));
    }
}

TEST_CASE("merge_lora") {
    ParamSet ps = ParamSet::init(small_spec(), 41);
    ps.attach_lora(LoRaConfig{5, 0.02}, 42);
    std::mt19937_64 rng(43);

    SECTION("with zero B the merge is the identity on weights") {
        ParamSet merged = merge_lora(ps);
        for (std::size_t l = 0; l < ps.fe.size(); ++l) {
            CHECK(bitwise_equal(merged.fe[l].weight, ps.fe[l].weight));
        }
        CHECK_FALSE(merged.lora.has_value());
    }

    SECTION("full-rank factors merge to the dense product sum") {
        for (auto& f : *ps.lora) f.B = randn(f.B.shape(), rng, 0.2);
        ParamSet merged = merge_lora(ps);
        for (std::size_t l = 0; l < ps.fe.size(); ++l) {
            Tensor product = matmul((*ps.lora)[l].B, (*ps.lora)[l].A);
            for (std::size_t i = 0; i < product.size(); ++i) {
                CHECK(merged.fe[l].weight.at(i) ==
                      Catch::Approx(ps.fe[l].weight.at(i) + product.at(i)).margin(1e-15));
            }
        }
    }

    SECTION("merged base forward tracks the low-rank forward within 1e-10") {
        for (auto& f : *ps.lora) f.B = randn(f.B.shape(), rng, 0.2);
        ParamSet merged = merge_lora(ps);
        for (int trial = 0; trial < 50; ++trial) {
            Tensor x = rand_uniform({2, 6}, rng);
            Tensor via_lora = forward(ps, x, ForwardMode::kLoRa);
            Tensor via_merge = forward(merged, x, ForwardMode::kBase);
            for (std::size_t i = 0; i < via_lora.size(); ++i) {
                CHECK(std::abs(via_lora.at(i) - via_merge.at(i)) < 1e-10);
            }
        }
    }

    SECTION("merging twice is a configuration error") {
        ParamSet merged = merge_lora(ps);
        CHECK_THROWS_AS(merge_lora(merged), ConfigError);
    }
}

TEST_CASE("missing branch state raises configuration errors") {
    ParamSet ps = ParamSet::init(small_spec(), 51);
    Tensor x({1, 6}, 0.5);
    CHECK_THROWS_AS(forward(ps, x, ForwardMode::kLoRa), ConfigError);
    CHECK_THROWS_AS(forward(ps, x, ForwardMode::kFrozenBn), ConfigError);
    CHECK_THROWS_AS(merge_lora(ps), ConfigError);
}

TEST_CASE("param_ratio closed forms") {
    CHECK(param_ratio({{100, 100}}, 8) == Catch::Approx(0.16).margin(1e-15));
    CHECK(param_ratio({{100, 100}}, 0) == 0.0);

    ModelSpec spec = small_spec();
    const double expected =
        double(8 * (6 + 10) + 8 * (10 + 8) + 8 * (8 + 5)) / double(6 * 10 + 10 * 8 + 8 * 5);
    CHECK(param_ratio(spec, LoRaConfig{8, 0.01}) == Catch::Approx(expected).margin(1e-15));
}

TEST_CASE("frozen statistics stay bit-identical through training-mode forwards") {
    ParamSet ps = ParamSet::init(small_spec(), 61);
    ps.freeze_bn_stats();
    std::vector<Tensor> before;
    for (const auto& s : *ps.bn_stats_frozen) {
        before.push_back(s.mean.clone());
        before.push_back(s.var.clone());
    }
    std::mt19937_64 rng(62);
    for (int step = 0; step < 5; ++step) {
        Tensor x = rand_uniform({8, 6}, rng);
        (void)forward(ps, x, ForwardMode::kBase, ForwardOptions{true, nullptr, false});
        (void)forward(ps, x, ForwardMode::kFrozenBn, ForwardOptions{true, nullptr, false});
    }
    std::size_t k = 0;
    for (const auto& s : *ps.bn_stats_frozen) {
        CHECK(bitwise_equal(before[k++], s.mean));
        CHECK(bitwise_equal(before[k++], s.var));
    }
    // The live statistics did move.
    bool moved = false;
    for (std::size_t l = 0; l < ps.bn_stats.size(); ++l) {
        if (!bitwise_equal(ps.bn_stats[l].mean, (*ps.bn_stats_frozen)[l].mean)) moved = true;
    }
    CHECK(moved);
}

TEST_CASE("frozen-statistics forwards share gradients with the base branch") {
    ParamSet ps = ParamSet::init(small_spec(), 71);
    ps.freeze_bn_stats();
    std::mt19937_64 rng(72);
    Tensor x = rand_uniform({4, 6}, rng);

    Tape tape;
    ForwardOptions opts{false, &tape, true};
    Tensor frozen_logits = forward(ps, x, ForwardMode::kFrozenBn, opts);
    Tensor base_logits = forward(ps, x, ForwardMode::kBase, opts);
    Tensor root = add(mean(frozen_logits), mean(base_logits));
    GradMap grads = tape.backward(root).param_grads();
    // One entry per parameter, not per branch.
    std::size_t theta1_entries = 0;
    for (const auto& [name, g] : grads) {
        if (name.rfind("theta1.", 0) == 0) ++theta1_entries;
    }
    CHECK(theta1_entries == ps.fe.size() * 4);
}

TEST_CASE("batch-norm training forward matches finite differences") {
    ParamSet ps = ParamSet::init(small_spec(), 81);
    std::mt19937_64 rng(82);
    Tensor x = rand_uniform({5, 6}, rng);
    const std::vector<int> y = {0, 1, 2, 1, 0};

    auto loss_value = [&](ParamSet& p) {
        ParamSet scratch = p.clone();
        Tensor logits = forward(scratch, x, ForwardMode::kBase, ForwardOptions{true, nullptr, false});
        return nll(log_softmax(logits), y).item();
    };

    ParamSet work = ps.clone();
    Tape tape;
    Tensor logits = forward(work, x, ForwardMode::kBase, ForwardOptions{true, &tape, true});
    GradMap grads = tape.backward(nll(log_softmax(logits), y)).param_grads();

    auto coords = testsupport::trainable_coords(work, false);
    std::mt19937_64 pick(83);
    std::uniform_int_distribution<std::size_t> dist(0, coords.size() - 1);
    for (int k = 0; k < 60; ++k) {
        const auto& c = coords[dist(pick)];
        Tensor* t = testsupport::tensor_by_name(work, c.name);
        REQUIRE(t != nullptr);
        const double fd = testsupport::central_difference(
            *t, c.index, [&] { return loss_value(work); });
        CHECK(testsupport::grad_close(grads.at(c.name).at(c.index), fd));
    }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    ParamSet ps = ParamSet::init(small_spec(), 91);
    ps.attach_lora(LoRaConfig{4, 0.03}, 92);
    ps.freeze_bn_stats();
    std::mt19937_64 rng(93);
    // Perturb running statistics so they differ from the frozen copy.
    Tensor x = rand_uniform({16, 6}, rng);
    (void)forward(ps, x, ForwardMode::kBase, ForwardOptions{true, nullptr, false});

    const std::vector<std::byte> bytes = save_checkpoint(ps);
    ParamSet loaded = load_checkpoint(bytes);

    CHECK(loaded.spec.input_dim == ps.spec.input_dim);
    CHECK(loaded.spec.hidden_dims == ps.spec.hidden_dims);
    CHECK(loaded.spec.num_classes == ps.spec.num_classes);
    bool all_equal = true;
    ps.for_each_named([&](const std::string& name, Tensor& t) {
        Tensor* other = testsupport::tensor_by_name(loaded, name);
        if (other == nullptr || !bitwise_equal(t, *other)) all_equal = false;
    });
    CHECK(all_equal);

    SECTION("truncation is a format error") {
        for (std::size_t cut : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
            std::vector<std::byte> clipped(bytes.begin(),
                                           bytes.begin() + static_cast<std::ptrdiff_t>(cut));
            CHECK_THROWS_AS(load_checkpoint(clipped), FormatError);
        }
    }

    SECTION("corrupt magic is a format error") {
        std::vector<std::byte> bad = bytes;
        bad[0] = std::byte{'X'};
        CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
    }

    SECTION("a merged model loads as a plain base-mode model") {
        ParamSet merged = merge_lora(ps);
        ParamSet reloaded = load_checkpoint(save_checkpoint(merged));
        CHECK_FALSE(reloaded.lora.has_value());
        Tensor probe = rand_uniform({2, 6}, rng);
        CHECK(bitwise_equal(forward(merged, probe, ForwardMode::kBase),
                            forward(reloaded, probe, ForwardMode::kBase)));
    }
}

TEST_CASE("lora rank validation") {
    ParamSet ps = ParamSet::init(small_spec(), 95);
    CHECK_THROWS_AS(ps.attach_lora(LoRaConfig{0, 0.01}, 0), ConfigError);
    CHECK_THROWS_AS(ps.attach_lora(LoRaConfig{6, 0.01}, 0), ConfigError);  // > min(8,5)
    CHECK_THROWS_AS(ps.attach_lora(LoRaConfig{5, -1.0}, 0), ConfigError);
    ps.attach_lora(LoRaConfig{5, 0.01}, 0);  // min(in,out) over layers is 5
    CHECK(ps.lora.has_value());
}

TEST_CASE("model spec validation") {
    ModelSpec bad = small_spec();
    bad.hidden_dims.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_spec();
    bad.num_classes = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_spec();
    bad.input_dim = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
