#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pixcap/tensor.hpp"
#include "test_util.hpp"

using namespace pixcap;
using Td = Tensor<double>;
using Tf = Tensor<float>;

TEST_CASE("matmul identity cases") {
    auto a = Td::from_data({2, 2}, {1, 2, 3, 4});
    auto i2 = Td::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(matmul(a, i2).data() == std::vector<double>{1, 2, 3, 4});

    auto b = Td::from_data({2, 1}, {2, 3});
    CHECK(matmul(i2, b).data() == std::vector<double>{2, 3});
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Td::zeros({2, 3});
    auto b = Td::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches central differences") {
    std::mt19937_64 rng(3);
    auto a = Td::randn({3, 4}, rng, 1.0, true);
    auto b = Td::randn({4, 2}, rng, 1.0, true);
    backward(sum(matmul(a, b)));
    auto forward = [&]() { return sum(matmul(a, b)).item(); };
    CHECK(testutil::max_rel_grad_error(a, forward) < 1e-4);
    CHECK(testutil::max_rel_grad_error(b, forward) < 1e-4);
}

TEST_CASE("softmax basics") {
    auto two = softmax(Td::from_data({2}, {0, 0}));
    CHECK(two.data()[0] == Catch::Approx(0.5));
    CHECK(two.data()[1] == Catch::Approx(0.5));

    auto big = softmax(Td::from_data({3}, {1000, 1000, 1000}));
    for (double v : big.data()) {
        CHECK(std::isfinite(v));
        CHECK(v == Catch::Approx(1.0 / 3));
    }

    // direct exp-normalize oracle at 64-bit
    auto s = softmax(Td::from_data({3}, {1, 2, 3}));
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(s.data()[static_cast<size_t>(i)] == Catch::Approx(std::exp(i + 1.0) / z));
}

TEST_CASE("softmax outputs stay on the probability simplex") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = Td::randn({4, 7}, rng, 5.0);
        auto y = softmax(x);
        for (int r = 0; r < 4; ++r) {
            double sum = 0;
            for (int c = 0; c < 7; ++c) {
                const double v = y.data()[static_cast<size_t>(r * 7 + c)];
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm closed forms") {
    auto g1 = Td::full({3}, 1.0);
    auto b0 = Td::zeros({3});
    auto constant = layer_norm(Td::from_data({3}, {5, 5, 5}), g1, b0, 1e-5);
    for (double v : constant.data()) CHECK(v == Catch::Approx(0.0).margin(1e-12));

    auto g2 = Td::full({2}, 1.0);
    auto z2 = Td::zeros({2});
    auto two = layer_norm(Td::from_data({2}, {1, 3}), g2, z2, 1e-12);
    CHECK(two.data()[0] == Catch::Approx(-1.0).epsilon(1e-5));
    CHECK(two.data()[1] == Catch::Approx(1.0).epsilon(1e-5));

    auto g0 = Td::zeros({3});
    auto b7 = Td::full({3}, 7.0);
    auto dom = layer_norm(Td::from_data({2, 3}, {1, 2, 3, 4, 5, 6}), g0, b7, 1e-5);
    for (double v : dom.data()) CHECK(v == Catch::Approx(7.0));

    CHECK_THROWS_AS(layer_norm(Td::zeros({3}), g1, b0, 0.0), ParamError);
    CHECK_THROWS_AS(layer_norm(Td::zeros({3}), g1, b0, -1.0), ParamError);
}

TEST_CASE("backward closed forms") {
    std::mt19937_64 rng(5);
    auto x = Td::randn({6}, rng, 1.0, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == Catch::Approx(1.0));

    auto y = Td::randn({5}, rng, 1.0, true);
    backward(sum(mul(y, y)));
    for (size_t i = 0; i < 5; ++i) CHECK(y.grad()[i] == Catch::Approx(2 * y.data()[i]));
}

TEST_CASE("backward requires scalar loss") {
    auto x = Td::zeros({2, 2}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ContractError);
}

TEST_CASE("fan-out accumulates both branch gradients") {
    std::mt19937_64 rng(7);
    auto x = Td::randn({4}, rng, 1.0, true);
    // two consumers of the same tensor
    auto loss = sum(add(mul(x, x), scale(x, 3.0)));
    backward(loss);
    auto forward = [&]() { return sum(add(mul(x, x), scale(x, 3.0))).item(); };
    CHECK(testutil::max_rel_grad_error(x, forward) < 1e-6);
    // and the analytic value: 2x + 3
    for (size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == Catch::Approx(2 * x.data()[i] + 3));
}

TEST_CASE("computation record visits each node exactly once") {
    auto a = Td::from_data({2}, {1.0, 2.0}, true);
    auto b = mul(a, a);
    auto c = scale(a, 2.0);
    auto d = sum(add(b, c));  // diamond: a feeds b and c
    auto rec = ComputationRecord<double>::from(d);
    // nodes: a, b, c, add, sum
    CHECK(rec.size() == 5);
    rec.backward();
    for (size_t i = 0; i < 2; ++i) CHECK(a.grad()[i] == Catch::Approx(2 * a.data()[i] + 2));
}

TEST_CASE("gradient check across every differentiable op") {
    std::mt19937_64 rng(23);
    auto check = [&](const char* name, Td& input, const std::function<Tensor<double>()>& f) {
        INFO(name);
        input.zero_grad();
        backward(f());
        auto forward = [&]() { return f().item(); };
        CHECK(testutil::max_rel_grad_error(input, forward) < 1e-4);
    };

    {
        auto x = Td::randn({3, 4}, rng, 1.0, true);
        auto y = Td::randn({3, 4}, rng, 1.0, true);
        check("add", x, [&] { return sum(mul(add(x, y), add(x, y))); });
        check("sub", x, [&] { return sum(mul(sub(x, y), sub(x, y))); });
        check("mul", y, [&] { return sum(mul(x, y)); });
        check("scale", x, [&] { return sum(scale(x, -1.7)); });
    }
    {
        auto x = Td::randn({2, 3}, rng, 1.0, true);
        auto bias = Td::randn({3}, rng, 1.0, true);
        check("add suffix broadcast (lhs)", x, [&] { return sum(mul(add(x, bias), add(x, bias))); });
        check("add suffix broadcast (bias)", bias, [&] { return sum(mul(add(x, bias), add(x, bias))); });
    }
    {
        auto a = Td::randn({2, 3, 4}, rng, 1.0, true);
        auto b = Td::randn({2, 4, 2}, rng, 1.0, true);
        check("batched matmul lhs", a, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
        check("batched matmul rhs", b, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
    }
    {
        auto x = Td::randn({2, 3, 4}, rng, 1.0, true);
        check("transpose", x, [&] { return sum(mul(transpose(x, {2, 0, 1}), transpose(x, {2, 0, 1}))); });
        check("reshape", x, [&] { return sum(mul(reshape(x, {6, 4}), reshape(x, {6, 4}))); });
        check("slice0", x, [&] { return sum(mul(slice0(x, 1, 2), slice0(x, 1, 2))); });
    }
    {
        auto x = Td::randn({2, 3}, rng, 1.0, true);
        auto y = Td::randn({1, 3}, rng, 1.0, true);
        check("concat0", x, [&] { return sum(mul(concat0<double>({x, y}), concat0<double>({x, y}))); });
        check("gelu", x, [&] { return sum(mul(gelu(x), x)); });
        check("softmax", x, [&] { return sum(mul(softmax(x), x)); });
        check("log_softmax", x, [&] { return sum(mul(log_softmax(x), x)); });
    }
    {
        auto scores = Td::randn({2, 3, 3}, rng, 1.0, true);
        std::vector<uint8_t> mask = {1, 0, 0, 1, 1, 0, 1, 1, 1};
        check("masked_softmax", scores,
              [&] { return sum(mul(masked_softmax(scores, mask), scores)); });
    }
    {
        auto x = Td::randn({3, 5}, rng, 1.0, true);
        auto g = Td::randn({5}, rng, 0.5, true);
        auto b = Td::randn({5}, rng, 0.5, true);
        auto f = [&] { return sum(mul(layer_norm(x, g, b, 1e-5), x)); };
        check("layer_norm x", x, f);
        check("layer_norm gamma", g, f);
        check("layer_norm beta", b, f);
    }
    {
        auto table = Td::randn({6, 4}, rng, 1.0, true);
        std::vector<int> ids = {1, 3, 3, 0};
        check("embedding", table, [&] { return sum(mul(embedding(table, ids), embedding(table, ids))); });
    }
}

TEST_CASE("embedding id range checked") {
    auto table = Td::zeros({4, 2});
    CHECK_THROWS_AS(embedding(table, std::vector<int>{4}), InputError);
    CHECK_THROWS_AS(embedding(table, std::vector<int>{-1}), InputError);
}

TEST_CASE("shape errors on malformed op inputs") {
    CHECK_THROWS_AS(reshape(Td::zeros({2, 3}), {4, 2}), ShapeError);
    CHECK_THROWS_AS(slice0(Td::zeros({3, 2}), 2, 2), ShapeError);
    CHECK_THROWS_AS(concat0<double>({Td::zeros({2, 3}), Td::zeros({2, 4})}), ShapeError);
    CHECK_THROWS_AS(add(Td::zeros({2, 3}), Td::zeros({2})), ShapeError);
    CHECK_THROWS_AS(mul(Td::zeros({2, 3}), Td::zeros({3, 2})), ShapeError);
}

TEST_CASE("forward determinism is bit exact") {
    std::mt19937_64 rng(29);
    auto x = Tf::randn({4, 8}, rng, 1.0);
    auto w = Tf::randn({8, 8}, rng, 1.0);
    auto g = Tf::full({8}, 1.0f);
    auto b = Tf::zeros({8});
    auto run = [&] { return layer_norm(gelu(matmul(x, w)), g, b, 1e-5f).data(); };
    CHECK(run() == run());
}

TEST_CASE("debug finite checks flag non-finite op results") {
    autograd::set_finite_checks(true);
    auto x = Td::from_data({2}, {1.0, 2.0});
    CHECK_NOTHROW(softmax(Td::from_data({3}, {1000, 1000, 1000})));
    CHECK_THROWS_AS(scale(x, std::numeric_limits<double>::infinity()), NumericError);
    autograd::set_finite_checks(false);
}

TEST_CASE("no-grad mode records nothing") {
    std::mt19937_64 rng(31);
    auto x = Td::randn({3}, rng, 1.0, true);
    Tensor<double> y;
    {
        autograd::NoGradGuard ng;
        y = mul(x, x);
    }
    CHECK_FALSE(y.requires_grad());
    auto rec = ComputationRecord<double>::from(sum(y));
    CHECK(rec.size() == 1);  // just the root; no recorded edge back to x
}
