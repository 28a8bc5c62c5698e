#include "doctest.h"
#include "gradcheck.hpp"

#include "sammed/autograd.hpp"

using namespace sammed::ag;
using testutil::max_grad_error;
using testutil::random_tensor;

namespace {

Var leaf(Shape s, std::mt19937_64& rng, double scale = 1.0) { return Var::leaf(random_tensor(std::move(s), rng, scale), true); }

// Weighted sum so every output element gets a distinct upstream gradient.
Var weighted(const Var& x, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return sum(mul(x, Var::constant(random_tensor(x.shape(), rng))));
}

} // namespace

TEST_CASE("matmul and linear gradients") {
    std::mt19937_64 rng(1);
    auto a = leaf({3, 4}, rng), b = leaf({4, 5}, rng), bias = leaf({5}, rng);
    CHECK(max_grad_error({a, b}, [](auto& v) { return weighted(matmul(v[0], v[1])); }) < 1e-7);
    CHECK(max_grad_error({a, b, bias}, [](auto& v) { return weighted(linear(v[0], v[1], v[2])); }) < 1e-7);
}

TEST_CASE("elementwise nonlinearities") {
    std::mt19937_64 rng(2);
    auto x = leaf({2, 7}, rng);
    CHECK(max_grad_error({x}, [](auto& v) { return weighted(gelu(v[0])); }) < 1e-7);
    CHECK(max_grad_error({x}, [](auto& v) { return weighted(sigmoid(v[0])); }) < 1e-7);
    CHECK(max_grad_error({x}, [](auto& v) { return weighted(relu(v[0])); }) < 1e-6);
    CHECK(max_grad_error({x}, [](auto& v) { return weighted(softmax_rows(v[0])); }) < 1e-7);
}

TEST_CASE("normalization layers") {
    std::mt19937_64 rng(3);
    auto x = leaf({4, 6}, rng), g = leaf({6}, rng), b = leaf({6}, rng);
    CHECK(max_grad_error({x, g, b}, [](auto& v) { return weighted(layer_norm_rows(v[0], v[1], v[2])); }) < 1e-6);
    auto m = leaf({3, 4, 5}, rng), gc = leaf({3}, rng), bc = leaf({3}, rng);
    CHECK(max_grad_error({m, gc, bc}, [](auto& v) { return weighted(layer_norm_channels(v[0], v[1], v[2])); }) < 1e-6);
}

TEST_CASE("convolution and transposed convolution") {
    std::mt19937_64 rng(4);
    auto x = leaf({2, 6, 6}, rng), w = leaf({3, 2, 3, 3}, rng), b = leaf({3}, rng);
    CHECK(max_grad_error({x, w, b}, [](auto& v) { return weighted(conv2d(v[0], v[1], v[2], 2, 1)); }) < 1e-7);
    auto wt = leaf({2, 3, 4, 4}, rng);
    CHECK(max_grad_error({x, wt, b}, [](auto& v) { return weighted(conv_transpose2d(v[0], v[1], v[2], 2, 1)); }) < 1e-6);
    CHECK(conv_transpose2d(x, wt, b, 2, 1).shape() == Shape{3, 12, 12});
    CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{3, 3, 3});
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
    // <conv(x), y> == <x, tconv(y)> with the same kernel and no bias.
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 8, 8}, rng), k = random_tensor({3, 2, 4, 4}, rng);
    Var cx = conv2d(Var::constant(x), Var::constant(k), Var(), 2, 1);
    Tensor y = random_tensor(cx.shape(), rng);
    Var ty = conv_transpose2d(Var::constant(y), Var::constant(k), Var(), 2, 1);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += cx.value()[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty.value()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("bilinear upsampling") {
    std::mt19937_64 rng(6);
    auto x = leaf({2, 4, 4}, rng);
    CHECK(max_grad_error({x}, [](auto& v) { return weighted(upsample_bilinear(v[0], 16, 16)); }) < 1e-7);
    // Constant maps stay constant.
    Var c = upsample_bilinear(Var::constant(Tensor({1, 3, 3}, 2.5)), 12, 12);
    for (double v : c.value().data) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("shape ops and broadcasting") {
    std::mt19937_64 rng(7);
    auto a = leaf({3, 4}, rng), b = leaf({2, 4}, rng), r = leaf({4}, rng);
    CHECK(max_grad_error({a, b}, [](auto& v) {
              const Var parts[] = {v[0], v[1]};
              return weighted(concat_rows(parts));
          }) < 1e-7);
    CHECK(max_grad_error({a}, [](auto& v) { return weighted(slice_cols(transpose(v[0]), 1, 2)); }) < 1e-7);
    CHECK(max_grad_error({a, r}, [](auto& v) { return weighted(add_row_broadcast(v[0], v[1])); }) < 1e-7);
    auto m = leaf({3, 2, 2}, rng), gate = leaf({3}, rng);
    CHECK(max_grad_error({m, gate}, [](auto& v) { return weighted(mul_channels(v[0], v[1])); }) < 1e-7);
    CHECK(max_grad_error({m}, [](auto& v) { return weighted(mean_spatial(v[0])); }) < 1e-7);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("pointwise custom op") {
    std::mt19937_64 rng(8);
    auto x = leaf({5}, rng);
    auto f = [](auto& v) {
        return weighted(pointwise(v[0], [](double t, std::size_t) { return std::pair{std::sin(t), std::cos(t)}; }));
    };
    CHECK(max_grad_error({x}, f) < 1e-7);
}

TEST_CASE("no-grad mode builds no graph") {
    std::mt19937_64 rng(9);
    auto x = leaf({2, 2}, rng);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        Var y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK(mul(x, x).requires_grad());
}

TEST_CASE("gradients accumulate across reuse of a leaf") {
    auto x = Var::leaf(Tensor({1}, 3.0), true);
    backward(add(mul(x, x), x)); // d/dx (x^2 + x) = 2x + 1
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}
